"""Deterministic toy-scale training loop.

One step: sample a mix plan, mix the inputs, run a single forward pass,
derive lambda from that pass's attention (TransMix), mix the labels, take
the soft-label cross-entropy, backpropagate and apply AdamW. Lambda never
enters the gradient graph.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import mix
from . import tensor as T
from . import vit
from .data import Dataset
from .errors import ConfigError, ContractError

log = logging.getLogger(__name__)

AUG_MODES = ("none", "mixup", "cutmix", "transmix")
ATTENTION_SOURCES = ("last_block", "block_d", "rollout")
METRICS_HEADER = ("epoch", "train_loss", "eval_top1", "mean_lambda_area", "mean_lambda_attn", "seconds")
MIX_LOG_HEADER = (
    "step", "epoch", "box_x", "box_y", "box_w", "box_h",
    "lambda_area", "lambda_attn", "lambda_final", "lambda_final_min", "lambda_final_max",
)

# Callable (N, C, H, W) -> (N, p); stands in for the model's own class attention.
AttentionProvider = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 0.05
    warmup_steps: int = 20
    seed: int = 0
    aug_mode: str = "none"
    beta_alpha: float = 1.0
    mix_probability: float = 0.5
    lambda_mode: str = "blended"
    attention_source: str = "last_block"
    attention_block: int = -1
    renormalize_attention: bool = False
    log_wall_clock: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.mix_probability <= 1.0:
            raise ConfigError(f"mix_probability must lie in [0, 1], got {self.mix_probability}")
        if self.aug_mode not in AUG_MODES:
            raise ConfigError(f"aug_mode {self.aug_mode!r} not in {AUG_MODES}")
        if self.lambda_mode not in mix.LAMBDA_MODES:
            raise ConfigError(f"lambda_mode {self.lambda_mode!r} not in {mix.LAMBDA_MODES}")
        if self.attention_source not in ATTENTION_SOURCES:
            raise ConfigError(f"attention_source {self.attention_source!r} not in {ATTENTION_SOURCES}")
        if self.beta_alpha <= 0:
            raise ConfigError(f"beta_alpha must be > 0, got {self.beta_alpha}")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    eval_top1: float
    mean_lambda_area: float
    mean_lambda_attn: float
    seconds: float

    def row(self) -> list[str]:
        return [str(self.epoch)] + [repr(float(v)) for v in (
            self.train_loss, self.eval_top1, self.mean_lambda_area, self.mean_lambda_attn, self.seconds)]


# ---------------------------------------------------------------------------
# loss / optimizer
# ---------------------------------------------------------------------------


soft_cross_entropy = T.soft_cross_entropy


def one_hot(labels: np.ndarray, k: int, dtype=np.float64) -> np.ndarray:
    return np.eye(k, dtype=dtype)[np.asarray(labels)]


def learning_rate(step: int, peak: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup from 0 to ``peak``, then cosine decay to 0 at ``total_steps``."""
    if warmup_steps > 0 and step < warmup_steps:
        return peak * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(max(step - warmup_steps, 0) / span, 1.0)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamW:
    """Adam with decoupled weight decay (applied to matrices only)."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def step(self, params: vit.Parameters, lr: float, weight_decay: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            dt = p.values.dtype
            if name not in self.m:
                self.m[name] = np.zeros_like(p.values)
                self.v[name] = np.zeros_like(p.values)
            m, v = self.m[name], self.v[name]
            m *= dt.type(b1)
            m += dt.type(1 - b1) * g
            v *= dt.type(b2)
            v += dt.type(1 - b2) * (g * g)
            if weight_decay and p.values.ndim >= 2:
                p.values *= dt.type(1.0 - lr * weight_decay)
            update = (m / dt.type(c1)) / (np.sqrt(v / dt.type(c2)) + dt.type(self.eps))
            p.values -= dt.type(lr) * update


def optimizer_step(params: vit.Parameters, opt: AdamW, cfg: TrainConfig, step_index: int, total_steps: int) -> float:
    lr = learning_rate(step_index, cfg.learning_rate, cfg.warmup_steps, total_steps)
    opt.step(params, lr, cfg.weight_decay)
    return lr


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------


@dataclass
class StepResult:
    loss: float
    plan: mix.MixPlan | None
    lr: float = 0.0


def _mix_inputs(x, y, cfg: TrainConfig, rng: np.random.Generator):
    """Returns (inputs, soft targets or None, plan). None targets mean 'wait for attention'."""
    n = x.shape[0]
    if cfg.aug_mode == "none" or n < 2 or not rng.random() < cfg.mix_probability:
        return x, y, None
    if cfg.aug_mode == "mixup":
        lam = mix.sample_area_lambda(cfg.beta_alpha, rng)
        xm, ym = mix.mixup_batch(x, y, lam)
        # stored as the paired-label weight like every other plan
        plan = mix.MixPlan(
            box=mix.CutBox(0, 0, 0, 0), mask=np.zeros(x.shape[2:], dtype=np.uint8),
            lambda_area=1.0 - lam, lambda_sampled=1.0 - lam, lambda_final=1.0 - lam, pairing=mix.pairing(n),
        )
        return xm, ym, plan
    plan = mix.plan_cutmix(n, x.shape[2], x.shape[3], cfg.beta_alpha, rng)
    xm = mix.apply_cutmix_batch(x, plan.mask)
    if cfg.aug_mode == "cutmix" or plan.degenerate:
        return xm, mix.mix_labels(y, plan.lambda_area), plan
    return xm, None, plan


def train_step(
    x: np.ndarray,
    labels: np.ndarray,
    params: vit.Parameters,
    model_cfg: vit.ModelConfig,
    cfg: TrainConfig,
    opt: AdamW,
    rng: np.random.Generator,
    step_index: int = 0,
    total_steps: int = 1,
    attention_provider: AttentionProvider | None = None,
) -> StepResult:
    y = one_hot(labels, model_cfg.num_classes)
    xm, targets, plan = _mix_inputs(x, y, cfg, rng)
    for p in params.values():
        p.zero_grad()
    with T.Tape() as tape:
        out = vit.forward(xm, params, model_cfg)
        if targets is None:
            if attention_provider is not None:
                attn = np.asarray(attention_provider(xm), dtype=np.float64)
            else:
                block = None if cfg.attention_block < 0 else cfg.attention_block
                attn = out.attention.select(cfg.attention_source, block)
            mix.finalize_transmix(plan, attn, model_cfg.grid, cfg.lambda_mode, cfg.renormalize_attention)
            targets = mix.mix_labels(y, plan.lambda_final)
        loss = T.soft_cross_entropy(out.logits, targets)
    T.backward(loss, tape)
    lr = optimizer_step(params, opt, cfg, step_index, total_steps)
    return StepResult(loss.item(), plan, lr)


def evaluate_top1(params: vit.Parameters, model_cfg: vit.ModelConfig, dataset: Dataset, batch_size: int = 250) -> float:
    """Fraction of samples whose argmax logit (lowest index on ties) equals the label."""
    if len(dataset) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    pred = vit.predict(dataset.images, params, model_cfg, batch_size)
    return float(np.count_nonzero(pred == dataset.labels)) / len(dataset)


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def _nanmean(xs: list[float]) -> float:
    return float(np.mean(xs)) if xs else float("nan")


def train(
    train_set: Dataset,
    eval_set: Dataset,
    model_cfg: vit.ModelConfig,
    cfg: TrainConfig,
    params: vit.Parameters | None = None,
    metrics_path: str | Path | None = None,
    on_epoch: Callable[[MetricsRecord], None] | None = None,
    attention_provider: AttentionProvider | None = None,
    mix_log_path: str | Path | None = None,
) -> tuple[vit.Parameters, list[MetricsRecord]]:
    """Run ``cfg.epochs`` epochs; returns final parameters and one record per epoch.

    Mean lambdas are over steps that actually mixed (NaN when none did).
    ``seconds`` is wall-clock only when ``cfg.log_wall_clock`` is set, else
    0, which keeps the metrics file byte-reproducible. ``mix_log_path``
    gets one row per mixed step.
    """
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = vit.init_params(model_cfg, seed=cfg.seed)
    opt = AdamW()
    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    step = 0
    records: list[MetricsRecord] = []
    writer = mix_writer = None
    fh = mix_fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
    if mix_log_path is not None:
        mix_fh = open(mix_log_path, "w", newline="")
        mix_writer = csv.writer(mix_fh, lineterminator="\n")
        mix_writer.writerow(MIX_LOG_HEADER)
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            losses, areas, attns = [], [], []
            for idx in iterate_batches(len(train_set), cfg.batch_size, rng):
                res = train_step(
                    train_set.images[idx], train_set.labels[idx], params, model_cfg, cfg, opt, rng,
                    step, total, attention_provider,
                )
                step += 1
                losses.append(res.loss)
                if res.plan is not None:
                    areas.append(res.plan.lambda_area)
                    if res.plan.lambda_attn is not None:
                        attns.append(float(np.mean(res.plan.lambda_attn)))
                    lf = np.asarray(res.plan.lambda_final)
                    if np.any(lf < 0) or np.any(lf > 1):
                        raise ContractError(f"lambda_final out of [0, 1] at step {step}")
                    if mix_writer is not None:
                        fields = res.plan.csv_fields()
                        mix_writer.writerow([step, epoch] + [fields[k] for k in MIX_LOG_HEADER[2:]])
                if not np.isfinite(res.loss):
                    raise ContractError(f"loss diverged at step {step}")
            top1 = evaluate_top1(params, model_cfg, eval_set)
            elapsed = time.perf_counter() - t0
            rec = MetricsRecord(
                epoch, float(np.mean(losses)), top1, _nanmean(areas), _nanmean(attns),
                elapsed if cfg.log_wall_clock else 0.0,
            )
            records.append(rec)
            log.info("epoch %d loss %.4f top1 %.4f (%.1fs)", epoch, rec.train_loss, top1, elapsed)
            if writer is not None:
                writer.writerow(rec.row())
                fh.flush()
            if on_epoch is not None:
                on_epoch(rec)
    finally:
        for handle in (fh, mix_fh):
            if handle is not None:
                handle.close()
    return params, records
