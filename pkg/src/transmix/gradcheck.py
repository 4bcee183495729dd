"""Central finite-difference checks against the analytic tape gradients.

Two routes:

* :func:`check_tensors` perturbs tensors feeding any tape-built loss, one
  entry at a time. Good for single operations.
* :func:`toy_model_gradcheck` checks every entry of every ViT parameter. The
  finite differences are taken on an independent plain-numpy forward
  (:class:`ReferenceViT`) that never touches the tape code; it caches the
  activations upstream of the perturbed tensor and evaluates many
  perturbations at once along a leading stack axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import erf

from . import tensor as T
from . import vit
from .tensor import Tensor

DEFAULT_STEP = 1e-4
DEFAULT_RTOL = 1e-4
# below this magnitude the error is measured against the floor instead
GRAD_FLOOR = 1e-6


@dataclass
class ParamCheck:
    name: str
    size: int
    max_rel_err: float
    worst_index: int

    def passed(self, rtol: float = DEFAULT_RTOL) -> bool:
        return bool(self.max_rel_err <= rtol)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _summarise(name: str, analytic: np.ndarray, numeric: np.ndarray) -> ParamCheck:
    err = relative_error(analytic, numeric).reshape(-1)
    worst = int(err.argmax()) if err.size else 0
    return ParamCheck(name, err.size, float(err[worst]) if err.size else 0.0, worst)


def numeric_grad(loss_fn: Callable[[], float], t: Tensor, step: float = DEFAULT_STEP) -> np.ndarray:
    """Central differences of ``loss_fn`` w.r.t. every entry of ``t`` (perturbed in place, restored)."""
    flat = t.values.reshape(-1)
    out = np.empty(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = loss_fn()
        flat[i] = orig - step
        down = loss_fn()
        flat[i] = orig
        out[i] = (up - down) / (2.0 * step)
    return out.reshape(t.shape)


def analytic_grads(loss_builder: Callable[[], Tensor], tensors: dict[str, Tensor]) -> dict[str, np.ndarray]:
    for t in tensors.values():
        t.zero_grad()
    with T.Tape() as tape:
        loss = loss_builder()
    T.backward(loss, tape)
    return {k: (t.grad.copy() if t.grad is not None else np.zeros(t.shape)) for k, t in tensors.items()}


def check_tensors(
    loss_builder: Callable[[], Tensor],
    tensors: dict[str, Tensor],
    step: float = DEFAULT_STEP,
) -> list[ParamCheck]:
    """Compare tape gradients of ``loss_builder()`` with central differences.

    ``loss_builder`` must rebuild the loss from the current values of
    ``tensors`` on every call.
    """
    analytic = analytic_grads(loss_builder, tensors)
    f = lambda: loss_builder().item()  # noqa: E731
    return [_summarise(name, analytic[name], numeric_grad(f, t, step)) for name, t in tensors.items()]


# ---------------------------------------------------------------------------
# independent numpy forward
# ---------------------------------------------------------------------------


def _ln(x, gamma, beta, eps=T.LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class ReferenceViT:
    """Plain-numpy ViT loss with an optional stack axis on one parameter.

    Activations carry shape (S, N, tokens, d); S is 1 except when a stacked
    parameter (S, *shape) is substituted.
    """

    def __init__(self, cfg: vit.ModelConfig, arrays: dict[str, np.ndarray], images: np.ndarray, targets: np.ndarray):
        self.cfg = cfg
        self.arrays = arrays
        self.patches = vit.patchify(images, cfg.patch_size)[None]
        self.targets = targets

    def _get(self, name, override, lead):
        if override is not None and override[0] == name:
            a = override[1]
            return a.reshape((a.shape[0],) + (1,) * lead + a.shape[1:])
        return self.arrays[name]

    def embed(self, override=None):
        g = lambda n, lead: self._get(n, override, lead)  # noqa: E731
        d = self.cfg.embed_dim
        tokens = self.patches @ g("patch_embed.weight", 1) + g("patch_embed.bias", 2)
        cls = g("cls_token", 2).reshape(-1, 1, 1, d)
        s = max(tokens.shape[0], cls.shape[0])
        n = tokens.shape[1]
        z = np.concatenate(
            [np.broadcast_to(cls, (s, n, 1, d)), np.broadcast_to(tokens, (s,) + tokens.shape[1:])], axis=2
        )
        return z + g("pos_embed", 1)

    def block(self, z, i, override=None):
        cfg = self.cfg
        g = lambda n, lead: self._get(f"blocks.{i}.{n}", override, lead)  # noqa: E731
        s, n, tok, d = z.shape
        heads, dk = cfg.heads, cfg.head_dim
        h = _ln(z, g("norm1.gamma", 2), g("norm1.beta", 2))
        qkv = h @ g("attn.qkv.weight", 1) + g("attn.qkv.bias", 2)
        s = qkv.shape[0]
        qkv = qkv.reshape(s, n, tok, 3, heads, dk).transpose(3, 0, 1, 4, 2, 5)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = _softmax(q @ k.swapaxes(-1, -2) / math.sqrt(d / heads))
        ctx = (att @ v).transpose(0, 1, 3, 2, 4).reshape(s, n, tok, d)
        z = z + ctx @ g("attn.proj.weight", 1) + g("attn.proj.bias", 2)
        h = _ln(z, g("norm2.gamma", 2), g("norm2.beta", 2))
        h = h @ g("mlp.fc1.weight", 1) + g("mlp.fc1.bias", 2)
        h = 0.5 * h * (1.0 + erf(h / math.sqrt(2.0)))
        return z + h @ g("mlp.fc2.weight", 1) + g("mlp.fc2.bias", 2)

    def head_loss(self, z, override=None):
        g = lambda n, lead: self._get(n, override, lead)  # noqa: E731
        zc = _ln(z[:, :, 0, :], g("norm.gamma", 1), g("norm.beta", 1))
        logits = zc @ g("head.weight", 0) + g("head.bias", 1)
        shifted = logits - logits.max(axis=-1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        return -(self.targets * logp).sum(axis=(-1, -2)) / self.targets.shape[0]

    def stage_of(self, name: str) -> int:
        """0 = embedding, 1..depth = blocks, depth+1 = head."""
        if name.startswith("blocks."):
            return int(name.split(".")[1]) + 1
        if name.startswith(("norm.", "head.")):
            return self.cfg.depth + 1
        return 0

    def activations(self) -> list[np.ndarray]:
        """Input to every stage for the unperturbed parameters."""
        acts = [None]
        z = self.embed()
        acts.append(z)
        for i in range(self.cfg.depth):
            z = self.block(z, i)
            acts.append(z)
        return acts

    def losses_from(self, stage: int, acts, override) -> np.ndarray:
        z = self.embed(override) if stage == 0 else acts[stage]
        for i in range(max(stage - 1, 0), self.cfg.depth):
            z = self.block(z, i, override if stage == i + 1 else None)
        return self.head_loss(z, override if stage == self.cfg.depth + 1 else None)

    def loss(self) -> float:
        return float(self.losses_from(0, None, None)[0])

    def numeric_grad(self, name: str, step: float = DEFAULT_STEP, chunk: int = 32, acts=None) -> np.ndarray:
        base = self.arrays[name]
        flat = base.reshape(-1)
        stage = self.stage_of(name)
        acts = acts if acts is not None else self.activations()
        out = np.empty(flat.size)
        for start in range(0, flat.size, chunk):
            idx = np.arange(start, min(start + chunk, flat.size))
            c = idx.size
            stacked = np.repeat(flat[None, :], 2 * c, axis=0)
            stacked[np.arange(c), idx] += step
            stacked[c + np.arange(c), idx] -= step
            losses = self.losses_from(stage, acts, (name, stacked.reshape((2 * c,) + base.shape)))
            out[idx] = (losses[:c] - losses[c:]) / (2.0 * step)
        return out.reshape(base.shape)


def toy_model_gradcheck(
    cfg: vit.ModelConfig,
    batch: int = 1,
    seed: int = 0,
    step: float = DEFAULT_STEP,
) -> list[ParamCheck]:
    """Check every entry of every ViT parameter, double precision, soft-label loss.

    Weights get extra random jitter on top of the training init so that
    attention is far from uniform and gradients sit well above roundoff.
    """
    rng = np.random.default_rng(seed)
    params = vit.init_params(cfg, seed=seed, dtype=np.float64)
    for t in params.values():
        t.values = t.values + rng.normal(0.0, 0.3 if t.values.ndim > 1 else 0.1, t.shape)
    images = rng.standard_normal((batch, cfg.channels, cfg.image_h, cfg.image_w))
    targets = rng.dirichlet(np.ones(cfg.num_classes), size=batch)

    def build() -> Tensor:
        return T.soft_cross_entropy(vit.forward(images, params, cfg).logits, targets)

    analytic = analytic_grads(build, params)
    ref = ReferenceViT(cfg, {k: t.values for k, t in params.items()}, images, targets)
    acts = ref.activations()
    return [_summarise(name, analytic[name], ref.numeric_grad(name, step, acts=acts)) for name in params]
