"""Occlusion, patch-shuffle and attention-quality (Jaccard / tight-box IoU) protocols."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import vit
from .data import Dataset
from .errors import ConfigError, ContractError
from .mix import CutBox

ORDERS = ("random", "salient", "nonsalient")
MASK_MODES = ("cumulative", "value")
RESULTS_HEADER = ("protocol", "parameter", "metric")

AttentionProvider = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class OcclusionSpec:
    drop_ratio: float
    order: str = "random"
    fill_value: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.drop_ratio <= 1.0:
            raise ConfigError(f"drop_ratio must lie in [0, 1], got {self.drop_ratio}")
        if self.order not in ORDERS:
            raise ConfigError(f"order {self.order!r} not in {ORDERS}")

    def count(self, num_patches: int) -> int:
        """Patches to drop, rounding half up."""
        return min(int(math.floor(self.drop_ratio * num_patches + 0.5)), num_patches)


def select_patches(attn: np.ndarray | None, spec: OcclusionSpec, num_patches: int, rng: np.random.Generator) -> np.ndarray:
    k = spec.count(num_patches)
    if spec.order == "random":
        return rng.permutation(num_patches)[:k]
    if attn is None:
        raise ContractError(f"{spec.order} patch dropping needs an attention map")
    attn = np.asarray(attn)
    order = np.argsort(-attn if spec.order == "salient" else attn, kind="stable")
    return order[:k]


def drop_patches(
    image: np.ndarray,
    attn: np.ndarray | None,
    spec: OcclusionSpec,
    patch_size: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Fill the selected patches of a (C, H, W) image with ``spec.fill_value``."""
    c, h, w = image.shape
    if h % patch_size or w % patch_size:
        raise ConfigError(f"image {h}x{w} not divisible by patch_size {patch_size}")
    gw = w // patch_size
    p = (h // patch_size) * gw
    out = np.array(image, copy=True)
    for idx in select_patches(attn, spec, p, rng):
        r, q = divmod(int(idx), gw)
        out[:, r * patch_size : (r + 1) * patch_size, q * patch_size : (q + 1) * patch_size] = spec.fill_value
    return out


def _cells_per_side(grid_size: int) -> int:
    s = math.isqrt(grid_size)
    if grid_size < 1 or s * s != grid_size:
        raise ContractError(f"shuffle grid size {grid_size} is not a positive square")
    return s


def shuffle_permutation(grid_size: int, rng: np.random.Generator) -> np.ndarray:
    _cells_per_side(grid_size)
    return rng.permutation(grid_size)


def shuffle_patches(image: np.ndarray, grid_size: int, rng: np.random.Generator) -> np.ndarray:
    """Permute the ``grid_size`` cells (a square number) of a (C, H, W) image.

    Output cell ``i`` holds input cell ``perm[i]``; a grid of 1 is the identity.
    """
    s = _cells_per_side(grid_size)
    c, h, w = image.shape
    if h % s or w % s:
        raise ContractError(f"image {h}x{w} not divisible into a {s}x{s} shuffle grid")
    perm = shuffle_permutation(grid_size, rng)
    ch, cw = h // s, w // s
    cells = image.reshape(c, s, ch, s, cw).transpose(1, 3, 0, 2, 4).reshape(grid_size, c, ch, cw)
    out = cells[perm].reshape(s, s, c, ch, cw).transpose(2, 0, 3, 1, 4).reshape(c, h, w)
    return np.ascontiguousarray(out)


def model_attention(params: vit.Parameters, cfg: vit.ModelConfig, images: np.ndarray, batch_size: int = 250) -> np.ndarray:
    """Last-block class attention (N, p) of the evaluated model on clean images."""
    out = []
    for i in range(0, len(images), batch_size):
        out.append(vit.forward(images[i : i + batch_size], params, cfg).attention.patch_attention(-1))
    return np.concatenate(out)


def occlusion_curve(
    params: vit.Parameters,
    cfg: vit.ModelConfig,
    dataset: Dataset,
    ratios: Sequence[float],
    order: str = "random",
    seed: int = 0,
    attention_provider: AttentionProvider | None = None,
) -> list[tuple[float, float]]:
    """Top-1 after dropping ``ratio`` of the patches, for every ratio.

    Salient orders rank patches by the model's own class attention on the
    clean image unless an external provider is given. Every image gets its
    own rng stream derived from ``seed``.
    """
    ratios = list(ratios)
    if ratios != sorted(ratios):
        raise ContractError("occlusion ratios must be sorted ascending")
    attn = None
    if order != "random":
        attn = attention_provider(dataset.images) if attention_provider else model_attention(params, cfg, dataset.images)
    results = []
    for ratio in ratios:
        spec = OcclusionSpec(ratio, order)
        occluded = np.empty_like(dataset.images)
        for i, img in enumerate(dataset.images):
            rng = np.random.default_rng([seed, i])
            occluded[i] = drop_patches(img, None if attn is None else attn[i], spec, cfg.patch_size, rng)
        pred = vit.predict(occluded, params, cfg)
        results.append((float(ratio), float(np.count_nonzero(pred == dataset.labels)) / len(dataset)))
    return results


def shuffle_curve(
    params: vit.Parameters,
    cfg: vit.ModelConfig,
    dataset: Dataset,
    grid_sizes: Sequence[int],
    seed: int = 0,
) -> list[tuple[int, float]]:
    results = []
    for g in grid_sizes:
        shuffled = np.stack(
            [shuffle_patches(img, g, np.random.default_rng([seed, i])) for i, img in enumerate(dataset.images)]
        )
        pred = vit.predict(shuffled, params, cfg)
        results.append((int(g), float(np.count_nonzero(pred == dataset.labels)) / len(dataset)))
    return results


# ---------------------------------------------------------------------------
# attention quality
# ---------------------------------------------------------------------------


def attention_to_mask(attn: np.ndarray, threshold: float = 0.9, mode: str = "cumulative") -> np.ndarray:
    """Binary mask over patches from a class-attention vector.

    ``cumulative``: keep the fewest highest-attention patches whose share of
    the total mass reaches ``threshold``. ``value``: keep patches whose raw
    attention is at least ``threshold``.
    """
    if not 0.0 < threshold <= 1.0:
        raise ContractError(f"threshold must lie in (0, 1], got {threshold}")
    attn = np.asarray(attn, dtype=np.float64)
    mask = np.zeros(attn.shape, dtype=np.uint8)
    if mode == "value":
        mask[attn >= threshold] = 1
        return mask
    if mode != "cumulative":
        raise ConfigError(f"mask mode {mode!r} not in {MASK_MODES}")
    total = attn.sum()
    if total <= 0:
        return mask
    order = np.argsort(-attn, kind="stable")
    cum = np.cumsum(attn[order]) / total
    # tolerance absorbs summation roundoff, e.g. 9 x 0.1 landing just under 0.9
    k = int(np.searchsorted(cum, threshold - 1e-12, side="left")) + 1
    k = min(k, int(np.count_nonzero(attn > 0)))
    mask[order[:k]] = 1
    return mask


def jaccard(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ContractError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def mask_to_tight_bbox(mask: np.ndarray) -> CutBox | None:
    """Smallest (x, y, w, h) box covering every nonzero cell of a 2-D mask."""
    mask = np.asarray(mask)
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    x0, x1 = int(xs.min()), int(xs.max())
    y0, y1 = int(ys.min()), int(ys.max())
    return CutBox(x0, y0, x1 - x0 + 1, y1 - y0 + 1)


def bbox_iou(a: CutBox | None, b: CutBox | None) -> float:
    if a is None or b is None:
        return 0.0
    iw = max(0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    ih = max(0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def upsample_patch_mask(m: np.ndarray, grid: tuple[int, int], patch_size: int) -> np.ndarray:
    """(p,) patch mask -> (H, W) pixel mask."""
    gh, gw = grid
    return np.kron(np.asarray(m).reshape(gh, gw), np.ones((patch_size, patch_size), dtype=np.uint8)).astype(np.uint8)


@dataclass
class WsolResult:
    jaccard: np.ndarray
    iou: np.ndarray

    @property
    def mean_jaccard(self) -> float:
        return float(self.jaccard.mean())

    @property
    def mean_iou(self) -> float:
        return float(self.iou.mean())


def attention_pixel_masks(
    params: vit.Parameters, cfg: vit.ModelConfig, images: np.ndarray, threshold: float = 0.9, mode: str = "cumulative",
) -> np.ndarray:
    attn = model_attention(params, cfg, images)
    return np.stack([upsample_patch_mask(attention_to_mask(a, threshold, mode), cfg.grid, cfg.patch_size) for a in attn])


def wsol_evaluate(
    params: vit.Parameters, cfg: vit.ModelConfig, dataset: Dataset, threshold: float = 0.9, mode: str = "cumulative",
) -> WsolResult:
    """Per-sample Jaccard and tight-box IoU of attention masks against ground truth."""
    if dataset.masks is None:
        raise ContractError("wsol evaluation needs ground-truth masks")
    pred = attention_pixel_masks(params, cfg, dataset.images, threshold, mode)
    jac = np.array([jaccard(p, g) for p, g in zip(pred, dataset.masks)])
    iou = np.array([bbox_iou(mask_to_tight_bbox(p), mask_to_tight_bbox(g)) for p, g in zip(pred, dataset.masks)])
    return WsolResult(jac, iou)


def write_results(path, rows: Sequence[tuple[str, object, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULTS_HEADER)
        for protocol, parameter, metric in rows:
            w.writerow([protocol, parameter, repr(float(metric))])
