"""Mixup, CutMix box/mask machinery and attention-weighted label mixing.

Mask convention everywhere: ``M == 1`` marks pixels pasted in from the paired
image (batch index ``N - 1 - i``), and lambda is the weight of the *paired*
label. This keeps the batched paste ``x[:, :, M == 1] = x[::-1][:, :, M == 1]``
literal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ConfigError, ContractError

LAMBDA_MODES = ("blended", "pure")


@dataclass(frozen=True)
class CutBox:
    x: int
    y: int
    w: int
    h: int

    @property
    def area(self) -> int:
        return self.w * self.h

    @property
    def empty(self) -> bool:
        return self.w <= 0 or self.h <= 0


@dataclass
class MixPlan:
    """One augmentation decision for a whole batch."""

    box: CutBox
    mask: np.ndarray
    lambda_area: float
    lambda_sampled: float = 0.0
    lambda_attn: np.ndarray | None = None
    lambda_final: np.ndarray | float = 0.0
    pairing: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def degenerate(self) -> bool:
        return self.lambda_area in (0.0, 1.0)

    def csv_fields(self) -> dict:
        """Batch means of the per-sample lambdas, plus the extremes of lambda_final."""
        attn = "" if self.lambda_attn is None else repr(float(np.mean(self.lambda_attn)))
        final = np.atleast_1d(np.asarray(self.lambda_final, dtype=np.float64))
        return {
            "box_x": self.box.x,
            "box_y": self.box.y,
            "box_w": self.box.w,
            "box_h": self.box.h,
            "lambda_area": repr(float(self.lambda_area)),
            "lambda_attn": attn,
            "lambda_final": repr(float(final.mean())),
            "lambda_final_min": repr(float(final.min())),
            "lambda_final_max": repr(float(final.max())),
        }


def pairing(n: int) -> np.ndarray:
    """Batch reversal, an involution: i <-> n - 1 - i."""
    return np.arange(n - 1, -1, -1)


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def sample_area_lambda(alpha: float, rng: np.random.Generator) -> float:
    if not alpha > 0:
        raise ConfigError(f"beta alpha must be > 0, got {alpha}")
    return float(rng.beta(alpha, alpha))


def cut_size(lam: float, h: int, w: int) -> tuple[int, int]:
    """Target (width, height) before clipping."""
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"lambda must lie in [0, 1], got {lam}")
    s = math.sqrt(lam)
    return _round_half_up(w * s), _round_half_up(h * s)


def _place(center: int, size: int, extent: int) -> tuple[int, int]:
    if size >= extent:
        return 0, extent
    lo = center - size // 2
    hi = lo + size
    return max(lo, 0), min(hi, extent)


def sample_cutbox(lam: float, h: int, w: int, rng: np.random.Generator) -> CutBox:
    """Box of target area ``lam * h * w``, uniform centre, clipped to the image.

    A side that already spans the whole image is not shifted.
    """
    cw, ch = cut_size(lam, h, w)
    cx = int(rng.integers(w))
    cy = int(rng.integers(h))
    if cw == 0 or ch == 0:
        return CutBox(0, 0, 0, 0)
    x1, x2 = _place(cx, cw, w)
    y1, y2 = _place(cy, ch, h)
    return CutBox(x1, y1, x2 - x1, y2 - y1)


def build_mask(box: CutBox, h: int, w: int) -> np.ndarray:
    m = np.zeros((h, w), dtype=np.uint8)
    if not box.empty:
        m[box.y : box.y + box.h, box.x : box.x + box.w] = 1
    return m


def mask_lambda(mask: np.ndarray) -> float:
    return float(np.count_nonzero(mask)) / mask.size


def plan_cutmix(n: int, h: int, w: int, alpha: float, rng: np.random.Generator) -> MixPlan:
    """Sample lambda, a box and its mask. lambda_area is recomputed from the clipped box."""
    lam = sample_area_lambda(alpha, rng)
    box = sample_cutbox(lam, h, w, rng)
    mask = build_mask(box, h, w)
    cw, ch = cut_size(lam, h, w)
    plan = MixPlan(
        box=box,
        mask=mask,
        lambda_area=mask_lambda(mask),
        lambda_sampled=min(cw, w) * min(ch, h) / (h * w),
        pairing=pairing(n),
    )
    if n < 2:
        plan.lambda_final = 0.0
    else:
        plan.lambda_final = plan.lambda_area
    return plan


def apply_cutmix_batch(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Paste the paired image's pixels wherever ``mask == 1``.

    ``x`` is (N, C, H, W). A single-image batch is returned unchanged.
    """
    x = np.asarray(x)
    if x.shape[0] < 2:
        return x.copy()
    sel = np.asarray(mask) == 1
    out = x.copy()
    out[:, :, sel] = x[::-1][:, :, sel]
    return out


def mixup_batch(x: np.ndarray, y: np.ndarray, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Global interpolation; ``lam`` weighs each sample's *own* image and label."""
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"lambda must lie in [0, 1], got {lam}")
    x = np.asarray(x)
    y = np.asarray(y)
    lx = x.dtype.type(lam) if x.dtype.kind == "f" else lam
    ly = y.dtype.type(lam) if y.dtype.kind == "f" else lam
    return lx * x + (1 - lx) * x[::-1], ly * y + (1 - ly) * y[::-1]


def downsample_mask(mask: np.ndarray, grid_h: int, grid_w: int) -> np.ndarray:
    """Nearest-neighbour sampling of an (H, W) mask to a flat (grid_h * grid_w,) array.

    Output cell (i, j) reads source pixel (floor((i + 0.5) H / grid_h),
    floor((j + 0.5) W / grid_w)); flattening is row-major like patchify.
    """
    mask = np.asarray(mask)
    h, w = mask.shape
    rows = np.floor((np.arange(grid_h) + 0.5) * h / grid_h).astype(np.int64)
    cols = np.floor((np.arange(grid_w) + 0.5) * w / grid_w).astype(np.int64)
    return mask[np.ix_(rows, cols)].reshape(-1).astype(np.uint8)


def _masked_share(row: np.ndarray, sel: np.ndarray, renormalize: bool) -> float:
    if not renormalize:
        return math.fsum(row[sel].tolist())
    total = sum(map(Fraction, row.tolist()))
    if total == 0:
        return 0.0
    return float(sum(map(Fraction, row[sel].tolist())) / total)


def transmix_lambda(attn: np.ndarray, m: np.ndarray, renormalize: bool = False) -> np.ndarray | float:
    """Attention mass inside the pasted region: ``A . m``.

    ``attn`` is (p,) or (N, p); ``m`` is (p,). With ``renormalize`` the
    result is the masked share of each row's total mass. Both forms are
    correctly rounded from the exact sums, so uniform attention over an
    aligned box reproduces the box's area fraction bit for bit.
    """
    attn = np.asarray(attn, dtype=np.float64)
    m = np.asarray(m)
    if m.ndim != 1 or attn.shape[-1] != m.shape[0]:
        raise ContractError(f"attention length {attn.shape} does not match mask length {m.shape}")
    sel = m.astype(bool)
    if attn.ndim == 1:
        return _masked_share(attn, sel, renormalize)
    rows = attn.reshape(-1, m.shape[0])
    return np.array([_masked_share(r, sel, renormalize) for r in rows]).reshape(attn.shape[:-1])


def blended_lambda(lambda_area, lambda_attn, mode: str = "blended"):
    if mode == "blended":
        return (lambda_area + lambda_attn) / 2.0
    if mode == "pure":
        return lambda_attn
    raise ConfigError(f"unknown lambda mode {mode!r}; expected one of {LAMBDA_MODES}")


def mix_labels(y: np.ndarray, lam) -> np.ndarray:
    """``(1 - lam) * y + lam * y[::-1]``; ``lam`` is a scalar or one value per sample."""
    y = np.asarray(y, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim == 1:
        if lam.shape[0] != y.shape[0]:
            raise ContractError(f"{lam.shape[0]} lambdas for a batch of {y.shape[0]}")
        lam = lam[:, None]
    if np.any(lam < 0) or np.any(lam > 1):
        raise ContractError("lambda must lie in [0, 1]")
    return (1.0 - lam) * y + lam * y[::-1]


def finalize_transmix(
    plan: MixPlan, attn: np.ndarray, grid: tuple[int, int], mode: str = "blended", renormalize: bool = False,
) -> MixPlan:
    """Fill in attention-derived lambdas for a cutmix plan.

    ``attn`` is (N, p) from the forward pass on the mixed batch. Degenerate
    plans (nothing or everything pasted, or N < 2) keep lambda_area.
    """
    n = attn.shape[0]
    if n < 2:
        plan.lambda_final = 0.0
        return plan
    if plan.degenerate:
        plan.lambda_final = np.full(n, plan.lambda_area)
        return plan
    m = downsample_mask(plan.mask, *grid)
    plan.lambda_attn = np.asarray(transmix_lambda(attn, m, renormalize))
    plan.lambda_final = np.clip(blended_lambda(plan.lambda_area, plan.lambda_attn, mode), 0.0, 1.0)
    return plan
