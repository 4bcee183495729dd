"""Minimal class-token vision transformer that records its attention maps.

The model is a DeiT-style pre-norm ViT. Every block stores its per-head
attention matrices during the forward pass, so callers can read the class
attention (class-token row, head-averaged, over patch tokens) from any block
or roll the matrices out across depth.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    image_h: int = 32
    image_w: int = 32
    channels: int = 3
    patch_size: int = 4
    embed_dim: int = 64
    heads: int = 4
    depth: int = 4
    num_classes: int = 2
    mlp_ratio: float = 4.0

    def __post_init__(self):
        for f in ("image_h", "image_w", "channels", "patch_size", "embed_dim", "heads", "depth", "num_classes"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be positive, got {getattr(self, f)}")
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise ConfigError(
                f"image {self.image_h}x{self.image_w} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.mlp_ratio <= 0:
            raise ConfigError(f"mlp_ratio must be positive, got {self.mlp_ratio}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_h // self.patch_size, self.image_w // self.patch_size

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


Parameters = dict  # name -> Tensor, insertion ordered


def _trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Parameters:
    """Truncated-normal (std 0.02) weights, zero biases and class token, unit norms."""
    rng = np.random.default_rng(seed)
    d, hid, K = cfg.embed_dim, cfg.mlp_hidden, cfg.num_classes
    params: Parameters = {}

    def w(name, shape):
        params[name] = Tensor(_trunc_normal(rng, shape, INIT_STD, dtype), requires_grad=True, name=name)

    def z(name, shape):
        params[name] = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=name)

    def o(name, shape):
        params[name] = Tensor(np.ones(shape, dtype=dtype), requires_grad=True, name=name)

    w("patch_embed.weight", (cfg.patch_dim, d))
    z("patch_embed.bias", (d,))
    z("cls_token", (d,))
    w("pos_embed", (1 + cfg.num_patches, d))
    for i in range(cfg.depth):
        b = f"blocks.{i}."
        o(b + "norm1.gamma", (d,))
        z(b + "norm1.beta", (d,))
        w(b + "attn.qkv.weight", (d, 3 * d))
        z(b + "attn.qkv.bias", (3 * d,))
        w(b + "attn.proj.weight", (d, d))
        z(b + "attn.proj.bias", (d,))
        o(b + "norm2.gamma", (d,))
        z(b + "norm2.beta", (d,))
        w(b + "mlp.fc1.weight", (d, hid))
        z(b + "mlp.fc1.bias", (hid,))
        w(b + "mlp.fc2.weight", (hid, d))
        z(b + "mlp.fc2.bias", (d,))
    o("norm.gamma", (d,))
    z("norm.beta", (d,))
    w("head.weight", (d, K))
    z("head.bias", (K,))
    return params


def cast_params(params: Parameters, dtype) -> Parameters:
    return {k: Tensor(v.values.astype(dtype), requires_grad=True, name=k) for k, v in params.items()}


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """(C, H, W) or (N, C, H, W) -> (..., p, C*P*P), patches row-major over the grid."""
    image = np.asarray(image)
    *lead, c, h, w = image.shape
    P = patch_size
    if h % P or w % P:
        raise ConfigError(f"image {h}x{w} not divisible by patch_size {P}")
    gh, gw = h // P, w // P
    x = image.reshape(*lead, c, gh, P, gw, P)
    nl = len(lead)
    axes = tuple(range(nl)) + tuple(nl + a for a in (1, 3, 0, 2, 4))
    return np.ascontiguousarray(x.transpose(axes)).reshape(*lead, gh * gw, c * P * P)


def unpatchify(patches: np.ndarray, patch_size: int, channels: int, h: int, w: int) -> np.ndarray:
    """Inverse of :func:`patchify`."""
    patches = np.asarray(patches)
    *lead, _, _ = patches.shape
    P = patch_size
    gh, gw = h // P, w // P
    x = patches.reshape(*lead, gh, gw, channels, P, P)
    nl = len(lead)
    axes = tuple(range(nl)) + tuple(nl + a for a in (2, 0, 3, 1, 4))
    return np.ascontiguousarray(x.transpose(axes)).reshape(*lead, channels, h, w)


# ---------------------------------------------------------------------------
# model pieces
# ---------------------------------------------------------------------------


def _linear(x: Tensor, params: Parameters, prefix: str) -> Tensor:
    return T.add(T.matmul(x, params[prefix + ".weight"]), params[prefix + ".bias"])


def embed(patches: Tensor, params: Parameters, cfg: ModelConfig) -> Tensor:
    """Patch tokens (N, p, C*P*P) -> token sequence z (N, 1+p, d) with class token first."""
    if patches.shape[-2:] != (cfg.num_patches, cfg.patch_dim):
        raise ShapeError(f"expected patches (N, {cfg.num_patches}, {cfg.patch_dim}), got {patches.shape}")
    n, d = patches.shape[0], cfg.embed_dim
    tokens = _linear(patches, params, "patch_embed")
    cls = T.broadcast_to(T.reshape(params["cls_token"], (1, 1, d)), (n, 1, d))
    z = T.concat([cls, tokens], axis=1)
    return T.add(z, params["pos_embed"])


def attention_block(z: Tensor, params: Parameters, index: int, cfg: ModelConfig) -> tuple[Tensor, np.ndarray]:
    """One pre-norm block. Returns the new tokens and attention (N, g, 1+p, 1+p)."""
    b = f"blocks.{index}."
    n, tok, d = z.shape
    g, dk = cfg.heads, cfg.head_dim

    h = T.layer_norm(z, params[b + "norm1.gamma"], params[b + "norm1.beta"])
    qkv = _linear(h, params, b + "attn.qkv")
    qkv = T.transpose(T.reshape(qkv, (n, tok, 3, g, dk)), (2, 0, 3, 1, 4))
    q, k, v = (T.select(qkv, i, axis=0) for i in range(3))
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d / g))
    attn = T.softmax_rows(scores)
    ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (n, tok, d))
    z = T.add(z, _linear(ctx, params, b + "attn.proj"))

    h = T.layer_norm(z, params[b + "norm2.gamma"], params[b + "norm2.beta"])
    h = _linear(T.gelu(_linear(h, params, b + "mlp.fc1")), params, b + "mlp.fc2")
    return T.add(z, h), attn.values


def class_attention(class_rows: np.ndarray, renormalize: bool = False) -> np.ndarray:
    """Head-averaged class-token attention over patch tokens.

    ``class_rows`` has shape (..., g, 1+p): row 0 of every head's attention
    matrix. The class-to-class entry is dropped; the remainder is not
    rescaled unless ``renormalize`` is set.
    """
    rows = np.asarray(class_rows)
    a = rows[..., 1:].mean(axis=-2)
    if renormalize:
        s = a.sum(axis=-1, keepdims=True)
        a = np.divide(a, s, out=np.zeros_like(a), where=s > 0)
    return a


def attention_rollout(mats: Sequence[np.ndarray], residual: bool = False) -> np.ndarray:
    """Roll head-averaged attention (..., 1+p, 1+p) across blocks.

    The rolled matrix is ``A_L @ ... @ A_1`` (block 1 applied first); its
    class row restricted to patch tokens is returned. ``residual`` swaps each
    factor for ``0.5 * (A + I)``.
    """
    if not mats:
        raise ShapeError("attention_rollout needs at least one block")
    out = None
    for m in mats:
        m = np.asarray(m, dtype=np.float64)
        if residual:
            m = 0.5 * (m + np.eye(m.shape[-1]))
        out = m if out is None else np.matmul(m, out)
    return out[..., 0, 1:]


@dataclass
class ClassAttention:
    """Per-block attention maps from one forward pass.

    ``per_block[b]`` has shape (N, g, 1+p, 1+p).
    """

    per_block: list[np.ndarray]

    @property
    def depth(self) -> int:
        return len(self.per_block)

    def class_rows(self, block: int = -1) -> np.ndarray:
        return self.per_block[block][:, :, 0, :]

    def patch_attention(self, block: int = -1, renormalize: bool = False) -> np.ndarray:
        """A for the given block, shape (N, p)."""
        return class_attention(self.class_rows(block), renormalize=renormalize)

    def head_averaged(self, block: int) -> np.ndarray:
        return self.per_block[block].mean(axis=1)

    def rollout(self, residual: bool = False) -> np.ndarray:
        return attention_rollout([self.head_averaged(b) for b in range(self.depth)], residual=residual)

    def select(self, source: str = "last_block", block: int | None = None, renormalize: bool = False) -> np.ndarray:
        """Attention used downstream: ``last_block``, ``block_d`` (with ``block``) or ``rollout``."""
        if source == "last_block":
            a = self.patch_attention(-1)
        elif source == "block_d":
            if block is None or not 0 <= block < self.depth:
                raise ConfigError(f"attention block {block} outside [0, {self.depth})")
            a = self.patch_attention(block)
        elif source == "rollout":
            a = self.rollout()
        else:
            raise ConfigError(f"unknown attention source {source!r}")
        if renormalize:
            s = a.sum(axis=-1, keepdims=True)
            a = np.divide(a, s, out=np.zeros_like(a), where=s > 0)
        return a


@dataclass
class ForwardOutput:
    logits: Tensor
    attention: ClassAttention


def forward(images: np.ndarray, params: Parameters, cfg: ModelConfig) -> ForwardOutput:
    """Logits (N, K) and the attention record for a batch of (N, C, H, W) images."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    expect = (cfg.channels, cfg.image_h, cfg.image_w)
    if images.ndim != 4 or images.shape[1:] != expect:
        raise ConfigError(f"expected images (N, {expect[0]}, {expect[1]}, {expect[2]}), got {images.shape}")
    dtype = params["pos_embed"].values.dtype
    patches = Tensor(patchify(images.astype(dtype, copy=False), cfg.patch_size))
    z = embed(patches, params, cfg)
    maps = []
    for i in range(cfg.depth):
        z, attn = attention_block(z, params, i, cfg)
        maps.append(attn)
    z = T.layer_norm(z, params["norm.gamma"], params["norm.beta"])
    logits = T.add(T.matmul(T.select(z, 0, axis=1), params["head.weight"]), params["head.bias"])
    return ForwardOutput(logits, ClassAttention(maps))


def predict(images: np.ndarray, params: Parameters, cfg: ModelConfig, batch_size: int = 256) -> np.ndarray:
    """Argmax class per image (lowest index wins ties)."""
    out = []
    for i in range(0, len(images), batch_size):
        out.append(forward(images[i : i + batch_size], params, cfg).logits.values.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
