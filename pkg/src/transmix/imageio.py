"""Binary PPM (P6) images."""

from __future__ import annotations

import logging
import os

import numpy as np

from .errors import FormatError

log = logging.getLogger(__name__)


def to_rgb_bytes(image: np.ndarray) -> tuple[np.ndarray, int]:
    """(C, H, W) in [0, 1] with C in {1, 3} -> (H, W, 3) uint8 and the clamp count."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise FormatError(f"expected a (1|3, H, W) image, got shape {img.shape}")
    clamped = int(np.count_nonzero((img < 0) | (img > 1) | ~np.isfinite(img)))
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    img = np.clip(np.nan_to_num(img, nan=0.0), 0.0, 1.0)
    return np.floor(img * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0), clamped


def write_ppm(image: np.ndarray, path) -> int:
    """Write a P6 file; returns how many out-of-range values were clamped."""
    rgb, clamped = to_rgb_bytes(image)
    if clamped:
        log.warning("write_ppm %s: clamped %d out-of-range values", path, clamped)
    h, w, _ = rgb.shape
    with open(os.fspath(path), "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb).tobytes())
    return clamped


def read_ppm(path) -> np.ndarray:
    """Read a P6 file written by :func:`write_ppm`; returns (3, H, W) floats in [0, 1]."""
    with open(os.fspath(path), "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise FormatError(f"{path}: only 8-bit P6 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    payload = data[pos:]
    if len(payload) != 3 * w * h:
        raise FormatError(f"{path}: expected {3 * w * h} payload bytes, found {len(payload)}")
    rgb = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return rgb.transpose(2, 0, 1).astype(np.float64) / 255.0


def display_range(image: np.ndarray) -> np.ndarray:
    """Min-max scale an arbitrary real image into [0, 1] for viewing."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = img.min(), img.max()
    if hi <= lo:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def attention_overlay(image: np.ndarray, attn_pixels: np.ndarray, alpha: float = 0.6) -> np.ndarray:
    """Grey version of ``image`` with attention (H, W in [0, 1]) blended into the red channel."""
    grey = display_range(image).mean(axis=0)
    heat = np.asarray(attn_pixels, dtype=np.float64)
    out = np.stack([grey, grey, grey])
    out[0] = (1 - alpha) * grey + alpha * heat
    out[1] = (1 - alpha) * grey
    out[2] = (1 - alpha) * grey
    return out
