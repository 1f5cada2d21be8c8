"""Visual-semantic alignment and attention heatmaps.

Alignment turns a visual sequence ``V`` (B x n x d) into ``t`` semantic
vectors with one learned query matrix ``Q`` (t x d)::

    A = softmax(Q V^T)  over the n axis   (no temperature)
    S = A V

The same :class:`VSAlign` instance serves every call site of a model, so
both sites read one ``Q`` storage and add into one gradient buffer.
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .errors import DimensionError
from .nn import Module


class VSAlign(Module):
    def __init__(self, max_len, d_model, rng, dtype=np.float32):
        self.Q = Parameter((rng.standard_normal((max_len, d_model)) / math.sqrt(d_model)).astype(dtype))

    @property
    def storage_id(self):
        return self.Q.storage_id

    def __call__(self, visual):
        return align(visual, self.Q)


def align(visual, Q):
    """Return ``(S, A)`` with S: B x t x d and A: B x t x n."""
    visual, Q = ad.as_tensor(visual), ad.as_tensor(Q)
    if visual.ndim != 3 or Q.ndim != 2 or visual.shape[-1] != Q.shape[-1]:
        raise DimensionError(f"align: visual {visual.shape} incompatible with Q {Q.shape}")
    scores = ad.matmul(Q, ad.transpose(visual, (0, 2, 1)))
    attn = ad.softmax(scores, axis=-1)
    return ad.matmul(attn, visual), attn


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a 2-D (or H x W x C) array.

    Output pixel ``i`` samples source coordinate ``i * (H - 1) / (out_h - 1)``,
    so the four corners map exactly onto the source corners.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]

    def coords(n_in, n_out):
        if n_out == 1 or n_in == 1:
            src = np.zeros(n_out)
        else:
            src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.minimum(np.floor(src).astype(int), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = coords(h, out_h)
    x0, x1, fx = coords(w, out_w)
    if img.ndim == 3:
        fy, fx = fy[:, None, None], fx[None, :, None]
    else:
        fy, fx = fy[:, None], fx[None, :]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def minmax_normalize(x: np.ndarray) -> np.ndarray:
    """Scale to [0, 1]; a constant array maps to all zeros."""
    lo, hi = x.min(), x.max()
    if hi - lo <= 0:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def attention_heatmap(attn, grid_shape, image_shape) -> np.ndarray:
    """Per-row heatmaps: t x n attention -> t x H x W values in [0, 1].

    Rows are reshaped row-major onto the h x w feature grid, upsampled
    bilinearly to the image size and min-max normalised independently.
    """
    attn = np.asarray(getattr(attn, "data", attn), dtype=np.float64)
    if attn.ndim == 1:
        attn = attn[None]
    h, w = grid_shape
    if attn.shape[-1] != h * w:
        raise DimensionError(f"heatmap: attention length {attn.shape[-1]} != grid {h}x{w}")
    out_h, out_w = image_shape
    maps = [minmax_normalize(bilinear_resize(row.reshape(h, w), out_h, out_w)) for row in attn]
    return np.stack(maps) if maps else np.zeros((0, out_h, out_w))


def overlay(gray: np.ndarray, heat: np.ndarray) -> np.ndarray:
    """Blend a grayscale image (0-255) at 50% with heat intensity (0-1 -> 0-255)."""
    mixed = 0.5 * np.asarray(gray, dtype=np.float64) + 0.5 * 255.0 * np.asarray(heat, dtype=np.float64)
    return np.clip(np.rint(mixed), 0, 255).astype(np.uint8)
