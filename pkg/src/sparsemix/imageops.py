"""Small deterministic image helpers shared by the corruption generator and
the augmentation pipeline. Everything operates on (H, W) float64 grayscale
arrays in [0, 1]."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

Array = np.ndarray


def resize_bilinear(img: Array, out_h: int, out_w: int) -> Array:
    """Bilinear resample with half-pixel-center alignment. A no-op when the
    output geometry matches the input."""
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = img[np.ix_(y0, x0)] * (1 - wx) + img[np.ix_(y0, x1)] * wx
    bot = img[np.ix_(y1, x0)] * (1 - wx) + img[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def resize_nearest(img: Array, out_h: int, out_w: int) -> Array:
    h, w = img.shape
    ys = np.minimum(((np.arange(out_h) + 0.5) * (h / out_h)).astype(int), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * (w / out_w)).astype(int), w - 1)
    return img[np.ix_(ys, xs)]


def gaussian_blur(img: Array, sigma: float) -> Array:
    return ndimage.gaussian_filter(img, sigma=sigma, mode="reflect")


def smooth_field(rng: np.random.Generator, side: int, cells: int, lo: float, hi: float) -> Array:
    """Low-frequency random field: a coarse uniform grid upsampled bilinearly
    and rescaled into [lo, hi]."""
    coarse = rng.uniform(0.0, 1.0, size=(cells, cells))
    field = resize_bilinear(coarse, side, side)
    fmin, fmax = field.min(), field.max()
    if fmax - fmin < 1e-12:
        return np.full((side, side), (lo + hi) / 2.0)
    return lo + (hi - lo) * (field - fmin) / (fmax - fmin)


def warp(img: Array, dx: Array, dy: Array) -> Array:
    """Bilinear sample at (x + dx, y + dy) with clamped coordinates."""
    h, w = img.shape
    yy, xx = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    ys = np.clip(yy + dy, 0.0, h - 1.0)
    xs = np.clip(xx + dx, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = ys - y0
    wx = xs - x0
    top = img[y0, x0] * (1 - wx) + img[y0, x1] * wx
    bot = img[y1, x0] * (1 - wx) + img[y1, x1] * wx
    return top * (1 - wy) + bot * wy


def hflip(img: Array) -> Array:
    return img[:, ::-1].copy()
