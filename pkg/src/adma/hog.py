"""Hand-crafted reconstruction targets: HOG, raw RGB patches and Sobel magnitude."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .vit import patchify

TARGET_KINDS = ("hog", "rgb", "sobel")


@dataclass(frozen=True)
class HogConfig:
    orientation_bins: int = 9
    cell_size: int = 8
    channels: int = 3
    eps: float = 1e-5


@dataclass
class HogField:
    values: np.ndarray  # [channels, bins, H/cell, W/cell]

    @property
    def shape(self) -> tuple:
        return self.values.shape


def _check_image(image: np.ndarray, cfg: HogConfig) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != cfg.channels:
        raise ValueError(f"expected image [{cfg.channels}, H, W], got {image.shape}")
    _, h, w = image.shape
    if h % cfg.cell_size or w % cfg.cell_size:
        raise ValueError(f"image size {h}x{w} is not divisible by cell size {cfg.cell_size}")
    if not np.isfinite(image).all():
        raise ValueError("image has non-finite pixels")
    return image


def centered_gradients(image: np.ndarray) -> tuple:
    """[-1, 0, 1] differences along x and y with replicated borders, per channel."""
    p = np.pad(image, ((0, 0), (1, 1), (1, 1)), mode="edge")
    gx = p[:, 1:-1, 2:] - p[:, 1:-1, :-2]
    gy = p[:, 2:, 1:-1] - p[:, :-2, 1:-1]
    return gx, gy


def hog_extract(image: np.ndarray, cfg: HogConfig = HogConfig()) -> HogField:
    """Per-cell, per-channel histograms of unsigned gradient orientation.

    Each pixel votes its gradient magnitude into the two nearest of
    ``orientation_bins`` bins centred at ``k*pi/bins`` (wrapping at pi).
    Every cell histogram is scaled by ``1/sqrt(|v|^2 + eps^2)``.
    """
    image = _check_image(image, cfg)
    c, h, w = image.shape
    nb, cs = cfg.orientation_bins, cfg.cell_size
    gx, gy = centered_gradients(image)
    mag = np.sqrt(gx * gx + gy * gy)
    theta = np.mod(np.arctan2(gy, gx), math.pi)
    pos = theta / (math.pi / nb)
    lo = np.floor(pos)
    frac = pos - lo
    lo = lo.astype(np.int64) % nb
    hi = (lo + 1) % nb

    hc, wc = h // cs, w // cs
    rows = np.arange(h)[:, None] // cs
    cols = np.arange(w)[None, :] // cs
    cell = np.broadcast_to(rows * wc + cols, (h, w))
    chan = np.arange(c)[:, None, None] * (hc * wc)
    base = (chan + cell) * nb
    size = c * hc * wc * nb
    hist = np.bincount((base + lo).ravel(), weights=(mag * (1.0 - frac)).ravel(), minlength=size)
    hist += np.bincount((base + hi).ravel(), weights=(mag * frac).ravel(), minlength=size)
    hist = hist.reshape(c, hc, wc, nb)
    norm = np.sqrt((hist * hist).sum(axis=-1, keepdims=True) + cfg.eps**2)
    hist = hist / norm
    return HogField(np.ascontiguousarray(hist.transpose(0, 3, 1, 2)))


def hog_tokens(field: HogField, patch_size: int, cell_size: int = 8) -> np.ndarray:
    """Regroup the cell grid into per-patch targets [N, channels*bins*(patch/cell)^2]."""
    if patch_size % cell_size:
        raise ValueError(f"patch size {patch_size} is not a multiple of cell size {cell_size}")
    c, nb, hc, wc = field.values.shape
    s = patch_size // cell_size
    gh, gw = hc // s, wc // s
    v = field.values.reshape(c, nb, gh, s, gw, s)
    v = v.transpose(2, 4, 0, 1, 3, 5)
    return np.ascontiguousarray(v.reshape(gh * gw, c * nb * s * s))


def sobel_magnitude(image: np.ndarray) -> np.ndarray:
    """Per-channel Sobel gradient magnitude with replicated borders.

    Differences are taken before smoothing so flat regions give exact zeros.
    """
    image = np.asarray(image, dtype=np.float64)
    p = np.pad(image, ((0, 0), (1, 1), (1, 1)), mode="edge")
    dx = p[:, :, 2:] - p[:, :, :-2]
    dy = p[:, 2:, :] - p[:, :-2, :]
    gx = dx[:, :-2] + 2.0 * dx[:, 1:-1] + dx[:, 2:]
    gy = dy[:, :, :-2] + 2.0 * dy[:, :, 1:-1] + dy[:, :, 2:]
    return np.sqrt(gx * gx + gy * gy)


def alt_target(image: np.ndarray, kind: str, patch_size: int, eps: float = 1e-5) -> np.ndarray:
    """RGB or Sobel per-token targets, shape [N, 3*patch^2]."""
    image = np.asarray(image, dtype=np.float64)
    if kind == "rgb":
        return patchify(image[None], patch_size)[0]
    if kind == "sobel":
        t = patchify(sobel_magnitude(image)[None], patch_size)[0]
        return t / np.sqrt((t * t).sum(axis=-1, keepdims=True) + eps**2)
    raise ValueError(f"unknown target kind {kind!r}; expected 'rgb' or 'sobel'")


def token_targets(image: np.ndarray, kind: str, patch_size: int, cfg: HogConfig = HogConfig()) -> np.ndarray:
    if kind == "hog":
        return hog_tokens(hog_extract(image, cfg), patch_size, cfg.cell_size)
    return alt_target(image, kind, patch_size, cfg.eps)


def target_dim(kind: str, patch_size: int, cfg: HogConfig = HogConfig()) -> int:
    if kind == "hog":
        return cfg.channels * cfg.orientation_bins * (patch_size // cfg.cell_size) ** 2
    if kind in ("rgb", "sobel"):
        return cfg.channels * patch_size * patch_size
    raise ValueError(f"unknown target kind {kind!r}")


def write_hog_csv(field: HogField, path) -> int:
    """One row per (channel, cell); returns the number of rows written."""
    c, nb, hc, wc = field.values.shape
    n = 0
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["channel", "cell_row", "cell_col"] + [f"bin_{b}" for b in range(nb)])
        for ch in range(c):
            for r in range(hc):
                for col in range(wc):
                    w.writerow([ch, r, col] + [repr(float(x)) for x in field.values[ch, :, r, col]])
                    n += 1
    return n
