"""Foveated glimpse extraction from sensor windows.

A window is a (time x channel) matrix. A glimpse at a normalized location is
a stack of concentric patches, fine at the center and progressively coarser
(larger footprint, average-pooled back to the base patch shape). Cells
outside the window read as zero, so every glimpse has the same length no
matter where it is centered; channels are z-scored upstream, which makes
zero the neutral fill value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import RunConfig


@dataclass
class Window:
    """One labelled sensor window: values (time steps x channels)."""

    values: np.ndarray
    label: int
    subject: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)


@dataclass(frozen=True)
class NormalizedLocation:
    """A (time, channel) point with both coordinates in [-1, 1]."""

    t: float
    l: float


@dataclass
class Glimpse:
    scales: list          # flattened patches, fine -> coarse, each length ph*pw
    center: NormalizedLocation

    def flat(self) -> np.ndarray:
        return np.concatenate(self.scales)


def base_patch_shape(window_len: int, n_channels: int) -> tuple[int, int]:
    """Base patch covers one eighth of each axis, never less than one cell."""
    return (max(1, math.ceil(window_len / 8)), max(1, math.ceil(n_channels / 8)))


def glimpse_length(cfg: RunConfig) -> int:
    ph, pw = base_patch_shape(cfg.window_len, cfg.n_channels)
    return cfg.n_scales * ph * pw


def denormalize(coord: float, extent: int) -> int:
    """Map [-1, 1] to an array index, round half up, clamp into range."""
    idx = math.floor((coord + 1.0) / 2.0 * (extent - 1) + 0.5)
    return min(max(idx, 0), extent - 1)


def normalize_index(idx: int, extent: int) -> float:
    """Inverse of denormalize on exact grid points."""
    if extent == 1:
        return 0.0
    return -1.0 + 2.0 * idx / (extent - 1)


def extract_patch(w: Window, center: NormalizedLocation, ph: int, pw: int) -> np.ndarray:
    """Cut a ph x pw rectangle anchored at the denormalized center.

    The patch starts (dim - 1) // 2 cells before the center index on each
    axis, so odd sizes are symmetric around the center cell and even sizes
    extend one cell further down/right. Out-of-range cells are zero.
    """
    rows, cols = w.values.shape
    r_c = denormalize(center.t, rows)
    c_c = denormalize(center.l, cols)
    r0 = r_c - (ph - 1) // 2
    c0 = c_c - (pw - 1) // 2
    patch = np.zeros((ph, pw))
    r_lo, r_hi = max(r0, 0), min(r0 + ph, rows)
    c_lo, c_hi = max(c0, 0), min(c0 + pw, cols)
    if r_lo < r_hi and c_lo < c_hi:
        patch[r_lo - r0:r_hi - r0, c_lo - c0:c_hi - c0] = w.values[r_lo:r_hi, c_lo:c_hi]
    return patch


def foveate(w: Window, center: NormalizedLocation, cfg: RunConfig) -> Glimpse:
    """Multi-resolution glimpse at `center`: fine to coarse scale stack."""
    flat = foveate_batch(
        w.values[None, :, :], np.zeros(1, dtype=np.intp),
        np.array([center.t]), np.array([[center.l]]), cfg)
    ph, pw = base_patch_shape(cfg.window_len, cfg.n_channels)
    per_scale = ph * pw
    scales = [flat[0, 0, j * per_scale:(j + 1) * per_scale].copy() for j in range(cfg.n_scales)]
    return Glimpse(scales, center)


def foveate_batch(stack: np.ndarray, win_idx: np.ndarray, times: np.ndarray,
                  locs: np.ndarray, cfg: RunConfig) -> np.ndarray:
    """Vectorized glimpse extraction for many episodes at once.

    stack:   (n_windows, time, channels) window values
    win_idx: (n,) which window each episode reads
    times:   (n,) shared time coordinate per episode, in [-1, 1]
    locs:    (n, agents) per-agent channel coordinates, in [-1, 1]
    returns  (n, agents, n_scales * ph * pw), scales ordered fine -> coarse
    """
    n, n_agents = locs.shape
    rows, cols = stack.shape[1], stack.shape[2]
    ph, pw = base_patch_shape(rows, cols)

    # round-half-up denormalization, vectorized
    t_idx = np.clip(np.floor((times + 1.0) / 2.0 * (rows - 1) + 0.5), 0, rows - 1).astype(np.intp)
    l_idx = np.clip(np.floor((locs + 1.0) / 2.0 * (cols - 1) + 0.5), 0, cols - 1).astype(np.intp)

    out = np.empty((n, n_agents, cfg.n_scales * ph * pw))
    for j in range(cfg.n_scales):
        blk = cfg.scale_factor ** j
        bh, bw = ph * blk, pw * blk
        r0 = t_idx - (bh - 1) // 2
        c0 = l_idx - (bw - 1) // 2
        r = r0[:, None] + np.arange(bh)                       # (n, bh)
        c = c0[:, :, None] + np.arange(bw)                    # (n, agents, bw)
        r_ok = (r >= 0) & (r < rows)
        c_ok = (c >= 0) & (c < cols)
        rc = np.clip(r, 0, rows - 1)
        cc = np.clip(c, 0, cols - 1)
        vals = stack[win_idx[:, None, None, None],
                     rc[:, None, :, None],
                     cc[:, :, None, :]]                        # (n, agents, bh, bw)
        vals = vals * (r_ok[:, None, :, None] & c_ok[:, :, None, :])
        pooled = vals.reshape(n, n_agents, ph, blk, pw, blk).mean(axis=(3, 5))
        out[:, :, j * ph * pw:(j + 1) * ph * pw] = pooled.reshape(n, n_agents, ph * pw)
    return out
