"""31-features-per-cell HOG (18 signed + 9 unsigned orientations + 4 gradient energies).

Cells are emitted row-major; within a cell the layout is
``[18 signed | 9 unsigned | 4 energy]``.  ``encode_batch`` works on a stack of
patches at once and is what the pipeline uses; ``encode_hog`` wraps it for a
single patch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .volume import Volume

PER_CELL = 31
ENERGY_COEF = 0.2357
CHUNK = 256


@dataclass(frozen=True)
class HogConfig:
    cells_per_side: int = 5
    window: int = 45
    signed_bins: int = 18
    truncation: float = 0.2
    norm_epsilon: float = 1e-4
    clamp: tuple | None = None  # optional intensity window applied before gradients

    def __post_init__(self):
        n = self.cells_per_side
        if not isinstance(n, (int, np.integer)) or n < 1 or self.window % n:
            raise DataError(f"cells_per_side={n!r} does not divide window {self.window}")
        if self.signed_bins % 2:
            raise DataError("signed_bins must be even")

    @property
    def unsigned_bins(self) -> int:
        return self.signed_bins // 2

    @property
    def cell_size(self) -> int:
        return self.window // self.cells_per_side

    @property
    def per_cell(self) -> int:
        return self.signed_bins + self.unsigned_bins + 4

    @property
    def descriptor_dim(self) -> int:
        return self.cells_per_side**2 * self.per_cell


def _spatial_weights(window: int, n: int) -> np.ndarray:
    """(n, window) bilinear pixel-to-cell-centre weights; out-of-range cells drop their share."""
    s = window / n
    pos = (np.arange(window) + 0.5) / s - 0.5
    c0 = np.floor(pos).astype(int)
    w1 = pos - c0
    A = np.zeros((n, window))
    for cell, w in ((c0, 1.0 - w1), (c0 + 1, w1)):
        ok = (cell >= 0) & (cell < n)
        A[cell[ok], np.flatnonzero(ok)] += w[ok]
    return A


def _gradients(p: np.ndarray):
    # centred differences with replicated borders
    q = np.pad(p, ((0, 0), (1, 1), (1, 1)), mode="edge")
    dy = q[:, 2:, 1:-1] - q[:, :-2, 1:-1]
    dx = q[:, 1:-1, 2:] - q[:, 1:-1, :-2]
    return dx, dy


def cell_histograms(patches: np.ndarray, cfg: HogConfig) -> np.ndarray:
    """Raw signed orientation histograms, shape ``(N, n, n, signed_bins)``."""
    p = np.asarray(patches, dtype=np.float64)
    if cfg.clamp is not None:
        p = np.clip(p, *cfg.clamp)
    dx, dy = _gradients(p)
    mag = np.hypot(dx, dy)
    nb = cfg.signed_bins
    b = np.mod(np.arctan2(dy, dx), 2 * np.pi) * (nb / (2 * np.pi))
    fb = np.floor(b)
    frac = b - fb
    b0 = fb.astype(np.int64) % nb
    b1 = (b0 + 1) % nb
    N, H, W = p.shape
    votes = np.zeros((N, H, W, nb))
    ii = np.indices((N, H, W))
    votes[ii[0], ii[1], ii[2], b0] += mag * (1.0 - frac)
    votes[ii[0], ii[1], ii[2], b1] += mag * frac
    A = _spatial_weights(cfg.window, cfg.cells_per_side)
    n = cfg.cells_per_side
    # per-patch products, so a descriptor does not depend on its batch
    rows = np.matmul(A, votes.reshape(N, H, W * nb)).reshape(N, n, W, nb)
    return np.einsum("nrwb,cw->nrcb", rows, A)


def _block_norms(energy: np.ndarray, eps: float) -> np.ndarray:
    """(N, n, n, 4) inverse norms of the four 2x2 blocks touching each cell."""
    e = np.pad(energy, ((0, 0), (1, 1), (1, 1)), mode="edge")
    s = e[:, :-1, :-1] + e[:, 1:, :-1] + e[:, :-1, 1:] + e[:, 1:, 1:]  # (N, n+1, n+1)
    blocks = [s[:, :-1, :-1], s[:, :-1, 1:], s[:, 1:, :-1], s[:, 1:, 1:]]
    return 1.0 / np.sqrt(np.stack(blocks, axis=-1) + eps**2)


def _features_from_hist(h: np.ndarray, cfg: HogConfig) -> np.ndarray:
    nu = cfg.unsigned_bins
    u = h[..., :nu] + h[..., nu:]
    norms = _block_norms(np.sum(u * u, axis=-1), cfg.norm_epsilon)
    t = cfg.truncation
    hs = np.minimum(h[..., None, :] * norms[..., :, None], t)  # (N, n, n, 4, 18)
    us = np.minimum(u[..., None, :] * norms[..., :, None], t)
    out = np.concatenate(
        [0.5 * hs.sum(axis=-2), 0.5 * us.sum(axis=-2), ENERGY_COEF * hs.sum(axis=-1)], axis=-1
    )
    return out.reshape(len(h), -1)


def encode_batch(patches, cfg: HogConfig = HogConfig()) -> np.ndarray:
    patches = np.asarray(patches)
    if patches.ndim != 3 or patches.shape[1:] != (cfg.window, cfg.window):
        raise DataError(f"expected (N, {cfg.window}, {cfg.window}) patches, got {patches.shape}")
    out = np.empty((len(patches), cfg.descriptor_dim))
    for start in range(0, len(patches), CHUNK):
        chunk = patches[start:start + CHUNK]
        out[start:start + len(chunk)] = _features_from_hist(cell_histograms(chunk, cfg), cfg)
    return out


@dataclass(frozen=True)
class HogDescriptor:
    config: HogConfig
    values: np.ndarray


def encode_hog(patch, cfg: HogConfig = HogConfig()) -> HogDescriptor:
    patch = np.asarray(patch)
    if patch.shape != (cfg.window, cfg.window):
        raise DataError(f"patch shape {patch.shape} != ({cfg.window}, {cfg.window})")
    return HogDescriptor(cfg, encode_batch(patch[None], cfg)[0])


GLYPH = 21


def _glyph_line(angle: float, size: int = GLYPH) -> np.ndarray:
    """Boolean mask of a centred line through a size x size tile."""
    img = np.zeros((size, size), dtype=bool)
    c = (size - 1) / 2
    t = np.linspace(-c, c, 4 * size)
    rows = np.rint(c + t * np.sin(angle)).astype(int)
    cols = np.rint(c + t * np.cos(angle)).astype(int)
    img[rows, cols] = True
    return img


def render_weights(w, cfg: HogConfig = HogConfig()) -> Volume:
    """Per-cell oriented-line glyphs for a linear weight vector over HOG features.

    For each unsigned orientation the weights of its two signed bins and its
    unsigned bin are summed.  Lines are drawn perpendicular to the gradient
    direction, i.e. along the edge.  Positive strengths go to plane z=0,
    negative strengths (as magnitudes) to plane z=1.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (cfg.descriptor_dim,):
        raise DataError(f"weight length {w.shape} != descriptor_dim {cfg.descriptor_dim}")
    n, nb, nu = cfg.cells_per_side, cfg.signed_bins, cfg.unsigned_bins
    cells = w.reshape(n, n, cfg.per_cell)
    strength = cells[..., :nu] + cells[..., nu:nb] + cells[..., nb:nb + nu]
    lines = [_glyph_line(np.pi * i / nu + np.pi / 2) for i in range(nu)]
    out = np.zeros((n * GLYPH, n * GLYPH, 2))
    for r in range(n):
        for c in range(n):
            tile = out[r * GLYPH:(r + 1) * GLYPH, c * GLYPH:(c + 1) * GLYPH]
            for i, s in enumerate(strength[r, c]):
                plane = 0 if s > 0 else 1
                if s != 0:
                    tile[..., plane] = np.where(lines[i], np.maximum(tile[..., plane], abs(s)), tile[..., plane])
    return Volume(out, (1.0, 1.0, 1.0), "probmap-f32")
