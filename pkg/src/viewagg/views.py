"""Orthogonal 2D view sampling around candidate centroids.

In-plane orientation is fixed per axis: a view with through-plane axis ``x``
has rows along y and columns along z; axis ``y`` gives rows x / columns z;
axis ``z`` gives rows x / columns y.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .volume import Volume, clamp_center

AXES = ("x", "y", "z")
AXIS_NAMES = {"x": "sagittal", "y": "coronal", "z": "axial"}


@dataclass(frozen=True)
class ViewSamplerConfig:
    k: int = 4
    window: int = 45

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("window must be a positive odd size")
        if self.k > self.window // 2:
            raise ValueError("offset radius k exceeds the VOI half-width")

    @property
    def half(self) -> int:
        return self.window // 2

    @property
    def views_per_candidate(self) -> int:
        return 3 * (2 * self.k + 1)

    def layout(self) -> list[tuple[str, int]]:
        """(axis, offset) per view: axis-major, offset ascending."""
        return [(a, o) for a in AXES for o in range(-self.k, self.k + 1)]


@dataclass(frozen=True)
class ViewSlice:
    candidate_ref: tuple  # (patient_id, candidate index)
    axis: str
    offset: int
    pixels: np.ndarray
    label: int


def view_stack(v, centroid, cfg: ViewSamplerConfig = ViewSamplerConfig()) -> np.ndarray:
    """All views of one candidate as a ``(3*(2k+1), window, window)`` array."""
    data = v.data if isinstance(v, Volume) else np.asarray(v)
    dims = data.shape
    if any(ci < 0 or ci >= n for ci, n in zip(centroid, dims)):
        raise DataError(f"centroid {tuple(centroid)} outside volume {dims}")
    h = cfg.half
    cx, cy, cz = clamp_center(dims, centroid, h)
    sx, sy, sz = (slice(c - h, c + h + 1) for c in (cx, cy, cz))
    out = np.empty((cfg.views_per_candidate, cfg.window, cfg.window), dtype=np.float64)
    i = 0
    for o in range(-cfg.k, cfg.k + 1):
        out[i] = data[cx + o, sy, sz]
        i += 1
    for o in range(-cfg.k, cfg.k + 1):
        out[i] = data[sx, cy + o, sz]
        i += 1
    for o in range(-cfg.k, cfg.k + 1):
        out[i] = data[sx, sy, cz + o]
        i += 1
    return out


def sample_views(v, candidate, cfg: ViewSamplerConfig = ViewSamplerConfig(), index: int = 0) -> list[ViewSlice]:
    stack = view_stack(v, candidate.centroid, cfg)
    ref = (candidate.patient_id, index)
    return [
        ViewSlice(ref, axis, offset, stack[i], candidate.label)
        for i, (axis, offset) in enumerate(cfg.layout())
    ]


def montage(stack: np.ndarray, k: int) -> np.ndarray:
    """Tile views as 3 rows (axial, coronal, sagittal) by 2k+1 offsets."""
    n = 2 * k + 1
    if len(stack) != 3 * n:
        raise DataError(f"expected {3 * n} views for k={k}, got {len(stack)}")
    rows = []
    # axial first, as a radiologist reads it
    for axis_block in (2, 1, 0):
        rows.append(np.concatenate(list(stack[axis_block * n:(axis_block + 1) * n]), axis=1))
    return np.concatenate(rows, axis=0)
