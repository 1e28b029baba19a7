"""Voxel-level features for candidate generation.

Seven base fields are computed at full resolution (intensity, Hessian
blobness at three scales, difference-of-Gaussians at three scales).  Each is
averaged over cubic neighbourhoods of three radii, and the 7 * 4 = 28 values
are sampled on the every-third-voxel lattice.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage as ndi

from .errors import DataError
from .volume import Volume, as_volume

STRIDE = 3
SCALES = (1.0, 2.0, 4.0)
RADII = (3, 6, 12)
DOG_RATIO = 1.6
TRUNCATE = 3.0
N_BASE = 1 + 2 * len(SCALES)
N_FEATURES = N_BASE * (1 + len(RADII))
MIN_SIZE = 27

BASE_NAMES = (
    ["intensity"]
    + [f"blob_s{s:g}" for s in SCALES]
    + [f"dog_s{s:g}" for s in SCALES]
)
FEATURE_NAMES = BASE_NAMES + [f"{n}_avg{r}" for r in RADII for n in BASE_NAMES]


def _array(v) -> np.ndarray:
    return np.asarray(v.data if isinstance(v, Volume) else v, dtype=np.float64)


def _check_sigma(sigma):
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")


def gaussian_smooth(a: np.ndarray, sigma: float) -> np.ndarray:
    # separable, kernel truncated at 3 sigma, borders replicated
    return ndi.gaussian_filter(np.asarray(a, dtype=np.float64), sigma, mode="nearest", truncate=TRUNCATE)


def _hessian_components(smoothed: np.ndarray):
    gx, gy, gz = np.gradient(smoothed)
    hxx, hxy, hxz = np.gradient(gx)
    hyy, hyz = np.gradient(gy, axis=(1, 2))
    hzz = np.gradient(gz, axis=2)
    return hxx, hyy, hzz, hxy, hxz, hyz


def blobness_from_smoothed(smoothed: np.ndarray, sigma: float) -> np.ndarray:
    hxx, hyy, hzz, hxy, hxz, hyz = _hessian_components(smoothed)
    out = np.zeros(smoothed.shape, dtype=np.float64)
    # a negative definite matrix has a negative diagonal; only those voxels
    # need the eigen-decomposition
    cand = (hxx < 0) & (hyy < 0) & (hzz < 0)
    if not cand.any():
        return out
    h = np.empty((int(cand.sum()), 3, 3))
    h[:, 0, 0], h[:, 1, 1], h[:, 2, 2] = hxx[cand], hyy[cand], hzz[cand]
    h[:, 0, 1] = h[:, 1, 0] = hxy[cand]
    h[:, 0, 2] = h[:, 2, 0] = hxz[cand]
    h[:, 1, 2] = h[:, 2, 1] = hyz[cand]
    lam = np.linalg.eigvalsh(h * sigma**2)
    l1, l3 = lam[:, 0], lam[:, 2]
    # l1 <= l3 < 0 whenever the gate passes, so |l1| > 0
    out[cand] = np.where(l3 < 0, l3**2 / np.abs(l1), 0.0)
    return out


def hessian_blobness(v, sigma: float) -> Volume:
    """Bright-blob score ``l3**2 / |l1|`` where all Hessian eigenvalues are negative.

    Eigenvalues are those of the sigma**2-normalised Hessian of the
    Gaussian-smoothed volume, sorted ``l1 <= l2 <= l3``.
    """
    _check_sigma(sigma)
    a = _array(v)
    return as_volume(blobness_from_smoothed(gaussian_smooth(a, sigma), sigma), _spacing(v), "probmap-f32")


def dog_response(v, sigma: float) -> Volume:
    _check_sigma(sigma)
    a = _array(v)
    return as_volume(gaussian_smooth(a, sigma) - gaussian_smooth(a, DOG_RATIO * sigma), _spacing(v), "probmap-f32")


def _spacing(v):
    return v.spacing if isinstance(v, Volume) else (1.0, 1.0, 1.0)


def _box_sum_1d(a: np.ndarray, radius: int, axis: int, at=None):
    """Window sums along one axis, clipped to bounds; optionally only at indices ``at``."""
    n = a.shape[axis]
    idx = np.arange(n) if at is None else np.asarray(at)
    pad = [(0, 0)] * a.ndim
    pad[axis] = (1, 0)
    csum = np.pad(np.cumsum(a, axis=axis), pad)
    hi = np.minimum(idx + radius + 1, n)
    lo = np.maximum(idx - radius, 0)
    total = np.take(csum, hi, axis=axis) - np.take(csum, lo, axis=axis)
    return total, (hi - lo).astype(np.float64)


def _box_mean(a: np.ndarray, radius: int, at=(None, None, None)) -> np.ndarray:
    counts = []
    for axis in range(3):
        a, c = _box_sum_1d(a, radius, axis, at[axis])
        counts.append(c)
    return a / (counts[0][:, None, None] * counts[1][None, :, None] * counts[2][None, None, :])


def neighborhood_average(field, radius: int) -> Volume:
    """Mean over the clipped axis-aligned cube of half-width ``radius``."""
    if int(radius) != radius or radius <= 0:
        raise ValueError(f"radius must be a positive integer, got {radius}")
    return as_volume(_box_mean(_array(field), int(radius)), _spacing(field), "probmap-f32")


@dataclass(frozen=True)
class GridFeatureField:
    values: np.ndarray  # (gx, gy, gz, 28)
    stride: int = STRIDE
    scales_used: tuple = SCALES

    @property
    def grid_dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.values.shape[:3])

    @property
    def features_per_voxel(self) -> int:
        return int(self.values.shape[3])

    def vectors(self) -> np.ndarray:
        return self.values.reshape(-1, self.features_per_voxel)


def grid_dims_for(dims, stride: int = STRIDE) -> tuple[int, int, int]:
    return tuple(-(-int(n) // stride) for n in dims)


def base_fields(v) -> list[np.ndarray]:
    """The seven full-resolution base fields in feature order."""
    a = _array(v)
    smoothed = {s: gaussian_smooth(a, s) for s in SCALES}
    blobs = [blobness_from_smoothed(smoothed[s], s) for s in SCALES]
    dogs = [smoothed[s] - gaussian_smooth(a, DOG_RATIO * s) for s in SCALES]
    return [a] + blobs + dogs


def extract_grid_features(v) -> GridFeatureField:
    a = _array(v)
    if min(a.shape) < MIN_SIZE:
        raise DataError(f"volume {a.shape} too small for grid features (need {MIN_SIZE}^3)")
    fields = base_fields(a)
    at = tuple(np.arange(0, n, STRIDE) for n in a.shape)
    gdims = tuple(len(i) for i in at)
    out = np.empty(gdims + (N_FEATURES,), dtype=np.float64)
    for j, f in enumerate(fields):
        out[..., j] = f[np.ix_(*at)]
    for k, r in enumerate(RADII):
        for j, f in enumerate(fields):
            # only grid positions are needed; identical to sampling the full-res mean
            out[..., N_BASE * (k + 1) + j] = _box_mean(f, r, at)
    return GridFeatureField(out.astype(np.float32))
