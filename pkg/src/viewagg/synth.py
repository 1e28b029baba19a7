"""Seeded synthetic phantoms: ellipsoidal nodes, tubular distractors, textured background."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage as ndi
from scipy.spatial.transform import Rotation

from .errors import DataError
from .volume import Volume, save_volume

MAX_ATTEMPTS = 2000
SOFT_EDGE_SIGMA = 1.0
TEXTURE_SIGMA = 2.0


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (128, 128, 128)
    spacing: tuple = (1.0, 1.0, 1.0)
    n_nodes: tuple = (3, 8)
    node_semiaxes: tuple = (5.0, 12.0)  # mm
    n_tubes: tuple = (4, 10)
    tube_radius: tuple = (3.0, 7.0)  # mm
    tube_length: tuple = (40.0, 120.0)  # mm, capsule axis length
    contrast: float = 100.0
    contrast_jitter: float = 0.2
    background: float = 40.0
    noise_sigma: float = 20.0
    ramp: float = 30.0
    gap: float = 10.0  # mm clearance between objects
    seed: int = 0

    def __post_init__(self):
        for name in ("n_nodes", "node_semiaxes", "n_tubes", "tube_radius", "tube_length"):
            lo, hi = getattr(self, name)
            if lo <= 0 or hi < lo:
                raise ValueError(f"{name} must be a positive range, got {(lo, hi)}")
        if self.contrast <= 0 or self.noise_sigma < 0:
            raise ValueError("contrast must be positive and noise_sigma non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class Node:
    center: np.ndarray  # voxel coordinates
    semiaxes: np.ndarray  # voxels
    rotation: np.ndarray  # columns are the principal axes
    contrast: float


@dataclass
class Tube:
    p0: np.ndarray
    p1: np.ndarray
    radius: float  # voxels
    contrast: float


@dataclass
class PhantomLayout:
    nodes: list = field(default_factory=list)
    tubes: list = field(default_factory=list)


def _grid(dims, lo, hi):
    lo = np.maximum(np.floor(lo).astype(int), 0)
    hi = np.minimum(np.ceil(hi).astype(int) + 1, dims)
    axes = [np.arange(a, b, dtype=np.float64) for a, b in zip(lo, hi)]
    slices = tuple(slice(a, b) for a, b in zip(lo, hi))
    return slices, np.meshgrid(*axes, indexing="ij")


def node_indicator(dims, node: Node):
    """Boolean ellipsoid restricted to its bounding box: ``(slices, inside)``."""
    r = node.semiaxes.max() + 1
    slices, (x, y, z) = _grid(np.array(dims), node.center - r, node.center + r)
    d = np.stack([x - node.center[0], y - node.center[1], z - node.center[2]], -1)
    local = d @ node.rotation
    inside = np.sum((local / node.semiaxes) ** 2, axis=-1) <= 1.0
    return slices, inside


def segment_distance(points: np.ndarray, p0: np.ndarray, p1: np.ndarray) -> np.ndarray:
    d = p1 - p0
    t = np.clip(((points - p0) @ d) / max(float(d @ d), 1e-12), 0.0, 1.0)
    return np.linalg.norm(points - (p0 + t[..., None] * d), axis=-1)


def tube_indicator(dims, tube: Tube):
    lo = np.minimum(tube.p0, tube.p1) - tube.radius - 1
    hi = np.maximum(tube.p0, tube.p1) + tube.radius + 1
    slices, (x, y, z) = _grid(np.array(dims), lo, hi)
    pts = np.stack([x, y, z], -1)
    return slices, segment_distance(pts, tube.p0, tube.p1) <= tube.radius


def _soft_paint(image, dims, slices, inside, contrast):
    # smooth within a padded box so the soft edge is not clipped
    pad = int(np.ceil(3 * SOFT_EDGE_SIGMA)) + 1
    big = tuple(slice(max(s.start - pad, 0), min(s.stop + pad, n)) for s, n in zip(slices, dims))
    ind = np.zeros(tuple(b.stop - b.start for b in big))
    ind[tuple(slice(s.start - b.start, s.stop - b.start) for s, b in zip(slices, big))] = inside
    image[big] += contrast * ndi.gaussian_filter(ind, SOFT_EDGE_SIGMA, mode="constant", truncate=3.0)


def background_texture(dims, spec: PhantomSpec, rng) -> np.ndarray:
    noise = ndi.gaussian_filter(rng.standard_normal(dims), TEXTURE_SIGMA, mode="wrap")
    noise *= spec.noise_sigma / max(noise.std(), 1e-12)
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    coords = np.meshgrid(*[np.linspace(-0.5, 0.5, n) for n in dims], indexing="ij")
    ramp = spec.ramp * sum(c * w for c, w in zip(coords, direction))
    return spec.background + noise + ramp


def _uniform(rng, lo_hi):
    return float(rng.uniform(*lo_hi))


def _count(rng, lo_hi):
    return int(rng.integers(int(lo_hi[0]), int(lo_hi[1]) + 1))


def sample_layout(spec: PhantomSpec, rng) -> PhantomLayout:
    dims = np.array(spec.dims, dtype=np.float64)
    vox = float(np.mean(spec.spacing))
    layout = PhantomLayout()
    jitter = (1 - spec.contrast_jitter, 1 + spec.contrast_jitter)
    for _ in range(_count(rng, spec.n_tubes)):
        radius = _uniform(rng, spec.tube_radius) / vox
        length = _uniform(rng, spec.tube_length) / vox
        mid = rng.uniform(0, 1, 3) * (dims - 1)
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        half = 0.5 * length * direction
        layout.tubes.append(Tube(mid - half, mid + half, radius, spec.contrast * _uniform(rng, jitter)))
    for _ in range(_count(rng, spec.n_nodes)):
        for _attempt in range(MAX_ATTEMPTS):
            semi = np.array([_uniform(rng, spec.node_semiaxes) for _ in range(3)]) / vox
            rot = Rotation.random(random_state=rng).as_matrix()
            margin = semi.max() + spec.gap
            if np.any(dims - 1 - 2 * margin <= 0):
                raise DataError("volume too small for the requested node sizes")
            center = margin + rng.uniform(0, 1, 3) * (dims - 1 - 2 * margin)
            if _clear(center, semi.max() + spec.gap, layout):
                layout.nodes.append(Node(center, semi, rot, spec.contrast * _uniform(rng, jitter)))
                break
        else:
            raise DataError(f"could not place node after {MAX_ATTEMPTS} attempts")
    return layout


def _clear(center, reach, layout: PhantomLayout) -> bool:
    for n in layout.nodes:
        if np.linalg.norm(center - n.center) <= reach + n.semiaxes.max():
            return False
    for t in layout.tubes:
        if segment_distance(center[None], t.p0, t.p1)[0] <= reach + t.radius:
            return False
    return True


def render(spec: PhantomSpec, layout: PhantomLayout, rng) -> tuple[Volume, Volume]:
    dims = tuple(int(n) for n in spec.dims)
    image = background_texture(dims, spec, rng)
    mask = np.zeros(dims, dtype=np.uint16)
    for t in layout.tubes:
        slices, inside = tube_indicator(dims, t)
        _soft_paint(image, dims, slices, inside, t.contrast)
    for label, n in enumerate(layout.nodes, start=1):
        slices, inside = node_indicator(dims, n)
        _soft_paint(image, dims, slices, inside, n.contrast)
        mask[slices][inside] = label
    return Volume(image, spec.spacing, "image-f32"), Volume(mask, spec.spacing, "mask-u16")


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, Volume]:
    """Return ``(image, mask)``; mask labels nodes 1..n, tubes stay unlabeled."""
    rng = np.random.default_rng(spec.seed)
    layout = sample_layout(spec, rng)
    return render(spec, layout, rng)


def patient_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1, np.uint64)[0])


def patient_id(index: int) -> str:
    return f"{index:03d}"


def generate_benchmark(n_patients: int, spec: PhantomSpec, seed: int, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(n_patients):
        pid = patient_id(i)
        image, mask = generate_phantom(replace(spec, seed=patient_seed(seed, i)))
        rel = Path(f"p{pid}")
        save_volume(image, out / rel / "image.vaggvol")
        save_volume(mask, out / rel / "mask.vaggvol")
        rows.append((pid, str(rel / "image.vaggvol"), str(rel / "mask.vaggvol"), int(mask.data.max())))
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "image_path", "mask_path", "n_nodes"])
        w.writerows(rows)
    return out
