"""3D scalar volumes, label masks and the VAGG-VOL file format.

Arrays are indexed ``data[x, y, z]``.  On disk the payload is little-endian
with x varying fastest, i.e. linear index ``x + nx * (y + ny * z)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

KINDS = ("image-f32", "mask-u16", "probmap-f32")
_DTYPES = {"f32": np.dtype("<f4"), "u16": np.dtype("<u2")}
_KIND_DTYPE = {"image-f32": "f32", "probmap-f32": "f32", "mask-u16": "u16"}


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind: str = "image-f32"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"unknown volume kind {self.kind!r}")
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise DataError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
            raise DataError(f"spacing must be three positive reals, got {self.spacing}")
        dtype = _DTYPES[_KIND_DTYPE[self.kind]]
        if self.kind == "mask-u16":
            if data.dtype.kind == "f" and not np.all(data == np.round(data)):
                raise DataError("mask labels must be integers")
            if data.size and (data.min() < 0 or data.max() > 65535):
                raise DataError("mask labels must lie in [0, 65535]")
        data = np.array(data, dtype=dtype.newbyteorder("="), copy=True, order="C")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def dtype_tag(self) -> str:
        return _KIND_DTYPE[self.kind]

    def linear_index(self, x: int, y: int, z: int) -> int:
        nx, ny, _ = self.dims
        return x + nx * (y + ny * z)

    def __getitem__(self, index):
        return self.data[index]

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.spacing == other.spacing
            and self.dims == other.dims
            and np.array_equal(self.data.view(np.uint8), other.data.view(np.uint8))
        )

    __hash__ = None


def save_volume(v: Volume, path) -> None:
    """Write ``<path>`` (header) plus a sibling ``.raw`` payload."""
    path = Path(path)
    raw_path = path.with_suffix(".raw")
    nx, ny, nz = v.dims
    header = (
        "VAGG-VOL 1\n"
        f"dims {nx} {ny} {nz}\n"
        f"spacing {v.spacing[0]!r} {v.spacing[1]!r} {v.spacing[2]!r}\n"
        f"dtype {v.dtype_tag}\n"
        f"kind {v.kind}\n"
        f"data {raw_path.name}\n"
    )
    payload = np.asarray(v.data, dtype=_DTYPES[v.dtype_tag]).ravel(order="F").tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    raw_path.write_bytes(payload)
    path.write_text(header, encoding="utf-8")


def _parse_header(text: str) -> dict:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != "VAGG-VOL 1":
        raise DataError("not a VAGG-VOL 1 header")
    fields = {}
    for ln in lines[1:]:
        key, _, rest = ln.partition(" ")
        if key in fields:
            raise DataError(f"duplicate header field {key!r}")
        fields[key] = rest.strip()
    for key in ("dims", "spacing", "dtype", "data"):
        if key not in fields:
            raise DataError(f"header lacks {key!r}")
    try:
        dims = tuple(int(t) for t in fields["dims"].split())
        spacing = tuple(float(t) for t in fields["spacing"].split())
    except ValueError as exc:
        raise DataError(f"malformed header: {exc}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise DataError(f"malformed dims {fields['dims']!r}")
    if len(spacing) != 3:
        raise DataError(f"malformed spacing {fields['spacing']!r}")
    if fields["dtype"] not in _DTYPES:
        raise DataError(f"unknown dtype {fields['dtype']!r}")
    fields["dims"], fields["spacing"] = dims, spacing
    return fields


def load_volume(path) -> Volume:
    path = Path(path)
    try:
        fields = _parse_header(path.read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read header {path}: {exc}") from None
    dtype = _DTYPES[fields["dtype"]]
    raw_path = path.parent / fields["data"]
    try:
        payload = raw_path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read payload {raw_path}: {exc}") from None
    expected = int(np.prod(fields["dims"])) * dtype.itemsize
    if len(payload) != expected:
        raise DataError(f"payload {raw_path} has {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype=dtype).reshape(fields["dims"], order="F")
    kind = fields.get("kind", "mask-u16" if fields["dtype"] == "u16" else "image-f32")
    if _KIND_DTYPE.get(kind) != fields["dtype"]:
        raise DataError(f"kind {kind!r} inconsistent with dtype {fields['dtype']!r}")
    return Volume(data, fields["spacing"], kind)


def _clamped_start(center: int, half: int, n: int) -> int:
    return min(max(center - half, 0), n - (2 * half + 1))


def clamp_center(dims, center, half: int) -> tuple[int, int, int]:
    """Shift ``center`` inward so the (2*half+1)^3 window fits inside ``dims``."""
    if half < 0:
        raise ValueError("half must be >= 0")
    size = 2 * half + 1
    if any(n < size for n in dims):
        raise DataError(f"volume {tuple(dims)} smaller than window {size}")
    return tuple(_clamped_start(int(c), half, int(n)) + half for c, n in zip(center, dims))


def crop_window(v: Volume, center, half: int) -> Volume:
    cx, cy, cz = clamp_center(v.dims, center, half)
    sl = tuple(slice(c - half, c + half + 1) for c in (cx, cy, cz))
    return Volume(v.data[sl], v.spacing, v.kind)


def as_volume(array, spacing=(1.0, 1.0, 1.0), kind="image-f32") -> Volume:
    return array if isinstance(array, Volume) else Volume(np.asarray(array), spacing, kind)
