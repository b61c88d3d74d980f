"""Grid and field containers plus the ADGF binary field format.

Storage order is C-order with the last axis fastest everywhere: in memory,
in flat indices and in files. All values are float64.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

__all__ = [
    "Grid",
    "ScalarField",
    "VectorField",
    "TensorField",
    "ConcentrationSeries",
    "FieldFormatError",
    "tensor_entry_index",
    "write_field",
    "read_field",
    "write_series",
    "read_series",
]

MAGIC = b"ADGF"
FORMAT_VERSION = 1
KIND_SCALAR, KIND_VECTOR, KIND_TENSOR = 0, 1, 2

# Upper-triangle entries in storage order: (xx, xy, yy[, xz, yz, zz]).
_TENSOR_ENTRIES = {
    2: ((0, 0), (0, 1), (1, 1)),
    3: ((0, 0), (0, 1), (1, 1), (0, 2), (1, 2), (2, 2)),
}


class FieldFormatError(ValueError):
    """Raised for malformed ADGF files or series directories."""


def tensor_entry_index(ndim: int) -> tuple[tuple[int, int], ...]:
    """(row, col) pairs of the stored symmetric-tensor entries."""
    return _TENSOR_ENTRIES[ndim]


@dataclass(frozen=True)
class Grid:
    dims: tuple[int, ...]
    spacing: tuple[float, ...] = None

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        if len(dims) not in (2, 3):
            raise ValueError(f"grid must be 2D or 3D, got {len(dims)} axes")
        if any(n < 3 for n in dims):
            raise ValueError(f"every grid dimension must be >= 3, got {dims}")
        spacing = self.spacing
        if spacing is None:
            spacing = (1.0,) * len(dims)
        elif np.isscalar(spacing):
            spacing = (float(spacing),) * len(dims)
        spacing = tuple(float(h) for h in spacing)
        if len(spacing) != len(dims):
            raise ValueError("spacing must have one entry per axis")
        if not all(np.isfinite(h) and h > 0 for h in spacing):
            raise ValueError(f"spacing must be positive and finite, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.dims

    def flat_index(self, *index: int) -> int:
        return int(np.ravel_multi_index(index, self.dims))

    def unravel(self, flat: int) -> tuple[int, ...]:
        return tuple(int(i) for i in np.unravel_index(flat, self.dims))

    def coordinates(self) -> list[np.ndarray]:
        """Cell-centre coordinates, one broadcastable array per axis (origin at cell 0)."""
        axes = [np.arange(n) * h for n, h in zip(self.dims, self.spacing)]
        return list(np.meshgrid(*axes, indexing="ij"))

    def boundary_mask(self, width: int = 1) -> np.ndarray:
        mask = np.ones(self.dims, dtype=bool)
        inner = tuple(slice(width, n - width) for n in self.dims)
        mask[inner] = False
        return mask


def _frozen_array(values, shape, what) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.size != int(np.prod(shape)):
        raise ValueError(f"{what}: expected {int(np.prod(shape))} values, got {arr.size}")
    arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what}: non-finite values")
    arr.setflags(write=False)
    return arr


class _Field:
    kind: int
    grid: Grid

    @property
    def array(self) -> np.ndarray:
        raise NotImplementedError

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return self.grid == other.grid and self.array.tobytes() == other.array.tobytes()

    def __hash__(self):
        return hash((type(self).__name__, self.grid, self.array.tobytes()))


class ScalarField(_Field):
    """One float64 value per cell, stored with shape ``grid.dims``."""

    kind = KIND_SCALAR

    def __init__(self, grid: Grid, data):
        self.grid = grid
        self.data = _frozen_array(data, grid.dims, "ScalarField")

    @property
    def array(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"ScalarField(dims={self.grid.dims})"


class VectorField(_Field):
    """``ndim`` components stacked on a leading axis: shape ``(ndim, *dims)``."""

    kind = KIND_VECTOR

    def __init__(self, grid: Grid, components):
        if isinstance(components, (list, tuple)):
            components = [c.data if isinstance(c, ScalarField) else c for c in components]
        self.grid = grid
        self.components = _frozen_array(components, (grid.ndim, *grid.dims), "VectorField")

    @property
    def array(self) -> np.ndarray:
        return self.components

    def component(self, axis: int) -> ScalarField:
        return ScalarField(self.grid, self.components[axis])

    def norm(self) -> np.ndarray:
        return np.sqrt(np.sum(self.components**2, axis=0))

    def __repr__(self):
        return f"VectorField(dims={self.grid.dims})"


class TensorField(_Field):
    """Symmetric tensor per cell; entries ordered (xx, xy, yy[, xz, yz, zz]).

    Positive semi-definiteness is not enforced here.
    """

    kind = KIND_TENSOR

    def __init__(self, grid: Grid, entries):
        n = grid.ndim * (grid.ndim + 1) // 2
        self.grid = grid
        self.entries = _frozen_array(entries, (n, *grid.dims), "TensorField")

    @property
    def array(self) -> np.ndarray:
        return self.entries

    @classmethod
    def from_matrix(cls, grid: Grid, mat) -> "TensorField":
        """Build from full matrices shaped ``(*dims, d, d)``; the upper triangle is kept."""
        mat = np.asarray(mat, dtype=np.float64)
        return cls(grid, [mat[..., r, c] for r, c in tensor_entry_index(grid.ndim)])

    def matrix(self) -> np.ndarray:
        d = self.grid.ndim
        out = np.empty((*self.grid.dims, d, d))
        for k, (r, c) in enumerate(tensor_entry_index(d)):
            out[..., r, c] = self.entries[k]
            out[..., c, r] = self.entries[k]
        return out

    def entry(self, r: int, c: int) -> np.ndarray:
        r, c = min(r, c), max(r, c)
        return self.entries[tensor_entry_index(self.grid.ndim).index((r, c))]

    def __repr__(self):
        return f"TensorField(dims={self.grid.dims})"


AnyField = Union[ScalarField, VectorField, TensorField]


@dataclass
class ConcentrationSeries:
    frames: list
    dt: float
    t0: float = 0.0
    diagnostics: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.frames = [f if isinstance(f, ScalarField) else None for f in self.frames]
        if any(f is None for f in self.frames):
            raise TypeError("frames must be ScalarField instances")
        if len(self.frames) < 2:
            raise ValueError("a series needs at least 2 frames")
        grid = self.frames[0].grid
        if any(f.grid != grid for f in self.frames):
            raise ValueError("all frames must share one grid")
        self.dt = float(self.dt)
        self.t0 = float(self.t0)
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise ValueError(f"dt must be positive, got {self.dt}")

    @classmethod
    def from_array(cls, grid: Grid, arr, dt: float, t0: float = 0.0) -> "ConcentrationSeries":
        return cls([ScalarField(grid, a) for a in np.asarray(arr)], dt=dt, t0=t0)

    @property
    def grid(self) -> Grid:
        return self.frames[0].grid

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_frames)

    def to_array(self) -> np.ndarray:
        return np.stack([f.data for f in self.frames])

    def window(self, start: int, length: int) -> "ConcentrationSeries":
        if start < 0 or start + length > self.n_frames:
            raise ValueError("window outside the series")
        return ConcentrationSeries(
            self.frames[start:start + length], dt=self.dt, t0=self.t0 + start * self.dt
        )

    def __eq__(self, other):
        if not isinstance(other, ConcentrationSeries):
            return NotImplemented
        return (self.dt == other.dt and self.t0 == other.t0
                and len(self.frames) == len(other.frames)
                and all(a == b for a, b in zip(self.frames, other.frames)))


def _header(f: _Field) -> bytes:
    g = f.grid
    return (MAGIC
            + struct.pack("<III", FORMAT_VERSION, g.ndim, f.kind)
            + struct.pack(f"<{g.ndim}Q", *g.dims)
            + struct.pack(f"<{g.ndim}d", *g.spacing))


def encode_field(f: AnyField) -> bytes:
    if not isinstance(f, _Field):
        raise TypeError(f"cannot encode {type(f).__name__}")
    arr = f.array
    if not np.all(np.isfinite(arr)):
        raise ValueError("refusing to write non-finite data")
    return _header(f) + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def decode_field(buf: bytes) -> AnyField:
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise FieldFormatError("bad magic")
    version, ndim, kind = struct.unpack_from("<III", buf, 4)
    if version != FORMAT_VERSION:
        raise FieldFormatError(f"unsupported format version {version}")
    if ndim not in (2, 3) or kind not in (KIND_SCALAR, KIND_VECTOR, KIND_TENSOR):
        raise FieldFormatError(f"inconsistent header: ndim={ndim}, kind={kind}")
    off = 16
    if len(buf) < off + 16 * ndim:
        raise FieldFormatError("truncated header")
    dims = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    spacing = struct.unpack_from(f"<{ndim}d", buf, off)
    off += 8 * ndim
    try:
        grid = Grid(dims, spacing)
    except ValueError as exc:
        raise FieldFormatError(f"inconsistent dims/spacing: {exc}") from None
    ncomp = {KIND_SCALAR: 1, KIND_VECTOR: ndim, KIND_TENSOR: ndim * (ndim + 1) // 2}[kind]
    expected = ncomp * grid.size * 8
    payload = buf[off:]
    if len(payload) < expected:
        raise FieldFormatError(
            f"truncated payload: expected {expected // 8} values, found {len(payload) // 8}")
    if len(payload) > expected:
        raise FieldFormatError("trailing bytes after payload")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if kind == KIND_SCALAR:
        return ScalarField(grid, values)
    if kind == KIND_VECTOR:
        return VectorField(grid, values)
    return TensorField(grid, values)


def write_field(f: AnyField, path) -> None:
    """Write ``f`` as an ADGF file. Output bytes depend only on the field."""
    Path(path).write_bytes(encode_field(f))


def read_field(path) -> AnyField:
    return decode_field(Path(path).read_bytes())


MANIFEST = "manifest.json"


def write_series(series: ConcentrationSeries, directory) -> None:
    """One ADGF file per frame plus ``manifest.json`` with dt, t0 and frame order."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = max(3, len(str(series.n_frames - 1)))
    names = []
    for i, frame in enumerate(series.frames):
        name = f"frame_{i:0{width}d}.adgf"
        write_field(frame, directory / name)
        names.append(name)
    manifest = {"dt": series.dt, "t0": series.t0, "frames": names}
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")


def read_series(directory) -> ConcentrationSeries:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST).read_text())
    except FileNotFoundError:
        raise FieldFormatError(f"no {MANIFEST} in {directory}") from None
    if set(manifest) != {"dt", "t0", "frames"}:
        raise FieldFormatError(f"manifest keys must be dt, t0, frames; got {sorted(manifest)}")
    frames = []
    for name in manifest["frames"]:
        path = directory / name
        if not path.is_file():
            raise FieldFormatError(f"manifest references missing frame {name!r}")
        f = read_field(path)
        if not isinstance(f, ScalarField):
            raise FieldFormatError(f"frame {name!r} is not a scalar field")
        frames.append(f)
    return ConcentrationSeries(frames, dt=manifest["dt"], t0=manifest["t0"])


def as_grid(obj: Union[Grid, Sequence[int]]) -> Grid:
    return obj if isinstance(obj, Grid) else Grid(tuple(obj))
