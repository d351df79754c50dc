"""Uniform grids in one or two dimensions and vector fields sampled on them."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nfunc import DomainError
from .report import digest

__all__ = ["Grid", "VectorField", "write_field_csv", "read_field_csv",
           "write_field_binary", "read_field_binary"]

MAGIC = b"ODGF"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIQQ")   # 32 bytes


@dataclass(frozen=True)
class Grid:
    """Tensor grid with uniform spacing ``h``; ``origin`` is the first node."""

    shape: tuple[int, ...]
    h: float
    origin: tuple[float, ...]

    def __post_init__(self):
        shape = tuple(int(m) for m in self.shape)
        origin = tuple(float(o) for o in self.origin)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "h", float(self.h))
        if len(shape) not in (1, 2):
            raise DomainError("grid dimension must be 1 or 2")
        if len(origin) != len(shape):
            raise DomainError("origin and shape disagree in dimension")
        if any(m < 3 for m in shape):
            raise DomainError("need at least 3 nodes per axis")
        if not (self.h > 0 and np.isfinite(self.h)):
            raise DomainError("grid spacing must be positive")

    @classmethod
    def from_extents(cls, lower, upper, nodes) -> "Grid":
        """Grid whose first and last nodes sit on ``lower`` and ``upper``.

        ``nodes`` is the node count per axis; spacings must agree.
        """
        lower = np.atleast_1d(np.asarray(lower, float))
        upper = np.atleast_1d(np.asarray(upper, float))
        nodes = np.broadcast_to(np.atleast_1d(nodes), lower.shape)
        hs = (upper - lower) / (nodes - 1)
        if not np.allclose(hs, hs[0], rtol=1e-12, atol=0):
            raise DomainError("extents do not give a uniform spacing")
        return cls(tuple(int(m) for m in nodes), float(hs[0]), tuple(lower))

    @property
    def n(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def axes(self) -> list[np.ndarray]:
        return [o + self.h * np.arange(m) for o, m in zip(self.origin, self.shape)]

    def coords(self) -> np.ndarray:
        """Node coordinates with shape ``shape + (n,)``."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, bool)
        for ax in range(self.n):
            idx = [slice(None)] * self.n
            idx[ax] = 0
            mask[tuple(idx)] = True
            idx[ax] = -1
            mask[tuple(idx)] = True
        return mask

    def box_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Corners of the union of the cells centred at the nodes."""
        lo = np.asarray(self.origin) - self.h / 2
        hi = lo + self.h * np.asarray(self.shape)
        return lo, hi

    def scaled(self, t: float) -> "Grid":
        """The image of this grid under x -> x / t."""
        if not (t > 0 and np.isfinite(t)):
            raise DomainError("scale factor must be positive")
        return Grid(self.shape, self.h / t, tuple(o / t for o in self.origin))

    def translated(self, shift) -> "Grid":
        shift = np.broadcast_to(np.asarray(shift, float), (self.n,))
        return Grid(self.shape, self.h, tuple(np.asarray(self.origin) + shift))

    def to_spec(self) -> dict:
        return {"shape": list(self.shape), "h": self.h, "origin": list(self.origin)}

    def digest(self) -> str:
        return digest(self.to_spec())


@dataclass
class VectorField:
    """Values in R^N at every node of ``grid``; array shape ``grid.shape + (N,)``."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, float)
        if v.shape == self.grid.shape:
            v = v[..., None]
        if v.shape[:-1] != self.grid.shape:
            raise DomainError(f"field shape {v.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(v)):
            raise DomainError("field values must be finite")
        self.values = v

    @property
    def N(self) -> int:
        return self.values.shape[-1]

    @classmethod
    def constant(cls, grid: Grid, c) -> "VectorField":
        c = np.atleast_1d(np.asarray(c, float))
        return cls(grid, np.broadcast_to(c, grid.shape + c.shape).copy())

    def copy(self) -> "VectorField":
        return VectorField(self.grid, self.values.copy())

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1, self.N)

    def sup_norm(self, mask=None) -> float:
        mags = np.linalg.norm(self.values, axis=-1)
        if mask is not None:
            mags = mags[mask]
        return float(mags.max()) if mags.size else 0.0


def write_field_csv(field: VectorField, path) -> Path:
    """Rows of node index, coordinates and components; C order over nodes."""
    path = Path(path)
    g = field.grid
    xs = g.coords().reshape(-1, g.n)
    vals = field.flat()
    head = ["node"] + [f"x{i}" for i in range(g.n)] + [f"u{j}" for j in range(field.N)]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(head)
        for k in range(g.size):
            w.writerow([k] + [repr(float(c)) for c in xs[k]] + [repr(float(c)) for c in vals[k]])
    return path


def read_field_csv(path, grid: Grid) -> VectorField:
    with Path(path).open() as fh:
        rows = list(csv.reader(fh))
    head, body = rows[0], rows[1:]
    ncomp = sum(1 for c in head if c.startswith("u"))
    data = np.array([[float(x) for x in r[-ncomp:]] for r in body])
    return VectorField(grid, data.reshape(grid.shape + (ncomp,)))


def write_field_binary(field: VectorField, path) -> Path:
    """32-byte little-endian header then float64 values in row-major order."""
    g = field.grid
    m0 = g.shape[0]
    m1 = g.shape[1] if g.n == 2 else 1
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, g.n, field.N, m0, m1)
    path = Path(path)
    path.write_bytes(header + np.ascontiguousarray(field.values, dtype="<f8").tobytes())
    return path


def read_field_binary(path) -> tuple[tuple[int, ...], np.ndarray]:
    """Return (node shape, values) from a binary dump."""
    blob = Path(path).read_bytes()
    magic, version, n, N, m0, m1 = _HEADER.unpack_from(blob)
    if magic != MAGIC or version != FORMAT_VERSION:
        raise DomainError("not a field dump")
    shape = (m0,) if n == 1 else (m0, m1)
    vals = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size)
    return shape, vals.reshape(shape + (N,)).copy()
