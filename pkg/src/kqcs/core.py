"""Domain types, tensor I/O, per-direction Fourier transforms and power iteration.

Layout conventions used throughout the package:

* A spatial-angular signal is a ``V x G`` matrix: one row per voxel, one column
  per gradient direction.
* Voxels are enumerated x-fastest, i.e. a grid array indexed ``[x, y, z]`` is
  flattened with ``order="F"``.
* k-space grids are *centred*: the zero frequency of an axis of length ``n``
  sits at index ``n // 2``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "GridShape",
    "GradientScheme",
    "DiffusionVolume",
    "ComplexVolume",
    "to_grid",
    "from_grid",
    "fft_columns",
    "ifft_columns",
    "fft_per_direction",
    "ifft_per_direction",
    "spectral_norm_sq",
    "save_tensor",
    "load_tensor",
    "fibonacci_hemisphere",
]


@dataclass(frozen=True)
class GridShape:
    """Voxel grid size. ``nz`` is ``None`` for 2D slices."""

    nx: int
    ny: int
    nz: int | None = None

    def __post_init__(self):
        for n in self.dims:
            if int(n) != n or n < 1:
                raise ValueError(f"grid dimensions must be positive integers, got {self.dims}")

    @property
    def dims(self) -> tuple[int, ...]:
        if self.nz is None:
            return (self.nx, self.ny)
        return (self.nx, self.ny, self.nz)

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def V(self) -> int:
        return int(np.prod(self.dims))

    @classmethod
    def from_dims(cls, dims) -> "GridShape":
        dims = tuple(int(d) for d in dims)
        if len(dims) not in (2, 3):
            raise ValueError(f"expected 2 or 3 grid dimensions, got {len(dims)}")
        return cls(*dims)


@dataclass(frozen=True, eq=False)
class GradientScheme:
    """Single-shell q-space sampling: ``G`` unit directions and a b-value (s/mm^2)."""

    directions: np.ndarray
    b_value: float = 3000.0

    def __post_init__(self):
        d = np.array(self.directions, dtype=float)
        if d.ndim != 2 or d.shape[1] != 3 or d.shape[0] < 1:
            raise ValueError(f"directions must be a (G, 3) array, got shape {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("directions must be finite")
        norms = np.linalg.norm(d, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-12):
            raise ValueError("gradient directions must have unit norm")
        # antipodal duplicates carry no extra information for even signals
        gram = np.abs(d @ d.T)
        np.fill_diagonal(gram, 0.0)
        if np.any(gram > 1.0 - 1e-9):
            raise ValueError("duplicate gradient directions (up to antipodal symmetry)")
        d.setflags(write=False)
        object.__setattr__(self, "directions", d)
        object.__setattr__(self, "b_value", float(self.b_value))

    @property
    def G(self) -> int:
        return self.directions.shape[0]

    def subset(self, indices) -> "GradientScheme":
        return GradientScheme(self.directions[np.asarray(indices)], self.b_value)

    @classmethod
    def fibonacci(cls, n: int, b_value: float = 3000.0) -> "GradientScheme":
        return cls(fibonacci_hemisphere(n), b_value)

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["gx", "gy", "gz", "b"])
            for g in self.directions:
                writer.writerow([repr(float(c)) for c in g] + [repr(self.b_value)])

    @classmethod
    def load_csv(cls, path) -> "GradientScheme":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError(f"{path}: no gradient rows")
        try:
            dirs = np.array([[float(r["gx"]), float(r["gy"]), float(r["gz"])] for r in rows])
            bvals = {float(r["b"]) for r in rows}
        except KeyError as exc:
            raise ValueError(f"{path}: missing column {exc}") from None
        if len(bvals) != 1:
            raise ValueError(f"{path}: multi-shell schemes are not supported")
        return cls(dirs, bvals.pop())


def _check_block(data, shape: GridShape, scheme: GradientScheme, complex_ok: bool):
    arr = np.asarray(data)
    if arr.shape != (shape.V, scheme.G):
        raise ValueError(f"data shape {arr.shape} does not match (V, G) = ({shape.V}, {scheme.G})")
    if not complex_ok and np.iscomplexobj(arr):
        raise TypeError("DiffusionVolume data must be real")
    if not np.all(np.isfinite(arr)):
        raise ValueError("volume data must be finite")
    return arr


@dataclass(frozen=True, eq=False)
class DiffusionVolume:
    """Real spatial-angular signal ``S_{x,q}`` of shape ``(V, G)``."""

    shape: GridShape
    scheme: GradientScheme
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = _check_block(self.data, self.shape, self.scheme, complex_ok=False)
        object.__setattr__(self, "data", np.asarray(arr, dtype=float))

    def grid(self) -> np.ndarray:
        """Data as an ``(nx, ny[, nz], G)`` array."""
        return to_grid(self.data, self.shape)


@dataclass(frozen=True, eq=False)
class ComplexVolume:
    """Complex ``(V, G)`` block, typically centred k-space per direction."""

    shape: GridShape
    scheme: GradientScheme
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = _check_block(self.data, self.shape, self.scheme, complex_ok=True)
        object.__setattr__(self, "data", np.asarray(arr, dtype=complex))


def to_grid(block: np.ndarray, shape: GridShape) -> np.ndarray:
    """View a ``(V, m)`` block as ``(nx, ny[, nz], m)`` (x-fastest voxels)."""
    block = np.asarray(block)
    rev = tuple(range(shape.ndim))[::-1]
    if block.ndim == 1:
        return block.reshape(shape.dims[::-1]).transpose(rev)
    return block.reshape(shape.dims[::-1] + (block.shape[1],)).transpose(rev + (shape.ndim,))


def from_grid(grid: np.ndarray, shape: GridShape) -> np.ndarray:
    """Inverse of :func:`to_grid`."""
    grid = np.asarray(grid)
    rev = tuple(range(shape.ndim))[::-1]
    if grid.ndim == shape.ndim:
        return grid.transpose(rev).reshape(shape.V)
    return grid.transpose(rev + (shape.ndim,)).reshape(shape.V, grid.shape[-1])


def fft_columns(block: np.ndarray, shape: GridShape) -> np.ndarray:
    """Unitary, centred multi-dimensional DFT of every column of a ``(V, m)`` block."""
    if block.shape[0] != shape.V:
        raise ValueError(f"block has {block.shape[0]} rows, grid has {shape.V} voxels")
    axes = tuple(range(shape.ndim))
    k = np.fft.fftn(to_grid(block, shape), axes=axes, norm="ortho")
    return from_grid(np.fft.fftshift(k, axes=axes), shape)


def ifft_columns(block: np.ndarray, shape: GridShape) -> np.ndarray:
    """Inverse of :func:`fft_columns`."""
    if block.shape[0] != shape.V:
        raise ValueError(f"block has {block.shape[0]} rows, grid has {shape.V} voxels")
    axes = tuple(range(shape.ndim))
    k = np.fft.ifftshift(to_grid(block, shape), axes=axes)
    return from_grid(np.fft.ifftn(k, axes=axes, norm="ortho"), shape)


def fft_per_direction(v: DiffusionVolume) -> ComplexVolume:
    """Unitary spatial DFT of each diffusion direction."""
    return ComplexVolume(v.shape, v.scheme, fft_columns(v.data, v.shape))


def ifft_per_direction(v: ComplexVolume) -> ComplexVolume:
    return ComplexVolume(v.shape, v.scheme, ifft_columns(v.data, v.shape))


def spectral_norm_sq(apply, apply_adjoint, dim, iters: int = 500, tol: float = 1e-8, seed: int = 0) -> float:
    """Largest eigenvalue of ``apply_adjoint(apply(x))`` by power iteration.

    Parameters
    ----------
    apply, apply_adjoint : callable
        A linear operator and its adjoint, acting on arrays of shape ``dim``.
    dim : int or tuple of int
        Shape of the operator's input.
    iters : int
        Maximum number of power iterations.
    tol : float
        Stop once the relative change of the eigenvalue estimate is below ``tol``.
    seed : int
        Seed of the uniform random start vector.

    Returns
    -------
    float
        Estimate of ``||T||_2^2``.
    """
    shape = (dim,) if np.isscalar(dim) else tuple(dim)
    if int(np.prod(shape)) < 1:
        raise ValueError("operator dimension must be >= 1")
    x = np.random.default_rng(seed).uniform(0.0, 1.0, size=shape)
    x /= np.linalg.norm(x)
    estimate = 0.0
    for _ in range(iters):
        y = apply_adjoint(apply(x))
        nrm = np.linalg.norm(y)
        if not np.isfinite(nrm):
            raise FloatingPointError("non-finite value in power iteration; operator is invalid")
        if nrm == 0.0:
            return 0.0
        new = float(np.real(np.vdot(x, y)))
        x = y / nrm
        if abs(new - estimate) <= tol * abs(new):
            return new
        estimate = new
    return estimate


_DTYPES = {"f64": np.dtype("<f8"), "c128": np.dtype("<c16")}


def _tensor_paths(path):
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".bin")


def save_tensor(path, tensor) -> None:
    """Write ``<path>.json`` (header) and ``<path>.bin`` (raw little-endian payload)."""
    arr = np.asarray(tensor)
    if np.iscomplexobj(arr):
        tag = "c128"
    elif arr.dtype.kind in "fiub":
        tag = "f64"
    else:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    arr = np.ascontiguousarray(arr, dtype=_DTYPES[tag])
    header_path, payload_path = _tensor_paths(path)
    header = {"dtype": tag, "shape": list(arr.shape), "order": "row-major", "endian": "little"}
    header_path.write_text(json.dumps(header))
    payload_path.write_bytes(arr.tobytes(order="C"))


def load_tensor(path) -> np.ndarray:
    header_path, payload_path = _tensor_paths(path)
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{header_path}: malformed header ({exc})") from None
    if not isinstance(header, dict) or not {"dtype", "shape"} <= header.keys():
        raise ValueError(f"{header_path}: header must contain 'dtype' and 'shape'")
    if header["dtype"] not in _DTYPES:
        raise ValueError(f"{header_path}: unsupported dtype {header['dtype']!r}")
    if header.get("order", "row-major") != "row-major" or header.get("endian", "little") != "little":
        raise ValueError(f"{header_path}: only row-major little-endian payloads are supported")
    shape = header["shape"]
    if not isinstance(shape, list) or not all(isinstance(n, int) and n >= 0 for n in shape):
        raise ValueError(f"{header_path}: malformed shape {shape!r}")
    dtype = _DTYPES[header["dtype"]]
    payload = payload_path.read_bytes()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(payload) != expected:
        raise ValueError(f"{payload_path}: payload is {len(payload)} bytes, header implies {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def fibonacci_hemisphere(n: int) -> np.ndarray:
    """``n`` quasi-uniform unit vectors on the upper hemisphere (Fibonacci spiral).

    No two returned vectors are antipodal or equal.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    i = np.arange(n) + 0.5
    z = 1.0 - i / n
    r = np.sqrt(1.0 - z**2)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
