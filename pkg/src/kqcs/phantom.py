"""Synthetic crossing-fibre HARDI phantom.

Each fibre is a straight cylindrical tract. A voxel whose centre projects onto
the tract axis and lies within ``radius`` of it is covered by that fibre. The
signal of a voxel covered by fibres ``1..n`` is

    S(g) = S0 * sum_i (1/n) * exp(-b * g^T D_i g)

with ``D_i`` the cylindrically symmetric tensor (axial, radial diffusivity)
aligned with fibre ``i``. Uncovered voxels get an isotropic tensor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ComplexVolume, DiffusionVolume, GradientScheme, GridShape, fft_per_direction

__all__ = [
    "Fiber",
    "PhantomSpec",
    "default_phantom_spec",
    "generate_phantom",
    "add_noise",
    "rician_std",
    "to_kspace",
    "tensor_signal",
]


@dataclass(frozen=True)
class Fiber:
    """Straight tract from ``start`` to ``end`` (voxel coordinates) with a radius in voxels."""

    start: tuple
    end: tuple
    radius: float = 2.5

    @property
    def direction(self) -> np.ndarray:
        v = np.zeros(3)
        seg = np.subtract(self.end, self.start, dtype=float)
        v[: seg.size] = seg
        n = np.linalg.norm(v)
        if n == 0:
            raise ValueError("fibre start and end coincide")
        return v / n


@dataclass(frozen=True, eq=False)
class PhantomSpec:
    shape: GridShape
    scheme: GradientScheme
    fibers: tuple
    axial: float = 1.7e-3
    radial: float = 0.3e-3
    iso: float | None = None
    snr: float = 30.0
    seed: int = 0
    s0: float = 1.0

    def __post_init__(self):
        if not self.fibers:
            raise ValueError("phantom needs at least one fibre")
        if not (self.axial > self.radial > 0):
            raise ValueError("need axial > radial > 0 diffusivities")
        if self.snr <= 0:
            raise ValueError("snr must be positive")
        centre = (np.array(self.shape.dims, dtype=float) - 1.0) / 2.0
        limit = min(self.shape.dims) / 2.0
        for f in self.fibers:
            for p in (f.start, f.end):
                if len(p) != self.shape.ndim:
                    raise ValueError(f"fibre endpoint {p} does not match a {self.shape.ndim}D grid")
                if np.linalg.norm(np.asarray(p, dtype=float) - centre) > limit:
                    raise ValueError(f"fibre endpoint {p} lies outside the inscribed sphere")

    @property
    def iso_diffusivity(self) -> float:
        """Isotropic diffusivity of uncovered voxels (defaults to the fibre tensor's mean diffusivity)."""
        return self.iso if self.iso is not None else (self.axial + 2.0 * self.radial) / 3.0


def default_phantom_spec(size: int = 32, n_dirs: int = 64, b_value: float = 3000.0, snr: float = 30.0,
                         seed: int = 0, radius: float | None = None) -> PhantomSpec:
    """Two orthogonal tracts crossing at the centre plus a diagonal tract in one quadrant."""
    if size < 8:
        raise ValueError("phantom size must be >= 8")
    c = (size - 1) / 2.0
    R = size / 2.0
    r = radius if radius is not None else max(1.0, size * 2.5 / 32.0)
    reach = R - 1.0
    a, b = 5.0 * size / 32.0, 11.0 * size / 32.0
    fibers = (
        Fiber((c - reach, c), (c + reach, c), r),
        Fiber((c, c - reach), (c, c + reach), r),
        Fiber((c + a, c + b), (c + b, c + a), r * 0.8),
    )
    scheme = GradientScheme.fibonacci(n_dirs, b_value)
    return PhantomSpec(GridShape(size, size), scheme, fibers, snr=snr, seed=seed)


def tensor_signal(directions, fiber_dir, b, axial, radial):
    """``exp(-b g^T D g)`` for a cylindrically symmetric tensor along ``fiber_dir``."""
    cos2 = (np.asarray(directions) @ np.asarray(fiber_dir)) ** 2
    return np.exp(-b * (radial + (axial - radial) * cos2))


def _coverage(spec: PhantomSpec):
    grids = np.meshgrid(*[np.arange(n, dtype=float) for n in spec.shape.dims], indexing="ij")
    pts = np.column_stack([g.reshape(-1, order="F") for g in grids])
    covered = []
    for f in spec.fibers:
        p0 = np.asarray(f.start, dtype=float)
        seg = np.asarray(f.end, dtype=float) - p0
        length = np.linalg.norm(seg)
        u = seg / length
        rel = pts - p0
        t = rel @ u
        perp = np.linalg.norm(rel - np.outer(t, u), axis=1)
        covered.append((t >= 0) & (t <= length) & (perp <= f.radius + 1e-9))
    return np.array(covered)


def generate_phantom(spec: PhantomSpec):
    """Noise-free phantom volume and per-voxel ground-truth fibre directions.

    Returns
    -------
    clean : DiffusionVolume
    directions : list of ndarray
        For each voxel, a ``(n_i, 3)`` array of the fibre directions covering it
        (``n_i = 0`` for isotropic voxels).
    """
    g = spec.scheme.directions
    b = spec.scheme.b_value
    cover = _coverage(spec)
    fiber_sig = np.array([tensor_signal(g, f.direction, b, spec.axial, spec.radial) for f in spec.fibers])
    iso_sig = np.full(spec.scheme.G, np.exp(-b * spec.iso_diffusivity))
    counts = cover.sum(axis=0)
    data = np.empty((spec.shape.V, spec.scheme.G))
    dirs = []
    fdirs = np.array([f.direction for f in spec.fibers])
    for v in range(spec.shape.V):
        n = counts[v]
        if n == 0:
            data[v] = iso_sig
            dirs.append(np.zeros((0, 3)))
        else:
            idx = np.flatnonzero(cover[:, v])
            data[v] = fiber_sig[idx].mean(axis=0)
            dirs.append(fdirs[idx])
    return DiffusionVolume(spec.shape, spec.scheme, spec.s0 * data), dirs


def add_noise(v: DiffusionVolume, snr: float, seed: int = 0, s0: float = 1.0) -> DiffusionVolume:
    """Rician noise: magnitude of the signal plus complex Gaussian noise with ``sigma = s0 / snr``.

    ``snr = inf`` returns the input unchanged.
    """
    if not snr > 0:
        raise ValueError("snr must be positive")
    if np.isinf(snr):
        return DiffusionVolume(v.shape, v.scheme, v.data.copy())
    sigma = s0 / snr
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=(2,) + v.data.shape)
    return DiffusionVolume(v.shape, v.scheme, np.hypot(v.data + noise[0], noise[1]))


def rician_std(signal: float, sigma: float) -> float:
    """Standard deviation of a Rician variable with amplitude ``signal`` and noise ``sigma``."""
    from scipy.special import ive

    x = signal**2 / (4.0 * sigma**2)
    # mean = sigma sqrt(pi/2) L_{1/2}(-nu^2 / 2 sigma^2), written with scaled Bessel functions
    mean = sigma * np.sqrt(np.pi / 2.0) * ((1.0 + 2.0 * x) * ive(0, x) + 2.0 * x * ive(1, x))
    second = 2.0 * sigma**2 + signal**2
    return float(np.sqrt(second - mean**2))


def to_kspace(v: DiffusionVolume) -> ComplexVolume:
    """Retrospective k-space of a spatial-domain volume."""
    return fft_per_direction(v)
