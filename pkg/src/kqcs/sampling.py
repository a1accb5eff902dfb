"""Joint (k, q) undersampling masks and the selection operator ``U_{k,q}``.

k-masks are boolean arrays of length ``V`` in the centred k-space layout of
:func:`kqcs.core.fft_columns` (x-fastest). A separable mask shares one k-mask
across all selected q-directions; a non-separable mask has one k-mask per
selected direction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import ComplexVolume, GradientScheme, GridShape, to_grid

__all__ = [
    "SEPARABLE",
    "NONSEPARABLE",
    "KqMask",
    "KqMeasurements",
    "sample_count",
    "make_k_mask_radial",
    "make_k_mask_lines",
    "make_q_subset",
    "assemble_mask",
    "make_mask",
    "apply_mask",
    "adjoint_mask",
]

SEPARABLE = "separable"
NONSEPARABLE = "nonseparable"
_MODES = {"sep": SEPARABLE, "separable": SEPARABLE, "nonsep": NONSEPARABLE, "nonseparable": NONSEPARABLE}


def sample_count(fraction: float, n: int, floor: bool = False) -> int:
    """Number of samples kept out of ``n``: nearest integer, or the floor if requested."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"sampling fraction must be in (0, 1], got {fraction}")
    count = int(np.floor(fraction * n + 1e-9)) if floor else int(np.floor(fraction * n + 0.5))
    if count < 1:
        raise ValueError(f"fraction {fraction} of {n} keeps no samples")
    return count


def _centred_radius(shape: GridShape) -> np.ndarray:
    axes = [np.arange(n) - n // 2 for n in shape.dims]
    mesh = np.meshgrid(*axes, indexing="ij")
    r = np.sqrt(sum(m.astype(float) ** 2 for m in mesh))
    return r.reshape(shape.V, order="F")


def _centre_index(shape: GridShape) -> int:
    idx = 0
    stride = 1
    for n in shape.dims:
        idx += (n // 2) * stride
        stride *= n
    return idx


def _draw_with_anchor(rng, n, count, anchor, weights):
    if count >= n:
        return np.arange(n)
    rest = np.delete(np.arange(n), anchor)
    p = np.delete(weights, anchor)
    picked = rng.choice(rest, size=count - 1, replace=False, p=p / p.sum())
    return np.concatenate([[anchor], picked])


def make_k_mask_radial(shape: GridShape, fraction: float, seed: int = 0, power: float = 2.0,
                       floor: bool = False) -> np.ndarray:
    """Random k-mask with density ``(1 + r / r_max) ** -power``; the zero frequency is always kept."""
    count = sample_count(fraction, shape.V, floor)
    r = _centred_radius(shape)
    rmax = r.max() if r.max() > 0 else 1.0
    weights = (1.0 + r / rmax) ** (-power)
    rng = np.random.default_rng(seed)
    mask = np.zeros(shape.V, dtype=bool)
    mask[_draw_with_anchor(rng, shape.V, count, _centre_index(shape), weights)] = True
    return mask


def make_k_mask_lines(shape: GridShape, fraction: float, seed: int = 0, power: float = 2.0,
                      floor: bool = False) -> np.ndarray:
    """Fully sampled k_y lines at randomly drawn k_x positions (variable density around k_x = 0)."""
    if shape.ndim != 2:
        raise ValueError("line sampling is defined for 2D grids only")
    nx, ny = shape.dims
    count = sample_count(fraction, nx, floor)
    dist = np.abs(np.arange(nx) - nx // 2).astype(float)
    weights = (1.0 + dist / max(dist.max(), 1.0)) ** (-power)
    rng = np.random.default_rng(seed)
    cols = _draw_with_anchor(rng, nx, count, nx // 2, weights)
    grid = np.zeros((nx, ny), dtype=bool)
    grid[cols, :] = True
    return grid.reshape(shape.V, order="F")


def make_q_subset(scheme: GradientScheme, fraction: float, seed: int = 0, floor: bool = False) -> np.ndarray:
    """Quasi-uniform subset of gradient directions by greedy farthest-point selection.

    Distances are antipodally symmetric angles ``arccos |g_i . g_j|``; the first
    direction is drawn at random from ``seed``. Returns sorted indices.
    """
    G = scheme.G
    count = sample_count(fraction, G, floor)
    rng = np.random.default_rng(seed)
    cos = np.clip(np.abs(scheme.directions @ scheme.directions.T), 0.0, 1.0)
    ang = np.arccos(cos)
    chosen = [int(rng.integers(G))]
    nearest = ang[chosen[0]].copy()
    for _ in range(count - 1):
        nearest[chosen] = -1.0
        nxt = int(np.argmax(nearest))
        chosen.append(nxt)
        nearest = np.minimum(nearest, ang[nxt])
    return np.sort(np.array(chosen, dtype=int))


@dataclass(frozen=True, eq=False)
class KqMask:
    """Sampling pattern: selected q-directions and their k-space masks.

    ``k_masks`` has shape ``(1, V)`` for separable masks and ``(Q, V)`` otherwise.
    """

    mode: str
    shape: GridShape
    G: int
    q_indices: np.ndarray
    k_masks: np.ndarray = field(repr=False)
    seed: int | None = None

    def __post_init__(self):
        try:
            mode = _MODES[self.mode]
        except KeyError:
            raise ValueError(f"unknown mask mode {self.mode!r}") from None
        q = np.asarray(self.q_indices, dtype=int).ravel()
        k = np.atleast_2d(np.asarray(self.k_masks, dtype=bool))
        if q.size < 1 or q.size > self.G:
            raise ValueError(f"need 1 <= Q <= G, got Q={q.size}, G={self.G}")
        if np.any(np.diff(q) <= 0) or q[0] < 0 or q[-1] >= self.G:
            raise ValueError("q_indices must be sorted, distinct and within [0, G)")
        if k.shape[1] != self.shape.V:
            raise ValueError(f"k-masks have {k.shape[1]} entries, grid has {self.shape.V} voxels")
        expected = 1 if mode == SEPARABLE else q.size
        if k.shape[0] != expected:
            raise ValueError(f"{mode} mask needs {expected} k-mask(s), got {k.shape[0]}")
        if np.any(k.sum(axis=1) == 0):
            raise ValueError("every k-mask must keep at least one sample")
        q.setflags(write=False)
        k.setflags(write=False)
        object.__setattr__(self, "mode", mode)
        object.__setattr__(self, "q_indices", q)
        object.__setattr__(self, "k_masks", k)

    @property
    def Q(self) -> int:
        return self.q_indices.size

    def column_masks(self) -> np.ndarray:
        """``(V, Q)`` boolean matrix: the k-mask of each selected direction."""
        if self.mode == SEPARABLE:
            return np.repeat(self.k_masks.T, self.Q, axis=1)
        return self.k_masks.T.copy()

    @property
    def n_samples(self) -> int:
        return int(self.column_masks().sum())

    def as_nonseparable(self) -> "KqMask":
        return KqMask(NONSEPARABLE, self.shape, self.G, self.q_indices, self.column_masks().T, self.seed)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "dims": list(self.shape.dims),
            "G": self.G,
            "seed": self.seed,
            "q_indices": [int(i) for i in self.q_indices],
            "k_masks": [_rle_encode(m) for m in self.k_masks],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KqMask":
        shape = GridShape.from_dims(d["dims"])
        k = np.array([_rle_decode(r, shape.V) for r in d["k_masks"]], dtype=bool)
        return cls(d["mode"], shape, int(d["G"]), np.asarray(d["q_indices"], dtype=int), k, d.get("seed"))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "KqMask":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def k_grid(self, i: int = 0) -> np.ndarray:
        return to_grid(self.k_masks[i], self.shape)


def _rle_encode(mask) -> dict:
    mask = np.asarray(mask, dtype=bool)
    change = np.flatnonzero(np.diff(mask.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [mask.size]])
    return {"start": bool(mask[0]), "runs": [int(n) for n in np.diff(bounds)]}


def _rle_decode(rle: dict, n: int) -> np.ndarray:
    runs = [int(r) for r in rle["runs"]]
    if sum(runs) != n:
        raise ValueError(f"run lengths sum to {sum(runs)}, expected {n}")
    values = np.arange(len(runs)) % 2 == (0 if rle["start"] else 1)
    return np.repeat(values, runs)


@dataclass(frozen=True, eq=False)
class KqMeasurements:
    """Complex samples ordered by selected q-direction, then by k index within that direction's mask."""

    mask: KqMask
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=complex).ravel()
        if vals.size != self.mask.n_samples:
            raise ValueError(f"{vals.size} values for a mask with {self.mask.n_samples} samples")
        if not np.all(np.isfinite(vals)):
            raise ValueError("measurements must be finite")
        object.__setattr__(self, "values", vals)


def assemble_mask(mode: str, k_masks, q_indices, shape: GridShape, G: int, seed=None) -> KqMask:
    return KqMask(mode, shape, G, np.sort(np.asarray(q_indices, dtype=int)), np.atleast_2d(k_masks), seed)


def make_mask(shape: GridShape, scheme: GradientScheme, k_frac: float, q_frac: float, seed: int = 0,
              mode: str = SEPARABLE, k_scheme: str = "radial", power: float = 2.0,
              floor: bool = False) -> KqMask:
    """Draw a complete (k, q) mask. Per-direction k-masks use seeds ``seed + 1 + i``."""
    q = make_q_subset(scheme, q_frac, seed, floor)
    maker = {"radial": make_k_mask_radial, "lines": make_k_mask_lines}[k_scheme]
    if _MODES[mode] == SEPARABLE:
        k = maker(shape, k_frac, seed, power, floor)[None, :]
    else:
        k = np.array([maker(shape, k_frac, seed + 1 + i, power, floor) for i in range(q.size)])
    return assemble_mask(mode, k, q, shape, scheme.G, seed)


def apply_mask(m: KqMask, F) -> KqMeasurements:
    """Select the sampled entries of a full ``(V, G)`` k-space block."""
    data = F.data if isinstance(F, ComplexVolume) else np.asarray(F)
    if data.shape != (m.shape.V, m.G):
        raise ValueError(f"volume shape {data.shape} does not match mask ({m.shape.V}, {m.G})")
    sub = data[:, m.q_indices]
    cm = m.column_masks()
    return KqMeasurements(m, sub.T[cm.T])


def adjoint_mask(m: KqMask, y, scheme: GradientScheme | None = None):
    """Zero-filled ``(V, G)`` block from measurements (``U^*``).

    Returns a :class:`ComplexVolume` when ``scheme`` is given, else the raw array.
    """
    values = y.values if isinstance(y, KqMeasurements) else np.asarray(y, dtype=complex).ravel()
    cm = m.column_masks()
    if values.size != cm.sum():
        raise ValueError(f"{values.size} values for a mask with {int(cm.sum())} samples")
    sub_t = np.zeros((m.Q, m.shape.V), dtype=complex)
    sub_t[cm.T] = values
    out = np.zeros((m.shape.V, m.G), dtype=complex)
    out[:, m.q_indices] = sub_t.T
    if scheme is not None:
        return ComplexVolume(m.shape, scheme, out)
    return out
