"""Spatial sparsifying transforms: orthonormal Haar wavelets and the forward-difference gradient.

Both act column-wise on ``(V, m)`` blocks so the same code serves the
coefficient matrix ``A`` (``V x N_Gamma``) and the signal ``S`` (``V x G``).

Gradient coefficients are stored site-major: row ``v * d + j`` holds the
partial derivative along axis ``j`` (x, y, z) at voxel ``v``. The difference
along an axis is ``u[i + 1] - u[i]`` and is 0 at the last index (replicate
boundary), so the adjoint is the usual negative divergence.
"""

from __future__ import annotations

import numpy as np

from .core import GridShape, from_grid, to_grid

__all__ = ["SpatialTransform", "iso_tv_norm", "HAAR", "GRADIENT"]

HAAR = "haar"
GRADIENT = "gradient"
_ALIASES = {"haar": HAAR, "gradient": GRADIENT, "tv": GRADIENT, "isotv": GRADIENT, "grad": GRADIENT}


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _haar_levels(dims) -> list[tuple[int, ...]]:
    # Mallat pyramid: keep splitting the approximation block while every axis is even
    sizes = []
    cur = tuple(dims)
    while all(n >= 2 for n in cur):
        sizes.append(cur)
        cur = tuple(n // 2 for n in cur)
    return sizes


class SpatialTransform:
    """Analysis operator ``Psi^T`` and its adjoint ``Psi`` on a voxel grid.

    Parameters
    ----------
    kind : {"haar", "gradient"}
        ``"tv"`` is accepted as an alias of ``"gradient"``.
    shape : GridShape
    """

    def __init__(self, kind: str, shape: GridShape):
        try:
            self.kind = _ALIASES[kind.lower()]
        except KeyError:
            raise ValueError(f"unknown spatial transform {kind!r}; use 'haar' or 'gradient'") from None
        self.shape = shape
        if self.kind == HAAR and not all(_is_pow2(n) for n in shape.dims):
            raise ValueError(f"Haar transform needs power-of-two grid dimensions, got {shape.dims}")
        self._levels = _haar_levels(shape.dims) if self.kind == HAAR else []

    def __repr__(self):
        return f"SpatialTransform({self.kind!r}, {self.shape!r})"

    @property
    def group_size(self) -> int:
        """Coefficients per site sharing one isotropic norm (1 for Haar)."""
        return self.shape.ndim if self.kind == GRADIENT else 1

    @property
    def n_psi(self) -> int:
        return self.shape.V * self.group_size

    def _check(self, x, rows):
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] != rows:
            raise ValueError(f"expected {rows} rows, got array of shape {x.shape}")
        return x, squeeze

    def analyze(self, columns: np.ndarray) -> np.ndarray:
        """Apply ``Psi^T`` to every column; returns ``(n_psi, m)``."""
        x, squeeze = self._check(columns, self.shape.V)
        out = self._haar_fwd(x) if self.kind == HAAR else self._grad_fwd(x)
        return out[:, 0] if squeeze else out

    def synthesize(self, coeffs: np.ndarray) -> np.ndarray:
        """Apply ``Psi`` (the adjoint of :meth:`analyze`) to every column."""
        c, squeeze = self._check(coeffs, self.n_psi)
        out = self._haar_inv(c) if self.kind == HAAR else self._grad_adj(c)
        return out[:, 0] if squeeze else out

    def norm_sq(self) -> float:
        """``lambda_max(Psi Psi^T)``: 1 for Haar, power iteration for the gradient."""
        if self.kind == HAAR:
            return 1.0
        from .core import spectral_norm_sq

        return spectral_norm_sq(self.analyze, self.synthesize, self.shape.V)

    # -- Haar ---------------------------------------------------------------

    def _haar_fwd(self, x):
        g = to_grid(x, self.shape).copy()
        s2 = np.sqrt(2.0)
        for size in self._levels:
            block = tuple(slice(0, n) for n in size)
            sub = g[block]
            for ax in range(self.shape.ndim):
                even = np.take(sub, np.arange(0, sub.shape[ax], 2), axis=ax)
                odd = np.take(sub, np.arange(1, sub.shape[ax], 2), axis=ax)
                sub = np.concatenate([(even + odd) / s2, (even - odd) / s2], axis=ax)
            g[block] = sub
        return from_grid(g, self.shape)

    def _haar_inv(self, c):
        g = to_grid(c, self.shape).copy()
        s2 = np.sqrt(2.0)
        for size in reversed(self._levels):
            block = tuple(slice(0, n) for n in size)
            sub = g[block]
            for ax in reversed(range(self.shape.ndim)):
                half = sub.shape[ax] // 2
                a = np.take(sub, np.arange(half), axis=ax)
                d = np.take(sub, np.arange(half, 2 * half), axis=ax)
                out = np.empty_like(sub)
                idx = [slice(None)] * sub.ndim
                idx[ax] = slice(0, None, 2)
                out[tuple(idx)] = (a + d) / s2
                idx[ax] = slice(1, None, 2)
                out[tuple(idx)] = (a - d) / s2
                sub = out
            g[block] = sub
        return from_grid(g, self.shape)

    # -- gradient -------------------------------------------------------------

    def _grad_fwd(self, x):
        g = to_grid(x, self.shape)
        d = self.shape.ndim
        out = np.zeros((self.shape.V, d, x.shape[1]))
        for ax in range(d):
            o = to_grid(out[:, ax, :], self.shape)
            lo = [slice(None)] * g.ndim
            hi = [slice(None)] * g.ndim
            lo[ax] = slice(0, -1)
            hi[ax] = slice(1, None)
            np.subtract(g[tuple(hi)], g[tuple(lo)], out=o[tuple(lo)])
        return out.reshape(self.shape.V * d, -1)

    def _grad_adj(self, c):
        d = self.shape.ndim
        parts = c.reshape(self.shape.V, d, -1)
        out = np.zeros((self.shape.V, c.shape[1]))
        res = to_grid(out, self.shape)
        for ax in range(d):
            p = to_grid(parts[:, ax, :], self.shape)
            lo = [slice(None)] * p.ndim
            hi = [slice(None)] * p.ndim
            lo[ax] = slice(0, -1)
            hi[ax] = slice(1, None)
            # adjoint of u -> u[i+1] - u[i] (i < n-1), 0 at i = n-1
            q = p[tuple(lo)]
            res[tuple(lo)] -= q
            res[tuple(hi)] += q
        return out


def iso_tv_norm(g: np.ndarray, ndim: int) -> float:
    """Sum over sites (and columns) of the Euclidean norm of the ``ndim`` partials."""
    g = np.asarray(g, dtype=float)
    if g.shape[0] % ndim:
        raise ValueError(f"row count {g.shape[0]} is not divisible by {ndim}")
    grouped = g.reshape((g.shape[0] // ndim, ndim) + g.shape[1:])
    return float(np.sqrt((grouped**2).sum(axis=1)).sum())
