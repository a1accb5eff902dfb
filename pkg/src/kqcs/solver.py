"""Kronecker-separable smoothed FISTA for joint (k, q) reconstruction.

Two models over the angular coefficient matrix ``A`` (``V x N_Gamma``), both
with the data term ``f(A) = 1/2 || U(F A Gamma^T) - y ||_F^2``:

* SAAS:  ``f(A) + lam * || Psi^T A ||_1``
* Prior: ``f(A) + lam * || A ||_1 + lam2 * || Psi^T A Gamma^T ||_1``

The analysis terms are replaced by their Moreau envelopes (Huber functions)
with parameter ``mu = lam / rho``; ``rho`` grows geometrically (continuation)
and FISTA momentum restarts at every increase. For the gradient transform the
l1 norm is the isotropic l2,1 norm and the group Huber envelope is used.

Nothing here ever forms ``Gamma (x) Psi``: the forward model only needs the
``Q`` sampled rows of ``Gamma`` and ``Q`` FFTs per evaluation.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .angular import AngularDictionary
from .core import GridShape, from_grid, spectral_norm_sq, to_grid
from .sampling import KqMask, KqMeasurements, adjoint_mask
from .spatial import SpatialTransform

__all__ = [
    "SolverConfig",
    "SolveReport",
    "KqProblem",
    "shrink",
    "shrink_group",
    "huber_env_grad",
    "grad_f",
    "compute_stepsize",
    "solve_saas",
    "solve_prior",
    "solve",
]

logger = logging.getLogger(__name__)


def shrink(x, mu: float):
    """Soft thresholding ``sign(x) * max(|x| - mu, 0)``."""
    if mu < 0:
        raise ValueError("threshold must be >= 0")
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.maximum(np.abs(x) - mu, 0.0)


def _group_norms(X, d):
    """Per-site Euclidean norms of consecutive ``d``-row blocks, shaped ``(sites, 1, ...)``."""
    X = np.asarray(X, dtype=float)
    if X.shape[0] % d:
        raise ValueError(f"row count {X.shape[0]} is not divisible by group size {d}")
    grouped = X.reshape((X.shape[0] // d, d) + X.shape[1:])
    sq = grouped[:, 0] ** 2
    for j in range(1, d):
        sq += grouped[:, j] ** 2
    return grouped, np.sqrt(sq)[:, None]


def shrink_group(X, mu: float, d: int):
    """Group soft thresholding over consecutive blocks of ``d`` rows (one block per site)."""
    if mu < 0:
        raise ValueError("threshold must be >= 0")
    grouped, norms = _group_norms(X, d)
    scale = np.maximum(norms - mu, 0.0) / np.where(norms > 0, norms, 1.0)
    return (grouped * scale).reshape(np.shape(X))


def huber_env_grad(X, mu: float, d: int = 1, need_grad: bool = True):
    """Moreau envelope of the l1 (``d == 1``) or l2,1 norm and its gradient.

    Per entry (or per ``d``-row group with ``r`` its Euclidean norm) the value is
    ``r**2 / (2 mu)`` if ``r < mu`` else ``r - mu / 2``; the gradient is
    ``(X - shrink_mu(X)) / mu``, computed as ``X / max(r, mu)``.
    """
    if mu <= 0:
        raise ValueError("smoothing parameter must be > 0")
    X = np.asarray(X, dtype=float)
    if d == 1:
        grouped, r = X, np.abs(X)
    else:
        grouped, r = _group_norms(X, d)
    # with m = min(r, mu) both branches read m**2 / (2 mu) + (r - m)
    m = np.minimum(r, mu)
    value = float(np.vdot(m, m)) / (2.0 * mu) + float(r.sum() - m.sum())
    if not need_grad:
        return value, None
    grad = grouped / np.maximum(r, mu)
    return value, grad.reshape(X.shape)


@dataclass
class SolverConfig:
    """FISTA and continuation parameters.

    ``lam`` weights the SAAS penalty, or the ``||A||_1`` term of the Prior
    model; ``lam2`` weights the Prior's spatial term. ``rho`` is multiplied by
    ``rho_factor`` every ``rho_every`` iterations (or earlier, once the current
    stage has converged) until it reaches ``rho_max``.

    With ``fixed_point_check`` a stalled objective at ``rho_max`` only counts
    as convergence once ``||A - step(A)|| / max(1, ||A||) < 10 * eps``.
    """

    lam: float = 1e-2
    lam2: float = 0.0
    rho_init: float = 1.0
    rho_factor: float = 2.0
    rho_max: float = 16.0
    rho_every: int = 50
    eps: float = 1e-6
    window: int = 5
    max_iters: int = 2000
    stepsize: float | None = None
    fixed_point_check: bool = True

    def __post_init__(self):
        if self.lam < 0 or self.lam2 < 0:
            raise ValueError("regularisation weights must be >= 0")
        if self.rho_init <= 0 or self.rho_factor <= 1 or self.rho_max < self.rho_init:
            raise ValueError("need rho_init > 0, rho_factor > 1 and rho_max >= rho_init")
        if self.eps <= 0 or self.max_iters < 1 or self.window < 1 or self.rho_every < 1:
            raise ValueError("need eps > 0 and positive iteration counts")


@dataclass
class SolveReport:
    model: str
    A_hat: np.ndarray = field(repr=False)
    objective_trace: list = field(repr=False)
    rho_trace: list = field(repr=False)
    segment_starts: list
    iterations_run: int
    final_L: float
    final_rho: float
    converged: bool
    config: SolverConfig

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "iterations_run": self.iterations_run,
            "final_L": self.final_L,
            "final_rho": self.final_rho,
            "converged": self.converged,
            "segment_starts": self.segment_starts,
            "objective_trace": [float(v) for v in self.objective_trace],
            "rho_trace": [float(v) for v in self.rho_trace],
            "config": asdict(self.config),
            "A_shape": list(self.A_hat.shape),
        }


class KqProblem:
    """Data term of one reconstruction: mask, measurements and dictionary restricted to sampled rows."""

    def __init__(self, y: KqMeasurements, mask: KqMask, dictionary: AngularDictionary, spatial: SpatialTransform):
        if y.mask is not mask and y.values.size != mask.n_samples:
            raise ValueError("measurements do not belong to this mask")
        if dictionary.G != mask.G:
            raise ValueError(f"dictionary has {dictionary.G} directions, mask expects {mask.G}")
        if spatial.shape != mask.shape:
            raise ValueError("spatial transform and mask are defined on different grids")
        self.shape: GridShape = mask.shape
        self.mask = mask
        self.dictionary = dictionary
        self.spatial = spatial
        self.gamma = dictionary.atoms
        self.gamma_q = dictionary.atoms[mask.q_indices]
        axes = tuple(range(self.shape.ndim))
        self._axes = axes
        # keep masks and data in unshifted FFT layout to skip the shifts per iteration
        cm = mask.column_masks()
        self._mask_grid = np.fft.ifftshift(self._grid(cm), axes=axes)
        full = adjoint_mask(mask, y)[:, mask.q_indices]
        self._data_grid = np.fft.ifftshift(self._grid(full), axes=axes)
        self.data_norm_sq = float(np.vdot(y.values, y.values).real)
        self._gamma_norm_sq = None
        self._psi_norm_sq = None

    def _grid(self, block):
        return to_grid(block, self.shape)

    def _flat(self, grid):
        return from_grid(grid, self.shape)

    @property
    def gamma_norm_sq(self) -> float:
        if self._gamma_norm_sq is None:
            self._gamma_norm_sq = self.dictionary.gram_norm_sq()
        return self._gamma_norm_sq

    @property
    def gamma_q_norm_sq(self) -> float:
        """``lambda_max`` of the Gram matrix of the sampled dictionary rows.

        ``U F`` has operator norm at most 1, so this bounds the Lipschitz
        constant of ``grad f`` and is never larger than the full-Gram bound.
        """
        gq = self.gamma_q
        return float(np.linalg.eigvalsh(gq @ gq.T)[-1])

    @property
    def psi_norm_sq(self) -> float:
        if self._psi_norm_sq is None:
            self._psi_norm_sq = self.spatial.norm_sq()
        return self._psi_norm_sq

    def residual(self, A):
        """k-space residual grid ``U^* (U F A Gamma_q^T - y)`` in unshifted layout."""
        X = self._grid(A @ self.gamma_q.T)
        K = np.fft.fftn(X, axes=self._axes, norm="ortho")
        return np.where(self._mask_grid, K - self._data_grid, 0.0)

    def f_value(self, A) -> float:
        R = self.residual(A)
        return 0.5 * float(np.vdot(R, R).real)

    def f_value_grad(self, A):
        R = self.residual(A)
        back = np.fft.ifftn(R, axes=self._axes, norm="ortho").real
        return 0.5 * float(np.vdot(R, R).real), self._flat(back) @ self.gamma_q

    # smoothed analysis terms lam * g_{lam/rho}(...): value and gradient

    def saas_penalty(self, A, lam, rho, need_grad=True):
        if lam == 0:
            return 0.0, (np.zeros_like(A) if need_grad else None)
        value, g = huber_env_grad(self.spatial.analyze(A), lam / rho, self.spatial.group_size, need_grad)
        return lam * value, (lam * self.spatial.synthesize(g) if need_grad else None)

    def prior_penalty(self, A, lam2, rho, need_grad=True):
        if lam2 == 0:
            return 0.0, (np.zeros_like(A) if need_grad else None)
        Z = self.spatial.analyze(A @ self.gamma.T)
        value, g = huber_env_grad(Z, lam2 / rho, self.spatial.group_size, need_grad)
        return lam2 * value, (lam2 * self.spatial.synthesize(g) @ self.gamma if need_grad else None)

    def saas_exact(self, A, lam) -> float:
        """Unsmoothed SAAS objective."""
        return self.f_value(A) + lam * _penalty_norm(self.spatial, self.spatial.analyze(A))

    def prior_exact(self, A, lam1, lam2) -> float:
        Z = self.spatial.analyze(A @ self.gamma.T)
        return self.f_value(A) + lam1 * float(np.abs(A).sum()) + lam2 * _penalty_norm(self.spatial, Z)


def _penalty_norm(spatial, Z):
    d = spatial.group_size
    if d == 1:
        return float(np.abs(Z).sum())
    _, r = _group_norms(Z, d)
    return float(r.sum())


def grad_f(A, dictionary: AngularDictionary, mask: KqMask, y: KqMeasurements) -> np.ndarray:
    """Gradient of ``1/2 || U(F A Gamma^T) - y ||^2`` with respect to real ``A``."""
    from .spatial import SpatialTransform as _ST

    A = np.asarray(A, dtype=float)
    if A.shape != (mask.shape.V, dictionary.n_atoms):
        raise ValueError(f"A must be ({mask.shape.V}, {dictionary.n_atoms}), got {A.shape}")
    # the spatial transform plays no part in f; a gradient transform is valid on any grid
    problem = KqProblem(y, mask, dictionary, _ST("gradient", mask.shape))
    return problem.f_value_grad(A)[1]


def compute_stepsize(dictionary: AngularDictionary, spatial: SpatialTransform, rho: float,
                     model: str = "saas") -> float:
    """Lipschitz bound of the smoothed objective's gradient.

    SAAS: ``lambda_max(Gamma^T Gamma) + rho * lambda_max(Psi Psi^T)``.
    Prior: ``lambda_max(Gamma^T Gamma) * (1 + rho * lambda_max(Psi Psi^T))``.

    The solvers use the same bounds with the data term's ``Gamma`` restricted
    to the sampled directions (see :attr:`KqProblem.gamma_q_norm_sq`).
    """
    lg = dictionary.gram_norm_sq()
    lp = spatial.norm_sq()
    return _stepsize(model, lg, lg, lp, rho, True)


def _stepsize(model, l_data, lg, lp, rho, smooth_active):
    if not smooth_active:
        return l_data
    if model == "saas":
        return l_data + rho * lp
    return l_data + rho * lp * lg


class _Model:
    """Smoothed objective pieces shared by the FISTA loop and the diagnostics."""

    def __init__(self, name, problem: KqProblem, cfg: SolverConfig):
        self.name = name
        self.problem = problem
        self.cfg = cfg
        if name == "saas":
            self.smooth_weight, self.prox_weight = cfg.lam, 0.0
        elif name == "prior":
            self.smooth_weight, self.prox_weight = cfg.lam2, cfg.lam
        else:
            raise ValueError(f"unknown model {name!r}")

    @property
    def smooth_active(self) -> bool:
        return self.smooth_weight > 0

    def stepsize(self, rho) -> float:
        if self.cfg.stepsize is not None:
            return float(self.cfg.stepsize)
        p = self.problem
        if not self.smooth_active:
            return p.gamma_q_norm_sq
        lg = p.gamma_norm_sq if self.name == "prior" else 0.0
        return _stepsize(self.name, p.gamma_q_norm_sq, lg, p.psi_norm_sq, rho, True)

    def penalty(self, A, rho, need_grad=True):
        if self.name == "saas":
            return self.problem.saas_penalty(A, self.smooth_weight, rho, need_grad)
        return self.problem.prior_penalty(A, self.smooth_weight, rho, need_grad)

    def smooth_grad(self, A, rho):
        fg = self.problem.f_value_grad(A)[1]
        return fg + self.penalty(A, rho)[1]

    def objective(self, A, rho) -> float:
        """Smoothed objective (plus the exact ``lam ||A||_1`` term for the Prior)."""
        value = self.problem.f_value(A) + self.penalty(A, rho, need_grad=False)[0]
        if self.prox_weight:
            value += self.prox_weight * float(np.abs(A).sum())
        return value

    def step(self, Y, rho, L):
        A = Y - self.smooth_grad(Y, rho) / L
        if self.prox_weight:
            A = shrink(A, self.prox_weight / L)
        return A


def prox_grad_residual(report: SolveReport, problem: KqProblem) -> float:
    """``||A - step(A)||_F / max(1, ||A||_F)`` at the returned solution and final rho."""
    model = _Model(report.model, problem, report.config)
    return _fixed_point_gap(model, report.A_hat, report.final_rho, report.final_L)


def _fixed_point_gap(model, A, rho, L):
    return float(np.linalg.norm(A - model.step(A, rho, L)) / max(1.0, np.linalg.norm(A)))


def _fista(model: _Model, progress=None) -> SolveReport:
    cfg = model.cfg
    p = model.problem
    shape = (p.shape.V, p.dictionary.n_atoms)
    A = np.zeros(shape)
    A_prev = A
    Y = A
    t = 1.0
    rho = cfg.rho_init if model.smooth_active else cfg.rho_max
    L = model.stepsize(rho)
    trace, rhos, starts = [], [], [0]
    seg_start = 0
    converged = False
    next_check = 0
    it = 0
    for it in range(1, cfg.max_iters + 1):
        A = model.step(Y, rho, L)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        Y = A + ((t - 1.0) / t_next) * (A - A_prev)
        A_prev, t = A, t_next

        obj = model.objective(A, rho)
        if not np.isfinite(obj):
            raise FloatingPointError(f"non-finite objective at iteration {it} (rho={rho}, L={L})")
        trace.append(obj)
        rhos.append(rho)
        if progress is not None:
            progress(it, obj, rho)

        seg_len = len(trace) - seg_start
        stalled = False
        if seg_len > cfg.window:
            old = trace[-1 - cfg.window]
            stalled = abs(obj - old) <= cfg.eps * max(abs(old), np.finfo(float).tiny)
        at_max = rho >= cfg.rho_max
        if stalled and at_max and it >= next_check:
            if not cfg.fixed_point_check or _fixed_point_gap(model, A, rho, L) < 10.0 * cfg.eps:
                converged = True
                break
            next_check = it + cfg.window
        if not at_max and (stalled or seg_len >= cfg.rho_every):
            rho = min(rho * cfg.rho_factor, cfg.rho_max)
            L = model.stepsize(rho)
            Y, A_prev, t = A, A, 1.0
            seg_start = len(trace)
            starts.append(seg_start)
    logger.debug("%s: %d iterations, converged=%s, rho=%g", model.name, it, converged, rho)
    return SolveReport(model.name, A, trace, rhos, starts, it, float(L), float(rho), converged, cfg)


def solve_saas(y: KqMeasurements, mask: KqMask, dictionary: AngularDictionary, spatial: SpatialTransform,
               cfg: SolverConfig | None = None, progress=None) -> SolveReport:
    """Minimise ``f(A) + lam * g_{lam/rho}(Psi^T A)`` by Kron-SFISTA."""
    problem = KqProblem(y, mask, dictionary, spatial)
    return _fista(_Model("saas", problem, cfg or SolverConfig()), progress)


def solve_prior(y: KqMeasurements, mask: KqMask, dictionary: AngularDictionary, spatial: SpatialTransform,
                cfg: SolverConfig | None = None, progress=None) -> SolveReport:
    """Minimise ``f(A) + lam ||A||_1 + lam2 * g_{lam2/rho}(Psi^T A Gamma^T)`` (proximal step on ``||A||_1``)."""
    problem = KqProblem(y, mask, dictionary, spatial)
    return _fista(_Model("prior", problem, cfg or SolverConfig()), progress)


def solve(model: str, y, mask, dictionary, spatial, cfg=None, progress=None) -> SolveReport:
    fn = {"saas": solve_saas, "prior": solve_prior}.get(model)
    if fn is None:
        raise ValueError(f"unknown model {model!r}; use 'saas' or 'prior'")
    return fn(y, mask, dictionary, spatial, cfg, progress)
