import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kqcs.angular import AngularDictionary, build_dictionary
from kqcs.core import GradientScheme, GridShape, fft_columns
from kqcs.sampling import apply_mask, make_mask
from kqcs.solver import (
    KqProblem,
    SolverConfig,
    _Model,
    compute_stepsize,
    grad_f,
    huber_env_grad,
    prox_grad_residual,
    shrink,
    shrink_group,
    solve,
    solve_prior,
    solve_saas,
)
from kqcs.spatial import SpatialTransform

finite = st.floats(-10, 10, allow_nan=False)


def small_instance(seed, dims=(5, 4), G=8, n_atoms=9, k=0.6, q=0.75, kind="gradient"):
    rng = np.random.default_rng(seed)
    shape = GridShape(*dims)
    scheme = GradientScheme.fibonacci(G)
    d = build_dictionary(scheme, n_atoms, (2.0, 6.0) if (n_atoms - 1) % 2 == 0 else (3.0,))
    mask = make_mask(shape, scheme, k, q, seed=seed)
    A0 = rng.normal(size=(shape.V, n_atoms))
    y = apply_mask(mask, fft_columns(A0 @ d.atoms.T, shape) + 0.1 * rng.normal(size=(shape.V, G)))
    spatial = SpatialTransform(kind, shape) if kind == "gradient" else SpatialTransform(kind, shape)
    return shape, d, mask, y, spatial, rng


def central_diff(fun, A, H, h=1e-6):
    return (fun(A + h * H) - fun(A - h * H)) / (2 * h)


class TestShrink:
    def test_examples(self):
        assert shrink(0.5, 1.0) == 0
        assert shrink(-3.0, 1.0) == -2.0
        x = np.array([-2.0, 0.3, 5.0])
        np.testing.assert_array_equal(shrink(x, 0.0), x)

    @given(arrays(float, st.integers(1, 20), elements=finite), st.floats(0, 5))
    def test_closed_form(self, x, mu):
        ref = np.sign(x) * np.maximum(np.abs(x) - mu, 0)
        np.testing.assert_allclose(shrink(x, mu), ref, rtol=0, atol=1e-12)

    def test_group_examples(self):
        np.testing.assert_array_equal(shrink_group(np.array([[3.0], [4.0]]), 5.0, 2), [[0.0], [0.0]])
        np.testing.assert_array_equal(shrink_group(np.array([[3.0], [4.0]]), 0.0, 2), [[3.0], [4.0]])
        np.testing.assert_allclose(shrink_group(np.array([[6.0], [8.0]]), 5.0, 2), [[3.0], [4.0]], atol=1e-15)

    @given(arrays(float, (6, 3), elements=finite), st.floats(0, 5))
    def test_group_closed_form(self, X, mu):
        G = X.reshape(3, 2, 3)
        n = np.sqrt((G**2).sum(axis=1, keepdims=True))
        ref = np.where(n > 0, G / np.where(n > 0, n, 1) * np.maximum(n - mu, 0), 0).reshape(6, 3)
        np.testing.assert_allclose(shrink_group(X, mu, 2), ref, rtol=0, atol=1e-12)

    def test_group_zero_groups(self):
        assert np.all(shrink_group(np.zeros((4, 2)), 1.0, 2) == 0)

    def test_group_size_checked(self):
        with pytest.raises(ValueError):
            shrink_group(np.zeros((5, 1)), 1.0, 2)


class TestHuber:
    def test_zero(self):
        v, g = huber_env_grad(np.zeros((3, 2)), 0.5)
        assert v == 0 and np.all(g == 0)

    def test_branch_continuity(self):
        v, g = huber_env_grad(np.array([[1.0]]), 1.0)
        assert v == 0.5 and g[0, 0] == 1.0
        v, g = huber_env_grad(np.array([[-1.0]]), 1.0)
        assert v == 0.5 and g[0, 0] == -1.0

    @given(arrays(float, (4, 3), elements=finite), st.floats(0.01, 3))
    def test_closed_form(self, X, mu):
        a = np.abs(X)
        ref = np.where(a < mu, X**2 / (2 * mu), a - mu / 2).sum()
        v, g = huber_env_grad(X, mu)
        assert v == pytest.approx(ref, rel=1e-12, abs=1e-12)
        np.testing.assert_allclose(g, (X - shrink(X, mu)) / mu, rtol=0, atol=1e-12)

    @given(arrays(float, (6, 2), elements=finite), st.floats(0.01, 3))
    def test_group_matches_shrink_group(self, X, mu):
        _, g = huber_env_grad(X, mu, d=2)
        np.testing.assert_allclose(g, (X - shrink_group(X, mu, 2)) / mu, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("d", [1, 3])
    def test_gradient_matches_finite_differences(self, d, rng):
        X = rng.normal(size=(9, 4))
        H = rng.normal(size=X.shape)
        mu = 0.7
        _, g = huber_env_grad(X, mu, d)
        fd = central_diff(lambda Z: huber_env_grad(Z, mu, d, need_grad=False)[0], X, H)
        assert fd == pytest.approx(np.sum(g * H), rel=1e-6)

    def test_value_only(self):
        v, g = huber_env_grad(np.ones((2, 2)), 0.5, need_grad=False)
        assert g is None and v == pytest.approx(3.0)

    @pytest.mark.parametrize("mu", [0.0, -1.0])
    def test_mu_positive(self, mu):
        with pytest.raises(ValueError):
            huber_env_grad(np.ones(2), mu)


class TestGradF:
    def test_stationary_at_exact_fit(self):
        shape, d, mask, _, _, rng = small_instance(0)
        A0 = rng.normal(size=(shape.V, d.n_atoms))
        y = apply_mask(mask, fft_columns(A0 @ d.atoms.T, shape))
        assert np.abs(grad_f(A0, d, mask, y)).max() < 1e-10

    def test_linear_term_at_zero(self):
        from kqcs.core import ifft_columns
        from kqcs.sampling import adjoint_mask

        shape, d, mask, y, _, _ = small_instance(1)
        ref = -ifft_columns(adjoint_mask(mask, y), shape).real @ d.atoms
        np.testing.assert_allclose(grad_f(np.zeros((shape.V, d.n_atoms)), d, mask, y), ref, atol=1e-12)

    def test_finite_differences(self):
        shape, d, mask, y, spatial, rng = small_instance(2, dims=(4, 4), G=6, n_atoms=7)
        p = KqProblem(y, mask, d, spatial)
        A = rng.normal(size=(shape.V, d.n_atoms))
        H = rng.normal(size=A.shape)
        fd = central_diff(p.f_value, A, H)
        assert fd == pytest.approx(np.sum(grad_f(A, d, mask, y) * H), rel=1e-6)

    def test_shape_checked(self):
        shape, d, mask, y, _, _ = small_instance(0)
        with pytest.raises(ValueError):
            grad_f(np.zeros((3, 3)), d, mask, y)


@pytest.mark.parametrize("model", ["saas", "prior"])
@pytest.mark.parametrize("kind", ["haar", "gradient"])
def test_smoothed_objective_gradient(model, kind):
    shape, d, mask, y, spatial, rng = small_instance(3, dims=(4, 4), kind=kind)
    cfg = SolverConfig(lam=0.3, lam2=0.2 if model == "prior" else 0.0)
    m = _Model(model, KqProblem(y, mask, d, spatial), cfg)
    A = rng.normal(size=(shape.V, d.n_atoms))
    H = rng.normal(size=A.shape)
    rho = 4.0

    def smooth(Z):
        return m.problem.f_value(Z) + m.penalty(Z, rho, need_grad=False)[0]

    assert central_diff(smooth, A, H) == pytest.approx(np.sum(m.smooth_grad(A, rho) * H), rel=1e-5)


class TestStepsize:
    def _orthonormal_dict(self):
        scheme = GradientScheme.fibonacci(4)
        atoms = np.eye(4)[:, :3]
        odf = np.ones((5, 3))
        return AngularDictionary(scheme, atoms, odf, np.tile([0, 0, 1.0], (3, 1)), np.zeros(3),
                                 GradientScheme.fibonacci(5).directions)

    def test_haar_orthonormal(self):
        L = compute_stepsize(self._orthonormal_dict(), SpatialTransform("haar", GridShape(4, 4)), 1.0)
        assert L == pytest.approx(2.0)

    def test_linear_in_rho(self):
        d = build_dictionary(GradientScheme.fibonacci(16), 17, (2, 4, 8, 16))
        sp = SpatialTransform("gradient", GridShape(4, 4))
        l1 = compute_stepsize(d, sp, 1.0)
        l2 = compute_stepsize(d, sp, 2.0)
        assert l2 - l1 == pytest.approx(sp.norm_sq(), rel=1e-12)
        assert 0 < sp.norm_sq() <= 8

    def test_prior_form(self):
        d = build_dictionary(GradientScheme.fibonacci(16), 17, (2, 4, 8, 16))
        sp = SpatialTransform("haar", GridShape(4, 4))
        lg = d.gram_norm_sq()
        assert compute_stepsize(d, sp, 3.0, "prior") == pytest.approx(lg * 4.0)

    def test_solver_bound_uses_sampled_rows(self):
        shape, d, mask, y, spatial, _ = small_instance(4)
        p = KqProblem(y, mask, d, spatial)
        gq = d.atoms[mask.q_indices]
        assert p.gamma_q_norm_sq == pytest.approx(np.linalg.eigvalsh(gq.T @ gq)[-1])
        assert p.gamma_q_norm_sq <= p.gamma_norm_sq + 1e-9


class TestConfig:
    @pytest.mark.parametrize("kw", [{"lam": -1}, {"rho_init": 0}, {"rho_factor": 1.0}, {"eps": 0},
                                    {"max_iters": 0}, {"rho_max": 0.5}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SolverConfig(**kw)


class TestSolve:
    @pytest.mark.parametrize("model", ["saas", "prior"])
    @pytest.mark.parametrize("kind", ["haar", "gradient"])
    def test_zero_data_gives_zero(self, model, kind):
        shape, d, mask, y, spatial, _ = small_instance(5, dims=(4, 4), kind=kind)
        y0 = type(y)(mask, np.zeros_like(y.values))
        rep = solve(model, y0, mask, d, spatial, SolverConfig(lam=0.1, lam2=0.1, max_iters=50))
        assert np.all(rep.A_hat == 0)

    def test_prior_without_weights_matches_saas(self):
        shape, d, mask, y, spatial, _ = small_instance(6)
        cfg = SolverConfig(lam=0.0, lam2=0.0, max_iters=300)
        a = solve_saas(y, mask, d, spatial, cfg).A_hat
        b = solve_prior(y, mask, d, spatial, cfg).A_hat
        np.testing.assert_allclose(a, b, atol=1e-8)

    def test_noiseless_full_sampling_fits(self):
        shape = GridShape(6, 6)
        scheme = GradientScheme.fibonacci(8)
        d = build_dictionary(scheme, 9, (2.0, 6.0))
        rng = np.random.default_rng(0)
        S = rng.uniform(size=(shape.V, d.n_atoms)) @ d.atoms.T
        mask = make_mask(shape, scheme, 1.0, 1.0)
        y = apply_mask(mask, fft_columns(S, shape))
        for model in ("saas", "prior"):
            rep = solve(model, y, mask, d, SpatialTransform("gradient", shape),
                        SolverConfig(lam=1e-8, lam2=1e-8, max_iters=2000))
            err = np.sum((rep.A_hat @ d.atoms.T - S) ** 2) / np.sum(S**2)
            assert err < 1e-3

    @pytest.mark.parametrize("model", ["saas", "prior"])
    def test_trace_non_increasing_within_segments(self, model):
        shape, d, mask, y, spatial, _ = small_instance(7, dims=(8, 8), G=16, n_atoms=17)
        cfg = SolverConfig(lam=0.05, lam2=0.05 if model == "prior" else 0.0, max_iters=400)
        rep = solve(model, y, mask, d, spatial, cfg)
        tr = np.asarray(rep.objective_trace)
        assert np.all(np.isfinite(tr))
        bounds = rep.segment_starts + [len(tr)]
        for a, b in zip(bounds[:-1], bounds[1:]):
            seg = tr[a + 3:b]
            assert np.all(np.diff(seg) <= 1e-9 * np.abs(seg[:-1]))

    def test_continuation_schedule(self):
        shape, d, mask, y, spatial, _ = small_instance(8)
        cfg = SolverConfig(lam=0.05, rho_init=1, rho_factor=2, rho_max=8, rho_every=10, max_iters=200)
        rep = solve_saas(y, mask, d, spatial, cfg)
        rhos = rep.rho_trace
        assert rhos[0] == 1 and max(rhos) <= 8
        assert all(b >= a for a, b in zip(rhos, rhos[1:]))
        # at most rho_every iterations per stage below rho_max
        for r in (1, 2, 4):
            assert rhos.count(r) <= 10

    def test_fixed_point_when_converged(self):
        shape, d, mask, y, spatial, _ = small_instance(9)
        cfg = SolverConfig(lam=0.05, eps=1e-7, max_iters=5000)
        rep = solve_saas(y, mask, d, spatial, cfg)
        assert rep.converged
        assert prox_grad_residual(rep, KqProblem(y, mask, d, spatial)) < 10 * cfg.eps

    def test_report_dict(self):
        shape, d, mask, y, spatial, _ = small_instance(10)
        rep = solve_saas(y, mask, d, spatial, SolverConfig(max_iters=20))
        out = rep.to_dict()
        assert out["iterations_run"] == 20
        assert len(out["objective_trace"]) == 20
        assert out["A_shape"] == [shape.V, d.n_atoms]

    def test_divergence_is_reported(self):
        shape, d, mask, y, spatial, _ = small_instance(11)
        with pytest.raises(FloatingPointError), np.errstate(over="ignore", invalid="ignore"):
            solve_saas(y, mask, d, spatial, SolverConfig(lam=0.01, stepsize=1e-6, max_iters=500))

    def test_unknown_model(self):
        shape, d, mask, y, spatial, _ = small_instance(0)
        with pytest.raises(ValueError):
            solve("synthesis", y, mask, d, spatial)


def test_saas_beats_prior_on_haar_sparse_maps():
    # five active atoms whose spatial maps are constant on 4x4 blocks; 30% of (k, q) samples
    rng = np.random.default_rng(3)
    shape = GridShape(16, 16)
    scheme = GradientScheme.fibonacci(32)
    d = build_dictionary(scheme, 33, (2, 4, 8, 16))
    A = np.zeros((shape.V, d.n_atoms))
    for j in rng.choice(np.arange(1, 33), 5, replace=False):
        blocks = rng.uniform(0, 1, size=(4, 4)) * (rng.random((4, 4)) < 0.5)
        A[:, j] = np.kron(blocks, np.ones((4, 4))).reshape(-1, order="F")
    A[:, 0] = 0.5
    S = A @ d.atoms.T
    mask = make_mask(shape, scheme, 0.55, 0.55, seed=1)
    y = apply_mask(mask, fft_columns(S, shape))
    sp = SpatialTransform("haar", shape)

    def best(model):
        errs = []
        for lam in (1e-4, 1e-3, 1e-2):
            rep = solve(model, y, mask, d, sp, SolverConfig(lam=lam, lam2=lam if model == "prior" else 0.0))
            errs.append(np.sum((rep.A_hat @ d.atoms.T - S) ** 2) / np.sum(S**2))
        return min(errs)

    saas, prior = best("saas"), best("prior")
    assert saas < 0.05
    assert prior > saas
