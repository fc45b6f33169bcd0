import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lpvmpc import lpv

coord = st.floats(-5, 5, allow_nan=False)
pvec = arrays(float, 2, elements=coord)
sigmas = st.floats(1e-2, 1e2)


def _random_fit(rng, n=60, gamma=(1e3,), sigma=0.5):
    x, u, p = rng.random((n, 3)), rng.random((n, 3)), rng.random((n, 2))
    xn = rng.random((n, 3))
    return lpv.fit_arrays(x, u, p, xn, lpv.KernelConfig(sigma, gamma)), xn


@given(p=pvec, sigma=sigmas)
def test_kernel_is_one_on_the_diagonal(p, sigma):
    assert lpv.rbf_kernel(p, p, sigma) == 1.0


@given(p=pvec, q=pvec, sigma=sigmas)
def test_kernel_symmetric_and_bounded(p, q, sigma):
    k = lpv.rbf_kernel(p, q, sigma)
    assert k == lpv.rbf_kernel(q, p, sigma)
    if np.sum((p - q) ** 2) / (2 * sigma) < 700:
        assert 0.0 < k <= 1.0


def test_kernel_hand_value():
    assert lpv.rbf_kernel([0, 0], [1, 1], 1.0) == pytest.approx(math.exp(-1.0), rel=1e-15)
    assert lpv.rbf_kernel([0.0], [3.0], 2.0) == pytest.approx(math.exp(-9.0 / 4.0), rel=1e-15)
    with pytest.raises(ValueError):
        lpv.rbf_kernel([0, 0], [0, 0, 0], 1.0)


def test_omega_matches_entrywise_definition(rng):
    x, u, p = rng.normal(size=(12, 3)), rng.normal(size=(12, 3)), rng.normal(size=(12, 2))
    om = lpv.build_omega(x, u, p, 0.7)
    for j in range(12):
        for k in range(12):
            ref = lpv.rbf_kernel(p[j], p[k], 0.7) * (x[j] @ x[k] + u[j] @ u[k])
            assert om[j, k] == pytest.approx(ref, rel=1e-12, abs=1e-14)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 40), sigma=sigmas)
def test_omega_symmetric_psd(seed, n, sigma):
    r = np.random.default_rng(seed)
    om = lpv.build_omega(r.normal(size=(n, 3)), r.normal(size=(n, 3)), r.normal(size=(n, 2)), sigma)
    assert np.array_equal(om, om.T)
    assert np.linalg.eigvalsh(om)[0] >= -1e-10 * max(1.0, np.abs(om).max())


@pytest.mark.parametrize("gamma", [(1e3,), (10.0, 1e4, 1e6)])
def test_training_residual_equals_alpha_over_gamma(rng, gamma):
    model, xn = _random_fit(rng, gamma=gamma)
    res = lpv.training_residual(model, xn)
    expected = model.alpha / model.kernel.gamma_vector(3)
    # measured against the scale of each state's targets; see the componentwise check below
    assert np.all(np.abs(res - expected).max(0) < 1e-8 * np.abs(xn).max(0))


def test_training_residual_componentwise_for_moderate_gamma(rng):
    model, xn = _random_fit(rng, gamma=(1e2,))
    res = lpv.training_residual(model, xn)
    np.testing.assert_allclose(res, model.alpha / 1e2, rtol=1e-8)


def test_ridge_system_residual(rng):
    model, xn = _random_fit(rng)
    om = lpv.build_omega(model.train_x, model.train_u, model.train_p, model.kernel.sigma)
    r = (om + np.eye(len(om)) / 1e3) @ model.alpha - xn
    assert np.abs(r).max() < 1e-8 * np.abs(xn).max()


def test_engine_fit_satisfies_the_identity(engine_model, engine_split):
    train, _, scaling = engine_split
    xn = lpv.transitions(train, scaling)[3]
    res = lpv.training_residual(engine_model, xn)
    assert np.all(np.abs(res - engine_model.alpha / 1e5).max(0) < 1e-8 * np.abs(xn).max(0))


def test_zero_alpha_predicts_zero(rng):
    model, _ = _random_fit(rng)
    zero = lpv.LpvModel(np.zeros_like(model.alpha), model.train_x, model.train_u, model.train_p, model.kernel)
    assert np.array_equal(lpv.predict_one_step(zero, [1, 2, 3], [4, 5, 6], [0.1, 0.2]), np.zeros(3))


def test_prediction_routes_agree(rng):
    model, _ = _random_fit(rng)
    x, u, p = rng.random((7, 3)), rng.random((7, 3)), rng.random((7, 2))
    loop = np.array([lpv.predict_one_step(model, *z) for z in zip(x, u, p)])
    np.testing.assert_allclose(lpv.predict_batch(model, x, u, p), loop, rtol=1e-10)
    np.testing.assert_allclose(lpv.simulate(model, x[0], u[:1], p[:1])[0], loop[0], rtol=1e-10)


def test_simulate_feeds_back_its_own_prediction(rng):
    model, _ = _random_fit(rng)
    u, p = rng.random((4, 3)), rng.random((4, 2))
    x = np.array([0.3, 0.2, 0.1])
    out = lpv.simulate(model, x, u, p)
    for t in range(4):
        x = lpv.predict_one_step(model, x, u[t], p[t])
        np.testing.assert_allclose(out[t], x, rtol=1e-10)


def test_wide_kernel_on_a_linear_system_gives_constant_matrices(rng):
    A = np.array([[0.5, 0.1, 0.0], [0.0, 0.7, 0.0], [0.2, 0.0, 0.6]])
    B = np.array([[1.0, 0.0, 0.2], [0.0, 0.5, 0.0], [0.3, 0.0, 1.0]])
    x, u, p = rng.random((80, 3)), rng.random((80, 3)), rng.random((80, 2))
    model = lpv.fit_arrays(x, u, p, x @ A.T + u @ B.T, lpv.KernelConfig.shared(1e8, 1e8))
    m1, m2 = lpv.eval_matrices(model, [0.0, 0.0]), lpv.eval_matrices(model, [1.0, 1.0])
    assert np.abs(m1.A - m2.A).max() < 1e-6
    np.testing.assert_allclose(m1.A, A, atol=1e-3)
    np.testing.assert_allclose(m1.B, B, atol=1e-3)


def test_nearby_scheduling_points_give_nearby_matrices(engine_model):
    a = lpv.eval_matrices(engine_model, [0.5, 0.5]).A
    b = lpv.eval_matrices(engine_model, [0.5 + 1e-6, 0.5]).A
    assert np.linalg.norm(a - b) < 1e-3 * np.linalg.norm(a)


def test_eval_matrices_checks_dimension(engine_model):
    with pytest.raises(ValueError, match="scheduling vector"):
        lpv.eval_matrices(engine_model, [0.5, 0.5, 0.5])


def test_linearization_is_exact_at_the_expansion_point(engine_model, rng):
    x, u = rng.random(3), rng.random(3)
    lin = lpv.linearize(engine_model, x, u)
    exact = lpv.predict_one_step(engine_model, x, u, engine_model.schedule(u))
    np.testing.assert_allclose(lin.step(x, u), exact, rtol=1e-12, atol=1e-13)


def test_linearization_matches_finite_differences(engine_model, rng):
    x, u = rng.random(3), rng.random(3)
    lin = lpv.linearize(engine_model, x, u)

    def f(uu):
        return lpv.predict_one_step(engine_model, x, uu, engine_model.schedule(uu))

    # large dual coefficients cancel in f, so a small step is dominated by round-off
    eps = 1e-4
    J = np.column_stack([(f(u + eps * e) - f(u - eps * e)) / (2 * eps) for e in np.eye(3)])
    np.testing.assert_allclose(lin.B, J, rtol=1e-5, atol=1e-6)


def test_model_file_roundtrip_is_bit_exact(engine_model, tmp_path, rng):
    engine_model.save(tmp_path / "m.json")
    back = lpv.LpvModel.load(tmp_path / "m.json")
    assert np.array_equal(back.alpha, engine_model.alpha)
    x, u, p = rng.random(3), rng.random(3), rng.random(2)
    assert np.array_equal(lpv.predict_one_step(back, x, u, p), lpv.predict_one_step(engine_model, x, u, p))
    assert back.scaling.to_dict() == engine_model.scaling.to_dict()


def test_divergence_reports_the_cycle(rng):
    x, u, p = rng.random((10, 3)), rng.random((10, 3)), rng.random((10, 2))
    model = lpv.fit_arrays(x, u, p, 1e3 * x, lpv.KernelConfig.shared(10.0, 1e6))
    with pytest.raises(lpv.DivergenceError) as err:
        lpv.simulate(model, np.ones(3), np.ones((400, 3)), np.full((400, 2), 0.5))
    assert 0 < err.value.cycle < 400


def test_arx_recovers_an_affine_system(rng):
    A = rng.normal(scale=0.3, size=(3, 3))
    B = rng.normal(size=(3, 3))
    c = np.array([1.0, -2.0, 0.5])
    x, u = rng.normal(size=(50, 3)), rng.normal(size=(50, 3))
    fit = lpv.fit_arx(x, u, x @ A.T + u @ B.T + c)
    np.testing.assert_allclose(fit.A, A, atol=1e-10)
    np.testing.assert_allclose(fit.B, B, atol=1e-10)
    np.testing.assert_allclose(fit.offset, c, atol=1e-10)


@pytest.mark.parametrize("sigma, gamma", [(0.0, 1.0), (1.0, -1.0), (math.nan, 1.0), (1.0, ())])
def test_kernel_config_validation(sigma, gamma):
    with pytest.raises(ValueError):
        lpv.KernelConfig(sigma, gamma)


def test_fit_rejects_mismatched_rows(rng):
    with pytest.raises(ValueError, match="row counts"):
        lpv.fit_arrays(rng.random((5, 3)), rng.random((4, 3)), rng.random((5, 2)), rng.random((5, 3)),
                       lpv.KernelConfig.shared(1.0, 1.0))
