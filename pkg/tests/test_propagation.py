import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import mc_moments, quadrature_moments_1d, random_small_gp
from gpccopf.errors import InvalidAlpha, ValidationError
from gpccopf.gp import GpModel, KernelParams, MultiGpModel, predict, predict_multi
from gpccopf.propagation import (InputDistribution, assemble_input_cov, em_moments, em_single,
                                 mean_gradient, mean_hessian, propagate, ta1_jacobians,
                                 ta1_variance, ta2_variance, ta_mean, variance_gradient,
                                 variance_hessian)


def _multi(seed, **kw):
    model, mu, cov = random_small_gp(seed, **kw)
    return MultiGpModel([model]), model, mu, cov


def _fd_grad(fn, x, h=1e-6):
    return np.array([(fn(x + h * e) - fn(x - h * e)) / (2 * h) for e in np.eye(x.size)])


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


# --- input covariance --------------------------------------------------------
def test_cov_zero_sigma():
    assert not np.any(assemble_input_cov([0.5, 0.5], [0.0, 0.0, 0.0]))


def test_cov_single_unit_substitution():
    cov = assemble_input_cov([1.0], [1.0, 2.0])
    assert cov[0, 0] == 5.0
    assert np.array_equal(cov[0, 1:], [1.0, 4.0])
    assert np.array_equal(cov[1:, 1:], np.diag([1.0, 4.0]))


def test_cov_matches_simulated_recourse(rng):
    alpha = np.array([0.2, 0.5, 0.3])
    sigma = np.array([0.3, 0.1, 0.4])
    signs = np.array([1.0, 1.0, -1.0])
    cov = assemble_input_cov(alpha, sigma, signs)
    n = 1_000_000
    w = rng.standard_normal((n, 3)) * sigma
    x = np.hstack([np.outer(w @ signs, alpha), w])
    emp = np.cov(x, rowvar=False)
    # standard error of each sample covariance entry is about sqrt(var_i var_j / n)
    se = np.sqrt(np.outer(np.diag(emp), np.diag(emp)) / n)
    assert np.all(np.abs(emp - cov) < 5 * se + 1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=4),
       st.lists(st.floats(0.0, 3.0), min_size=1, max_size=5))
def test_cov_is_psd(raw_alpha, sigma):
    a = np.asarray(raw_alpha) + 1e-3
    a /= a.sum()
    signs = np.where(np.arange(len(sigma)) % 2, -1.0, 1.0)
    cov = assemble_input_cov(a, sigma, signs)
    assert np.allclose(cov, cov.T)
    assert np.linalg.eigvalsh(cov).min() >= -1e-10 * max(1.0, np.abs(cov).max())


@pytest.mark.parametrize("alpha", [[0.6, 0.6], [-0.1, 1.1], [0.2, 0.2]])
def test_invalid_alpha(alpha):
    with pytest.raises(InvalidAlpha):
        assemble_input_cov(alpha, [1.0])


def test_input_distribution_validation():
    with pytest.raises(ValidationError):
        InputDistribution(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValidationError):
        InputDistribution(np.zeros(2), np.diag([1.0, -1.0]))
    with pytest.raises(ValidationError):
        InputDistribution(np.zeros(2), np.eye(3))


# --- moments -----------------------------------------------------------------
@pytest.mark.parametrize("seed", range(5))
def test_zero_covariance_collapses_to_prediction(seed):
    multi, model, mu, cov = _multi(seed)
    zero = np.zeros_like(cov)
    mean, var = predict(model, mu)
    for method in ("ta1", "ta2", "em"):
        out = propagate(multi, mu, zero, method)
        assert abs(out.mean[0] - mean) < 1e-10 and abs(out.var[0] - var) < 1e-10


def test_ta_mean_ignores_covariance(ieee9_model, ieee9_data):
    _, val = ieee9_data
    x = val.X[0]
    ref = predict_multi(ieee9_model, x)[0]
    assert np.array_equal(ta_mean(ieee9_model, x), ref)
    cov = np.diag(np.full(8, 0.01))
    assert np.array_equal(ta_mean(ieee9_model, x), propagate(ieee9_model, x, cov, "ta2").mean)


def test_ta1_linear_propagation():
    X = np.linspace(-1, 1, 12)[:, None]
    y = 2.5 * X[:, 0] + 0.3
    model = GpModel(KernelParams(50.0, np.array([5.0]), 1e-10), X, y, float(y.mean()),
                    np.zeros(1), np.ones(1))
    var = ta1_variance(MultiGpModel([model]), np.array([0.1]), np.array([[0.01]]))[0]
    det = predict(model, np.array([0.1]))[1]
    assert var - det == pytest.approx(2.5**2 * 0.01, rel=1e-3)


@pytest.mark.parametrize("seed", range(3))
def test_ta1_monotone_in_covariance(seed):
    multi, _, mu, cov = _multi(seed)
    r = np.random.default_rng(seed)
    B = r.normal(size=cov.shape)
    assert ta1_variance(multi, mu, cov + B @ B.T)[0] >= ta1_variance(multi, mu, cov)[0] - 1e-14


def test_em_matches_monte_carlo_1d():
    r = np.random.default_rng(8)
    X = r.uniform(-1, 1, (5, 1))
    y = np.sin(3 * X[:, 0])
    model = GpModel(KernelParams(1.0, np.array([0.4]), 1e-3), X, y, 0.0, np.zeros(1), np.ones(1))
    mu, cov = np.array([0.1]), np.array([[0.04]])
    mean, var = em_single(model, mu, cov)
    m_q, v_q = quadrature_moments_1d(model, mu[0], cov[0, 0])
    assert mean == pytest.approx(m_q, abs=1e-12) and var == pytest.approx(v_q, abs=1e-12)
    m_mc, m_se, v_mc, v_se = mc_moments(model, mu, cov, seed=0)
    assert abs(mean - m_mc) < 3 * m_se
    assert abs(var - v_mc) < 3 * v_se


def test_em_affine_invariance():
    multi, model, mu, cov = _multi(2)
    c = 3.7
    scaled = GpModel(KernelParams(model.params.signal_var, model.params.lengthscales * c,
                                  model.params.noise_var), model.X * c, model.y, model.y_mean,
                     model.x_mean * c, model.x_scale)
    a = em_single(model, mu, cov)
    b = em_single(scaled, mu * c, cov * c * c)
    assert np.allclose(a, b, rtol=1e-10)


def test_em_fallback_flag_and_ta_methods_share_mean():
    multi, _, mu, cov = _multi(4)
    mean, var, flags = em_moments(multi, mu, cov)
    assert not flags.any() and np.all(var >= 0)
    assert np.array_equal(propagate(multi, mu, cov, "ta1").mean, propagate(multi, mu, cov, "ta2").mean)
    with pytest.raises(ValueError):
        propagate(multi, mu, cov, "mc")


# --- derivatives -------------------------------------------------------------
@pytest.mark.parametrize("seed", range(12))
def test_derivatives_match_finite_differences(seed):
    _, model, mu, _ = _multi(seed)
    x = mu + 0.1
    mean_fn = lambda z: predict(model, z)[0]
    var_fn = lambda z: predict(model, z)[1]
    assert _rel(mean_gradient(model, x), _fd_grad(mean_fn, x)) < 1e-5
    assert _rel(variance_gradient(model, x), _fd_grad(var_fn, x)) < 1e-5
    fd_h = np.array([_fd_grad(lambda z: mean_gradient(model, z)[i], x) for i in range(x.size)])
    assert _rel(mean_hessian(model, x), fd_h) < 1e-4
    fd_vh = np.array([_fd_grad(lambda z: variance_gradient(model, z)[i], x) for i in range(x.size)])
    assert _rel(variance_hessian(model, x), fd_vh) < 1e-4


def test_ta1_jacobians_match_finite_differences():
    multi, _, mu, cov = _multi(6, max_d=3)

    def quad(g):
        return g @ cov @ g, np.zeros(1), cov @ g

    mean, var, dm, dv, _ = ta1_jacobians(multi, mu, quad)
    assert np.allclose(mean, ta_mean(multi, mu)) and np.allclose(var, ta1_variance(multi, mu, cov))
    fd_m = _fd_grad(lambda z: ta_mean(multi, z)[0], mu)
    fd_v = _fd_grad(lambda z: ta1_variance(multi, z, cov)[0], mu)
    assert _rel(dm[0], fd_m) < 1e-5 and _rel(dv[0], fd_v) < 1e-5


def test_ta2_adds_half_trace_of_hessian():
    multi, model, mu, cov = _multi(9)
    H = variance_hessian(model, mu)
    diff = ta2_variance(multi, mu, cov)[0] - ta1_variance(multi, mu, cov)[0]
    assert diff == pytest.approx(0.5 * np.sum(H * cov), abs=1e-12)
