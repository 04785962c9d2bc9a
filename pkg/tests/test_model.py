import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, special, stats

from conftest import random_orthonormal
from geode.errors import ConfigError, InvalidRate, NonFiniteInput, NotPositiveDefinite
from geode.model import (
    Hyperparams,
    alpha2_from_u,
    dense_log_likelihood,
    latent_posterior,
    log_lower_gamma1,
    node_log_likelihood,
    partial_node_loglik,
    sample_trunc_exp,
    sample_trunc_gamma01,
    tau_log_conditional,
    trunc_exp_ppf,
    trunc_gamma01_ppf,
    u_from_alpha2,
)

LOG_2PI = np.log(2 * np.pi)


# likelihood paths


def test_isotropic_at_mean():
    D, s2 = 6, 0.7
    got = node_log_likelihood(0.0, np.zeros(3), np.ones(3), s2, D)
    assert got == pytest.approx(-0.5 * D * np.log(2 * np.pi * s2), rel=1e-14)


def test_direct_substitution():
    got = node_log_likelihood(1.0, np.array([1.0]), np.array([0.5]), 1.0, 1)
    assert got == pytest.approx(-0.5 * LOG_2PI + 0.5 * np.log(0.5) - 0.25, rel=1e-14)


def _random_instance(rng, D, d):
    mu = rng.normal(size=D)
    Phi = random_orthonormal(rng, D, d)
    sigma2 = rng.uniform(0.1, 3.0)
    alpha2 = rng.exponential(2.0, size=d)
    y = mu + Phi @ (np.sqrt(alpha2) * rng.normal(size=d)) + np.sqrt(sigma2) * rng.normal(size=D)
    return y, mu, Phi, alpha2, sigma2


def test_fast_path_matches_dense_on_small_instance(rng):
    y, mu, Phi, alpha2, sigma2 = _random_instance(rng, 8, 3)
    r = y - mu
    fast = node_log_likelihood(r @ r, Phi.T @ r, u_from_alpha2(alpha2, sigma2), sigma2, 8)
    assert fast == pytest.approx(dense_log_likelihood(y, mu, Phi, alpha2, sigma2), abs=1e-9)


def test_dense_isotropic_and_diagonal_cases():
    y = np.array([1.0, -2.0, 0.5])
    got = dense_log_likelihood(y, np.zeros(3), np.eye(3)[:, :1], [0.0], 2.0)
    assert got == pytest.approx(stats.multivariate_normal(np.zeros(3), 2.0 * np.eye(3)).logpdf(y))
    y2 = np.array([0.3, -1.1])
    got = dense_log_likelihood(y2, np.zeros(2), np.array([[1.0], [0.0]]), [3.0], 1.0)
    closed = -np.log(2 * np.pi) - 0.5 * np.log(4.0) - 0.5 * (y2[0] ** 2 / 4 + y2[1] ** 2)
    assert got == pytest.approx(closed, rel=1e-14)


def test_dense_rejects_invalid_covariance():
    with pytest.raises(NotPositiveDefinite):
        dense_log_likelihood(np.zeros(2), np.zeros(2), np.eye(2)[:, :1], [-5.0], 1.0)


def test_non_finite_statistics_rejected():
    with pytest.raises(NonFiniteInput):
        node_log_likelihood(np.nan, np.zeros(2), np.ones(2), 1.0, 3)


def test_deleted_dimension_drops_out(rng):
    Z = rng.normal(size=4)
    u = np.array([0.2, 0.5, 1.0, 1.0])
    full = node_log_likelihood(3.0, Z, u, 0.8, 10)
    reduced = node_log_likelihood(3.0, Z[:2], u[:2], 0.8, 10)
    assert full == reduced


def test_alpha_u_roundtrip():
    a2 = np.array([0.0, 0.3, 12.0])
    assert np.allclose(alpha2_from_u(u_from_alpha2(a2, 0.7), 0.7), a2)


@settings(max_examples=50, deadline=None)
@given(D=st.integers(1, 30), d=st.integers(1, 6), seed=st.integers(0, 10**6))
def test_fast_dense_identity_property(D, d, seed):
    d = min(d, D)
    y, mu, Phi, alpha2, sigma2 = _random_instance(np.random.default_rng(seed), D, d)
    r = y - mu
    fast = node_log_likelihood(r @ r, Phi.T @ r, u_from_alpha2(alpha2, sigma2), sigma2, D)
    dense = dense_log_likelihood(y, mu, Phi, alpha2, sigma2)
    assert abs(fast - dense) <= 1e-8 * (1 + abs(dense))


# marginal likelihood of partially observed rows


def _partial_stats(y, mu, Phi, obs):
    PO = Phi[obs]
    r = y[obs] - mu[obs]
    return PO.T @ PO, r @ r, PO.T @ r


def test_partial_without_missing_equals_full(rng):
    y, mu, Phi, alpha2, sigma2 = _random_instance(rng, 10, 4)
    u = u_from_alpha2(alpha2, sigma2)
    gram, B, C = _partial_stats(y, mu, Phi, np.ones(10, bool))
    part = partial_node_loglik(gram, B, C, u, sigma2, 10)
    assert part == pytest.approx(node_log_likelihood(B, C, u, sigma2, 10), rel=1e-12)


def test_partial_with_zero_factor_variance_is_isotropic(rng):
    y, mu, Phi, _, sigma2 = _random_instance(rng, 9, 3)
    obs = np.arange(9) % 3 != 0
    gram, B, C = _partial_stats(y, mu, Phi, obs)
    got = partial_node_loglik(gram, B, C, np.ones(3), sigma2, obs.sum())
    ref = stats.multivariate_normal(mu[obs], sigma2 * np.eye(obs.sum())).logpdf(y[obs])
    assert got == pytest.approx(ref, rel=1e-12)


def test_partial_matches_dense_marginal(rng):
    D, m = 15, 6
    y, mu, Phi, alpha2, sigma2 = _random_instance(rng, D, 4)
    obs = np.ones(D, bool)
    obs[rng.choice(D, m, replace=False)] = False
    gram, B, C = _partial_stats(y, mu, Phi, obs)
    got = partial_node_loglik(gram, B, C, u_from_alpha2(alpha2, sigma2), sigma2, D - m)
    cov = (Phi * alpha2) @ Phi.T + sigma2 * np.eye(D)
    ref = stats.multivariate_normal(mu[obs], cov[np.ix_(obs, obs)]).logpdf(y[obs])
    assert abs(got - ref) < 1e-8


def test_latent_posterior_prior_limit(rng):
    _, _, Phi, alpha2, _ = _random_instance(rng, 12, 3)
    obs = np.arange(12) < 7
    PO = Phi[obs]
    sigma2 = 1e9
    mean, root = latent_posterior(PO.T @ PO, PO.T @ rng.normal(size=7), u_from_alpha2(alpha2, sigma2), sigma2)
    assert np.allclose(root @ root.T, np.diag(alpha2), rtol=1e-6, atol=1e-9)
    assert np.allclose(mean, 0, atol=1e-6)


def test_latent_posterior_centered_input(rng):
    _, _, Phi, alpha2, sigma2 = _random_instance(rng, 12, 3)
    PO = Phi[:8]
    mean, _ = latent_posterior(PO.T @ PO, np.zeros(3), u_from_alpha2(alpha2, sigma2), sigma2)
    assert np.all(mean == 0)


# truncated exponential


def test_trunc_exp_endpoints():
    assert trunc_exp_ppf(1e-300, 0.7) == pytest.approx(1.0)
    assert trunc_exp_ppf(1 - np.exp(-1), 1.0) == pytest.approx(2.0, rel=1e-14)


def test_trunc_exp_mean(rng):
    x = sample_trunc_exp(0.05, rng, size=10**6)
    assert x.min() >= 1.0
    se = (1 / 0.05) / np.sqrt(x.size)
    assert abs(x.mean() - 21.0) < 3 * se


@pytest.mark.parametrize("lam", [0.0, -1.0, np.nan])
def test_trunc_exp_invalid_rate(rng, lam):
    with pytest.raises(InvalidRate):
        sample_trunc_exp(lam, rng)


# truncated gamma


def test_trunc_gamma_exponential_case():
    q = np.array([0.1, 0.5, 0.9])
    assert np.allclose(trunc_gamma01_ppf(q, 1.0, 1.0), -np.log(1 - q * (1 - np.exp(-1))), rtol=1e-12)


def test_trunc_gamma_large_shape_concentrates_at_one(rng):
    x = sample_trunc_gamma01(1e4, 1.0, rng, size=10**4)
    assert x.mean() > 0.99
    assert x.max() <= 1.0


def test_trunc_gamma_cdf_at_half_matches_quadrature(rng):
    dens = lambda x: x**1.5 * np.exp(-3 * x)  # noqa: E731
    ref = 0.43243347517522523914  # high-precision quadrature of the truncated density
    assert integrate.quad(dens, 0, 0.5)[0] / integrate.quad(dens, 0, 1)[0] == pytest.approx(ref, abs=1e-9)
    x = sample_trunc_gamma01(2.5, 3.0, rng, size=10**5)
    assert abs(np.mean(x <= 0.5) - ref) < 0.005


def _trunc_gamma_cdf(shape, rate):
    mass = special.gammainc(shape, rate)
    if mass > 1e-12:
        return lambda t: special.gammainc(shape, rate * t) / mass
    # P(X < 1) underflows: integrate the density of w = -log x, prop. to exp(-shape w - rate e^{-w})
    w = np.linspace(0, 40 / (shape - rate), 40001)
    logf = -shape * w - rate * np.exp(-w)
    f = np.exp(logf - logf.max())
    F = np.concatenate([[0], np.cumsum((f[1:] + f[:-1]) / 2)])
    F /= F[-1]
    return lambda t: 1.0 - np.interp(-np.log(t), w, F, right=1.0)


@pytest.mark.parametrize("shape,rate", [(0.4, 2.0), (2.5, 3.0), (40.0, 2.0), (30.0, 10.0), (500.0, 50.0), (3e6, 1.0)])
def test_trunc_gamma_ks_against_cdf(rng, shape, rate):
    x = sample_trunc_gamma01(shape, rate, rng, size=10**5)
    assert np.all((x > 0) & (x <= 1))
    assert stats.kstest(x, _trunc_gamma_cdf(shape, rate)).statistic < 0.01


def test_trunc_gamma_vectorised_shapes(rng):
    shape = np.array([[1.0, 5.0], [1e7, 2.0]])
    out = sample_trunc_gamma01(shape, 1.5, rng)
    assert out.shape == (2, 2)
    with pytest.raises(InvalidRate):
        sample_trunc_gamma01(-1.0, 1.0, rng)


def test_log_lower_gamma_against_frozen_values():
    frozen = {
        0.3: 1.0077032925974444436,
        1.0: -0.45867514538708189102,
        2.5: -1.6067535371453137835,
        17.0: -3.7762348685157172669,
        250.0: -6.5174689600807475627,
        1e4: -10.210240376976849228,
    }
    got = log_lower_gamma1(np.array(list(frozen)))
    assert np.allclose(got, list(frozen.values()), rtol=0, atol=1e-13)


def test_tau_conditional_support_and_shape():
    coef = np.array([[1.0, 2.0, 3.0]])
    log_u = np.log(np.array([[0.1, 0.5, 0.9]]))
    w = np.array([[0.0, 1.0, 1.0]])
    assert tau_log_conditional(np.array([0.5]), coef, log_u, w, 0.05)[0] == -np.inf
    x = np.array([1.0, 2.0])
    got = tau_log_conditional(x, coef, log_u, w, 0.05)
    ref = [
        -0.05 * t + sum((c * t - 1) * lu - np.log(special.gammainc(c * t, 1) * special.gamma(c * t)) for c, lu in zip([2.0, 3.0], log_u[0, 1:]))
        for t in x
    ]
    assert np.allclose(got, ref, rtol=1e-12)


# hyperparameters


def test_adaptation_probability():
    h = Hyperparams()
    assert h.adapt_probability(1) == pytest.approx(np.exp(-1.005))
    assert h.adapt_probability(1) == pytest.approx(0.366, abs=5e-4)
    p = h.adapt_probability(np.arange(1, 200))
    assert np.all(np.diff(p) < 0)


def test_hyperparams_defaults_and_validation():
    h = Hyperparams()
    assert (h.a_sigma, h.b_sigma, h.a_tau, h.c0, h.c1, h.tol, h.iters, h.burn_in) == (0.5, 0.5, 0.05, -1.0, -0.005, 1e-4, 1000, 500)
    assert h.cell_size == 2 * h.d_upper
    for bad in ({"a_sigma": 0}, {"tol": -1}, {"thin": 0}, {"burn_in": 10, "iters": 5}, {"tau_update": "x"}, {"d_upper": 0}):
        with pytest.raises(ConfigError):
            Hyperparams(**bad)
    with pytest.raises(ConfigError, match="unknown"):
        Hyperparams.from_dict({"iterz": 3})
    with pytest.raises(ConfigError, match="iters must be ≥ 1"):
        Hyperparams(iters=0, burn_in=0).check_fittable()
    assert Hyperparams.from_dict(h.to_dict()) == h
