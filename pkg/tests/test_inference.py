import dataclasses

import numpy as np
import pytest
from scipy import stats
from scipy.integrate import trapezoid
from scipy.special import logsumexp

from conftest import full_tree, make_model, random_orthonormal, single_node_tree
from geode.errors import (
    ConfigError,
    DataError,
    DimensionMismatch,
    DrawCountMismatch,
    EmptyData,
    NoAdaptationSteps,
    NoObservedEntries,
)
from geode.gibbs import compute_weights
from geode.inference import (
    classify,
    draw_log_densities,
    fit,
    impute,
    inclusion_probabilities,
    log_density,
    predict_response,
)
from geode.model import Hyperparams, alpha2_from_u
from geode.scenarios import simulate_scenario


def node_cov(basis, u, sigma2):
    return sigma2 * np.eye(basis.shape[0]) + (basis * alpha2_from_u(u, sigma2)) @ basis.T


def random_model(rng, tree, D, d, T=1):
    K = tree.n_nodes
    mu = rng.normal(scale=3.0, size=(K, D))
    basis = np.stack([random_orthonormal(rng, D, d) for _ in range(K)])
    u = rng.uniform(0.05, 1.0, size=(T, K, d))
    sigma2 = rng.uniform(0.3, 1.5, size=(T, tree.level.max() + 1))
    S = rng.uniform(0.2, 0.8, size=(T, K))
    R = rng.uniform(0.2, 0.8, size=(T, K))
    return make_model(tree, mu, basis, u, sigma2, S=S, R=R)


def oracle_log_density(model, y):
    """Log of the draw-averaged mixture density from explicit covariances."""
    w = compute_weights(model.draws.S, model.draws.R, model.tree)
    sig = model.node_sigma2()
    per_draw = []
    for t in range(model.n_draws):
        terms = [
            np.log(w[t, k])
            + stats.multivariate_normal(model.dictionary.mu[k], node_cov(model.dictionary.basis[k], model.draws.u[t, k], sig[t, k])).logpdf(y)
            for k in range(model.tree.n_nodes)
            if w[t, k] > 0
        ]
        per_draw.append(logsumexp(terms))
    return logsumexp(per_draw) - np.log(model.n_draws)


def oracle_conditional(model, y):
    """Mixture mean and variance of the missing block for a single-draw model."""
    obs = ~np.isnan(y)
    w = compute_weights(model.draws.S, model.draws.R, model.tree)[0]
    sig = model.node_sigma2()[0]
    logp, means, variances = [], [], []
    for k in range(model.tree.n_nodes):
        if w[k] == 0:
            continue
        mu = model.dictionary.mu[k]
        C = node_cov(model.dictionary.basis[k], model.draws.u[0, k], sig[k])
        Coo, Cmo = C[np.ix_(obs, obs)], C[np.ix_(~obs, obs)]
        gain = np.linalg.solve(Coo, Cmo.T).T
        logp.append(np.log(w[k]) + stats.multivariate_normal(mu[obs], Coo).logpdf(y[obs]))
        means.append(mu[~obs] + gain @ (y[obs] - mu[obs]))
        variances.append(np.diag(C[np.ix_(~obs, ~obs)] - gain @ Cmo.T))
    p = np.exp(np.array(logp) - logsumexp(logp))
    means, variances = np.array(means), np.array(variances)
    m = p @ means
    return m, p @ (variances + means**2) - m**2


# density


def test_isotropic_density_is_exact(rng):
    D = 6
    mu = rng.normal(size=D)
    model = make_model(single_node_tree(), mu, random_orthonormal(rng, D, 2), np.ones((1, 2)), [0.7])
    y = rng.normal(size=D)
    expected = stats.multivariate_normal(mu, 0.7 * np.eye(D)).logpdf(y)
    assert log_density(model, y) == pytest.approx(expected, rel=1e-12)


def test_density_matches_explicit_covariance_mixture(rng):
    tree = full_tree(2)
    model = random_model(rng, tree, D=7, d=3, T=4)
    Y = rng.normal(scale=3.0, size=(5, 7))
    got = log_density(model, Y)
    for i in range(5):
        assert got[i] == pytest.approx(oracle_log_density(model, Y[i]), rel=1e-9)


def test_density_integrates_to_one():
    rng = np.random.default_rng(4)
    tree = full_tree(1)
    mu = np.array([[0.0, 0.0], [-1.0, 0.5], [1.5, -0.5]])
    basis = np.stack([random_orthonormal(rng, 2, 1) for _ in range(3)])
    model = make_model(tree, mu, basis, [[[0.2], [0.5], [0.1]]], [0.3, 0.2])
    g = np.linspace(-6.5, 6.5, 521)
    X, Y = np.meshgrid(g, g)
    dens = np.exp(log_density(model, np.column_stack([X.ravel(), Y.ravel()]))).reshape(X.shape)
    total = trapezoid(trapezoid(dens, g, axis=1), g)
    assert abs(total - 1) < 0.02


def test_two_components_rank_points_by_proximity(rng):
    tree = full_tree(1)
    D = 5
    mu = np.zeros((3, D))
    mu[1, 0], mu[2, 0] = -10.0, 10.0
    basis = np.stack([random_orthonormal(rng, D, 1)] * 3)
    S = [[0.0, 0.5, 0.5]]
    R = [[0.5, 0.5, 0.5]]
    model = make_model(tree, mu, basis, np.full((1, 3, 1), 0.5), [1.0, 0.5], S=S, R=R)
    near, far = mu[2].copy(), mu[2].copy()
    far[0] = 0.0
    assert log_density(model, near) - log_density(model, far) > np.log(1e3)


def test_density_rejects_missing_and_wrong_width(rng):
    model = make_model(single_node_tree(), np.zeros(3), random_orthonormal(rng, 3, 1), [[0.5]], [1.0])
    with pytest.raises(DataError):
        log_density(model, [0.0, np.nan, 1.0])
    with pytest.raises(DimensionMismatch):
        log_density(model, np.zeros(4))
    assert draw_log_densities(model, np.zeros((4, 3))).shape == (1, 4)


# imputation


def test_imputation_matches_gaussian_conditioning(rng):
    model = random_model(rng, single_node_tree(), D=8, d=3)
    y = model.dictionary.mu[0] + rng.normal(size=8) * 2
    y[[1, 4, 6]] = np.nan
    res = impute(model, y, rng)
    m, v = oracle_conditional(model, y)
    assert res.missing.tolist() == [1, 4, 6]
    assert np.allclose(res.mean, m, rtol=1e-9, atol=1e-9)
    assert np.allclose(res.sd, np.sqrt(v), rtol=1e-7)


def test_imputation_mixture_moments(rng):
    model = random_model(rng, full_tree(2), D=6, d=2)
    y = model.dictionary.mu[4] + rng.normal(size=6)
    y[[0, 5]] = np.nan
    res = impute(model, y, rng, samples_per_draw=20_000)
    m, v = oracle_conditional(model, y)
    assert np.allclose(res.mean, m, rtol=1e-9, atol=1e-9)
    assert np.allclose(res.sd, np.sqrt(v), rtol=1e-7)
    se = np.sqrt(v / res.samples.shape[0])
    assert np.all(np.abs(res.samples.mean(axis=0) - m) < 4 * se)
    assert np.all(res.lower <= res.mean) and np.all(res.mean <= res.upper)


def test_imputation_at_node_mean_returns_mean(rng):
    mu = rng.normal(size=5)
    model = make_model(single_node_tree(), mu, random_orthonormal(rng, 5, 2), [[0.1, 0.4]], [0.5])
    y = mu.copy()
    y[2] = np.nan
    assert impute(model, y, rng).mean[0] == pytest.approx(mu[2], abs=1e-12)


def test_imputation_without_signal_is_prior(rng):
    mu = rng.normal(size=5)
    model = make_model(single_node_tree(), mu, random_orthonormal(rng, 5, 2), [[1.0, 1.0]], [0.8])
    y = mu + 5.0
    y[[0, 3]] = np.nan
    res = impute(model, y, rng)
    assert np.allclose(res.mean, mu[[0, 3]], atol=1e-12)
    assert np.allclose(res.sd, np.sqrt(0.8), rtol=1e-12)


def test_imputation_edge_cases(rng):
    model = make_model(single_node_tree(), np.zeros(3), random_orthonormal(rng, 3, 1), [[0.5]], [1.0])
    assert impute(model, np.ones(3), rng).mean.size == 0
    with pytest.raises(NoObservedEntries):
        impute(model, np.full(3, np.nan), rng)


def test_predict_response_agrees_with_impute(rng):
    model = random_model(rng, full_tree(1), D=6, d=2)
    y = rng.normal(size=6)
    y[[2, 3]] = np.nan
    pred = predict_response(model, y, [3], rng=np.random.default_rng(0))
    full = impute(model, y, rng=np.random.default_rng(0))
    assert pred.mean[0] == full.mean[1] and pred.sd[0] == full.sd[1]
    with pytest.raises(DataError):
        predict_response(model, y, [0])


def test_prediction_beats_column_mean_on_swissroll():
    sc = simulate_scenario(7, n=500, D=30, seed=3)
    train, test = sc.complete[:400], sc.complete[400:]
    model = fit(train, Hyperparams(L=3, iters=120, burn_in=60, d_upper=4))
    preds = []
    for row in test:
        y = row.copy()
        y[0] = np.nan
        preds.append(predict_response(model, y, [0], rng=np.random.default_rng(1)).mean[0])
    mse = np.mean((np.array(preds) - test[:, 0]) ** 2)
    baseline = np.mean((train[:, 0].mean() - test[:, 0]) ** 2)
    assert mse < 0.5 * baseline


# classification


def test_identical_classes_get_even_votes(rng):
    base = random_model(rng, single_node_tree(), D=4, d=2, T=400)
    res = classify([base, base], rng.normal(size=4), rng=rng)
    assert abs(res.votes[0] - 0.5) < 0.1
    assert res.votes.sum() == pytest.approx(1.0)


def test_separated_classes_get_all_votes(rng):
    a = make_model(single_node_tree(), np.zeros(4), random_orthonormal(rng, 4, 1), np.full((5, 1, 1), 0.5), np.ones(5))
    b = make_model(single_node_tree(), np.full(4, 20.0), random_orthonormal(rng, 4, 1), np.full((5, 1, 1), 0.5), np.ones(5))
    res = classify([a, b], np.full(4, 19.0))
    assert res.label == 1 and res.votes.tolist() == [0.0, 1.0]


def test_classification_accuracy_three_classes():
    rng = np.random.default_rng(8)
    D = 10
    centers = 8.0 * np.eye(3, D)
    hyper = Hyperparams(L=2, iters=60, burn_in=30, d_upper=3)
    models, tests = [], []
    for c in range(3):
        Lam = rng.normal(size=(D, 2))
        Y = centers[c] + rng.normal(size=(220, 2)) @ Lam.T + 0.5 * rng.normal(size=(220, D))
        models.append(fit(Y[:200], hyper))
        tests += [(row, c) for row in Y[200:]]
    correct = sum(classify(models, row).label == c for row, c in tests)
    assert correct / len(tests) > 0.95


def test_classification_input_checks(rng):
    a = random_model(rng, single_node_tree(), D=4, d=2, T=3)
    b = random_model(rng, single_node_tree(), D=4, d=2, T=5)
    c = random_model(rng, single_node_tree(), D=5, d=2, T=3)
    y = rng.normal(size=4)
    with pytest.raises(DrawCountMismatch):
        classify([a, b], y)
    assert classify([a, b], y, allow_unequal_draws=True).votes.sum() == pytest.approx(1.0)
    with pytest.raises(DimensionMismatch):
        classify([a, c], y)


def test_classification_invariant_to_common_shift(rng):
    # doubling means, inputs and noise scale shifts every class log-density by -D log 2
    a = random_model(rng, single_node_tree(), D=3, d=1, T=50)
    b = random_model(rng, single_node_tree(), D=3, d=1, T=50)
    y = rng.normal(size=3)

    def doubled(m):
        dic = dataclasses.replace(m.dictionary, mu=2 * m.dictionary.mu)
        return dataclasses.replace(m, dictionary=dic, draws=dataclasses.replace(m.draws, sigma2=4 * m.draws.sigma2))

    res = classify([a, b], y)
    res2 = classify([doubled(a), doubled(b)], 2 * y)
    assert res.label == res2.label and np.array_equal(res.votes, res2.votes)
    assert np.allclose(res2.mean_log_density - res.mean_log_density, -3 * np.log(2))


# inclusion probabilities


def _with_adaptation(model, iters, retained_counts, burn_in=0):
    draws = dataclasses.replace(
        model.draws,
        adapt_iters=np.asarray(iters),
        adapt_retained=np.asarray(retained_counts),
        adapt_deleted=np.zeros(len(iters), dtype=np.int64),
        adapt_reinserted=np.zeros(len(iters), dtype=np.int64),
        burn_in=burn_in,
    )
    return dataclasses.replace(model, draws=draws)


def test_inclusion_all_retained(rng):
    model = make_model(single_node_tree(10), np.zeros(3), random_orthonormal(rng, 3, 2), [[0.5, 0.5]], [1.0])
    model = _with_adaptation(model, [3, 7], [[10, 10], [10, 10]])
    assert inclusion_probabilities(model).tolist() == [1.0, 1.0]


def test_inclusion_uses_post_burn_in_steps(rng):
    model = make_model(single_node_tree(10), np.zeros(3), random_orthonormal(rng, 3, 2), [[0.5, 0.5]], [1.0])
    model = _with_adaptation(model, [3, 7, 12, 15], [[10, 10], [10, 10], [10, 0], [10, 5]], burn_in=10)
    assert inclusion_probabilities(model).tolist() == [1.0, 0.25]


def test_inclusion_requires_adaptation(rng):
    model = make_model(single_node_tree(10), np.zeros(3), random_orthonormal(rng, 3, 2), [[0.5, 0.5]], [1.0])
    with pytest.raises(NoAdaptationSteps):
        inclusion_probabilities(model)


# fitting


def test_fit_input_checks(rng):
    with pytest.raises(ConfigError, match="iters must be"):
        fit(rng.normal(size=(30, 3)), Hyperparams(iters=0, burn_in=0))
    with pytest.raises(EmptyData):
        fit(np.empty((0, 3)))
    Y = rng.normal(size=(30, 3))
    Y[4] = np.nan
    with pytest.raises(NoObservedEntries):
        fit(Y, Hyperparams(iters=5, burn_in=0))


def test_fit_is_reproducible(rng):
    Y = rng.normal(size=(80, 5))
    hyper = Hyperparams(L=2, iters=20, burn_in=5, d_upper=2, seed=4)
    a, b = fit(Y, hyper), fit(Y, hyper)
    assert np.array_equal(a.draws.u, b.draws.u) and np.array_equal(a.draws.membership, b.draws.membership)
    assert a.n_draws == 15 and a.D == 5 and a.d == 2
