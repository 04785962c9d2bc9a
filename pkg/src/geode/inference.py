"""Consumers of posterior draws: density, imputation, prediction, classification."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .dictionary import MultiscaleDictionary, fit_dictionary, precompute_stats
from .errors import (
    DataError,
    DimensionMismatch,
    DrawCountMismatch,
    EmptyData,
    NoAdaptationSteps,
    NoObservedEntries,
)
from .gibbs import PosteriorDraws, compute_weights, run_gibbs
from .model import LOG_2PI, Hyperparams, latent_posterior, partial_node_loglik
from .tree import ClusterTree, build_tree

__all__ = [
    "FittedModel",
    "ImputationResult",
    "Prediction",
    "Classification",
    "fit",
    "draw_log_densities",
    "log_density",
    "partial_node_loglik",
    "impute",
    "predict_response",
    "classify",
    "inclusion_probabilities",
]

_BLOCK_ELEMS = 4_000_000


@dataclass(frozen=True, eq=False)
class FittedModel:
    """A fitted tree, dictionary, hyperparameters and posterior draws."""

    tree: ClusterTree
    dictionary: MultiscaleDictionary
    hyperparams: Hyperparams
    draws: PosteriorDraws

    def __post_init__(self):
        if self.draws.n_draws == 0:
            raise ValueError("a fitted model needs at least one posterior draw")
        if self.dictionary.n_nodes != self.tree.n_nodes:
            raise ValueError("dictionary and tree disagree on the number of nodes")

    @property
    def D(self) -> int:
        return self.dictionary.D

    @property
    def d(self) -> int:
        return self.dictionary.d

    @property
    def n_draws(self) -> int:
        return self.draws.n_draws

    def log_weights(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(compute_weights(self.draws.S, self.draws.R, self.tree))

    def node_sigma2(self) -> np.ndarray:
        """Per-draw noise variance of every node, shape (T, K)."""
        return self.draws.sigma2[:, self.tree.level]

    def effective_u(self) -> np.ndarray:
        return np.where(self.draws.retained, self.draws.u, 1.0)


@dataclass(frozen=True)
class ImputationResult:
    """Posterior summaries of the missing coordinates of one row.

    ``samples`` has one row per (draw, repeat) pair and ``eta`` the matching
    latent factors; ``nodes`` are the flat node indices used.
    """

    missing: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    samples: np.ndarray
    eta: np.ndarray
    nodes: np.ndarray


@dataclass(frozen=True)
class Prediction:
    indices: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


@dataclass(frozen=True)
class Classification:
    label: int
    votes: np.ndarray
    mean_log_density: np.ndarray


def fit(data, hyper: Hyperparams | None = None, rng=None) -> FittedModel:
    """Build the tree, learn the dictionary and run the sampler on ``data``."""
    hyper = Hyperparams() if hyper is None else hyper
    hyper.check_fittable()
    data = np.asarray(data, dtype=float)
    if data.ndim != 2 or data.shape[0] == 0:
        raise EmptyData("no observations to fit")
    if np.any(np.isnan(data).all(axis=1)):
        raise NoObservedEntries("every row needs at least one observed entry")
    dict_seed, chain_seed = np.random.SeedSequence(hyper.seed).spawn(2)
    tree = build_tree(data, hyper.L, hyper.cell_size)
    dictionary = fit_dictionary(tree, data, hyper.d_upper, dict_seed, hyper.oversample, hyper.power_iters)
    stats = precompute_stats(dictionary, data)
    if rng is None:
        rng = np.random.default_rng(chain_seed)
    draws = run_gibbs(data, tree, dictionary, stats, hyper, rng)
    return FittedModel(tree, dictionary, hyper, draws)


def _as_rows(model: FittedModel, y) -> np.ndarray:
    Y = np.asarray(y, dtype=float)
    if Y.ndim == 1:
        Y = Y[None, :]
    if Y.ndim != 2 or Y.shape[1] != model.D:
        raise DimensionMismatch(f"expected {model.D} columns, got shape {np.shape(y)}")
    return Y


def draw_log_densities(model: FittedModel, y) -> np.ndarray:
    """Mixture log-density of each row under each posterior draw, shape (T, m)."""
    Y = _as_rows(model, y)
    if np.isnan(Y).any():
        raise DataError("density evaluation needs fully observed rows")
    dic = model.dictionary
    log_w = model.log_weights()
    sig = model.node_sigma2()
    one_minus_u = 1.0 - model.effective_u()
    const = -0.5 * model.D * (LOG_2PI + np.log(sig)) + 0.5 * np.sum(np.log(model.effective_u()), axis=-1)
    T, K = sig.shape
    out = np.empty((T, Y.shape[0]))
    block = max(1, _BLOCK_ELEMS // (K * max(T, model.D)))
    for start in range(0, Y.shape[0], block):
        rows = Y[start : start + block]
        resid = rows[None, :, :] - dic.mu[:, None, :]
        A = np.einsum("kij,kij->ki", resid, resid)
        Z2 = np.einsum("kij,kjd->kid", resid, dic.basis) ** 2
        quad = A[None] - np.einsum("kid,tkd->tki", Z2, one_minus_u)
        ll = const[:, :, None] - 0.5 * quad / sig[:, :, None] + log_w[:, :, None]
        out[:, start : start + block] = logsumexp(ll, axis=1)
    return out


def log_density(model: FittedModel, y) -> float | np.ndarray:
    """Posterior-mean log-density (log-mean-exp over draws) of one row or a batch."""
    per_draw = draw_log_densities(model, y)
    out = logsumexp(per_draw, axis=0) - np.log(per_draw.shape[0])
    return float(out[0]) if np.ndim(y) == 1 else out


def _node_posteriors(model: FittedModel, y: np.ndarray):
    """Per-draw allocation probabilities and latent posteriors for a masked row."""
    stats = precompute_stats(model.dictionary, y[None, :])
    gram, B, C = stats.gram[:, 0], stats.B[:, 0], stats.C[:, 0]
    u = model.effective_u()
    sig = model.node_sigma2()
    n_obs = int(np.sum(~np.isnan(y)))
    logp = partial_node_loglik(gram[None], B[None], C[None], u, sig, n_obs) + model.log_weights()
    logp -= logsumexp(logp, axis=1, keepdims=True)
    mean, root = latent_posterior(gram[None], C[None], u, sig)
    return np.exp(logp), mean, root, sig


def impute(model: FittedModel, y, rng=None, samples_per_draw: int = 1) -> ImputationResult:
    """Posterior of the missing coordinates of ``y`` (NaN marks missing).

    For every draw the node is resampled from its marginal allocation
    probability given the observed coordinates, then ``eta`` and the missing
    block are drawn from their Gaussian conditionals.  ``mean`` and ``sd``
    are exact mixture moments over nodes and draws; the interval comes from
    the 2.5% and 97.5% quantiles of the sampled values.
    """
    y = _as_rows(model, y)[0]
    missing = np.flatnonzero(np.isnan(y))
    d = model.d
    if missing.size == y.size:
        raise NoObservedEntries("at least one coordinate must be observed")
    if missing.size == 0:
        empty = np.empty(0)
        return ImputationResult(missing, empty, empty, empty, empty, np.empty((0, 0)), np.empty((0, d)), np.empty(0, int))
    rng = np.random.default_rng() if rng is None else rng
    prob, mean, root, sig = _node_posteriors(model, y)
    T, K = prob.shape
    mu_M = model.dictionary.mu[:, missing]
    Phi_M = model.dictionary.basis[:, missing, :]

    # Mixture moments: E[y_M] and E[y_M^2] per draw, averaged over draws.
    first = np.zeros(missing.size)
    second = np.zeros(missing.size)
    for t in range(T):
        loc = mu_M + np.einsum("kmd,kd->km", Phi_M, mean[t])
        spread = np.einsum("kmd,kde->kme", Phi_M, root[t])
        var = np.sum(spread**2, axis=-1) + sig[t][:, None]
        first += prob[t] @ loc
        second += prob[t] @ (var + loc**2)
    first /= T
    second /= T

    reps = int(samples_per_draw)
    if reps < 1:
        raise ValueError("samples_per_draw must be >= 1")
    draw_idx = np.repeat(np.arange(T), reps)
    cum = np.cumsum(prob[draw_idx], axis=1)
    pick = rng.uniform(size=(draw_idx.size, 1)) * cum[:, -1:]
    nodes = np.minimum(np.sum(cum < pick, axis=1), K - 1)
    eta = mean[draw_idx, nodes] + np.einsum(
        "sde,se->sd", root[draw_idx, nodes], rng.standard_normal((draw_idx.size, d))
    )
    noise = np.sqrt(sig[draw_idx, nodes])[:, None] * rng.standard_normal((draw_idx.size, missing.size))
    samples = mu_M[nodes] + np.einsum("smd,sd->sm", Phi_M[nodes], eta) + noise

    lower, upper = np.quantile(samples, [0.025, 0.975], axis=0)
    return ImputationResult(
        missing=missing,
        mean=first,
        sd=np.sqrt(np.maximum(second - first**2, 0.0)),
        lower=np.minimum(lower, first),
        upper=np.maximum(upper, first),
        samples=samples,
        eta=eta,
        nodes=nodes,
    )


def predict_response(model: FittedModel, y, response_indices, rng=None, samples_per_draw: int = 1) -> Prediction:
    """Posterior mean and 95% interval of the masked ``response_indices`` of ``y``."""
    y = _as_rows(model, y)[0]
    response = np.atleast_1d(np.asarray(response_indices, dtype=np.int64))
    if not np.all(np.isnan(y[response])):
        raise DataError("response coordinates must be missing in y")
    result = impute(model, y, rng=rng, samples_per_draw=samples_per_draw)
    pos = np.searchsorted(result.missing, response)
    return Prediction(response, result.mean[pos], result.sd[pos], result.lower[pos], result.upper[pos])


def classify(models, y, allow_unequal_draws: bool = False, rng=None) -> Classification:
    """Vote over posterior draws for the class whose model gives ``y`` the highest density.

    Draw ``t`` of every class model is paired with draw ``t`` of the others.
    Exact ties within a draw are split uniformly at random with ``rng``;
    ties among the vote counts go to the class with the larger
    posterior-mean log-density.
    """
    models = list(models)
    if not models:
        raise ValueError("need at least one class model")
    D = {m.D for m in models}
    if len(D) != 1:
        raise DimensionMismatch(f"class models disagree on the dimension: {sorted(D)}")
    counts = [m.n_draws for m in models]
    if len(set(counts)) != 1 and not allow_unequal_draws:
        raise DrawCountMismatch(f"class models have different draw counts {counts}")
    T = min(counts)
    per_draw = np.stack([draw_log_densities(m, y)[:T, 0] for m in models])
    rng = np.random.default_rng(0) if rng is None else rng
    top = per_draw == per_draw.max(axis=0, keepdims=True)
    winners = np.argmax(np.where(top, rng.uniform(size=per_draw.shape), -1.0), axis=0)
    votes = np.bincount(winners, minlength=len(models)) / T
    mean_ld = logsumexp(per_draw, axis=1) - np.log(T)
    best = np.flatnonzero(votes == votes.max())
    label = int(best[np.argmax(mean_ld[best])])
    return Classification(label=label, votes=votes, mean_log_density=mean_ld)


def inclusion_probabilities(model: FittedModel) -> np.ndarray:
    """Share of (adaptation step, observation) pairs retaining each dimension.

    Post-burn-in adaptation steps are used when there are any, otherwise all.
    """
    draws = model.draws
    if draws.adapt_iters.size == 0:
        raise NoAdaptationSteps("the chain recorded no adaptation steps")
    late = draws.adapt_iters > draws.burn_in
    tallies = draws.adapt_retained[late] if late.any() else draws.adapt_retained
    return tallies.mean(axis=0) / draws.n_obs
