"""Adaptive Gibbs sampler for the multiscale mixture.

One iteration runs, in order: membership allocation, stick updates,
shrinkage ``u`` updates, ``tau`` updates, per-scale variance updates and,
with probability ``exp(c0 + c1 t)``, the dimension deletion / re-insertion
step.  Partially observed rows are allocated with their missing coordinates
integrated out and then have the missing block imputed at the chosen node,
so every parameter update sees complete-data statistics.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .dictionary import MultiscaleDictionary, SuffStats
from .errors import AllZeroWeights, NegativeQuadForm
from .model import (
    LOG_2PI,
    Hyperparams,
    alpha2_from_u,
    latent_posterior,
    partial_node_loglik,
    sample_trunc_exp,
    sample_trunc_gamma01,
    tau_log_conditional,
)
from .tree import ClusterTree

__all__ = [
    "GibbsProblem",
    "NodeCounts",
    "ChainState",
    "PosteriorDraws",
    "compute_weights",
    "node_counts",
    "init_state",
    "membership_log_probs",
    "sample_membership",
    "stick_conditional",
    "update_sticks",
    "u_conditional",
    "update_u",
    "tau_conditional_coefficients",
    "update_tau",
    "sigma_conditional",
    "update_sigma",
    "adapt_dimensions",
    "gibbs_step",
    "run_gibbs",
    "slice_sample",
]

logger = logging.getLogger(__name__)

_BLOCK_ELEMS = 4_000_000


@dataclass(eq=False)
class GibbsProblem:
    """Fixed inputs of the sampler: data, tree, dictionary and statistics."""

    data: np.ndarray
    tree: ClusterTree
    dictionary: MultiscaleDictionary
    stats: SuffStats

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        self.level = self.tree.level
        self.n_scales = self.tree.depth + 1
        self.complete_rows = np.flatnonzero(self.stats.complete)
        self.partial_rows = self.stats.partial_rows
        self.missing = np.isnan(self.data[self.partial_rows])
        self.Z2 = self.stats.Z[:, self.complete_rows] ** 2

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def D(self) -> int:
        return self.dictionary.D

    @property
    def d(self) -> int:
        return self.dictionary.d

    @property
    def K(self) -> int:
        return self.tree.n_nodes


@dataclass
class NodeCounts:
    """Observations stopping at (``n``), passing through (``v``) and turning right at (``r``) each node."""

    n: np.ndarray
    v: np.ndarray
    r: np.ndarray


@dataclass
class ChainState:
    membership: np.ndarray
    S: np.ndarray
    R: np.ndarray
    u: np.ndarray
    tau: np.ndarray
    retained: np.ndarray
    last_ratio: np.ndarray
    sigma2: np.ndarray
    A_cur: np.ndarray
    Z_cur: np.ndarray
    counts: NodeCounts
    t: int = 0

    def copy(self) -> "ChainState":
        return ChainState(
            membership=self.membership.copy(),
            S=self.S.copy(),
            R=self.R.copy(),
            u=self.u.copy(),
            tau=self.tau.copy(),
            retained=self.retained.copy(),
            last_ratio=self.last_ratio.copy(),
            sigma2=self.sigma2.copy(),
            A_cur=self.A_cur.copy(),
            Z_cur=self.Z_cur.copy(),
            counts=NodeCounts(self.counts.n.copy(), self.counts.v.copy(), self.counts.r.copy()),
            t=self.t,
        )


@dataclass
class PosteriorDraws:
    """Thinned post-burn-in snapshots plus the adaptation record.

    Arrays carry the draw index on axis 0.  ``adapt_iters[k]`` is the
    iteration of the k-th adaptation step and ``adapt_retained[k, j]`` the
    number of observations whose current node retained dimension ``j``
    right after that step.
    """

    membership: np.ndarray
    S: np.ndarray
    R: np.ndarray
    u: np.ndarray
    tau: np.ndarray
    retained: np.ndarray
    sigma2: np.ndarray
    adapt_iters: np.ndarray
    adapt_retained: np.ndarray
    adapt_deleted: np.ndarray
    adapt_reinserted: np.ndarray
    n_obs: int
    burn_in: int
    initial_state: ChainState | None = field(default=None, repr=False)

    @property
    def n_draws(self) -> int:
        return self.S.shape[0]


def compute_weights(S, R, tree: ClusterTree) -> np.ndarray:
    """Truncated multiscale stick-breaking weights.

    Stopping is forced at every leaf (scale ``L`` and ragged leaves alike);
    an observation that continues from an internal node turns right with
    probability ``R``.  ``S`` and ``R`` may carry leading batch axes.
    """
    S = np.asarray(S, dtype=float)
    R = np.asarray(R, dtype=float)
    reach = np.zeros(S.shape)
    reach[..., 0] = 1.0
    for k in range(tree.n_nodes):
        lo, hi = tree.left[k], tree.right[k]
        if lo < 0:
            continue
        go = reach[..., k] * (1.0 - S[..., k])
        reach[..., lo] = go * (1.0 - R[..., k])
        reach[..., hi] = go * R[..., k]
    stop = np.where(tree.is_leaf, 1.0, S)
    return reach * stop


def node_counts(membership: np.ndarray, tree: ClusterTree) -> NodeCounts:
    n_stop = np.bincount(membership, minlength=tree.n_nodes)
    v = n_stop.copy()
    for k in range(tree.n_nodes - 1, 0, -1):
        v[tree.parent[k]] += v[k]
    r = np.where(tree.is_leaf, 0, v[np.maximum(tree.right, 0)])
    return NodeCounts(n=n_stop, v=v, r=r)


def _node_sigma2(state: ChainState, problem: GibbsProblem) -> np.ndarray:
    return state.sigma2[problem.level]


def _alpha2(state: ChainState, problem: GibbsProblem) -> np.ndarray:
    a2 = alpha2_from_u(state.u, _node_sigma2(state, problem)[:, None])
    return np.where(state.retained, a2, 0.0)


def _initial_sigma2(problem: GibbsProblem) -> np.ndarray:
    tree, stats = problem.tree, problem.stats
    D, d = problem.D, problem.d
    out = np.empty(problem.n_scales)
    comp = problem.complete_rows
    part = problem.partial_rows
    for s in range(problem.n_scales):
        cell = tree.cell_at_level(s)
        resid, dof = 0.0, 0.0
        if comp.size:
            k = cell[comp]
            resid += np.sum(stats.A[k, comp] - np.sum(stats.Z[k, comp] ** 2, axis=-1))
            dof += comp.size * max(D - d, 1)
        if part.size:
            k = cell[part]
            p = np.arange(part.size)
            resid += np.sum(stats.B[k, p] - np.sum(stats.C[k, p] ** 2, axis=-1))
            dof += np.sum(np.maximum(stats.n_observed - d, 1))
        out[s] = resid / dof
    scale = np.nanmean(np.where(np.isnan(problem.data), np.nan, problem.data**2)) + 1e-300
    return np.maximum(out, 1e-10 * scale)


def init_state(problem: GibbsProblem, hyper: Hyperparams, rng) -> ChainState:
    """Finest-cell memberships, prior sticks, ``tau = 1``, prior-conditional ``u``."""
    K, d = problem.K, problem.d
    membership = problem.tree.leaf_of()
    tau = np.ones((K, d))
    state = ChainState(
        membership=membership,
        S=rng.beta(1.0, hyper.a_S, size=K),
        R=rng.beta(hyper.b_R, hyper.b_R, size=K),
        u=sample_trunc_gamma01(np.cumprod(tau, axis=1), 1.0, rng),
        tau=tau,
        retained=np.ones((K, d), dtype=bool),
        last_ratio=np.zeros((K, d)),
        sigma2=_initial_sigma2(problem),
        A_cur=np.empty(problem.n),
        Z_cur=np.empty((problem.n, d)),
        counts=node_counts(membership, problem.tree),
    )
    _refresh_current_stats(state, problem, rng)
    return state


def membership_log_probs(state: ChainState, problem: GibbsProblem):
    """Unnormalised log allocation probabilities, shape (K, n)."""
    weights = compute_weights(state.S, state.R, problem.tree)
    with np.errstate(divide="ignore"):
        log_w = np.log(weights)
    sig = _node_sigma2(state, problem)
    u = np.where(state.retained, state.u, 1.0)
    out = np.empty((problem.K, problem.n))
    comp = problem.complete_rows
    if comp.size:
        A = problem.stats.A[:, comp]
        quad = A - np.einsum("kid,kd->ki", problem.Z2, 1.0 - u)
        out[:, comp] = (
            -0.5 * problem.D * (LOG_2PI + np.log(sig))[:, None]
            + 0.5 * np.sum(np.log(u), axis=1)[:, None]
            - 0.5 * quad / sig[:, None]
        )
    part = problem.partial_rows
    if part.size:
        st = problem.stats
        out[:, part] = partial_node_loglik(
            st.gram, st.B, st.C, u[:, None, :], sig[:, None], st.n_observed[None, :]
        )
    return out + log_w[:, None]


def sample_membership(state: ChainState, problem: GibbsProblem, rng) -> ChainState:
    """Draw every ``(s_i, h_i)`` from its full conditional (Gumbel-max on log weights)."""
    logp = membership_log_probs(state, problem)
    if not np.all(np.isfinite(logp.max(axis=0))):
        raise AllZeroWeights("an observation has zero probability under every node")
    gumbel = -np.log(-np.log(rng.uniform(size=logp.shape)))
    state.membership = np.argmax(logp + gumbel, axis=0)
    state.counts = node_counts(state.membership, problem.tree)
    _refresh_current_stats(state, problem, rng)
    return state


def _refresh_current_stats(state: ChainState, problem: GibbsProblem, rng) -> None:
    """Statistics of each row at its current node, imputing missing blocks."""
    comp = problem.complete_rows
    k = state.membership[comp]
    state.A_cur[comp] = problem.stats.A[k, comp]
    state.Z_cur[comp] = problem.stats.Z[k, comp]
    part = problem.partial_rows
    if not part.size:
        return
    st, dic = problem.stats, problem.dictionary
    kp = state.membership[part]
    p = np.arange(part.size)
    sig = state.sigma2[problem.level[kp]]
    u = np.where(state.retained[kp], state.u[kp], 1.0)
    mean, root = latent_posterior(st.gram[kp, p], st.C[kp, p], u, sig)
    eta = mean + np.einsum("pde,pe->pd", root, rng.standard_normal(mean.shape))
    block = max(1, _BLOCK_ELEMS // (problem.D * problem.d))
    for start in range(0, part.size, block):
        sl = slice(start, start + block)
        Phi = dic.basis[kp[sl]]
        noise = np.sqrt(sig[sl])[:, None] * rng.standard_normal((len(kp[sl]), problem.D))
        resid = (np.einsum("pjd,pd->pj", Phi, eta[sl]) + noise) * problem.missing[sl]
        state.A_cur[part[sl]] = st.B[kp[sl], p[sl]] + np.sum(resid**2, axis=1)
        state.Z_cur[part[sl]] = st.C[kp[sl], p[sl]] + np.einsum("pjd,pj->pd", Phi, resid)


def stick_conditional(state: ChainState, hyper: Hyperparams, is_leaf=None):
    """Beta parameters ``(a_S', b_S', a_R', b_R')`` of the stick conditionals.

    ``S ~ Beta(1 + n, a_S + v - n)`` and ``R ~ Beta(b_R + r, b_R + v - n - r)``.
    A leaf's stopping stick never enters the truncated weights, so with
    ``is_leaf`` given its conditional is the prior.
    """
    c = state.counts
    n = c.n if is_leaf is None else np.where(is_leaf, 0, c.n)
    return 1.0 + n, hyper.a_S + c.v - c.n, hyper.b_R + c.r, hyper.b_R + c.v - c.n - c.r


def update_sticks(state: ChainState, hyper: Hyperparams, rng, is_leaf=None) -> ChainState:
    aS, bS, aR, bR = stick_conditional(state, hyper, is_leaf)
    state.S = rng.beta(aS, bS)
    state.R = rng.beta(aR, bR)
    return state


def u_conditional(state: ChainState, problem: GibbsProblem):
    """Shape and rate of the truncated-gamma conditional of every ``u``."""
    sum_z2 = np.zeros((problem.K, problem.d))
    np.add.at(sum_z2, state.membership, state.Z_cur**2)
    shape = np.cumprod(state.tau, axis=1) + 0.5 * state.counts.n[:, None]
    rate = 1.0 + 0.5 * sum_z2 / _node_sigma2(state, problem)[:, None]
    return shape, rate


def update_u(state: ChainState, problem: GibbsProblem, rng) -> ChainState:
    shape, rate = u_conditional(state, problem)
    keep = state.retained
    u = np.ones_like(state.u)
    u[keep] = sample_trunc_gamma01(shape[keep], rate[keep], rng)
    state.u = u
    return state


def tau_conditional_coefficients(state: ChainState, m: int):
    """Inputs to :func:`~geode.model.tau_log_conditional` for column ``m`` of every node.

    Returns ``coef`` with ``coef[k, j] = prod_{i <= j, i != m} tau[k, i]``,
    ``log_u`` and the 0/1 ``weight`` selecting retained ``j >= m``.
    """
    coef = np.cumprod(state.tau, axis=1) / state.tau[:, m : m + 1]
    j = np.arange(state.tau.shape[1])
    weight = (state.retained & (j >= m)[None, :]).astype(float)
    log_u = np.log(np.where(state.retained, state.u, 1.0))
    return coef, log_u, weight


def slice_sample(x0, logf, rng, width, max_steps=64, max_shrink=200):
    """One stepping-out / shrinkage slice-sampling move per coordinate.

    ``logf(x, idx)`` evaluates the log target of the coordinates ``idx`` at
    ``x``.  Coordinates are independent; all are advanced together.
    """
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    idx = np.arange(n)
    log_y = logf(x0, idx) - rng.exponential(size=n)
    left = x0 - width * rng.uniform(size=n)
    right = left + width
    j_left = np.floor(max_steps * rng.uniform(size=n)).astype(int)
    j_right = max_steps - 1 - j_left

    for bound, steps, sign in ((left, j_left, -1.0), (right, j_right, 1.0)):
        active = np.flatnonzero(steps > 0)
        while active.size:
            grow = logf(bound[active], active) > log_y[active]
            active = active[grow]
            bound[active] += sign * width
            steps[active] -= 1
            active = active[steps[active] > 0]

    x1 = x0.copy()
    todo = idx
    for _ in range(max_shrink):
        if not todo.size:
            break
        cand = left[todo] + rng.uniform(size=todo.size) * (right[todo] - left[todo])
        ok = logf(cand, todo) > log_y[todo]
        x1[todo[ok]] = cand[ok]
        todo, cand = todo[~ok], cand[~ok]
        below = cand < x0[todo]
        left[todo[below]] = cand[below]
        right[todo[~below]] = cand[~below]
    return x1


def update_tau(state: ChainState, hyper: Hyperparams, rng) -> ChainState:
    """Update the multiplicative shrinkage factors of retained dimensions."""
    K, d = state.tau.shape
    if hyper.tau_update == "paper":
        log_u = np.log(np.where(state.retained, state.u, 1.0))
        tail = np.cumsum(log_u[:, ::-1], axis=1)[:, ::-1]
        lam = hyper.a_tau - tail
        draw = sample_trunc_exp(lam, rng)
        state.tau = np.where(state.retained, draw, state.tau)
        return state

    width = 1.0 / hyper.a_tau
    for m in range(d):
        rows = np.flatnonzero(state.retained[:, m])
        if not rows.size:
            continue
        coef, log_u, weight = tau_conditional_coefficients(state, m)
        coef, log_u, weight = coef[rows], log_u[rows], weight[rows]

        def logf(x, sub):
            return tau_log_conditional(x, coef[sub], log_u[sub], weight[sub], hyper.a_tau)

        state.tau[rows, m] = slice_sample(state.tau[rows, m], logf, rng, width)
    return state


def _scale_residuals(state: ChainState, problem: GibbsProblem) -> np.ndarray:
    u = np.where(state.retained, state.u, 1.0)[state.membership]
    resid = state.A_cur - np.sum((1.0 - u) * state.Z_cur**2, axis=1)
    floor = -1e-9 * (1.0 + np.abs(state.A_cur))
    if np.any(resid < floor):
        raise NegativeQuadForm("residual quadratic form is negative; statistics and parameters disagree")
    return np.maximum(resid, 0.0)


def sigma_conditional(state: ChainState, problem: GibbsProblem, hyper: Hyperparams):
    """Shape and rate of the gamma conditional of each scale's precision."""
    resid = _scale_residuals(state, problem)
    scale_of = problem.level[state.membership]
    n_s = np.bincount(scale_of, minlength=problem.n_scales)
    sum_r = np.bincount(scale_of, weights=resid, minlength=problem.n_scales)
    shape = hyper.a_sigma + 0.5 * problem.D * n_s
    rate = hyper.b_sigma + 0.5 * sum_r
    return shape, rate


def update_sigma(state: ChainState, problem: GibbsProblem, hyper: Hyperparams, rng) -> ChainState:
    shape, rate = sigma_conditional(state, problem, hyper)
    state.sigma2 = 1.0 / rng.gamma(shape, 1.0 / rate)
    return state


def adapt_dimensions(state: ChainState, problem: GibbsProblem, hyper: Hyperparams, rng, t: int, force=False):
    """Delete negligible dimensions or re-insert one, with probability ``p(t)``.

    Returns ``None`` when no adaptation happened, otherwise a dict with the
    numbers of deleted and re-inserted dimensions.
    """
    if not force and rng.uniform() > hyper.adapt_probability(t):
        return None
    alpha2 = _alpha2(state, problem)
    deleted = reinserted = 0
    for k in range(problem.K):
        keep = state.retained[k]
        top = alpha2[k, keep].max() if keep.any() else 0.0
        if top <= 0.0:
            continue
        ratio = alpha2[k] / top
        drop = keep & (ratio < hyper.tol)
        if drop.any():
            # ratio == 1 at the largest dimension, so the pool never empties
            state.retained[k, drop] = False
            state.u[k, drop] = 1.0
            state.last_ratio[k, drop] = ratio[drop]
            deleted += int(drop.sum())
            continue
        pool = np.flatnonzero(~keep)
        if not pool.size:
            continue
        w = state.last_ratio[k, pool]
        prob = w / w.sum() if w.sum() > 0 else np.full(pool.size, 1.0 / pool.size)
        m = int(rng.choice(pool, p=prob))
        state.retained[k, m] = True
        state.tau[k, m] = sample_trunc_exp(hyper.a_tau, rng, size=())
        delta = np.prod(state.tau[k, : m + 1])
        state.u[k, m] = sample_trunc_gamma01(delta, 1.0, rng, size=())
        reinserted += 1
    return {"deleted": deleted, "reinserted": reinserted}


def gibbs_step(state: ChainState, problem: GibbsProblem, hyper: Hyperparams, rng):
    """Advance the chain by one iteration; returns the adaptation summary or ``None``."""
    state.t += 1
    sample_membership(state, problem, rng)
    update_sticks(state, hyper, rng, problem.tree.is_leaf)
    update_u(state, problem, rng)
    update_tau(state, hyper, rng)
    update_sigma(state, problem, hyper, rng)
    return adapt_dimensions(state, problem, hyper, rng, state.t)


def run_gibbs(data, tree, dictionary, stats, hyper: Hyperparams, rng=None, callback=None) -> PosteriorDraws:
    """Run ``hyper.iters`` iterations and keep every ``thin``-th post-burn-in state."""
    if rng is None:
        rng = np.random.default_rng(hyper.seed)
    problem = GibbsProblem(data, tree, dictionary, stats)
    state = init_state(problem, hyper, rng)
    initial = state.copy()
    keep = {name: [] for name in ("membership", "S", "R", "u", "tau", "retained", "sigma2")}
    adapt_iters, adapt_retained, adapt_deleted, adapt_reinserted = [], [], [], []
    verbose = logger.isEnabledFor(logging.DEBUG)

    for _ in range(hyper.iters):
        event = gibbs_step(state, problem, hyper, rng)
        t = state.t
        if event is not None:
            adapt_iters.append(t)
            adapt_retained.append(state.retained[state.membership].sum(axis=0))
            adapt_deleted.append(event["deleted"])
            adapt_reinserted.append(event["reinserted"])
        if t > hyper.burn_in and (t - hyper.burn_in) % hyper.thin == 0:
            for name in keep:
                keep[name].append(np.copy(getattr(state, name)))
        if verbose:
            logger.debug(
                json.dumps(
                    {
                        "iter": t,
                        "sigma2": state.sigma2.tolist(),
                        "retained": int(state.retained.sum()),
                        "adapted": event is not None,
                    }
                )
            )
        if callback is not None:
            callback(state)

    K, d, n = problem.K, problem.d, problem.n
    shapes = {
        "membership": (n,),
        "S": (K,),
        "R": (K,),
        "u": (K, d),
        "tau": (K, d),
        "retained": (K, d),
        "sigma2": (problem.n_scales,),
    }
    arrays = {
        name: np.array(vals) if vals else np.empty((0,) + shapes[name], dtype=getattr(state, name).dtype)
        for name, vals in keep.items()
    }
    return PosteriorDraws(
        **arrays,
        adapt_iters=np.array(adapt_iters, dtype=np.int64),
        adapt_retained=np.array(adapt_retained, dtype=np.int64).reshape(-1, d),
        adapt_deleted=np.array(adapt_deleted, dtype=np.int64),
        adapt_reinserted=np.array(adapt_reinserted, dtype=np.int64),
        n_obs=n,
        burn_in=hyper.burn_in,
        initial_state=initial,
    )
