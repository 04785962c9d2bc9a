import numpy as np
import pytest

from geode.dictionary import MultiscaleDictionary
from geode.gibbs import PosteriorDraws
from geode.inference import FittedModel
from geode.model import Hyperparams
from geode.tree import ClusterTree

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def single_node_tree(n_obs=1):
    return ClusterTree.from_arrays([0], [1], [-1], [-1], [-1], [np.arange(n_obs)], n_obs)


def full_tree(depth, n_obs=None):
    """Complete binary tree of the given depth in breadth-first order."""
    level, position, parent, left, right = [], [], [], [], []
    for s in range(depth + 1):
        for h in range(1, 2**s + 1):
            k = len(level)
            level.append(s)
            position.append(h)
            parent.append(-1 if s == 0 else (2 ** (s - 1) - 1) + (h + 1) // 2 - 1)
            left.append(-1)
            right.append(-1)
    for k, p in enumerate(parent):
        if p >= 0:
            if position[k] % 2 == 1:
                left[p] = k
            else:
                right[p] = k
    n_obs = 2**depth if n_obs is None else n_obs
    leaves = [k for k in range(len(level)) if left[k] < 0]
    chunks = np.array_split(np.arange(n_obs), len(leaves))
    idx = [None] * len(level)
    for k, c in zip(leaves, chunks):
        idx[k] = c
    for k in range(len(level) - 1, -1, -1):
        if idx[k] is None:
            idx[k] = np.sort(np.concatenate([idx[left[k]], idx[right[k]]]))
    return ClusterTree.from_arrays(level, position, parent, left, right, idx, n_obs)


def random_ragged_tree(rng, max_depth, p_split=0.7):
    """Random binary tree with leaves at assorted depths (breadth-first order)."""
    level, position, parent, left, right = [0], [1], [-1], [-1], [-1]
    queue = [0]
    while queue:
        k = queue.pop(0)
        if level[k] >= max_depth or (k > 0 and rng.uniform() > p_split):
            continue
        for h in (2 * position[k] - 1, 2 * position[k]):
            level.append(level[k] + 1)
            position.append(h)
            parent.append(k)
            left.append(-1)
            right.append(-1)
            queue.append(len(level) - 1)
        left[k], right[k] = len(level) - 2, len(level) - 1
    K = len(level)
    idx = [np.arange(1)] * K
    return ClusterTree.from_arrays(level, position, parent, left, right, idx, 1)


def make_model(tree, mu, basis, u, sigma2, S=None, R=None, retained=None, hyper=None):
    """Fitted model with explicitly given parameters; leading axis of u, sigma2 etc. is the draw."""
    u = np.asarray(u, dtype=float)
    if u.ndim == 2:
        u = u[None]
    T, K, d = u.shape
    sigma2 = np.asarray(sigma2, dtype=float).reshape(T, -1)
    S = np.full((T, K), 0.5) if S is None else np.asarray(S, dtype=float).reshape(T, K)
    R = np.full((T, K), 0.5) if R is None else np.asarray(R, dtype=float).reshape(T, K)
    retained = np.ones((T, K, d), dtype=bool) if retained is None else np.asarray(retained).reshape(T, K, d)
    draws = PosteriorDraws(
        membership=np.zeros((T, tree.n_obs), dtype=np.int64),
        S=S,
        R=R,
        u=u,
        tau=np.ones((T, K, d)),
        retained=retained,
        sigma2=sigma2,
        adapt_iters=np.empty(0, dtype=np.int64),
        adapt_retained=np.empty((0, d), dtype=np.int64),
        adapt_deleted=np.empty(0, dtype=np.int64),
        adapt_reinserted=np.empty(0, dtype=np.int64),
        n_obs=tree.n_obs,
        burn_in=0,
    )
    sv = np.zeros((K, d))
    dic = MultiscaleDictionary(mu=np.asarray(mu, float).reshape(K, -1), basis=np.asarray(basis, float).reshape(K, -1, d), singular_values=sv)
    return FittedModel(tree, dic, hyper or Hyperparams(), draws)


def random_orthonormal(rng, D, d):
    Q, _ = np.linalg.qr(rng.standard_normal((D, d)))
    return Q
