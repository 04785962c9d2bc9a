"""Multiscale dictionary learning: per-cell means, rank-d bases, sufficient statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

from .errors import DimensionMismatch, InvalidRank
from .tree import ClusterTree

__all__ = [
    "NodeDictionary",
    "MultiscaleDictionary",
    "SuffStats",
    "randomized_rank_d_svd",
    "orthonormal_completion",
    "fit_dictionary",
    "precompute_stats",
]

# Rows per block when forming (rows, D, d) intermediates.
_BLOCK_ELEMS = 4_000_000
# A thin SVD is used once min(n_c, D) is within this factor of the sketch
# width; it costs about the same there and is exact.
_EXACT_SVD_FACTOR = 4


@dataclass(frozen=True)
class NodeDictionary:
    mu: np.ndarray
    basis: np.ndarray
    singular_values: np.ndarray


@dataclass(frozen=True, eq=False)
class MultiscaleDictionary:
    """Stacked per-node dictionaries.

    ``mu`` has shape (K, D), ``basis`` (K, D, d) with orthonormal columns and
    ``singular_values`` (K, d), non-increasing along the last axis.
    """

    mu: np.ndarray
    basis: np.ndarray
    singular_values: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.mu.shape[0]

    @property
    def D(self) -> int:
        return self.mu.shape[1]

    @property
    def d(self) -> int:
        return self.basis.shape[2]

    def node(self, k: int) -> NodeDictionary:
        return NodeDictionary(self.mu[k], self.basis[k], self.singular_values[k])


@dataclass(frozen=True, eq=False)
class SuffStats:
    """Per-(node, observation) sufficient statistics.

    Complete rows carry ``A[k, i] = |y_i - mu_k|^2`` and
    ``Z[k, i] = Phi_k^T (y_i - mu_k)``; these entries are NaN for partially
    observed rows.  Partially observed rows (listed in ``partial_rows``)
    carry instead ``gram[k, p] = Phi_O^T Phi_O``, ``B[k, p] = |y_O - mu_O|^2``
    and ``C[k, p] = Phi_O^T (y_O - mu_O)`` over their observed coordinates.
    """

    A: np.ndarray
    Z: np.ndarray
    partial_rows: np.ndarray
    gram: np.ndarray
    B: np.ndarray
    C: np.ndarray
    n_observed: np.ndarray
    D: int

    @property
    def complete(self) -> np.ndarray:
        mask = np.ones(self.A.shape[1], dtype=bool)
        mask[self.partial_rows] = False
        return mask


def _fix_signs(V: np.ndarray) -> np.ndarray:
    # Largest-magnitude entry of every column made positive.
    if V.size == 0:
        return V
    pivot = V[np.argmax(np.abs(V), axis=0), np.arange(V.shape[1])]
    return V * np.where(pivot < 0, -1.0, 1.0)


def randomized_rank_d_svd(M, d, oversample=10, power_iters=2, seed=None):
    """Top-``d`` singular values and right singular vectors of ``M``.

    Gaussian range finder with ``power_iters`` re-orthonormalised subspace
    iterations.  When the smaller side of ``M`` is within a small factor of
    the sketch width the exact thin SVD is used instead, since it costs about
    the same.

    Returns
    -------
    singular_values : ndarray of shape (d,)
    right_vectors : ndarray of shape (D, d)
    """
    M = np.asarray(M, dtype=float)
    n_c, D = M.shape
    if d < 0 or d > min(n_c, D):
        raise InvalidRank(f"rank {d} not in [0, min({n_c}, {D})]")
    width = d + oversample
    if _EXACT_SVD_FACTOR * width >= min(n_c, D):
        _, s, Vt = la.svd(M, full_matrices=False)
        return s[:d], _fix_signs(Vt[:d].T)

    rng = np.random.default_rng(seed)
    Q, _ = la.qr(M @ rng.standard_normal((D, width)), mode="economic")
    for _ in range(power_iters):
        W, _ = la.qr(M.T @ Q, mode="economic")
        Q, _ = la.qr(M @ W, mode="economic")
    _, s, Vt = la.svd(Q.T @ M, full_matrices=False)
    return s[:d], _fix_signs(Vt[:d].T)


def orthonormal_completion(V: np.ndarray, total: int, rng) -> np.ndarray:
    """Extend the orthonormal columns of ``V`` (D, k) to ``total`` columns."""
    D, k = V.shape
    if total <= k:
        return V[:, :total]
    G = rng.standard_normal((D, total - k))
    for _ in range(2):
        G = G - V @ (V.T @ G)
    Q, _ = la.qr(G, mode="economic")
    Q = Q - V @ (V.T @ Q)
    Q, _ = la.qr(Q, mode="economic")
    return np.hstack([V, Q])


def _cell_mean(X: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    mask = np.isnan(X)
    if not mask.any():
        return X.mean(axis=0)
    counts = (~mask).sum(axis=0)
    sums = np.where(mask, 0.0, X).sum(axis=0)
    return np.where(counts > 0, sums / np.maximum(counts, 1), fallback)


def _complete_cell(X, mu0, d, rng, oversample, power_iters, max_iter, tol):
    """Mean and rank-``d`` basis of a cell with missing entries.

    Alternates between the mean and top-``d`` subspace of the completed
    matrix and refilling the missing entries from the rank-``d``
    reconstruction, starting from ``mu0``.  Stops when the filled values
    move by less than ``tol`` relative to the spread of the observed data.
    """
    miss = np.isnan(X)
    F = np.where(miss, mu0, X)
    scale = max(float(np.sqrt(np.mean((F - mu0)[~miss] ** 2))), np.finfo(float).tiny)
    rank = min(d, X.shape[0])
    for _ in range(max_iter):
        mu = F.mean(axis=0)
        s, V = randomized_rank_d_svd(F - mu, rank, oversample, power_iters, seed=rng)
        filled = mu + ((F - mu) @ V) @ V.T
        step = np.sqrt(np.mean((filled[miss] - F[miss]) ** 2))
        F[miss] = filled[miss]
        if step <= tol * scale:
            break
    mu = F.mean(axis=0)
    s, V = randomized_rank_d_svd(F - mu, rank, oversample, power_iters, seed=rng)
    return mu, s, V


def fit_dictionary(
    tree: ClusterTree,
    data: np.ndarray,
    d_upper: int,
    seed=0,
    oversample: int = 10,
    power_iters: int = 2,
    impute_iters: int = 50,
    impute_tol: float = 1e-6,
) -> MultiscaleDictionary:
    """Fit a mean and a rank-``d`` orthonormal basis in every tree cell.

    ``d = min(d_upper, D)``.  Cells with fewer than ``d`` points get their
    basis completed with orthonormal directions and zero singular values.

    In a cell with missing entries the mean and basis come from iterative
    rank-``d`` completion of the cell matrix (at most ``impute_iters``
    rounds), so that neither is biased towards the column means the way a
    single pass on mean-filled data is.  Complete cells use the exact cell
    mean and a single SVD.
    """
    Y = np.asarray(data, dtype=float)
    n, D = Y.shape
    if n != tree.n_obs:
        raise DimensionMismatch(f"tree covers {tree.n_obs} rows, data has {n}")
    if d_upper < 1:
        raise ValueError("d_upper must be >= 1")
    d = min(d_upper, D)
    global_mean = _cell_mean(Y, np.zeros(D))
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    seeds = root.spawn(tree.n_nodes)

    mu = np.empty((tree.n_nodes, D))
    basis = np.empty((tree.n_nodes, D, d))
    sv = np.zeros((tree.n_nodes, d))
    for k in range(tree.n_nodes):
        X = Y[tree.indices[k]]
        rng = np.random.default_rng(seeds[k])
        rank = min(d, X.shape[0])
        if np.isnan(X).any():
            mu[k], s, V = _complete_cell(
                X, _cell_mean(X, global_mean), d, rng, oversample, power_iters, impute_iters, impute_tol
            )
        else:
            mu[k] = X.mean(axis=0)
            s, V = randomized_rank_d_svd(X - mu[k], rank, oversample, power_iters, seed=rng)
        sv[k, :rank] = s
        basis[k] = orthonormal_completion(V, d, rng)
    return MultiscaleDictionary(mu=mu, basis=basis, singular_values=sv)


def _block_rows(D: int, d: int) -> int:
    return max(1, _BLOCK_ELEMS // max(1, D * d))


def precompute_stats(dictionary: MultiscaleDictionary, data: np.ndarray) -> SuffStats:
    """Sufficient statistics of every observation at every node."""
    Y = np.asarray(data, dtype=float)
    if Y.ndim != 2 or Y.shape[1] != dictionary.D:
        raise DimensionMismatch(f"data width {Y.shape[-1]} != dictionary dimension {dictionary.D}")
    K, D, d = dictionary.n_nodes, dictionary.D, dictionary.d
    n = Y.shape[0]
    missing = np.isnan(Y)
    partial = np.flatnonzero(missing.any(axis=1))
    complete = np.flatnonzero(~missing.any(axis=1))

    A = np.full((K, n), np.nan)
    Z = np.full((K, n, d), np.nan)
    gram = np.empty((K, len(partial), d, d))
    B = np.empty((K, len(partial)))
    C = np.empty((K, len(partial), d))

    Yc = Y[complete]
    Yp = Y[partial]
    observed = (~missing[partial]).astype(float)
    block = _block_rows(D, d)
    for k in range(K):
        mu_k, Phi = dictionary.mu[k], dictionary.basis[k]
        R = Yc - mu_k
        A[k, complete] = np.einsum("ij,ij->i", R, R)
        Z[k, complete] = R @ Phi
        if len(partial):
            Rp = np.where(observed > 0, Yp - mu_k, 0.0)
            B[k] = np.einsum("ij,ij->i", Rp, Rp)
            C[k] = Rp @ Phi
            for start in range(0, len(partial), block):
                sl = slice(start, start + block)
                PhiO = observed[sl, :, None] * Phi[None]
                gram[k, sl] = np.einsum("pjd,je->pde", PhiO, Phi)
    return SuffStats(
        A=A,
        Z=Z,
        partial_rows=partial,
        gram=gram,
        B=B,
        C=C,
        n_observed=(~missing[partial]).sum(axis=1),
        D=D,
    )
