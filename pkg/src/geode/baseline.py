"""Multiscale principal component regression (MPCR) baseline."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .dictionary import MultiscaleDictionary
from .errors import DataError, EmptyCellAtScale
from .tree import ClusterTree

__all__ = ["MPCRResult", "mpcr_baseline", "mpcr_curve", "nearest_center"]


@dataclass(frozen=True)
class MPCRResult:
    scale: int
    mse: float
    predictions: np.ndarray
    cells: np.ndarray


def nearest_center(Y: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Index of the closest center for each row, using only its observed coordinates."""
    obs = ~np.isnan(Y)
    Yz = np.where(obs, Y, 0.0)
    # |y_O - c_O|^2 = |y_O|^2 - 2 y_O.c + |c_O|^2
    dist = (
        np.sum(Yz**2, axis=1)[:, None]
        - 2.0 * Yz @ centers.T
        + obs.astype(float) @ (centers**2).T
    )
    return np.argmin(dist, axis=1)


def mpcr_baseline(
    tree: ClusterTree,
    dictionary: MultiscaleDictionary,
    train: np.ndarray,
    test: np.ndarray,
    scale: int,
    response: int,
    truth: np.ndarray | None = None,
) -> MPCRResult:
    """Local PCR of the ``response`` coordinate within the cells of one scale.

    In every cell at ``scale`` (shallower leaves stand in where a branch
    stopped early) the response is regressed by least squares on an
    intercept and the ``d`` local principal scores, computed with the
    response row of the basis removed.  Each test row is sent to the cell
    with the nearest center on its observed coordinates.  Cells with fewer
    than ``d + 2`` training rows predict their mean response and raise an
    :class:`EmptyCellAtScale` warning.

    Parameters
    ----------
    truth : ndarray, optional
        True response values of the test rows; the MSE is NaN without it.
    """
    train = np.asarray(train, dtype=float)
    test = np.atleast_2d(np.asarray(test, dtype=float))
    if not 0 <= scale <= tree.depth:
        raise ValueError(f"scale must lie in [0, {tree.depth}]")
    D, d = dictionary.D, dictionary.d
    if train.shape[1] != D or test.shape[1] != D:
        raise DataError("train and test must have the dictionary's width")
    keep = np.arange(D) != response

    cell_of_train = tree.cell_at_level(scale)
    cells = np.unique(cell_of_train)
    coef = {}
    thin_cells = []
    for k in cells:
        rows = train[cell_of_train == k]
        mu, Phi = dictionary.mu[k], dictionary.basis[k]
        y = rows[:, response]
        ok = ~np.isnan(y)
        if ok.sum() < d + 2:
            thin_cells.append(int(k))
            coef[k] = None
            continue
        X = np.nan_to_num(rows[ok][:, keep] - mu[keep], nan=0.0) @ Phi[keep]
        design = np.column_stack([np.ones(X.shape[0]), X])
        coef[k] = np.linalg.lstsq(design, y[ok], rcond=None)[0]
    if thin_cells:
        warnings.warn(
            f"cells {thin_cells} at scale {scale} are too small for regression; using cell means",
            EmptyCellAtScale,
            stacklevel=2,
        )

    probe = test.copy()
    probe[:, response] = np.nan
    assign = cells[nearest_center(probe, dictionary.mu[cells])]
    pred = np.empty(test.shape[0])
    for i, k in enumerate(assign):
        mu, Phi = dictionary.mu[k], dictionary.basis[k]
        if coef[k] is None:
            pred[i] = mu[response]
            continue
        z = np.nan_to_num(probe[i, keep] - mu[keep], nan=0.0) @ Phi[keep]
        pred[i] = coef[k][0] + z @ coef[k][1:]
    mse = float(np.mean((pred - truth) ** 2)) if truth is not None else float("nan")
    return MPCRResult(scale=scale, mse=mse, predictions=pred, cells=assign)


def mpcr_curve(tree, dictionary, train, test, response, truth) -> np.ndarray:
    """MPCR test MSE at every scale of the tree."""
    return np.array(
        [mpcr_baseline(tree, dictionary, train, test, s, response, truth).mse for s in range(tree.depth + 1)]
    )
