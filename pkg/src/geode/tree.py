"""Binary clustering tree built by recursive 2-means splitting.

Nodes are addressed by ``(s, h)`` with scale ``s >= 0`` and 1-based position
``h`` in ``1..2**s``; the children of ``(s, h)`` are ``(s+1, 2h-1)`` (left)
and ``(s+1, 2h)`` (right).  Internally nodes are stored in breadth-first
order, so a parent's flat index is always smaller than its children's.
"""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateCellWarning, EmptyData

__all__ = ["ClusterTree", "build_tree", "two_means", "fill_missing"]


@dataclass(frozen=True, eq=False)
class ClusterTree:
    """Immutable binary tree of dyadic cells over ``n_obs`` observations.

    Attributes
    ----------
    level, position : ndarray of int
        Scale ``s`` and 1-based within-scale position ``h`` of each node.
    parent, left, right : ndarray of int
        Flat indices of the parent and children, ``-1`` when absent.
    indices : list of ndarray
        Sorted observation indices contained in each node's cell.
    n_obs : int
        Number of training observations the tree partitions.
    """

    level: np.ndarray
    position: np.ndarray
    parent: np.ndarray
    left: np.ndarray
    right: np.ndarray
    indices: list
    n_obs: int
    _lookup: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        lookup = {(int(s), int(h)): k for k, (s, h) in enumerate(zip(self.level, self.position))}
        object.__setattr__(self, "_lookup", lookup)

    @property
    def n_nodes(self) -> int:
        return len(self.level)

    @property
    def depth(self) -> int:
        return int(self.level.max())

    @property
    def is_leaf(self) -> np.ndarray:
        return self.left < 0

    def node(self, s: int, h: int) -> int:
        """Flat index of node ``(s, h)``; raises ``KeyError`` if absent."""
        return self._lookup[(s, h)]

    def has_node(self, s: int, h: int) -> bool:
        return (s, h) in self._lookup

    def sizes(self) -> np.ndarray:
        return np.array([len(ix) for ix in self.indices])

    def leaf_of(self) -> np.ndarray:
        """Flat index of the leaf cell holding each observation."""
        out = np.full(self.n_obs, -1, dtype=np.int64)
        for k in np.flatnonzero(self.is_leaf):
            out[self.indices[k]] = k
        return out

    def cell_at_level(self, s: int) -> np.ndarray:
        """Node holding each observation at scale ``s``.

        Observations whose branch stopped above ``s`` map to that shallower leaf,
        so the result is always a partition of the sample.
        """
        out = np.full(self.n_obs, -1, dtype=np.int64)
        for k in range(self.n_nodes):
            if self.level[k] == s or (self.level[k] < s and self.left[k] < 0):
                out[self.indices[k]] = k
        return out

    def ancestors(self, k: int) -> list[int]:
        """Flat indices on the path from the root down to ``k`` (inclusive)."""
        path = [k]
        while self.parent[path[-1]] >= 0:
            path.append(int(self.parent[path[-1]]))
        return path[::-1]

    def descendant_mask(self, k: int) -> np.ndarray:
        """Boolean mask of ``k`` and all of its descendants."""
        mask = np.zeros(self.n_nodes, dtype=bool)
        stack = [k]
        while stack:
            j = stack.pop()
            mask[j] = True
            if self.left[j] >= 0:
                stack.extend((int(self.left[j]), int(self.right[j])))
        return mask

    @classmethod
    def from_arrays(cls, level, position, parent, left, right, indices, n_obs):
        return cls(
            level=np.asarray(level, dtype=np.int64),
            position=np.asarray(position, dtype=np.int64),
            parent=np.asarray(parent, dtype=np.int64),
            left=np.asarray(left, dtype=np.int64),
            right=np.asarray(right, dtype=np.int64),
            indices=[np.asarray(ix, dtype=np.int64) for ix in indices],
            n_obs=int(n_obs),
        )


def fill_missing(Y: np.ndarray) -> np.ndarray:
    """Replace NaN entries with their column mean (0 for all-missing columns)."""
    Y = np.asarray(Y, dtype=float)
    mask = np.isnan(Y)
    if not mask.any():
        return Y
    counts = (~mask).sum(axis=0)
    sums = np.where(mask, 0.0, Y).sum(axis=0)
    col_mean = np.divide(sums, counts, out=np.zeros(Y.shape[1]), where=counts > 0)
    return np.where(mask, col_mean[None, :], Y)


def two_means(X: np.ndarray, max_iter: int = 100) -> np.ndarray | None:
    """Lloyd 2-means with farthest-point initialisation.

    Returns a boolean array (True = second cluster), or ``None`` when all
    rows coincide.  Assignment ties go to the first centroid.
    """
    center = X.mean(axis=0)
    d0 = ((X - center) ** 2).sum(axis=1)
    i0 = int(np.argmax(d0))
    d1 = ((X - X[i0]) ** 2).sum(axis=1)
    i1 = int(np.argmax(d1))
    if d1[i1] == 0.0:
        return None
    c = np.stack([X[i0], X[i1]])
    assign = None
    for _ in range(max_iter):
        new = ((X - c[1]) ** 2).sum(axis=1) < ((X - c[0]) ** 2).sum(axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        if assign.all() or not assign.any():
            break
        c = np.stack([X[~assign].mean(axis=0), X[assign].mean(axis=0)])
    return assign


def build_tree(data: np.ndarray, max_depth: int, min_cell_size: int = 20) -> ClusterTree:
    """Split the sample recursively into a binary clustering tree.

    A cell is split by 2-means unless it is already at ``max_depth``, its
    points coincide, or either child would hold fewer than ``min_cell_size``
    observations; in those cases it stays a leaf (the tree may be ragged).
    Missing entries are filled with column means for the purpose of splitting.

    Parameters
    ----------
    data : ndarray of shape (n, D)
        Observations, NaN marking missing entries.
    max_depth : int
        Deepest scale ``L`` allowed.
    min_cell_size : int
        Minimum child size for a split to be accepted.
    """
    Y = np.asarray(data, dtype=float)
    if Y.ndim != 2 or Y.shape[0] == 0:
        raise EmptyData("cannot build a tree on an empty data set")
    if max_depth < 0:
        raise ValueError("max_depth must be >= 0")
    if min_cell_size < 2:
        raise ValueError("min_cell_size must be >= 2")
    X = fill_missing(Y)
    n = X.shape[0]

    level, position, parent, left, right, indices = [0], [1], [-1], [-1], [-1], [np.arange(n)]
    queue = deque([0])
    while queue:
        k = queue.popleft()
        ix = indices[k]
        if level[k] >= max_depth or len(ix) < 2 * min_cell_size:
            continue
        assign = two_means(X[ix])
        if assign is None:
            warnings.warn(
                f"cell ({level[k]}, {position[k]}) has {len(ix)} identical points; left unsplit",
                DegenerateCellWarning,
                stacklevel=2,
            )
            continue
        a, b = ix[~assign], ix[assign]
        if len(a) < min_cell_size or len(b) < min_cell_size:
            continue
        # Left child is the cluster holding the lowest observation index.
        if b[0] < a[0]:
            a, b = b, a
        for h_child, cells in ((2 * position[k] - 1, a), (2 * position[k], b)):
            level.append(level[k] + 1)
            position.append(h_child)
            parent.append(k)
            left.append(-1)
            right.append(-1)
            indices.append(cells)
            queue.append(len(level) - 1)
        left[k], right[k] = len(level) - 2, len(level) - 1

    return ClusterTree.from_arrays(level, position, parent, left, right, indices, n)
