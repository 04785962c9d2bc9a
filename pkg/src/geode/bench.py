"""Timing of the two fitting stages across a grid of ambient dimensions."""

from __future__ import annotations

import time

import numpy as np

from .dictionary import fit_dictionary, precompute_stats
from .gibbs import run_gibbs
from .model import Hyperparams
from .scenarios import simulate_scenario
from .tree import build_tree

__all__ = ["time_stages", "run_bench", "linear_fit_r2"]


def linear_fit_r2(x, y) -> float:
    """Coefficient of determination of the least-squares line through ``(x, y)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    total = np.sum((y - y.mean()) ** 2)
    return float(1.0 - np.sum(resid**2) / total) if total > 0 else 1.0


def time_stages(data, hyper: Hyperparams, rng=None):
    """Wall time of stage 1 (tree, dictionary, statistics) and per-iteration times of stage 2."""
    t0 = time.perf_counter()
    tree = build_tree(data, hyper.L, hyper.cell_size)
    dictionary = fit_dictionary(tree, data, hyper.d_upper, hyper.seed, hyper.oversample, hyper.power_iters)
    stats = precompute_stats(dictionary, data)
    stage1 = time.perf_counter() - t0

    stamps = []
    rng = np.random.default_rng(hyper.seed) if rng is None else rng
    start = time.perf_counter()
    run_gibbs(data, tree, dictionary, stats, hyper, rng, callback=lambda _: stamps.append(time.perf_counter()))
    per_iter = np.diff(np.concatenate([[start], stamps]))
    return stage1, per_iter


def run_bench(
    D_grid=(500, 1000, 2000, 4000),
    n=600,
    d_upper=10,
    L=3,
    iters=30,
    repeats=3,
    seed=0,
    scenario=7,
) -> dict:
    """Time both stages on Swissroll data at every ``D`` in ``D_grid``.

    Every repeat at a given ``D`` runs the same seeded computation, so
    timing differences between repeats are interference from the machine.
    Stage-1 time is the minimum over ``repeats``.  For stage 2 the minimum
    over repeats is taken per iteration and the median of those minima is
    reported; the first iteration is excluded since it includes
    initialisation.  Repeats cycle through the whole grid so that a burst of
    interference hits every ``D`` alike, and one untimed run warms up the
    process so that first-call costs do not land on the smallest dimension.
    """
    hyper = Hyperparams(d_upper=d_upper, L=L, iters=iters, burn_in=iters - 1, seed=seed)
    datasets = [simulate_scenario(scenario, n=n, D=D, seed=seed).data for D in D_grid]
    time_stages(datasets[0], hyper)
    runs = [[] for _ in D_grid]
    for _ in range(repeats):
        for j, data in enumerate(datasets):
            runs[j].append(time_stages(data, hyper))
    stage1, stage2 = [], []
    for timings in runs:
        stage1.append(min(s1 for s1, _ in timings))
        per_iter = np.min([p for _, p in timings], axis=0)
        stage2.append(float(np.median(per_iter[1:] if per_iter.size > 1 else per_iter)))
    stage2_arr = np.array(stage2)
    return {
        "D": [int(D) for D in D_grid],
        "n": n,
        "d_upper": d_upper,
        "L": L,
        "iters": iters,
        "repeats": repeats,
        "seed": seed,
        "stage1_seconds": stage1,
        "stage2_seconds_per_iter": stage2,
        "stage1_linear_r2": linear_fit_r2(D_grid, stage1),
        "stage2_relative_spread": float((stage2_arr.max() - stage2_arr.min()) / stage2_arr.min()),
    }
