"""Synthetic data generators used in the experiments and tests."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidScenario

__all__ = [
    "Scenario",
    "SCENARIO_DEFAULTS",
    "simulate_scenario",
    "gaussian_factor",
    "swissroll",
    "threemix",
    "parabola",
    "mask_completely_at_random",
]

# (p, D) for the Gaussian scenarios 1-6 and D for the Swissroll scenarios 7-9.
SCENARIO_DEFAULTS = {
    1: (10, 5000),
    2: (10, 10000),
    3: (10, 15000),
    4: (50, 5000),
    5: (50, 10000),
    6: (50, 15000),
    7: (3, 5000),
    8: (3, 10000),
    9: (3, 15000),
}

SWISSROLL_NOISE_VAR = 2.5e-5
LOADING_SD = 5.0
# Loadings are written to the truth record only up to this many entries.
_MAX_TRUTH_LOADINGS = 100_000


@dataclass
class Scenario:
    """Generated data plus its ground truth.

    ``data`` carries NaN where the missingness mask applies, ``complete`` is
    the same matrix before masking and ``truth`` is a JSON-ready record.
    """

    data: np.ndarray
    complete: np.ndarray
    labels: np.ndarray | None = None
    truth: dict = field(default_factory=dict)


def mask_completely_at_random(Y: np.ndarray, fraction: float, rng) -> np.ndarray:
    """Hide exactly ``round(fraction * size)`` entries, keeping one observed entry per row."""
    n, D = Y.shape
    count = int(round(fraction * Y.size))
    hidden = np.zeros(Y.size, dtype=bool)
    hidden[rng.permutation(Y.size)[:count]] = True
    hidden = hidden.reshape(n, D)
    for i in np.flatnonzero(hidden.all(axis=1)):
        hidden[i, rng.integers(D)] = False
    return np.where(hidden, np.nan, Y)


def _loadings(D, p, rng):
    return rng.normal(0.0, LOADING_SD, size=(D, p))


def gaussian_factor(n, D, p, rng):
    """``y ~ N_D(0, Lambda Lambda^T + sigma2 I)`` with ``10 sigma2 ~ chi-square(1)``."""
    Lam = _loadings(D, p, rng)
    sigma2 = rng.chisquare(1) / 10.0
    eta = rng.standard_normal((n, p))
    Y = eta @ Lam.T + np.sqrt(sigma2) * rng.standard_normal((n, D))
    return Y, Lam, sigma2


def swissroll(n, rng, noise_var=SWISSROLL_NOISE_VAR):
    """Points ``(t cos t, w, t sin t)`` with ``t ~ U[1.5 pi, 4.5 pi]``, ``w ~ U[0, 21]`` plus noise."""
    t = rng.uniform(1.5 * np.pi, 4.5 * np.pi, size=n)
    w = rng.uniform(0.0, 21.0, size=n)
    eta = np.column_stack([t * np.cos(t), w, t * np.sin(t)])
    if noise_var > 0:
        eta = eta + np.sqrt(noise_var) * rng.standard_normal(eta.shape)
    return eta, t, w


def threemix(n, D, rng, dims=(3, 5, 7), separation=50.0, sigma2=0.1):
    """Three equally weighted factor-analyser components with pairwise mean distance ``separation``."""
    # Vertices of an equilateral triangle in a random 2-plane of R^D.
    Q, _ = np.linalg.qr(rng.standard_normal((D, 2)))
    r = separation / np.sqrt(3.0)
    angles = np.pi / 2 + 2 * np.pi * np.arange(3) / 3
    means = r * (np.cos(angles)[:, None] * Q[:, 0] + np.sin(angles)[:, None] * Q[:, 1])
    loadings = [_loadings(D, p, rng) for p in dims]
    labels = rng.integers(0, 3, size=n)
    Y = np.empty((n, D))
    for c, p in enumerate(dims):
        idx = np.flatnonzero(labels == c)
        eta = rng.standard_normal((idx.size, p))
        Y[idx] = means[c] + eta @ loadings[c].T + np.sqrt(sigma2) * rng.standard_normal((idx.size, D))
    return Y, labels, means, loadings


def parabola(n, D, rng, noise_sd=0.01):
    """Noisy points on ``x2 = x1^2``, ``x1 ~ U[-1, 1]``, embedded linearly when ``D > 2``."""
    x = rng.uniform(-1.0, 1.0, size=n)
    P = np.column_stack([x, x**2]) + noise_sd * rng.standard_normal((n, 2))
    if D == 2:
        return P, None
    Q, _ = np.linalg.qr(rng.standard_normal((D, 2)))
    return P @ Q.T, Q


def _parse_id(sid):
    if isinstance(sid, str) and sid.isdigit():
        sid = int(sid)
    if sid in SCENARIO_DEFAULTS or sid in ("threemix", "parabola"):
        return sid
    raise InvalidScenario(f"unknown scenario {sid!r}; expected 1-9, 'threemix' or 'parabola'")


def simulate_scenario(sid, n=600, D=None, p=None, seed=0, missing=False, missing_fraction=0.2) -> Scenario:
    """Generate one synthetic data set.

    Parameters
    ----------
    sid : int or str
        1-6 Gaussian factor data, 7-9 embedded Swissroll, ``"threemix"`` or
        ``"parabola"``.
    n, D, p : int
        Sample size, ambient and intrinsic dimension; ``None`` picks the
        scenario default.
    seed : int
        Seed of the generator; equal seeds give identical output.
    missing : bool
        Apply a missing-completely-at-random mask to ``missing_fraction`` of
        the entries.
    """
    sid = _parse_id(sid)
    rng = np.random.default_rng(seed)
    truth = {"scenario": sid, "n": int(n), "seed": seed, "missing_fraction": missing_fraction if missing else 0.0}
    labels = None

    if isinstance(sid, int) and sid <= 6:
        p0, D0 = SCENARIO_DEFAULTS[sid]
        p = p0 if p is None else p
        D = D0 if D is None else D
        if not 1 <= p <= D:
            raise InvalidScenario(f"need 1 <= p <= D, got p={p}, D={D}")
        Y, Lam, sigma2 = gaussian_factor(n, D, p, rng)
        truth.update(kind="gaussian", D=D, p=p, sigma2=float(sigma2))
        if Lam.size <= _MAX_TRUTH_LOADINGS:
            truth["loadings"] = Lam.tolist()
    elif isinstance(sid, int):
        D = SCENARIO_DEFAULTS[sid][1] if D is None else D
        if D < 3:
            raise InvalidScenario("the Swissroll needs D >= 3")
        eta, t, w = swissroll(n, rng)
        Lam = _loadings(D, 3, rng)
        Y = eta @ Lam.T
        truth.update(kind="swissroll", D=D, p=2, noise_var=SWISSROLL_NOISE_VAR, t=t.tolist(), w=w.tolist())
        if Lam.size <= _MAX_TRUTH_LOADINGS:
            truth["loadings"] = Lam.tolist()
    elif sid == "threemix":
        D = 500 if D is None else D
        if D < 7:
            raise InvalidScenario("threemix needs D >= 7")
        Y, labels, means, _ = threemix(n, D, rng)
        truth.update(
            kind="threemix",
            D=D,
            dims=[3, 5, 7],
            separation=50.0,
            sigma2=0.1,
            note="stand-in generator; component means and weights are not taken from a published study",
        )
    else:
        D = 2 if D is None else D
        if D < 2:
            raise InvalidScenario("parabola needs D >= 2")
        Y, _ = parabola(n, D, rng)
        truth.update(kind="parabola", D=D, p=1)

    if labels is not None:
        truth["labels"] = labels.tolist()
    data = mask_completely_at_random(Y, missing_fraction, rng) if missing else Y
    return Scenario(data=data, complete=Y, labels=labels, truth=truth)
