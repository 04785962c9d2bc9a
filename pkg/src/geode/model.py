"""Model primitives: hyperparameters, node likelihoods and truncated samplers.

Factor variances are parameterised through ``u = 1 / (1 + alpha2 / sigma2)``
in ``(0, 1]``; ``alpha2`` is always derived, never stored.  A dimension with
``u == 1`` contributes nothing to the likelihood.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
from scipy import special

from .errors import ConfigError, InvalidRate, NonFiniteInput, NotPositiveDefinite, SingularSystem

__all__ = [
    "Hyperparams",
    "alpha2_from_u",
    "u_from_alpha2",
    "node_log_likelihood",
    "dense_log_likelihood",
    "trunc_exp_ppf",
    "sample_trunc_exp",
    "trunc_gamma01_ppf",
    "sample_trunc_gamma01",
    "log_lower_gamma1",
    "tau_log_conditional",
    "partial_node_loglik",
    "latent_posterior",
]

LOG_2PI = float(np.log(2.0 * np.pi))
DENSE_MAX_DIM = 2000
# Below this value of P(X < 1) the inverse-CDF route loses accuracy and the
# boundary-layer rejection sampler takes over.
_TRUNC_GAMMA_P_MIN = 1e-8
_U_FLOOR = 1e-300


@dataclass(frozen=True)
class Hyperparams:
    """Prior, sampler and dictionary settings.

    ``a_tau`` is the rate of the truncated exponential on the multiplicative
    shrinkage factors.  ``tau_update`` selects the full conditional used for
    those factors: ``"exact"`` targets the conditional of the joint model,
    ``"paper"`` uses the simplified rate ``a_tau - sum_{j>=m} log u_j``.
    """

    a_sigma: float = 0.5
    b_sigma: float = 0.5
    a_tau: float = 0.05
    a_S: float = 1.0
    b_R: float = 1.0
    c0: float = -1.0
    c1: float = -0.005
    tol: float = 1e-4
    d_upper: int = 10
    L: int = 6
    iters: int = 1000
    burn_in: int = 500
    thin: int = 1
    seed: int = 0
    min_cell_size: int | None = None
    oversample: int = 10
    power_iters: int = 2
    tau_update: str = "exact"

    def __post_init__(self):
        for name in ("a_sigma", "b_sigma", "a_tau", "a_S", "b_R", "tol"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)!r}")
        if self.d_upper < 1:
            raise ConfigError("d_upper must be >= 1")
        if self.L < 0:
            raise ConfigError("L must be >= 0")
        if self.iters < 0 or self.burn_in < 0:
            raise ConfigError("iters and burn_in must be >= 0")
        if self.burn_in > self.iters:
            raise ConfigError(f"burn_in ({self.burn_in}) exceeds iters ({self.iters})")
        if self.thin < 1:
            raise ConfigError("thin must be >= 1")
        if self.min_cell_size is not None and self.min_cell_size < 2:
            raise ConfigError("min_cell_size must be >= 2")
        if self.tau_update not in ("exact", "paper"):
            raise ConfigError(f"tau_update must be 'exact' or 'paper', got {self.tau_update!r}")

    @property
    def cell_size(self) -> int:
        return self.min_cell_size if self.min_cell_size is not None else 2 * self.d_upper

    def check_fittable(self) -> None:
        """Raise :class:`ConfigError` unless the settings leave at least one draw."""
        if self.iters < 1:
            raise ConfigError("iters must be ≥ 1")
        if self.burn_in >= self.iters:
            raise ConfigError(f"burn_in ({self.burn_in}) leaves no draws out of iters={self.iters}")

    def adapt_probability(self, t) -> float:
        return np.exp(self.c0 + self.c1 * np.asarray(t, dtype=float))

    def replace(self, **changes) -> "Hyperparams":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "Hyperparams":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown hyperparameter(s): {', '.join(unknown)}")
        return cls(**values)


def alpha2_from_u(u, sigma2):
    u = np.asarray(u, dtype=float)
    return sigma2 * (1.0 - u) / u


def u_from_alpha2(alpha2, sigma2):
    return 1.0 / (1.0 + np.asarray(alpha2, dtype=float) / sigma2)


def node_log_likelihood(A, Z, u, sigma2, D):
    """Log N_D(y; mu, Phi diag(alpha2) Phi^T + sigma2 I) from (A, Z).

    Evaluates ``-(D/2) log(2 pi sigma2) + 1/2 sum log u
    - [A - sum (1 - u) Z^2] / (2 sigma2)``.  Arguments broadcast; the last
    axis of ``Z`` and ``u`` indexes dictionary dimensions.  Deleted
    dimensions carry ``u = 1`` and drop out.
    """
    A = np.asarray(A, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if not (np.isfinite(A).all() and np.isfinite(Z).all()):
        raise NonFiniteInput("sufficient statistics contain non-finite values")
    u = np.asarray(u, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    quad = A - np.sum((1.0 - u) * Z**2, axis=-1)
    return -0.5 * D * (LOG_2PI + np.log(sigma2)) + 0.5 * np.sum(np.log(u), axis=-1) - 0.5 * quad / sigma2


def dense_log_likelihood(y, mu, Phi, alpha2, sigma2) -> float:
    """Log-density with the covariance ``Phi diag(alpha2) Phi^T + sigma2 I`` built explicitly."""
    y = np.asarray(y, dtype=float)
    D = y.shape[0]
    if D > DENSE_MAX_DIM:
        raise ValueError(f"dense path limited to D <= {DENSE_MAX_DIM}")
    Phi = np.asarray(Phi, dtype=float).reshape(D, -1)
    cov = (Phi * np.asarray(alpha2, dtype=float)) @ Phi.T + sigma2 * np.eye(D)
    try:
        c, low = la.cho_factor(cov, lower=True)
    except la.LinAlgError as exc:
        raise NotPositiveDefinite("covariance is not positive definite") from exc
    r = y - mu
    quad = r @ la.cho_solve((c, low), r)
    logdet = 2.0 * np.sum(np.log(np.diag(c)))
    return float(-0.5 * (D * LOG_2PI + logdet + quad))


def trunc_exp_ppf(q, lam):
    """Quantile of the exponential with rate ``lam`` restricted to [1, inf)."""
    lam = np.asarray(lam, dtype=float)
    if np.any(~(lam > 0)):
        raise InvalidRate(f"rate must be > 0, got {lam}")
    return 1.0 - np.log1p(-np.asarray(q, dtype=float)) / lam


def sample_trunc_exp(lam, rng, size=None):
    """Draw from Exp(lam) truncated to [1, inf) by inverse CDF."""
    lam = np.asarray(lam, dtype=float)
    if size is None:
        size = lam.shape
    return trunc_exp_ppf(rng.uniform(size=size), lam)


def trunc_gamma01_ppf(q, shape, rate):
    """Quantile of Gamma(shape, rate) conditioned on (0, 1)."""
    mass = special.gammainc(shape, rate)
    return special.gammaincinv(shape, np.asarray(q) * mass) / rate


def sample_trunc_gamma01(shape, rate, rng, size=None):
    """Draw from Gamma(shape, rate) conditioned on (0, 1).

    Inverse CDF on the regularised incomplete gamma.  When ``P(X < 1)`` is
    too small for that to be accurate the draw is made in ``w = -log x`` by
    rejection from Exp(shape - rate), which is an exact envelope because
    ``exp(-w) >= 1 - w``.
    """
    shape = np.asarray(shape, dtype=float)
    rate = np.asarray(rate, dtype=float)
    if size is None:
        size = np.broadcast_shapes(shape.shape, rate.shape)
    shape = np.broadcast_to(shape, size).ravel()
    rate = np.broadcast_to(rate, size).ravel()
    if np.any(~(shape > 0)) or np.any(~(rate > 0)):
        raise InvalidRate("shape and rate must be > 0")

    out = np.empty(shape.size)
    mass = special.gammainc(shape, rate)
    direct = mass > _TRUNC_GAMMA_P_MIN
    q = rng.uniform(size=int(direct.sum()))
    out[direct] = special.gammaincinv(shape[direct], q * mass[direct]) / rate[direct]

    todo = np.flatnonzero(~direct)
    while todo.size:
        a, b = shape[todo], rate[todo]
        w = rng.exponential(size=todo.size) / (a - b)
        log_accept = -b * (np.expm1(-w) + w)
        ok = np.log(rng.uniform(size=todo.size)) < log_accept
        out[todo[ok]] = np.exp(-w[ok])
        todo = todo[~ok]

    return np.clip(out, _U_FLOOR, 1.0).reshape(size)


def log_lower_gamma1(delta, terms: int = 18):
    """``log gamma(delta, 1)``, the unregularised lower incomplete gamma at 1.

    Uses ``gamma(s, 1) = e^{-1} sum_k 1 / (s (s+1) ... (s+k))``; truncation
    error is below ``1 / terms!`` for every ``delta > 0``.
    """
    delta = np.asarray(delta, dtype=float)
    k = np.arange(1, terms + 1)
    ratios = 1.0 / (delta[..., None] + k)
    tail = np.cumprod(ratios, axis=-1).sum(axis=-1)
    return -1.0 - np.log(delta) + np.log1p(tail)


def tau_log_conditional(x, coef, log_u, weight, a_tau):
    """Unnormalised log full conditional of one multiplicative shrinkage factor.

    With ``delta_j = coef_j * x`` for the retained indices ``j >= m`` (``weight``
    is 1 for those, 0 otherwise), the conditional on ``[1, inf)`` is

        -a_tau x + sum_j weight_j [(delta_j - 1) log u_j - log gamma(delta_j, 1)]

    where the last term is the normaliser of the truncated-gamma prior on
    ``u_j``.  ``x`` has shape (...,); ``coef``, ``log_u``, ``weight`` have shape
    (..., d).  Values with ``x < 1`` get ``-inf``.
    """
    x = np.asarray(x, dtype=float)
    xs = np.maximum(x, 1.0)
    delta = coef * xs[..., None]
    delta = np.where(weight > 0, delta, 1.0)
    terms = weight * ((delta - 1.0) * log_u - log_lower_gamma1(delta))
    out = -a_tau * xs + terms.sum(axis=-1)
    return np.where(x >= 1.0, out, -np.inf)


def _latent_system(gram, C, alpha2, sigma2):
    """Cholesky of ``I + S gram S / sigma2`` with ``S = diag(sqrt(alpha2))``."""
    gram = np.asarray(gram, dtype=float)
    sd = np.sqrt(np.asarray(alpha2, dtype=float))
    sigma2 = np.asarray(sigma2, dtype=float)
    d = gram.shape[-1]
    M = np.eye(d) + sd[..., :, None] * gram * sd[..., None, :] / sigma2[..., None, None]
    try:
        chol = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem("latent system is not positive definite") from exc
    w = sd * np.asarray(C, dtype=float)
    return sd, M, chol, w


def partial_node_loglik(gram, B, C, u, sigma2, D_obs):
    """Log N(y_O; mu_O, Phi_O Sigma Phi_O^T + sigma2 I) from observed-part statistics.

    ``gram = Phi_O^T Phi_O``, ``B = |y_O - mu_O|^2`` and ``C = Phi_O^T (y_O - mu_O)``.
    Only d x d work is done: the log-determinant is ``log|I + S gram S / sigma2|``
    and the quadratic correction is ``(S C)^T (I + S gram S / sigma2)^{-1} (S C) / sigma2^2``
    with ``S = diag(sqrt(alpha2))``, so zero factor variances are allowed.
    Leading axes broadcast.
    """
    sigma2 = np.asarray(sigma2, dtype=float)
    alpha2 = alpha2_from_u(u, sigma2[..., None])
    sd, M, chol, w = _latent_system(gram, C, alpha2, sigma2)
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
    x = np.linalg.solve(chol, w[..., None])[..., 0]
    quad = np.sum(x * x, axis=-1)
    return (
        -0.5 * np.asarray(D_obs) * (LOG_2PI + np.log(sigma2))
        - 0.5 * logdet
        - 0.5 * np.asarray(B) / sigma2
        + 0.5 * quad / sigma2**2
    )


def latent_posterior(gram, C, u, sigma2):
    """Mean and a square-root factor of eta | y_O at one node.

    Returns ``(mean, root)`` with ``cov = root @ root.T`` equal to
    ``(Sigma gram / sigma2 + I)^{-1} Sigma`` and
    ``mean = cov C / sigma2``.  Leading axes broadcast.
    """
    sigma2 = np.asarray(sigma2, dtype=float)
    alpha2 = alpha2_from_u(u, sigma2[..., None])
    sd, M, chol, w = _latent_system(gram, C, alpha2, sigma2)
    mean = sd * np.linalg.solve(M, w[..., None])[..., 0] / sigma2[..., None]
    # cov = S M^{-1} S = (S L^{-T}) (S L^{-T})^T
    d = chol.shape[-1]
    inv_lt = np.linalg.solve(np.swapaxes(chol, -1, -2), np.broadcast_to(np.eye(d), chol.shape))
    root = sd[..., :, None] * inv_lt
    return mean, root
