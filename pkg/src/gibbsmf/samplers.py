"""Seeded random streams and samplers for the distributions the Gibbs
updates draw from.

All randomness flows through :class:`RngHandle`, a thin wrapper around
numpy's PCG64 bit generator.  A handle is constructed from a single
64-bit seed and can spawn statistically independent child streams, so
parallel workers stay reproducible without sharing state.

Parameters are validated, never clamped: a non-positive precision or
rate, or a non-SPD scale matrix, raises :class:`InvalidParameterError`.
The low-level samplers accept scalars or arrays and broadcast; the typed
:func:`sample` front end dispatches on a parameter record and returns a
scalar (or vector for the multivariate families).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import singledispatch

import numpy as np
from scipy import special
from scipy.linalg import solve_triangular

__all__ = [
    "InvalidParameterError",
    "DecompositionError",
    "RngHandle",
    "Gaussian",
    "MultivariateGaussian",
    "GammaDist",
    "NormalInverseWishart",
    "Laplace",
    "InverseGaussian",
    "Exponential",
    "TruncatedNormal",
    "PoissonDist",
    "Multinomial",
    "sample",
    "gaussian",
    "multivariate_gaussian",
    "gaussian_from_precision",
    "gamma",
    "exponential",
    "truncated_normal",
    "inverse_gaussian",
    "wishart",
    "inverse_wishart",
    "normal_inverse_wishart",
    "poisson",
    "multinomial",
    "multinomial_rows",
    "chol_with_jitter",
]


class InvalidParameterError(ValueError):
    """A distribution parameter violates its domain."""


class DecompositionError(RuntimeError):
    """A Cholesky factorisation failed beyond the jitter retries."""


class RngHandle:
    """Reproducible random stream with spawnable independent children.

    The same seed always yields the same draw sequence.  ``spawn`` derives
    child streams through numpy's seed-sequence tree, so children of one
    parent never alias each other or the parent.
    """

    __slots__ = ("seed", "_seq", "gen")

    def __init__(self, seed: int, _seq: np.random.SeedSequence | None = None):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise InvalidParameterError("seed must be a 64-bit unsigned integer")
        self.seed = seed
        self._seq = np.random.SeedSequence(seed) if _seq is None else _seq
        self.gen = np.random.Generator(np.random.PCG64(self._seq))

    def spawn(self, n: int) -> list["RngHandle"]:
        """Derive ``n`` independent child streams."""
        return [RngHandle(self.seed, _seq=s) for s in self._seq.spawn(n)]

    def __repr__(self) -> str:  # pragma: no cover
        return f"RngHandle(seed={self.seed})"


# ---------------------------------------------------------------------------
# Parameter records.  Constructing one validates it.
# ---------------------------------------------------------------------------


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise InvalidParameterError(msg)


def _check_sym(a: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    _require(a.ndim == 2 and a.shape[0] == a.shape[1], f"{name} must be square")
    _require(bool(np.allclose(a, a.T, atol=1e-10)), f"{name} must be symmetric")
    return a


@dataclass(frozen=True)
class Gaussian:
    """Univariate normal with mean ``mu`` and precision ``tau``."""

    mu: float
    tau: float

    def __post_init__(self):
        _require(np.isfinite(self.mu), "mu must be finite")
        _require(self.tau > 0, "precision must be positive")


@dataclass(frozen=True)
class MultivariateGaussian:
    mu: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        cov = _check_sym(self.cov, "cov")
        _require(mu.ndim == 1 and cov.shape[0] == mu.shape[0], "shape mismatch")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "cov", cov)


@dataclass(frozen=True)
class GammaDist:
    """Gamma with shape ``alpha`` and rate ``beta`` (mean alpha/beta)."""

    alpha: float
    beta: float

    def __post_init__(self):
        _require(self.alpha > 0, "shape must be positive")
        _require(self.beta > 0, "rate must be positive")


@dataclass(frozen=True)
class NormalInverseWishart:
    mu0: np.ndarray
    beta0: float
    nu0: float
    w0: np.ndarray

    def __post_init__(self):
        mu0 = np.atleast_1d(np.asarray(self.mu0, dtype=float))
        w0 = _check_sym(self.w0, "w0")
        k = mu0.shape[0]
        _require(w0.shape[0] == k, "w0 incompatible with mu0")
        _require(self.beta0 > 0, "beta0 must be positive")
        _require(self.nu0 >= k, "nu0 must be at least the dimension")
        object.__setattr__(self, "mu0", mu0)
        object.__setattr__(self, "w0", w0)


@dataclass(frozen=True)
class Laplace:
    mu: float
    scale: float

    def __post_init__(self):
        _require(self.scale > 0, "scale must be positive")


@dataclass(frozen=True)
class InverseGaussian:
    mu: float
    lam: float

    def __post_init__(self):
        _require(self.mu > 0, "mean must be positive")
        _require(self.lam > 0, "shape must be positive")


@dataclass(frozen=True)
class Exponential:
    rate: float

    def __post_init__(self):
        _require(self.rate > 0, "rate must be positive")


@dataclass(frozen=True)
class TruncatedNormal:
    """Normal(mu, 1/tau) restricted to [0, inf) and renormalised."""

    mu: float
    tau: float

    def __post_init__(self):
        _require(np.isfinite(self.mu), "mu must be finite")
        _require(self.tau > 0, "precision must be positive")


@dataclass(frozen=True)
class PoissonDist:
    rate: float

    def __post_init__(self):
        _require(self.rate >= 0, "rate must be nonnegative")


@dataclass(frozen=True)
class Multinomial:
    n: int
    p: np.ndarray

    def __post_init__(self):
        _require(int(self.n) == self.n and self.n >= 0, "n must be a nonnegative integer")
        p = np.asarray(self.p, dtype=float)
        _require(p.ndim == 1 and p.size >= 1, "p must be a vector")
        _require(bool(np.all(p >= 0)), "probabilities must be nonnegative")
        _require(abs(float(p.sum()) - 1.0) <= 1e-12, "probabilities must sum to 1")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "p", p)


# ---------------------------------------------------------------------------
# Linear algebra helpers.
# ---------------------------------------------------------------------------

_JITTERS = (0.0, 1e-10, 1e-8, 1e-6)


def chol_with_jitter(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, retrying with trace-scaled diagonal jitter.

    Near-singular posteriors (e.g. Wishart scale matrices early in a
    chain) can fail a plain factorisation; three escalating jitters are
    tried before giving up with :class:`DecompositionError`.
    """
    a = np.asarray(a, dtype=float)
    k = a.shape[0]
    if k == 0:
        return np.zeros((0, 0))
    scale = max(float(np.trace(a)) / k, 1.0)
    for j in _JITTERS:
        try:
            if j == 0.0:
                return np.linalg.cholesky(a)
            return np.linalg.cholesky(a + (j * scale) * np.eye(k))
        except np.linalg.LinAlgError:
            continue
    raise DecompositionError("matrix is not positive definite after jitter retries")


def gaussian_from_precision(
    rng: RngHandle, prec: np.ndarray, rhs: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Draw from N(prec^-1 rhs, prec^-1) without forming the inverse.

    Returns ``(draw, mean)``.
    """
    prec = np.asarray(prec, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    lower = chol_with_jitter(prec)
    y = solve_triangular(lower, rhs, lower=True, check_finite=False)
    mean = solve_triangular(lower.T, y, lower=False, check_finite=False)
    z = rng.gen.standard_normal(rhs.shape[0])
    draw = mean + solve_triangular(lower.T, z, lower=False, check_finite=False)
    return draw, mean


# ---------------------------------------------------------------------------
# Low-level samplers (array-friendly).
# ---------------------------------------------------------------------------


def gaussian(rng: RngHandle, mu, tau):
    mu = np.asarray(mu, dtype=float)
    tau = np.asarray(tau, dtype=float)
    _require(bool(np.all(tau > 0)), "precision must be positive")
    return rng.gen.normal(mu, 1.0 / np.sqrt(tau))


def multivariate_gaussian(rng: RngHandle, mu: np.ndarray, cov: np.ndarray) -> np.ndarray:
    mu = np.asarray(mu, dtype=float)
    lower = chol_with_jitter(cov)
    return mu + lower @ rng.gen.standard_normal(mu.shape[0])


def gamma(rng: RngHandle, shape, rate):
    shape = np.asarray(shape, dtype=float)
    rate = np.asarray(rate, dtype=float)
    _require(bool(np.all(shape > 0)) and bool(np.all(rate > 0)), "shape and rate must be positive")
    return rng.gen.gamma(shape, 1.0 / rate)


def exponential(rng: RngHandle, rate):
    rate = np.asarray(rate, dtype=float)
    _require(bool(np.all(rate > 0)), "rate must be positive")
    return rng.gen.exponential(1.0 / rate)


_TN_TAIL_CUT = 4.0
_BELOW_ONE = float(np.nextafter(1.0, 0.0))


def _tn_tail_standard(rng: RngHandle, alpha: np.ndarray) -> np.ndarray:
    # Exponential-rejection sampler for a standard normal conditioned on
    # [alpha, inf) with alpha > 0; constant acceptance rate, so it cannot
    # stall however deep the truncation.
    lam = 0.5 * (alpha + np.sqrt(alpha * alpha + 4.0))
    out = np.empty(alpha.shape)
    todo = np.ones(alpha.shape, dtype=bool)
    while todo.any():
        a = alpha[todo]
        lo = lam[todo]
        z = a - np.log1p(-rng.gen.random(a.shape)) / lo
        accept = np.log1p(-rng.gen.random(a.shape)) <= -0.5 * (z - lo) ** 2
        idx = np.flatnonzero(todo)
        hit = idx[accept]
        out[hit] = z[accept]
        todo[hit] = False
    return out


def truncated_normal(rng: RngHandle, mu, tau):
    """Draw from a normal with precision ``tau`` truncated to [0, inf).

    Inverse-CDF in the body of the distribution; for deeply negative
    means (mu * sqrt(tau) < -4) it switches to exponential rejection,
    which stays O(1) where naive resampling would loop forever.
    """
    mu_a = np.asarray(mu, dtype=float)
    tau_a = np.asarray(tau, dtype=float)
    _require(bool(np.all(tau_a > 0)) and bool(np.all(np.isfinite(tau_a))), "precision must be positive and finite")
    shape = np.broadcast_shapes(mu_a.shape, tau_a.shape)
    mu_f = np.broadcast_to(mu_a, shape).ravel()
    tau_f = np.broadcast_to(tau_a, shape).ravel()
    sigma = 1.0 / np.sqrt(tau_f)
    alpha = -mu_f / sigma  # truncation point in standard units
    z = np.empty(alpha.shape)
    body = alpha <= _TN_TAIL_CUT
    if body.any():
        q = special.ndtr(-alpha[body])  # P(Z >= alpha)
        u = rng.gen.random(int(body.sum()))
        p = np.minimum((1.0 - u) * q, _BELOW_ONE)
        z[body] = -special.ndtri(p)
    tail = ~body
    if tail.any():
        z[tail] = _tn_tail_standard(rng, alpha[tail])
    out = (mu_f + sigma * z).reshape(shape)
    return out if shape else float(out)


def inverse_gaussian(rng: RngHandle, mu, lam):
    """Draw from IG(mu, lam) via the transformation method with a uniform
    correction step.  Constant time per draw."""
    mu_a = np.asarray(mu, dtype=float)
    lam_a = np.asarray(lam, dtype=float)
    _require(bool(np.all(mu_a > 0)), "mean must be positive")
    _require(bool(np.all(lam_a > 0)), "shape must be positive")
    shape = np.broadcast_shapes(mu_a.shape, lam_a.shape)
    mu_f = np.broadcast_to(mu_a, shape).ravel()
    lam_f = np.broadcast_to(lam_a, shape).ravel()
    nu = rng.gen.standard_normal(mu_f.shape[0]) ** 2
    w = mu_f * nu / (2.0 * lam_f)
    # x = mu * (1 + w - sqrt(w^2 + 2w)) written in the cancellation-free form
    x = mu_f / (1.0 + w + np.sqrt(w * (w + 2.0)))
    u = rng.gen.random(mu_f.shape[0])
    out = np.where(u <= mu_f / (mu_f + x), x, mu_f * mu_f / x).reshape(shape)
    return out if shape else float(out)


def wishart(rng: RngHandle, dof: float, scale: np.ndarray) -> np.ndarray:
    """Bartlett-decomposition draw from Wishart(dof, scale)."""
    scale = np.asarray(scale, dtype=float)
    k = scale.shape[0]
    _require(dof >= k, "degrees of freedom must be at least the dimension")
    lower = chol_with_jitter(scale)
    a = np.zeros((k, k))
    df = dof - np.arange(k)
    a[np.diag_indices(k)] = np.sqrt(rng.gen.chisquare(df))
    if k > 1:
        tril = np.tril_indices(k, -1)
        a[tril] = rng.gen.standard_normal(len(tril[0]))
    m = lower @ a
    return m @ m.T


def inverse_wishart(rng: RngHandle, dof: float, w0: np.ndarray) -> np.ndarray:
    """Draw from IW(dof, w0) by sampling the precision as Wishart(dof, w0^-1)."""
    w0 = np.asarray(w0, dtype=float)
    k = w0.shape[0]
    lower = chol_with_jitter(w0)
    eye = np.eye(k)
    w0_inv = solve_triangular(
        lower.T, solve_triangular(lower, eye, lower=True, check_finite=False),
        lower=False, check_finite=False,
    )
    prec = wishart(rng, dof, w0_inv)
    lp = chol_with_jitter(prec)
    sigma = solve_triangular(
        lp.T, solve_triangular(lp, eye, lower=True, check_finite=False),
        lower=False, check_finite=False,
    )
    # symmetrise against roundoff so downstream Cholesky calls succeed
    return 0.5 * (sigma + sigma.T)


def normal_inverse_wishart(
    rng: RngHandle, mu0: np.ndarray, beta0: float, nu0: float, w0: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Draw (mean, covariance): covariance ~ IW(nu0, w0), then the mean from
    N(mu0, covariance / beta0)."""
    mu0 = np.atleast_1d(np.asarray(mu0, dtype=float))
    _require(beta0 > 0, "beta0 must be positive")
    _require(nu0 >= mu0.shape[0], "nu0 must be at least the dimension")
    sigma = inverse_wishart(rng, nu0, w0)
    mu = multivariate_gaussian(rng, mu0, sigma / beta0)
    return mu, sigma


def poisson(rng: RngHandle, rate):
    rate = np.asarray(rate, dtype=float)
    _require(bool(np.all(rate >= 0)), "rate must be nonnegative")
    return rng.gen.poisson(rate)


def multinomial_rows(rng: RngHandle, n, p: np.ndarray) -> np.ndarray:
    """Batched multinomial: row ``i`` is a draw of counts for ``n[i]`` trials
    over probabilities ``p[i]``.

    Uses the sequential-binomial decomposition, which is exact and
    vectorises across rows even when the trial counts differ.
    """
    p = np.asarray(p, dtype=float)
    n = np.asarray(n)
    _require(p.ndim == 2, "p must be a matrix of row distributions")
    _require(bool(np.all(n >= 0)), "counts must be nonnegative")
    m, k = p.shape
    out = np.zeros((m, k), dtype=np.int64)
    remaining = n.astype(np.int64).copy()
    rest = p.sum(axis=1)
    for col in range(k - 1):
        pk = p[:, col]
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = np.where(rest > 0, pk / rest, 0.0)
        frac = np.clip(frac, 0.0, 1.0)
        draw = rng.gen.binomial(remaining, frac)
        out[:, col] = draw
        remaining -= draw
        rest = np.maximum(rest - pk, 0.0)
    out[:, k - 1] = remaining
    return out


def multinomial(rng: RngHandle, n: int, p: np.ndarray) -> np.ndarray:
    return multinomial_rows(rng, np.asarray([n]), np.asarray(p, dtype=float)[None, :])[0]


# ---------------------------------------------------------------------------
# Typed front end.
# ---------------------------------------------------------------------------


@singledispatch
def sample(params, rng: RngHandle):
    """Draw once from the distribution described by ``params``."""
    raise TypeError(f"no sampler registered for {type(params).__name__}")


@sample.register
def _(params: Gaussian, rng: RngHandle) -> float:
    return float(gaussian(rng, params.mu, params.tau))


@sample.register
def _(params: MultivariateGaussian, rng: RngHandle) -> np.ndarray:
    return multivariate_gaussian(rng, params.mu, params.cov)


@sample.register
def _(params: GammaDist, rng: RngHandle) -> float:
    return float(gamma(rng, params.alpha, params.beta))


@sample.register
def _(params: NormalInverseWishart, rng: RngHandle) -> tuple[np.ndarray, np.ndarray]:
    return normal_inverse_wishart(rng, params.mu0, params.beta0, params.nu0, params.w0)


@sample.register
def _(params: Laplace, rng: RngHandle) -> float:
    return float(rng.gen.laplace(params.mu, params.scale))


@sample.register
def _(params: InverseGaussian, rng: RngHandle) -> float:
    return float(inverse_gaussian(rng, params.mu, params.lam))


@sample.register
def _(params: Exponential, rng: RngHandle) -> float:
    return float(exponential(rng, params.rate))


@sample.register
def _(params: TruncatedNormal, rng: RngHandle) -> float:
    return float(truncated_normal(rng, params.mu, params.tau))


@sample.register
def _(params: PoissonDist, rng: RngHandle) -> int:
    return int(poisson(rng, params.rate))


@sample.register
def _(params: Multinomial, rng: RngHandle) -> np.ndarray:
    return multinomial(rng, params.n, params.p)
