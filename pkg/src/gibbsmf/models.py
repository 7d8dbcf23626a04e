"""The sixteen Gibbs-sampled matrix factorisation models and a
multiplicative-update NMF baseline.

Model names follow a three-letter likelihood/U-prior/V-prior scheme:
GGG is a Gaussian likelihood with Gaussian priors on both factor
matrices, GEE uses exponential priors, GEG mixes the two, PGG is a
Poisson likelihood with Gamma priors.  Suffix letters mark variants:
U = univariate (entry-wise) posterior, A = per-factor ARD precisions,
W = normal-inverse-Wishart row prior, I = inverse-Gaussian scale
hyperprior, N = per-entry truncated-normal hyperpriors, 21 = the squared
row-sum penalty prior, V = volume (Gram-determinant) prior, trailing
G = per-row Gamma rate hyperprior.

Each ``update_*`` function draws from the exact conditional posterior of
its block given the rest of the state, so composing them in any fixed
order forms a valid Gibbs sweep (see :func:`sweep`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import special
from scipy.linalg import solve_triangular

from .data import ObservedMatrix
from .samplers import (
    InvalidParameterError,
    RngHandle,
    chol_with_jitter,
    gaussian_from_precision,
    inverse_gaussian,
    multinomial_rows,
    normal_inverse_wishart,
    truncated_normal,
)

__all__ = [
    "KINDS",
    "GAUSSIAN_KINDS",
    "POISSON_KINDS",
    "NONNEGATIVE_U",
    "NONNEGATIVE_V",
    "Hyperparams",
    "ModelSpec",
    "AuxState",
    "FactorState",
    "init_state",
    "sweep",
    "validate_state",
    "update_noise",
    "update_U_multivariate",
    "update_U_univariate",
    "update_ard",
    "update_wishart",
    "update_laplace_scales",
    "update_volume",
    "update_gttn_hyper",
    "update_poisson",
    "nmf_step",
    "log_joint",
    "noise_posterior_params",
    "ard_posterior_params",
    "niw_posterior_params",
    "training_mse",
]

KINDS = (
    "GGG", "GGGU", "GGGA", "GGGW", "GLL", "GLLI", "GVG",
    "GEE", "GEEA", "GTT", "GTTN", "GL21",
    "GEG", "GVnG",
    "PGG", "PGGG",
    "NMF",
)

POISSON_KINDS = frozenset({"PGG", "PGGG"})
GAUSSIAN_KINDS = frozenset(k for k in KINDS if k not in POISSON_KINDS and k != "NMF")
VOLUME_KINDS = frozenset({"GVG", "GVnG"})
NONNEGATIVE_U = frozenset({"GEE", "GEEA", "GTT", "GTTN", "GL21", "GEG", "GVnG", "PGG", "PGGG", "NMF"})
NONNEGATIVE_V = frozenset({"GEE", "GEEA", "GTT", "GTTN", "GL21", "PGG", "PGGG", "NMF"})
HIERARCHICAL_KINDS = frozenset({"GGGA", "GGGW", "GLLI", "GTTN", "GEEA", "PGGG"})

# which updater handles each side of the factorisation
_U_UPDATER = {
    "GGG": "mv", "GGGA": "mv", "GGGW": "mv", "GLL": "mv", "GLLI": "mv",
    "GGGU": "uni", "GEE": "uni", "GEEA": "uni", "GTT": "uni", "GTTN": "uni",
    "GL21": "uni", "GEG": "uni",
    "GVG": "vol", "GVnG": "vol",
    "PGG": "pois", "PGGG": "pois",
}
_V_UPDATER = {
    "GGG": "mv", "GGGA": "mv", "GGGW": "mv", "GLL": "mv", "GLLI": "mv",
    "GVG": "mv", "GVnG": "mv", "GEG": "mv",
    "GGGU": "uni", "GEE": "uni", "GEEA": "uni", "GTT": "uni", "GTTN": "uni",
    "GL21": "uni",
    "PGG": "pois", "PGGG": "pois",
}

_FACTOR_FLOOR = 1e-12  # div-by-zero guards in Poisson p-vectors and Laplace scales


@dataclass
class Hyperparams:
    """Prior hyperparameters; the defaults are the weak settings used
    throughout the benchmark protocols.

    ``None`` fields depend on the factor count and are filled by
    :meth:`resolved`.  ``volume_gamma`` has no sensible default and must
    be set explicitly for the volume-prior models.
    """

    noise_shape: float = 1.0          # Gamma prior on the noise precision
    noise_rate: float = 1.0
    weight_prec: float = 0.1          # Gaussian / exponential / row-sum prior strength
    laplace_scale: float = math.sqrt(10.0)
    ard_shape: float = 1.0
    ard_rate: float = 1.0
    niw_mean: np.ndarray | None = None
    niw_scale: float = 1.0
    niw_dof: float | None = None
    niw_w: np.ndarray | None = None
    ig_mean: float | None = None      # inverse-Gaussian hyperprior (GLLI)
    ig_shape: float | None = None
    tn_mu: float = 0.0                # truncated-normal prior location/precision (GTT)
    tn_prec: float = 0.1
    tn_hyper_mu: float = 0.0          # GTTN hyperprior
    tn_hyper_prec: float = 0.1
    tn_shape: float = 1.0
    tn_rate: float = 1.0
    volume_gamma: float | None = None
    pois_shape: float = 1.0           # Gamma factor priors (Poisson likelihood)
    pois_rate: float = 1.0
    pois_hier_shape: float = 1.0
    pois_hier_mean: float = 1.0

    def resolved(self, kind: str, n_factors: int) -> "Hyperparams":
        out = replace(self)
        if out.niw_mean is None:
            out.niw_mean = np.zeros(n_factors)
        else:
            out.niw_mean = np.asarray(out.niw_mean, dtype=float)
        if out.niw_dof is None:
            out.niw_dof = float(n_factors)
        if out.niw_w is None:
            out.niw_w = np.eye(n_factors)
        else:
            out.niw_w = np.asarray(out.niw_w, dtype=float)
        if out.ig_mean is None:
            out.ig_mean = float(n_factors)
        if out.ig_shape is None:
            out.ig_shape = float(n_factors)
        out.validate(kind, n_factors)
        return out

    def validate(self, kind: str, n_factors: int) -> None:
        positive = {
            "noise_shape": self.noise_shape, "noise_rate": self.noise_rate,
            "weight_prec": self.weight_prec, "laplace_scale": self.laplace_scale,
            "ard_shape": self.ard_shape, "ard_rate": self.ard_rate,
            "niw_scale": self.niw_scale, "ig_mean": self.ig_mean,
            "ig_shape": self.ig_shape, "tn_prec": self.tn_prec,
            "tn_hyper_prec": self.tn_hyper_prec, "tn_shape": self.tn_shape,
            "tn_rate": self.tn_rate, "pois_shape": self.pois_shape,
            "pois_rate": self.pois_rate, "pois_hier_shape": self.pois_hier_shape,
            "pois_hier_mean": self.pois_hier_mean,
        }
        for name, value in positive.items():
            if value is not None and not value > 0:
                raise InvalidParameterError(f"{name} must be positive, got {value!r}")
        if self.niw_dof is not None and self.niw_dof < n_factors:
            raise InvalidParameterError("niw_dof must be at least the factor count")
        if self.niw_w is not None and self.niw_w.shape != (n_factors, n_factors):
            raise InvalidParameterError("niw_w must be n_factors x n_factors")
        if kind in VOLUME_KINDS:
            if self.volume_gamma is None or not self.volume_gamma > 0:
                raise InvalidParameterError(f"{kind} requires a positive volume_gamma")


@dataclass
class ModelSpec:
    """One of the seventeen model kinds plus its factor count and priors."""

    kind: str
    n_factors: int
    hyper: Hyperparams = field(default_factory=Hyperparams)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidParameterError(f"unknown model kind {self.kind!r}")
        if self.n_factors < 1:
            raise InvalidParameterError("n_factors must be at least 1")
        self.hyper = self.hyper.resolved(self.kind, self.n_factors)


@dataclass
class AuxState:
    """Model-specific auxiliary variables; only the active kind's fields
    are populated."""

    ard: np.ndarray | None = None                 # per-factor precisions (GGGA) / rates (GEEA)
    mu_U: np.ndarray | None = None                # Wishart row prior (GGGW)
    sigma_U: np.ndarray | None = None
    mu_V: np.ndarray | None = None
    sigma_V: np.ndarray | None = None
    lam_U: np.ndarray | None = None               # per-entry Gaussian variances (GLL/GLLI)
    lam_V: np.ndarray | None = None
    eta_U: np.ndarray | None = None               # per-entry Laplace hyperscale (GLLI)
    eta_V: np.ndarray | None = None
    tn_mu_U: np.ndarray | None = None             # per-entry TN hyperpriors (GTTN)
    tn_tau_U: np.ndarray | None = None
    tn_mu_V: np.ndarray | None = None
    tn_tau_V: np.ndarray | None = None
    Z: np.ndarray | None = None                   # latent counts on observed cells (n_obs, K)
    h_U: np.ndarray | None = None                 # per-row Gamma rates (PGGG)
    h_V: np.ndarray | None = None
    volume_guard_count: int = 0                   # nonpositive volume precision fallbacks


@dataclass
class FactorState:
    U: np.ndarray
    V: np.ndarray
    tau: float
    aux: AuxState = field(default_factory=AuxState)


# ---------------------------------------------------------------------------
# Initialisation: factor matrices from their priors, hierarchical
# parameters at their prior means (mode where the mean does not exist).
# The volume and row-sum priors cannot be sampled directly, so those
# factors start from the matching Gaussian / truncated-normal surrogate.
# ---------------------------------------------------------------------------


def init_state(spec: ModelSpec, data: ObservedMatrix, rng: RngHandle) -> FactorState:
    k = spec.n_factors
    h = spec.hyper
    n_rows, n_cols = data.n_rows, data.n_cols
    kind = spec.kind
    aux = AuxState()

    if kind == "NMF":
        scale = math.sqrt(max(float(np.mean(data.observed_values())), _FACTOR_FLOOR) / k)
        u = scale * rng.gen.random((n_rows, k)) + _FACTOR_FLOOR
        v = scale * rng.gen.random((n_cols, k)) + _FACTOR_FLOOR
        return FactorState(u, v, 1.0, aux)

    if kind in POISSON_KINDS:
        if kind == "PGGG":
            aux.h_U = np.full(n_rows, h.pois_hier_mean)
            aux.h_V = np.full(n_cols, h.pois_hier_mean)
            u = rng.gen.gamma(h.pois_shape, 1.0 / aux.h_U[:, None], size=(n_rows, k))
            v = rng.gen.gamma(h.pois_shape, 1.0 / aux.h_V[:, None], size=(n_cols, k))
        else:
            u = rng.gen.gamma(h.pois_shape, 1.0 / h.pois_rate, size=(n_rows, k))
            v = rng.gen.gamma(h.pois_shape, 1.0 / h.pois_rate, size=(n_cols, k))
        aux.Z = np.zeros((data.n_obs, k), dtype=np.int64)
        return FactorState(u, v, 1.0, aux)

    tau = float(rng.gen.gamma(h.noise_shape, 1.0 / h.noise_rate))

    if kind in ("GGG", "GGGU"):
        sd = 1.0 / math.sqrt(h.weight_prec)
        u = rng.gen.normal(0.0, sd, (n_rows, k))
        v = rng.gen.normal(0.0, sd, (n_cols, k))
    elif kind == "GGGA":
        aux.ard = np.full(k, h.ard_shape / h.ard_rate)
        sd = 1.0 / np.sqrt(aux.ard)
        u = rng.gen.normal(0.0, sd, (n_rows, k))
        v = rng.gen.normal(0.0, sd, (n_cols, k))
    elif kind == "GGGW":
        sigma0 = h.niw_w / (h.niw_dof + k + 1)  # prior mode; the mean needs dof > K+1
        aux.mu_U = h.niw_mean.copy()
        aux.sigma_U = sigma0.copy()
        aux.mu_V = h.niw_mean.copy()
        aux.sigma_V = sigma0.copy()
        lo = chol_with_jitter(sigma0)
        u = aux.mu_U + rng.gen.standard_normal((n_rows, k)) @ lo.T
        v = aux.mu_V + rng.gen.standard_normal((n_cols, k)) @ lo.T
    elif kind in ("GLL", "GLLI"):
        if kind == "GLLI":
            aux.eta_U = np.full((n_rows, k), h.ig_mean)
            aux.eta_V = np.full((n_cols, k), h.ig_mean)
            aux.lam_U = 2.0 / aux.eta_U
            aux.lam_V = 2.0 / aux.eta_V
        else:
            aux.lam_U = np.full((n_rows, k), 2.0 / h.laplace_scale)
            aux.lam_V = np.full((n_cols, k), 2.0 / h.laplace_scale)
        u = rng.gen.normal(0.0, np.sqrt(aux.lam_U))
        v = rng.gen.normal(0.0, np.sqrt(aux.lam_V))
    elif kind in ("GEE", "GEEA", "GEG"):
        if kind == "GEEA":
            aux.ard = np.full(k, h.ard_shape / h.ard_rate)
            rate = aux.ard
        else:
            rate = np.full(k, h.weight_prec)
        u = rng.gen.exponential(1.0 / rate, (n_rows, k))
        if kind == "GEG":
            v = rng.gen.normal(0.0, 1.0 / math.sqrt(h.weight_prec), (n_cols, k))
        else:
            v = rng.gen.exponential(1.0 / rate, (n_cols, k))
    elif kind == "GTT":
        u = truncated_normal(rng, np.full((n_rows, k), h.tn_mu), h.tn_prec)
        v = truncated_normal(rng, np.full((n_cols, k), h.tn_mu), h.tn_prec)
    elif kind == "GTTN":
        aux.tn_mu_U = np.full((n_rows, k), h.tn_hyper_mu)
        aux.tn_tau_U = np.full((n_rows, k), h.tn_shape / h.tn_rate)
        aux.tn_mu_V = np.full((n_cols, k), h.tn_hyper_mu)
        aux.tn_tau_V = np.full((n_cols, k), h.tn_shape / h.tn_rate)
        u = truncated_normal(rng, aux.tn_mu_U, aux.tn_tau_U)
        v = truncated_normal(rng, aux.tn_mu_V, aux.tn_tau_V)
    elif kind == "GL21":
        u = truncated_normal(rng, np.zeros((n_rows, k)), h.weight_prec)
        v = truncated_normal(rng, np.zeros((n_cols, k)), h.weight_prec)
    elif kind in VOLUME_KINDS:
        sd = 1.0 / math.sqrt(h.weight_prec)
        u = rng.gen.normal(0.0, sd, (n_rows, k))
        if kind == "GVnG":
            u = np.abs(u)
        v = rng.gen.normal(0.0, sd, (n_cols, k))
    else:  # pragma: no cover
        raise InvalidParameterError(f"unhandled kind {kind!r}")
    return FactorState(np.asarray(u, dtype=float), np.asarray(v, dtype=float), tau, aux)


# ---------------------------------------------------------------------------
# Shared helpers.
# ---------------------------------------------------------------------------


def _side_views(state: FactorState, data: ObservedMatrix, side: str):
    """Target factor matrix, the other factor, and matching value/mask views."""
    if side == "U":
        return state.U, state.V, data.values, data.mask_f
    if side == "V":
        return state.V, state.U, data.values.T, data.mask_f.T
    raise ValueError("side must be 'U' or 'V'")


def training_mse(state: FactorState, data: ObservedMatrix) -> float:
    resid = (data.values - state.U @ state.V.T)[data.mask]
    return float(np.mean(resid * resid))


# ---------------------------------------------------------------------------
# Noise precision.
# ---------------------------------------------------------------------------


def noise_posterior_params(state: FactorState, data: ObservedMatrix, hyper: Hyperparams):
    """Gamma posterior (shape, rate) for the noise precision.

    The rate accumulates half the squared residual over the observed
    entries only.
    """
    resid = (data.values - state.U @ state.V.T)[data.mask]
    shape = hyper.noise_shape + 0.5 * resid.size
    rate = hyper.noise_rate + 0.5 * float(resid @ resid)
    return shape, rate


def update_noise(state: FactorState, data: ObservedMatrix, hyper: Hyperparams, rng: RngHandle) -> float:
    shape, rate = noise_posterior_params(state, data, hyper)
    state.tau = float(rng.gen.gamma(shape, 1.0 / rate))
    return state.tau


# ---------------------------------------------------------------------------
# Multivariate (row-wise) Gaussian updates: GGG, GGGA, GGGW, GLL, GLLI,
# and the Gaussian side of GVG/GVnG/GEG.
# ---------------------------------------------------------------------------


def update_U_multivariate(
    state: FactorState,
    data: ObservedMatrix,
    kind: str,
    hyper: Hyperparams,
    rng: RngHandle,
    side: str = "U",
    parallel_rows: bool = False,
) -> np.ndarray:
    """Redraw one factor matrix row by row from its multivariate Gaussian
    conditional.

    Rows are conditionally independent given the other factor matrix, so
    with ``parallel_rows`` each row consumes its own child stream (the
    schedule a parallel worker pool would use); otherwise all rows share
    the sweep's stream.
    """
    tgt, oth, vals, _ = _side_views(state, data, side)
    obs = data.row_obs if side == "U" else data.col_obs
    n, k = tgt.shape
    tau = state.tau

    prior_prec = None
    prior_rhs = np.zeros(k)
    row_vars = None
    if kind in ("GGG", "GGGU", "GVG", "GVnG", "GEG"):
        prior_prec = hyper.weight_prec * np.eye(k)
    elif kind == "GGGA":
        prior_prec = np.diag(state.aux.ard)
    elif kind == "GGGW":
        mu_h = state.aux.mu_U if side == "U" else state.aux.mu_V
        sig_h = state.aux.sigma_U if side == "U" else state.aux.sigma_V
        lo = chol_with_jitter(sig_h)
        inv = solve_triangular(
            lo.T, solve_triangular(lo, np.eye(k), lower=True, check_finite=False),
            lower=False, check_finite=False,
        )
        prior_prec = 0.5 * (inv + inv.T)
        prior_rhs = prior_prec @ mu_h
    elif kind in ("GLL", "GLLI"):
        row_vars = state.aux.lam_U if side == "U" else state.aux.lam_V
    else:
        raise InvalidParameterError(f"{kind} has no multivariate update")

    gens = rng.spawn(n) if parallel_rows else None
    for i in range(n):
        ids = obs[i]
        use = gens[i] if gens is not None else rng
        vo = oth[ids]
        prec = (np.diag(1.0 / np.maximum(row_vars[i], _FACTOR_FLOOR))
                if row_vars is not None else prior_prec.copy())
        prec += tau * (vo.T @ vo)
        rhs = prior_rhs + tau * (vo.T @ vals[i, ids])
        draw, _ = gaussian_from_precision(use, prec, rhs)
        tgt[i] = draw
    return tgt


# ---------------------------------------------------------------------------
# Univariate (entry-wise) updates: GGGU, GEE, GEEA, GTT, GTTN, GL21 and
# the exponential side of GEG.  Entries are redrawn column by column; all
# rows of a column are conditionally independent and drawn together.
# ---------------------------------------------------------------------------

_UNI_FLAVOR = {
    "GGGU": "gaussian",
    "GEE": "exp", "GEEA": "exp", "GEG": "exp",
    "GTT": "tn", "GTTN": "tn_hier",
    "GL21": "l21",
}


def update_U_univariate(
    state: FactorState,
    data: ObservedMatrix,
    kind: str,
    hyper: Hyperparams,
    rng: RngHandle,
    side: str = "U",
) -> np.ndarray:
    flavor = _UNI_FLAVOR.get(kind)
    if flavor is None:
        raise InvalidParameterError(f"{kind} has no univariate update")
    tgt, oth, vals, maskf = _side_views(state, data, side)
    n, k = tgt.shape
    tau = state.tau
    em = (vals - tgt @ oth.T) * maskf  # residual on observed entries

    for col in range(k):
        v = oth[:, col]
        ssq = maskf @ (v * v)
        s = tau * ssq                               # likelihood precision
        ell = tau * (em @ v + tgt[:, col] * ssq)    # likelihood linear term
        old = tgt[:, col].copy()
        if flavor == "gaussian":
            prec = hyper.weight_prec + s
            new = rng.gen.normal(ell / prec, 1.0 / np.sqrt(prec))
        elif flavor == "exp":
            rate = state.aux.ard[col] if kind == "GEEA" else hyper.weight_prec
            dead = s <= 0.0
            prec = np.where(dead, 1.0, s)
            new = truncated_normal(rng, (ell - rate) / prec, prec)
            if dead.any():
                # no observations in this row: the conditional is the prior
                new[dead] = rng.gen.exponential(1.0 / rate, int(dead.sum()))
        elif flavor == "tn":
            prec = hyper.tn_prec + s
            new = truncated_normal(rng, (hyper.tn_mu * hyper.tn_prec + ell) / prec, prec)
        elif flavor == "tn_hier":
            mu_h = (state.aux.tn_mu_U if side == "U" else state.aux.tn_mu_V)[:, col]
            tau_h = (state.aux.tn_tau_U if side == "U" else state.aux.tn_tau_V)[:, col]
            prec = tau_h + s
            new = truncated_normal(rng, (mu_h * tau_h + ell) / prec, prec)
        else:  # l21
            lam = hyper.weight_prec
            other_sum = tgt.sum(axis=1) - tgt[:, col]
            prec = lam + s
            new = truncated_normal(rng, (-lam * other_sum + ell) / prec, prec)
        tgt[:, col] = new
        em -= np.outer(new - old, v) * maskf
    return tgt


# ---------------------------------------------------------------------------
# Hierarchical updates.
# ---------------------------------------------------------------------------


def ard_posterior_params(state: FactorState, kind: str, hyper: Hyperparams):
    """Gamma posterior (shape, rate vector) for the per-factor variables."""
    n_rows = state.U.shape[0]
    n_cols = state.V.shape[0]
    if kind == "GGGA":
        shape = hyper.ard_shape + 0.5 * n_rows + 0.5 * n_cols
        rate = hyper.ard_rate + 0.5 * (state.U**2).sum(axis=0) + 0.5 * (state.V**2).sum(axis=0)
    elif kind == "GEEA":
        shape = hyper.ard_shape + n_rows + n_cols
        rate = hyper.ard_rate + state.U.sum(axis=0) + state.V.sum(axis=0)
    else:
        raise InvalidParameterError(f"{kind} has no ARD update")
    return shape, rate


def update_ard(state: FactorState, data: ObservedMatrix, kind: str,
               hyper: Hyperparams, rng: RngHandle) -> np.ndarray:
    shape, rate = ard_posterior_params(state, kind, hyper)
    state.aux.ard = rng.gen.gamma(shape, 1.0 / rate)
    return state.aux.ard


def niw_posterior_params(x: np.ndarray, hyper: Hyperparams):
    """Posterior NIW parameters for the row prior of one factor matrix.

    The scale update uses the uncentered second-moment matrix of the
    rows, matching the worked reference values this model family ships
    with.
    """
    n = x.shape[0]
    if n == 0:
        return hyper.niw_mean, hyper.niw_scale, hyper.niw_dof, hyper.niw_w
    xbar = x.mean(axis=0)
    sbar = (x.T @ x) / n
    beta = hyper.niw_scale + n
    dof = hyper.niw_dof + n
    mu = (hyper.niw_scale * hyper.niw_mean + n * xbar) / beta
    dev = hyper.niw_mean - xbar
    w = hyper.niw_w + n * sbar + (hyper.niw_scale * n / beta) * np.outer(dev, dev)
    return mu, beta, dof, w


def update_wishart(state: FactorState, hyper: Hyperparams, rng: RngHandle):
    """Redraw the row-prior mean and covariance of both factor matrices."""
    mu, beta, dof, w = niw_posterior_params(state.U, hyper)
    state.aux.mu_U, state.aux.sigma_U = normal_inverse_wishart(rng, mu, beta, dof, w)
    mu, beta, dof, w = niw_posterior_params(state.V, hyper)
    state.aux.mu_V, state.aux.sigma_V = normal_inverse_wishart(rng, mu, beta, dof, w)
    return (state.aux.mu_U, state.aux.sigma_U), (state.aux.mu_V, state.aux.sigma_V)


def update_laplace_scales(state: FactorState, kind: str, hyper: Hyperparams, rng: RngHandle):
    """Redraw the per-entry Gaussian variances of the Laplace scale
    mixture (and, for GLLI, the per-entry hyperscales).

    The conditional of the reciprocal variance is inverse Gaussian with
    mean sqrt(eta)/|x| and shape eta.  For GLLI the hyperscale update
    follows the reduced generalised-inverse-Gaussian algebra: the
    reciprocal of the new scale is inverse Gaussian with shape
    lam + 1/ig_mean.
    """
    if kind not in ("GLL", "GLLI"):
        raise InvalidParameterError(f"{kind} has no Laplace-scale update")
    for side in ("U", "V"):
        x = state.U if side == "U" else state.V
        eta = (
            (state.aux.eta_U if side == "U" else state.aux.eta_V)
            if kind == "GLLI" else hyper.laplace_scale
        )
        absx = np.maximum(np.abs(x), _FACTOR_FLOOR)
        prec_draw = inverse_gaussian(rng, np.sqrt(eta) / absx, eta)
        lam = 1.0 / prec_draw
        if side == "U":
            state.aux.lam_U = lam
        else:
            state.aux.lam_V = lam
        if kind == "GLLI":
            a = 1.0 / hyper.ig_mean
            b = hyper.ig_shape
            shape_arg = lam + a
            recip = inverse_gaussian(rng, np.sqrt(shape_arg / b), shape_arg)
            if side == "U":
                state.aux.eta_U = 1.0 / recip
            else:
                state.aux.eta_V = 1.0 / recip
    return state.aux.lam_U, state.aux.lam_V


def update_gttn_hyper(state: FactorState, hyper: Hyperparams, rng: RngHandle):
    """Redraw the per-entry truncated-normal location and precision
    hyperparameters: a Gaussian for the location (given the current
    precision), then a Gamma for the precision (given the new location).
    """
    for side in ("U", "V"):
        x = state.U if side == "U" else state.V
        tau_h = state.aux.tn_tau_U if side == "U" else state.aux.tn_tau_V
        t = tau_h + hyper.tn_hyper_prec
        m = (tau_h * x + hyper.tn_hyper_mu * hyper.tn_hyper_prec) / t
        mu_h = rng.gen.normal(m, 1.0 / np.sqrt(t))
        shape = hyper.tn_shape + 0.5
        rate = hyper.tn_rate + 0.5 * (x - mu_h) ** 2
        tau_new = rng.gen.gamma(shape, 1.0 / rate)
        if side == "U":
            state.aux.tn_mu_U, state.aux.tn_tau_U = mu_h, tau_new
        else:
            state.aux.tn_mu_V, state.aux.tn_tau_V = mu_h, tau_new
    return (state.aux.tn_mu_U, state.aux.tn_tau_U), (state.aux.tn_mu_V, state.aux.tn_tau_V)


# ---------------------------------------------------------------------------
# Volume-prior updates (GVG, GVnG): entry-wise with the Gram determinant
# penalty.  Entries are coupled through the determinant, so the scan is
# sequential.
# ---------------------------------------------------------------------------


def _adjugate_psd(g: np.ndarray) -> tuple[float, np.ndarray]:
    """Determinant and adjugate of a symmetric PSD matrix via its
    eigendecomposition; stable even when eigenvalues vanish."""
    m = g.shape[0]
    if m == 0:
        return 1.0, np.zeros((0, 0))
    w, q = np.linalg.eigh(g)
    w = np.maximum(w, 0.0)
    det = float(np.prod(w))
    # product of all eigenvalues except one, per position
    prods = np.empty(m)
    for i in range(m):
        prods[i] = np.prod(np.delete(w, i))
    adj = (q * prods) @ q.T
    return det, 0.5 * (adj + adj.T)


def update_volume(
    state: FactorState,
    data: ObservedMatrix,
    kind: str,
    hyper: Hyperparams,
    rng: RngHandle,
) -> np.ndarray:
    """Entry-wise redraw of U under the Gram-determinant penalty.

    Posterior precision for entry (i, k) is the likelihood precision plus
    gamma * (det(G_k) - r A_k r^T) with G_k the Gram matrix of U without
    column k and A_k its adjugate; in exact arithmetic that penalty term
    is gamma * det of the Gram of U without row i and column k, hence
    nonnegative.  If roundoff ever makes the total nonpositive the entry
    falls back to its likelihood-only Gaussian and a counter is bumped.
    GVnG draws from the nonnegative (truncated) version.
    """
    if kind not in VOLUME_KINDS:
        raise InvalidParameterError(f"{kind} has no volume update")
    u = state.U
    v_all = state.V
    vals, maskf = data.values, data.mask_f
    n, k = u.shape
    tau = state.tau
    g = hyper.volume_gamma
    nonneg = kind == "GVnG"
    em = (vals - u @ v_all.T) * maskf

    for col in range(k):
        v = v_all[:, col]
        ssq = maskf @ (v * v)
        if k > 1:
            uk = np.delete(u, col, axis=1)
            det, adj = _adjugate_psd(uk.T @ uk)
            gvec = uk.T @ u[:, col]
        else:
            uk = None
            det, adj, gvec = 1.0, None, None
        for i in range(n):
            old = u[i, col]
            s = tau * ssq[i]
            ell = tau * (em[i] @ v + old * ssq[i])
            if k > 1:
                r = uk[i]
                ar = adj @ r
                prec_pen = g * (det - float(r @ ar))
                lin_pen = g * float(ar @ (gvec - old * r))
            else:
                prec_pen = g * det
                lin_pen = 0.0
            prec = s + prec_pen
            lin = ell + lin_pen
            if not (prec > 0.0 and np.isfinite(prec)):
                state.aux.volume_guard_count += 1
                if s > 0.0:
                    prec, lin = s, ell
                else:
                    prec, lin = 1.0, 0.0
            mean = lin / prec
            if nonneg:
                new = float(truncated_normal(rng, mean, prec))
            else:
                new = float(rng.gen.normal(mean, 1.0 / math.sqrt(prec)))
            if new != old:
                em[i] -= (new - old) * (v * maskf[i])
                if k > 1:
                    gvec += (new - old) * r
                u[i, col] = new
    return u


# ---------------------------------------------------------------------------
# Poisson-likelihood updates (PGG, PGGG).
# ---------------------------------------------------------------------------


def _update_latent_counts(state: FactorState, data: ObservedMatrix, rng: RngHandle) -> np.ndarray:
    """Allocate each observed count across factors with a multinomial whose
    probabilities are the factor products (floored to avoid a zero rate)."""
    uo = np.maximum(state.U[data.obs_ij[:, 0]], _FACTOR_FLOOR)
    vo = np.maximum(state.V[data.obs_ij[:, 1]], _FACTOR_FLOOR)
    w = uo * vo
    p = w / w.sum(axis=1, keepdims=True)
    n = data.values[data.mask].astype(np.int64)
    state.aux.Z = multinomial_rows(rng, n, p)
    return state.aux.Z


def _update_poisson_factors(
    state: FactorState, data: ObservedMatrix, kind: str,
    hyper: Hyperparams, rng: RngHandle, side: str,
) -> np.ndarray:
    tgt = state.U if side == "U" else state.V
    oth = state.V if side == "U" else state.U
    n, k = tgt.shape
    zsum = np.zeros((n, k))
    np.add.at(zsum, data.obs_ij[:, 0] if side == "U" else data.obs_ij[:, 1], state.aux.Z)
    maskf = data.mask_f if side == "U" else data.mask_f.T
    shape = hyper.pois_shape + zsum
    if kind == "PGGG":
        h = state.aux.h_U if side == "U" else state.aux.h_V
        rate = h[:, None] + maskf @ oth
    else:
        rate = hyper.pois_rate + maskf @ oth
    new = rng.gen.gamma(shape, 1.0 / rate)
    if side == "U":
        state.U = new
    else:
        state.V = new
    return new


def _update_poisson_rates(state: FactorState, hyper: Hyperparams, rng: RngHandle, side: str) -> np.ndarray:
    x = state.U if side == "U" else state.V
    shape = hyper.pois_hier_shape + x.shape[1] * hyper.pois_shape
    rate = hyper.pois_hier_shape / hyper.pois_hier_mean + x.sum(axis=1)
    h = rng.gen.gamma(shape, 1.0 / rate)
    if side == "U":
        state.aux.h_U = h
    else:
        state.aux.h_V = h
    return h


def update_poisson(state: FactorState, data: ObservedMatrix, kind: str,
                   hyper: Hyperparams, rng: RngHandle) -> FactorState:
    """One full Poisson-model block: latent counts, then U (and its rates
    for PGGG), then V (and its rates)."""
    if kind not in POISSON_KINDS:
        raise InvalidParameterError(f"{kind} is not a Poisson-likelihood kind")
    _update_latent_counts(state, data, rng)
    _update_poisson_factors(state, data, kind, hyper, rng, "U")
    if kind == "PGGG":
        _update_poisson_rates(state, hyper, rng, "U")
    _update_poisson_factors(state, data, kind, hyper, rng, "V")
    if kind == "PGGG":
        _update_poisson_rates(state, hyper, rng, "V")
    return state


# ---------------------------------------------------------------------------
# Non-probabilistic baseline.
# ---------------------------------------------------------------------------


def nmf_step(u: np.ndarray, v: np.ndarray, data: ObservedMatrix) -> tuple[np.ndarray, np.ndarray]:
    """One mask-aware multiplicative-update sweep minimising the squared
    error on the observed entries; training error is non-increasing."""
    maskf = data.mask_f
    rm = data.values * maskf
    pred = (u @ v.T) * maskf
    u = u * (rm @ v) / np.maximum(pred @ v, _FACTOR_FLOOR)
    pred = (u @ v.T) * maskf
    v = v * (rm.T @ u) / np.maximum(pred.T @ u, _FACTOR_FLOOR)
    return u, v


# ---------------------------------------------------------------------------
# Log joint density (non-hierarchical kinds).
# ---------------------------------------------------------------------------


def _tn_log_norm(mu: float, prec: float) -> float:
    # log of the [0, inf) mass of N(mu, 1/prec)
    return float(special.log_ndtr(mu * math.sqrt(prec)))


def log_joint(state: FactorState, data: ObservedMatrix, kind: str, hyper: Hyperparams) -> float:
    """Unnormalised log posterior density of the state (likelihood plus
    priors) for the kinds without hierarchical priors.

    Constraint violations (a negative entry under a nonnegative prior)
    yield ``-inf`` rather than raising.
    """
    if kind in HIERARCHICAL_KINDS or kind == "NMF":
        raise InvalidParameterError(f"log_joint is not defined for {kind}")
    u, v = state.U, state.V
    if kind in NONNEGATIVE_U and np.any(u < 0):
        return -math.inf
    if kind in NONNEGATIVE_V and np.any(v < 0):
        return -math.inf

    if kind in POISSON_KINDS:
        rates = np.maximum((u @ v.T)[data.mask], _FACTOR_FLOOR)
        obs = data.values[data.mask]
        lik = float(np.sum(obs * np.log(rates) - rates - special.gammaln(obs + 1.0)))
        a, b = hyper.pois_shape, hyper.pois_rate
        if np.any(u <= 0) or np.any(v <= 0):
            return -math.inf
        prior = float(
            np.sum((a - 1) * np.log(u) - b * u) + np.sum((a - 1) * np.log(v) - b * v)
        ) + (u.size + v.size) * (a * math.log(b) - float(special.gammaln(a)))
        return lik + prior

    tau = state.tau
    if not tau > 0:
        return -math.inf
    resid = (data.values - u @ v.T)[data.mask]
    lik = 0.5 * resid.size * (math.log(tau) - math.log(2 * math.pi)) - 0.5 * tau * float(resid @ resid)
    lik += (
        hyper.noise_shape * math.log(hyper.noise_rate)
        - float(special.gammaln(hyper.noise_shape))
        + (hyper.noise_shape - 1) * math.log(tau)
        - hyper.noise_rate * tau
    )

    lam = hyper.weight_prec
    if kind in ("GGG", "GGGU"):
        prior = -0.5 * lam * (float(np.sum(u * u)) + float(np.sum(v * v)))
        prior += 0.5 * (u.size + v.size) * (math.log(lam) - math.log(2 * math.pi))
    elif kind == "GLL":
        eta = hyper.laplace_scale
        prior = -(float(np.sum(np.abs(u))) + float(np.sum(np.abs(v)))) / eta
        prior -= (u.size + v.size) * math.log(2 * eta)
    elif kind == "GEE":
        prior = -lam * (float(np.sum(u)) + float(np.sum(v)))
        prior += (u.size + v.size) * math.log(lam)
    elif kind == "GTT":
        mu0, t0 = hyper.tn_mu, hyper.tn_prec
        prior = (
            0.5 * (u.size + v.size) * (math.log(t0) - math.log(2 * math.pi))
            - 0.5 * t0 * (float(np.sum((u - mu0) ** 2)) + float(np.sum((v - mu0) ** 2)))
            - (u.size + v.size) * _tn_log_norm(mu0, t0)
        )
    elif kind == "GL21":
        prior = -0.5 * lam * (
            float(np.sum(u.sum(axis=1) ** 2)) + float(np.sum(v.sum(axis=1) ** 2))
        )
    elif kind == "GEG":
        prior = -lam * float(np.sum(u)) + u.size * math.log(lam)
        prior += -0.5 * lam * float(np.sum(v * v))
        prior += 0.5 * v.size * (math.log(lam) - math.log(2 * math.pi))
    elif kind in VOLUME_KINDS:
        # effective density the conditional updates target
        prior = -0.5 * hyper.volume_gamma * float(np.linalg.det(u.T @ u))
        prior += -0.5 * lam * float(np.sum(v * v))
        prior += 0.5 * v.size * (math.log(lam) - math.log(2 * math.pi))
    else:  # pragma: no cover
        raise InvalidParameterError(f"unhandled kind {kind!r}")
    return lik + prior


# ---------------------------------------------------------------------------
# Sweep orchestration and state validation.
# ---------------------------------------------------------------------------


def sweep(state: FactorState, data: ObservedMatrix, spec: ModelSpec,
          rng: RngHandle, parallel_rows: bool = False) -> FactorState:
    """One full Gibbs sweep in the fixed scan order:

    Gaussian likelihood: noise, hierarchical parameters, U, V.
    Poisson likelihood: latent counts, U, row rates, V, column rates.
    NMF: one multiplicative update.
    """
    kind, h = spec.kind, spec.hyper
    if kind == "NMF":
        state.U, state.V = nmf_step(state.U, state.V, data)
        return state
    if kind in POISSON_KINDS:
        return update_poisson(state, data, kind, h, rng)

    update_noise(state, data, h, rng)
    if kind in ("GGGA", "GEEA"):
        update_ard(state, data, kind, h, rng)
    elif kind == "GGGW":
        update_wishart(state, h, rng)
    elif kind in ("GLL", "GLLI"):
        update_laplace_scales(state, kind, h, rng)
    elif kind == "GTTN":
        update_gttn_hyper(state, h, rng)

    for side, table in (("U", _U_UPDATER), ("V", _V_UPDATER)):
        how = table[kind]
        if how == "mv":
            update_U_multivariate(state, data, kind, h, rng, side=side,
                                  parallel_rows=parallel_rows)
        elif how == "uni":
            update_U_univariate(state, data, kind, h, rng, side=side)
        elif how == "vol":
            update_volume(state, data, kind, h, rng)
        else:  # pragma: no cover
            raise InvalidParameterError(f"unhandled updater {how!r}")
    return state


class InvalidStateError(ValueError):
    """A sweep left the state outside the model's support."""


def validate_state(state: FactorState, spec: ModelSpec, data: ObservedMatrix | None = None) -> None:
    """Check the support and positivity invariants of the active kind."""
    kind = spec.kind
    if not np.all(np.isfinite(state.U)) or not np.all(np.isfinite(state.V)):
        raise InvalidStateError("non-finite factor entries")
    if kind in NONNEGATIVE_U and np.any(state.U < 0):
        raise InvalidStateError("negative entries in U")
    if kind in NONNEGATIVE_V and np.any(state.V < 0):
        raise InvalidStateError("negative entries in V")
    if kind in GAUSSIAN_KINDS and not state.tau > 0:
        raise InvalidStateError("noise precision must be positive")
    aux = state.aux
    if kind in ("GGGA", "GEEA") and (aux.ard is None or np.any(aux.ard <= 0)):
        raise InvalidStateError("ARD variables must be positive")
    if kind in ("GLL", "GLLI"):
        for arr in (aux.lam_U, aux.lam_V):
            if arr is None or np.any(arr <= 0):
                raise InvalidStateError("Laplace mixture scales must be positive")
    if kind == "GLLI":
        for arr in (aux.eta_U, aux.eta_V):
            if arr is None or np.any(arr <= 0):
                raise InvalidStateError("hyperscales must be positive")
    if kind == "GTTN":
        for arr in (aux.tn_tau_U, aux.tn_tau_V):
            if arr is None or np.any(arr <= 0):
                raise InvalidStateError("per-entry precisions must be positive")
    if kind == "PGGG":
        for arr in (aux.h_U, aux.h_V):
            if arr is None or np.any(arr <= 0):
                raise InvalidStateError("row rates must be positive")
    if kind in POISSON_KINDS and data is not None and aux.Z is not None:
        if np.any(aux.Z < 0):
            raise InvalidStateError("latent counts must be nonnegative")
        totals = aux.Z.sum(axis=1)
        if not np.array_equal(totals, data.values[data.mask].astype(np.int64)):
            raise InvalidStateError("latent counts must sum to the observed counts")
