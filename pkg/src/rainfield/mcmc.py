"""Gibbs/Metropolis sampler for the censored spatio-temporal rainfall model.

The joint posterior couples the censored power transform (via data
augmentation of the latent potential W), the latent autoregressive field
(updated by forward-filtering backward-sampling or single-time Gibbs
sweeps), conjugate draws for the regression and variance parameters, and
Metropolis blocks for the transform exponent and the kernel/range
parameters.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import gammaln, ndtr, ndtri

from .geometry import StationSet, Tessellation, distance_matrix
from .model import (
    CovariateGrid,
    ModelError,
    ObservationGrid,
    Params,
    WindSeries,
    chol_with_jitter,
    exp_covariance,
    propagators_for_kind,
    stability_spectral_radius,
)

log = logging.getLogger(__name__)

ALPHA_MAX = np.pi / 2.0

RANGE_BLOCK_FIELDS = {
    "conv-drift": ("rho0", "rho1", "c", "alpha", "u"),
    "conv-iso": ("rho0", "rho1"),
    "separable": ("rho0",),
    "no-ar": ("rho0",),
}

DEFAULT_PROPOSAL_SCALES = {
    "lambda": 0.05,
    "rho0": 0.02,
    "rho1": 0.02,
    "c": 0.1,
    "alpha": 0.1,
    "u": 0.1,
}


class ChainError(RuntimeError):
    """Sampler failure (non-finite state)."""


@dataclass
class PriorConfig:
    """Priors for the primary parameters.

    rho0 and rho1 share a gamma prior with the given mean and variance;
    c has a gamma prior with mean and variance 1; alpha is uniform on
    [0, pi/2]; u is normal(u_mean, u_var). tau2, sigma2 are flat on the log
    scale and phi, lambda, beta are flat; the initial field has a
    N(0, sigma2 * V_rho0) prior. Those improper/conjugate pieces live in the
    posterior density itself.
    """

    rho_mean: float = 100.0
    rho_var: float = 10.0
    c_mean: float = 1.0
    c_var: float = 1.0
    u_mean: float = 0.0
    u_var: float = 1.0e4

    def __post_init__(self):
        if self.rho_mean <= 0 or self.rho_var <= 0:
            raise ModelError("range prior mean and variance must be positive")
        if self.c_mean <= 0 or self.c_var <= 0:
            raise ModelError("anisotropy-ratio prior mean and variance must be positive")
        if self.u_var <= 0:
            raise ModelError("drift prior variance must be positive")


def _gamma_logpdf(x: float, mean: float, var: float) -> float:
    shape = mean * mean / var
    scale = var / mean
    if x <= 0:
        return -np.inf
    return (shape - 1.0) * math.log(x) - x / scale - shape * math.log(scale) - gammaln(shape)


def _normal_logpdf(x: float, mean: float, var: float) -> float:
    return -0.5 * (math.log(2.0 * math.pi * var) + (x - mean) ** 2 / var)


@dataclass
class LatentState:
    """Latent field path xi_0..xi_T plus the augmented potential grid W.

    ``xi`` is (T+1, N) with row t holding xi_t; ``w`` is (T, N) with row
    t-1 holding W_t. Positive-observation slots of W equal Y**(1/lambda),
    zero-observation slots are <= 0, missing slots are free.
    """

    xi: np.ndarray
    w: np.ndarray

    def copy(self) -> "LatentState":
        return LatentState(self.xi.copy(), self.w.copy())


@dataclass
class ChainConfig:
    """Sampler run lengths, seed, proposal scales and latent-update strategy."""

    n_burnin: int = 5000
    n_samples: int = 195_000
    thin: int = 1
    seed: int = 0
    strategy: str = "auto"  # 'ffbs' | 'single-t' | 'auto'
    proposal_scales: dict = field(default_factory=lambda: dict(DEFAULT_PROPOSAL_SCALES))
    store_latent: bool = True
    adapt_window: int = 50
    adapt_target: float = 0.3

    def __post_init__(self):
        if self.n_burnin < 0 or self.n_samples <= 0:
            raise ModelError("chain lengths must be positive")
        if self.thin < 1:
            raise ModelError("thin must be >= 1")
        if self.strategy not in ("ffbs", "single-t", "auto"):
            raise ModelError(f"unknown latent-update strategy {self.strategy!r}")
        scales = dict(DEFAULT_PROPOSAL_SCALES)
        scales.update(self.proposal_scales)
        self.proposal_scales = scales


class RainModel:
    """Bundles observations, covariates, wind, geometry, priors and model class.

    This is the immutable problem description shared by every update; chain
    state (parameters and latent fields) lives outside it.
    """

    def __init__(self, stations: StationSet, tess: Tessellation, obs: ObservationGrid,
                 covariates: CovariateGrid, wind: WindSeries | None = None,
                 kind: str = "conv-drift", priors: PriorConfig | None = None):
        t, n = obs.values.shape
        if n != len(stations):
            raise ModelError(f"observation grid has {n} stations, station set has {len(stations)}")
        if covariates.values.shape[:2] != (t, n):
            raise ModelError("covariate grid shape does not match observations")
        if kind == "conv-drift":
            if wind is None:
                raise ModelError("conv-drift model needs a wind series")
            if wind.values.shape[0] != t:
                raise ModelError("wind series must have one entry per observed time step")
        self.stations = stations
        self.tess = tess
        self.obs = obs
        self.x = covariates
        self.wind = wind
        self.kind = kind
        self.priors = priors if priors is not None else PriorConfig()

        self.n_times = t
        self.n_stations = n
        self.dist = distance_matrix(stations)
        self.coords = stations.coords
        self.areas = tess.area
        self.pos_mask = obs.is_positive
        self.zero_mask = obs.is_zero
        self.missing_mask = obs.is_missing
        self.y_pos = obs.values[self.pos_mask]
        self.n_pos = int(self.y_pos.size)
        self.sum_log_y_pos = float(np.sum(np.log(self.y_pos))) if self.n_pos else 0.0
        self.wind_km = wind.km_steps() if wind is not None else None
        self.range_fields = RANGE_BLOCK_FIELDS[kind]

    # -- parameter-dependent matrices ------------------------------------

    def build_cache(self, params: Params) -> "ParamCache":
        corr = exp_covariance(self.dist, params.rho0, 1.0)
        chol, logdet = chol_with_jitter(corr)
        if self.kind == "conv-drift":
            gs = propagators_for_kind(self.kind, self.coords, self.areas, params, self.wind_km)
            g_constant = bool(self.wind is not None
                              and np.allclose(self.wind.values, self.wind.values[0]))
        else:
            g_one = propagators_for_kind(self.kind, self.coords, self.areas, params, None)[0]
            gs = np.broadcast_to(g_one, (self.n_times, self.n_stations, self.n_stations))
            g_constant = True
        return ParamCache(corr=corr, chol=chol, logdet=logdet, gs=gs, g_constant=g_constant)

    def mean_grid(self, beta: np.ndarray) -> np.ndarray:
        return np.einsum("tnk,k->tn", self.x.values, beta)

    def positive_latents(self, lam: float) -> np.ndarray:
        return np.power(self.y_pos, 1.0 / lam)

    def log_prior(self, params: Params) -> float:
        pri = self.priors
        lp = _gamma_logpdf(params.rho0, pri.rho_mean, pri.rho_var)
        if self.kind in ("conv-iso", "conv-drift"):
            lp += _gamma_logpdf(params.rho1, pri.rho_mean, pri.rho_var)
        if self.kind == "conv-drift":
            lp += _gamma_logpdf(params.c, pri.c_mean, pri.c_var)
            lp += -math.log(ALPHA_MAX)  # uniform on [0, pi/2]
            lp += _normal_logpdf(params.u, pri.u_mean, pri.u_var)
        return lp


@dataclass
class ParamCache:
    """Matrices tied to the current parameter values.

    ``corr`` is the unit-diagonal innovation correlation matrix (variance
    sigma2 is kept separate, matching the factorization of the posterior),
    ``chol``/``logdet`` its Cholesky factorization, ``gs`` the (T, N, N)
    stack of transition matrices with gs[t-1] propagating xi_{t-1} to xi_t.
    """

    corr: np.ndarray
    chol: tuple
    logdet: float
    gs: np.ndarray
    g_constant: bool

    def corr_solve(self, b: np.ndarray) -> np.ndarray:
        return cho_solve(self.chol, b, check_finite=False)


@dataclass
class ChainState:
    params: Params
    latent: LatentState
    cache: ParamCache


# -- posterior density ----------------------------------------------------


def log_posterior(model: RainModel, params: Params, latent: LatentState,
                  cache: ParamCache | None = None) -> float:
    """Unnormalized log posterior of (params, latent) given the data.

    Implements every factor of the joint density: the variance powers with
    their flat-on-log priors, the innovation-correlation determinant, the
    power-transform Jacobian over positive observations, the Gaussian
    quadratic forms of the W residuals and the field innovations, the
    initial-field prior and the parameter priors. Violated sign constraints
    on W at dry slots return -inf.
    """
    if not params.in_support() or params.tau2 <= 0.0 or params.sigma2 <= 0.0:
        return -np.inf
    if np.any(latent.w[model.zero_mask] > 0.0):
        return -np.inf
    if cache is None:
        cache = model.build_cache(params)
    t, n = model.n_times, model.n_stations

    lp = -(n * (t + 1) / 2.0 + 1.0) * math.log(params.sigma2)
    lp += -(n * t / 2.0 + 1.0) * math.log(params.tau2)
    lp += -(t + 1) / 2.0 * cache.logdet
    if model.n_pos:
        lp += (1.0 / params.lam - 1.0) * model.sum_log_y_pos - model.n_pos * math.log(params.lam)

    resid = latent.w - model.mean_grid(params.beta) - latent.xi[1:]
    lp += -0.5 * float(np.sum(resid * resid)) / params.tau2

    innov = latent.xi[1:] - params.phi * np.einsum("tij,tj->ti", cache.gs, latent.xi[:-1])
    sol = cache.corr_solve(innov.T)  # (N, T)
    lp += -0.5 * float(np.sum(innov.T * sol)) / params.sigma2

    sol0 = cache.corr_solve(latent.xi[0])
    lp += -0.5 * float(latent.xi[0] @ sol0) / params.sigma2

    lp += model.log_prior(params)
    return lp


# -- truncated-normal sampling ---------------------------------------------


def sample_std_normal_below(b: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draws from a standard normal truncated to (-inf, b], elementwise.

    Inverse-CDF for bounds within 5 sd of the mean, exponential rejection
    in the far lower tail.
    """
    b = np.asarray(b, dtype=float)
    out = np.empty_like(b)
    easy = b >= -5.0
    if easy.any():
        u = rng.uniform(size=int(easy.sum()))
        be = b[easy]
        out[easy] = np.minimum(ndtri(u * ndtr(be)), be)
    hard = ~easy
    if hard.any():
        a = -b[hard]  # >= 5; sample y >= a from the upper tail, return -y
        y = np.empty_like(a)
        todo = np.ones(a.shape, dtype=bool)
        alpha_star = 0.5 * (a + np.sqrt(a * a + 4.0))
        while todo.any():
            m = int(todo.sum())
            cand = a[todo] + rng.exponential(1.0, size=m) / alpha_star[todo]
            accept = rng.uniform(size=m) <= np.exp(-0.5 * (cand - alpha_star[todo]) ** 2)
            idx = np.nonzero(todo)[0][accept]
            y[idx] = cand[accept]
            todo[idx] = False
        out[hard] = -y
    return out


def _mvn_draw(mean: np.ndarray, cov: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw from N(mean, cov); falls back to an eigenvalue-clipped factor for
    singular covariances so noiseless limits come out exact."""
    z = rng.standard_normal(mean.shape[0])
    try:
        l_fac = np.linalg.cholesky(cov)
        return mean + l_fac @ z
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
        vals = np.clip(vals, 0.0, None)
        return mean + (vecs * np.sqrt(vals)) @ z


# -- Gibbs updates ----------------------------------------------------------


def update_w(model: RainModel, state: ChainState, rng: np.random.Generator) -> None:
    """Resample the augmented potential grid W in place.

    Missing slots draw from N(mean, tau2), dry slots from the same normal
    truncated above at 0, and positive slots are pinned at Y**(1/lambda).
    """
    p = state.params
    mu = model.mean_grid(p.beta) + state.latent.xi[1:]
    sd = math.sqrt(p.tau2)
    w = state.latent.w
    miss = model.missing_mask
    if miss.any():
        w[miss] = mu[miss] + sd * rng.standard_normal(int(miss.sum()))
    zero = model.zero_mask
    if zero.any():
        b = (0.0 - mu[zero]) / sd
        w[zero] = mu[zero] + sd * sample_std_normal_below(b, rng)
    if model.n_pos:
        w[model.pos_mask] = model.positive_latents(p.lam)


def update_beta(model: RainModel, state: ChainState, rng: np.random.Generator) -> np.ndarray:
    """Draw beta from its multivariate normal full conditional (flat prior)."""
    p = state.params
    k = model.x.n_coefs
    xmat = model.x.values.reshape(-1, k)
    r = (state.latent.w - state.latent.xi[1:]).ravel()
    a = xmat.T @ xmat
    b = xmat.T @ r
    try:
        chol = cho_factor(a, lower=True)
    except np.linalg.LinAlgError:
        log.warning("singular design in beta update; jittering normal equations")
        a = a + 1e-10 * np.trace(a) / k * np.eye(k)
        chol = cho_factor(a, lower=True)
    mean = cho_solve(chol, b)
    # cov = tau2 * A^{-1}: draw mean + sqrt(tau2) * L^{-T} z
    z = rng.standard_normal(k)
    from scipy.linalg import solve_triangular

    beta = mean + math.sqrt(p.tau2) * solve_triangular(chol[0], z, lower=True, trans="T")
    state.params = p.copy(beta=beta)
    return beta


def update_phi(model: RainModel, state: ChainState, rng: np.random.Generator) -> float | None:
    """Draw phi from its scalar normal full conditional (flat prior).

    Returns None (state unchanged) when the conditional is flat, i.e. the
    propagated field is identically zero.
    """
    p = state.params
    xi = state.latent.xi
    a = np.einsum("tij,tj->ti", state.cache.gs, xi[:-1])  # (T, N)
    sol = state.cache.corr_solve(a.T)  # (N, T)
    prec = float(np.sum(a.T * sol)) / p.sigma2
    if prec <= 0.0 or not np.isfinite(prec):
        log.info("phi full conditional is flat (propagated field is zero); update skipped")
        return None
    lin = float(np.sum(xi[1:].T * sol)) / p.sigma2
    mean = lin / prec
    phi = mean + rng.standard_normal() / math.sqrt(prec)
    state.params = p.copy(phi=phi)
    return phi


def _innovation_quadform(model: RainModel, state: ChainState) -> float:
    xi = state.latent.xi
    innov = xi[1:] - state.params.phi * np.einsum("tij,tj->ti", state.cache.gs, xi[:-1])
    sol = state.cache.corr_solve(innov.T)
    q = float(np.sum(innov.T * sol))
    sol0 = state.cache.corr_solve(xi[0])
    return q + float(xi[0] @ sol0)


def update_sigma2(model: RainModel, state: ChainState, rng: np.random.Generator) -> float | None:
    """Inverse-gamma draw for the innovation variance."""
    q = _innovation_quadform(model, state)
    if q <= 0.0:
        log.info("sigma2 quadratic form is zero; degenerate update skipped")
        return None
    shape = model.n_stations * (model.n_times + 1) / 2.0
    sigma2 = (q / 2.0) / rng.standard_gamma(shape)
    state.params = state.params.copy(sigma2=sigma2)
    return sigma2


def update_tau2(model: RainModel, state: ChainState, rng: np.random.Generator) -> float | None:
    """Inverse-gamma draw for the nugget variance."""
    resid = state.latent.w - model.mean_grid(state.params.beta) - state.latent.xi[1:]
    q = float(np.sum(resid * resid))
    if q <= 0.0:
        log.info("tau2 quadratic form is zero; degenerate update skipped")
        return None
    shape = model.n_stations * model.n_times / 2.0
    tau2 = (q / 2.0) / rng.standard_gamma(shape)
    state.params = state.params.copy(tau2=tau2)
    return tau2


# -- latent-field updates ----------------------------------------------------


def ffbs_draw(obs_centered: np.ndarray, gs: np.ndarray, phi: float, corr: np.ndarray,
              sigma2: float, tau2: float, m0: np.ndarray, c0: np.ndarray,
              rng: np.random.Generator) -> np.ndarray:
    """Joint draw of the field path in a linear Gaussian state-space model.

    Forward pass is the Kalman filter for the evolution
    xi_t = phi*gs[t-1] xi_{t-1} + N(0, sigma2*corr) with observations
    obs_centered[t-1] = xi_t + N(0, tau2*I), starting from N(m0, c0);
    the backward pass samples xi_T, then xi_t | xi_{t+1}.

    Returns a (T+1, N) path including the initial state.
    """
    t_len, n = obs_centered.shape
    s_innov = sigma2 * corr
    tau_eye = tau2 * np.eye(n)
    ms = np.empty((t_len + 1, n))
    cs = np.empty((t_len + 1, n, n))
    preds = np.empty((t_len + 1, n))
    pred_covs = np.empty((t_len + 1, n, n))
    ms[0], cs[0] = m0, c0
    for t in range(1, t_len + 1):
        f = phi * gs[t - 1]
        a = f @ ms[t - 1]
        r = f @ cs[t - 1] @ f.T + s_innov
        r = 0.5 * (r + r.T)
        preds[t], pred_covs[t] = a, r
        smat = r + tau_eye
        try:
            chol = cho_factor(smat, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            log.info("non-PD filter covariance at t=%d repaired with jitter", t)
            smat = smat + 1e-10 * sigma2 * np.eye(n)
            chol = cho_factor(smat, lower=True, check_finite=False)
        gain = cho_solve(chol, r, check_finite=False).T  # R S^{-1}
        e = obs_centered[t - 1] - a
        ms[t] = a + gain @ e
        c = r - gain @ r
        cs[t] = 0.5 * (c + c.T)
    xi = np.empty((t_len + 1, n))
    xi[t_len] = _mvn_draw(ms[t_len], cs[t_len], rng)
    for t in range(t_len - 1, -1, -1):
        f = phi * gs[t]
        r1 = pred_covs[t + 1]
        try:
            cholr = cho_factor(r1, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            log.info("non-PD predicted covariance at t=%d repaired with jitter", t + 1)
            cholr = cho_factor(r1 + 1e-10 * sigma2 * np.eye(n), lower=True, check_finite=False)
        j = cho_solve(cholr, f @ cs[t], check_finite=False).T  # C_t F' R^{-1}
        h = ms[t] + j @ (xi[t + 1] - preds[t + 1])
        hc = cs[t] - j @ (f @ cs[t])
        xi[t] = _mvn_draw(h, 0.5 * (hc + hc.T), rng)
    return xi


def ffbs_update_xi(model: RainModel, state: ChainState, rng: np.random.Generator) -> None:
    """Replace the latent path xi_0..xi_T with an exact joint draw given W."""
    p = state.params
    obs_centered = state.latent.w - model.mean_grid(p.beta)
    n = model.n_stations
    state.latent.xi = ffbs_draw(obs_centered, state.cache.gs, p.phi, state.cache.corr,
                                p.sigma2, p.tau2, np.zeros(n), p.sigma2 * state.cache.corr, rng)


def single_t_conditional(model: RainModel, params: Params, cache: ParamCache,
                         xi: np.ndarray, obs_centered: np.ndarray, t: int,
                         corr_inv: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(precision, linear term) of the conditional of xi_t at one time.

    The conditional given the current neighbours and W_t is
    N(prec^{-1} b, prec^{-1}); t = 0 has no observation term and couples to
    the initial-field prior, t = T has no forward term.
    """
    p = params
    t_len, n = model.n_times, model.n_stations
    if corr_inv is None:
        corr_inv = cache.corr_solve(np.eye(n))
    eye = np.eye(n)
    if t == 0:
        g1 = cache.gs[0]
        prec = corr_inv / p.sigma2 + (p.phi**2) * g1.T @ corr_inv @ g1 / p.sigma2
        b = p.phi * g1.T @ (corr_inv @ xi[1]) / p.sigma2
    elif t == t_len:
        gt = cache.gs[t - 1]
        prec = eye / p.tau2 + corr_inv / p.sigma2
        b = obs_centered[t - 1] / p.tau2 + corr_inv @ (p.phi * gt @ xi[t - 1]) / p.sigma2
    else:
        gt, gnext = cache.gs[t - 1], cache.gs[t]
        prec = (eye / p.tau2 + corr_inv / p.sigma2
                + (p.phi**2) * gnext.T @ corr_inv @ gnext / p.sigma2)
        b = (obs_centered[t - 1] / p.tau2
             + corr_inv @ (p.phi * gt @ xi[t - 1]) / p.sigma2
             + p.phi * gnext.T @ (corr_inv @ xi[t + 1]) / p.sigma2)
    return prec, b


def single_site_update_xi(model: RainModel, state: ChainState, rng: np.random.Generator) -> None:
    """Gibbs sweep over t = 0..T drawing xi_t given its neighbours and W_t.

    When the transition matrix is constant in time the interior conditional
    precision is factorized once per sweep.
    """
    from scipy.linalg import solve_triangular

    p = state.params
    cache = state.cache
    t_len, n = model.n_times, model.n_stations
    xi = state.latent.xi
    obs_centered = state.latent.w - model.mean_grid(p.beta)
    corr_inv = cache.corr_solve(np.eye(n))

    def draw(b: np.ndarray, chol):
        mean = cho_solve(chol, b, check_finite=False)
        z = rng.standard_normal(n)
        return mean + solve_triangular(chol[0], z, lower=True, trans="T")

    interior_chol = None
    if cache.g_constant and t_len >= 2:
        prec_int, _ = single_t_conditional(model, p, cache, xi, obs_centered, 1, corr_inv)
        interior_chol = cho_factor(0.5 * (prec_int + prec_int.T), lower=True,
                                   check_finite=False)

    for t in range(t_len + 1):
        prec, b = single_t_conditional(model, p, cache, xi, obs_centered, t, corr_inv)
        if 0 < t < t_len and interior_chol is not None:
            chol = interior_chol
        else:
            chol = cho_factor(0.5 * (prec + prec.T), lower=True, check_finite=False)
        xi[t] = draw(b, chol)


# -- Metropolis blocks --------------------------------------------------------


def lambda_log_accept_ratio(model: RainModel, state: ChainState,
                            lam_new: float) -> tuple[float, LatentState | None]:
    """Log acceptance ratio for a log-scale lambda proposal.

    Includes the proposal Jacobian of the log transform; the candidate
    latent state has the positive-observation slots of W repinned at
    Y**(1/lam_new).
    """
    if lam_new <= 0 or not np.isfinite(lam_new):
        return -np.inf, None
    p = state.params
    latent_new = state.latent.copy()
    latent_new.w[model.pos_mask] = model.positive_latents(lam_new)
    lp_new = log_posterior(model, p.copy(lam=lam_new), latent_new, state.cache)
    lp_old = log_posterior(model, p, state.latent, state.cache)
    logr = lp_new - lp_old + math.log(lam_new) - math.log(p.lam)
    return logr, latent_new


def mh_update_lambda(model: RainModel, state: ChainState, rng: np.random.Generator,
                     scale: float) -> bool | None:
    """Metropolis draw of lambda with a normal proposal on log(lambda).

    Skipped (returns None) when there are no positive observations, in
    which case the full conditional is flat.
    """
    if model.n_pos == 0:
        log.info("no positive observations; lambda update skipped")
        return None
    lam_new = math.exp(math.log(state.params.lam) + scale * rng.standard_normal())
    logr, latent_new = lambda_log_accept_ratio(model, state, lam_new)
    if math.log(rng.uniform()) < logr:
        state.params = state.params.copy(lam=lam_new)
        state.latent = latent_new  # type: ignore[assignment]
        return True
    return False


def _params_in_support(fields: dict) -> bool:
    if fields["rho0"] <= 0 or fields["rho1"] <= 0 or fields["c"] <= 0:
        return False
    if not (0.0 <= fields["alpha"] <= ALPHA_MAX):
        return False
    return all(np.isfinite(v) for v in fields.values())


def ranges_log_accept_ratio(model: RainModel, state: ChainState,
                            candidate: dict) -> tuple[float, Params | None, ParamCache | None]:
    """Log acceptance ratio for a joint range/kernel-block proposal.

    ``candidate`` maps a subset of {rho0, rho1, c, alpha, u} to proposed
    values; transform Jacobians for the log coordinates (and the logit
    coordinate for alpha) are included. Out-of-support candidates get -inf.
    """
    p = state.params
    fields = {"rho0": p.rho0, "rho1": p.rho1, "c": p.c, "alpha": p.alpha, "u": p.u}
    fields.update(candidate)
    if not _params_in_support(fields):
        return -np.inf, None, None
    params_new = p.copy(**fields)
    cache_new = model.build_cache(params_new)
    logr = (log_posterior(model, params_new, state.latent, cache_new)
            - log_posterior(model, p, state.latent, state.cache))
    for name in model.range_fields:
        old, new = getattr(p, name), fields[name]
        if name in ("rho0", "rho1", "c"):
            logr += math.log(new) - math.log(old)
        elif name == "alpha":
            logr += (math.log(new) + math.log(ALPHA_MAX - new)
                     - math.log(old) - math.log(ALPHA_MAX - old))
    return logr, params_new, cache_new


_ALPHA_CLIP = 1e-9


def _logit_alpha(alpha: float) -> float:
    a = min(max(alpha, _ALPHA_CLIP), ALPHA_MAX - _ALPHA_CLIP)
    return math.log(a / (ALPHA_MAX - a))


def mh_update_ranges(model: RainModel, state: ChainState, rng: np.random.Generator,
                     scales: dict) -> bool:
    """Joint Metropolis draw of the active range/kernel parameters.

    Random-walk proposals act on log rho0, log rho1, log c, logit-mapped
    alpha and raw u; the innovation correlation and every transition matrix
    are rebuilt for the candidate and swapped in on acceptance.
    """
    p = state.params
    candidate = {}
    for name in model.range_fields:
        step = scales[name] * rng.standard_normal()
        if name in ("rho0", "rho1", "c"):
            candidate[name] = math.exp(math.log(getattr(p, name)) + step)
        elif name == "alpha":
            z = _logit_alpha(p.alpha) + step
            candidate[name] = ALPHA_MAX / (1.0 + math.exp(-z))
        else:  # u
            candidate[name] = p.u + step
    logr, params_new, cache_new = ranges_log_accept_ratio(model, state, candidate)
    if math.log(rng.uniform()) < logr:
        state.params = params_new  # type: ignore[assignment]
        state.cache = cache_new  # type: ignore[assignment]
        return True
    return False


# -- chain driver -------------------------------------------------------------


@dataclass
class ChainOutput:
    """Posterior draws plus bookkeeping from one or more merged chains."""

    columns: list[str]
    draws: np.ndarray  # (n_kept, n_columns) scalar parameters
    log_post: np.ndarray  # (n_kept,)
    beta_names: list[str]
    kind: str
    acceptance: dict
    latent_xi: np.ndarray | None = None  # (n_kept, T+1, N)
    latent_w: np.ndarray | None = None  # (n_kept, T, N)
    mode_index: int = 0
    mode_spectral_radius: float = float("nan")
    seed: int = 0

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, self.columns.index(name)]

    def params_at(self, i: int) -> Params:
        row = dict(zip(self.columns, self.draws[i]))
        beta = np.array([row[f"beta.{n}"] for n in self.beta_names])
        return Params(lam=row["lambda"], beta=beta, tau2=row["tau2"], sigma2=row["sigma2"],
                      rho0=row["rho0"], phi=row["phi"], u=row["u"], rho1=row["rho1"],
                      alpha=row["alpha"], c=row["c"])

    def subsample_indices(self, m: int) -> np.ndarray:
        """Evenly strided indices of at most m retained draws."""
        n = self.n_draws
        if m >= n:
            return np.arange(n)
        return np.unique(np.linspace(0, n - 1, m).round().astype(int))

    def credible_interval(self, name: str, level: float = 0.95) -> tuple[float, float]:
        col = self.column(name)
        lo = (1.0 - level) / 2.0
        return float(np.quantile(col, lo)), float(np.quantile(col, 1.0 - lo))

    @staticmethod
    def merge(outputs: list["ChainOutput"]) -> "ChainOutput":
        """Concatenate chains (in the given order) into one output."""
        first = outputs[0]
        draws = np.concatenate([o.draws for o in outputs])
        log_post = np.concatenate([o.log_post for o in outputs])
        latent_xi = (np.concatenate([o.latent_xi for o in outputs])
                     if first.latent_xi is not None else None)
        latent_w = (np.concatenate([o.latent_w for o in outputs])
                    if first.latent_w is not None else None)
        acc = {}
        for key in first.acceptance:
            rates = [o.acceptance[key][0] for o in outputs]
            counts = [o.acceptance[key][1] for o in outputs]
            tot = sum(counts)
            acc[key] = (sum(r * c for r, c in zip(rates, counts)) / tot if tot else 0.0, tot)
        mode = int(np.argmax(log_post))
        radius = outputs[int(np.argmax([o.log_post.max() for o in outputs]))].mode_spectral_radius
        return ChainOutput(columns=first.columns, draws=draws, log_post=log_post,
                           beta_names=first.beta_names, kind=first.kind, acceptance=acc,
                           latent_xi=latent_xi, latent_w=latent_w, mode_index=mode,
                           mode_spectral_radius=radius, seed=first.seed)


def initial_state(model: RainModel, rho_init: float | None = None) -> ChainState:
    """Deterministic chain initialization.

    lambda starts at 1 with beta from least squares on the censored-proxy
    potential (zeros at dry/missing slots), both variances at half the
    proxy residual variance, ranges at the prior mean, an isotropic kernel
    and a near-zero autoregression.
    """
    t, n = model.n_times, model.n_stations
    proxy = np.where(model.pos_mask, np.nan_to_num(model.obs.values, nan=0.0), 0.0)
    k = model.x.n_coefs
    xmat = model.x.values.reshape(-1, k)
    beta, *_ = np.linalg.lstsq(xmat, proxy.ravel(), rcond=None)
    resid_var = float(np.var(proxy.ravel() - xmat @ beta))
    v0 = max(resid_var / 2.0, 1e-4)
    rho = rho_init if rho_init is not None else model.priors.rho_mean
    params = Params(lam=1.0, beta=beta, tau2=v0, sigma2=v0, rho0=rho, phi=1e-4,
                    u=0.0, rho1=rho, alpha=np.pi / 4.0, c=1.0)
    if model.kind == "no-ar":
        params = params.copy(phi=0.0)
    w = proxy.copy()
    latent = LatentState(xi=np.zeros((t + 1, n)), w=w)
    return ChainState(params=params, latent=latent, cache=model.build_cache(params))


def _resolve_strategy(config: ChainConfig, cache: ParamCache) -> str:
    if config.strategy != "auto":
        return config.strategy
    return "single-t" if cache.g_constant else "ffbs"


class _AdaptiveScale:
    """Robbins-Monro scale adaptation toward a target acceptance rate."""

    def __init__(self, value: float, target: float, window: int):
        self.value = value
        self.target = target
        self.window = window
        self.accepts = 0
        self.count = 0
        self.rounds = 0

    def record(self, accepted: bool, adapting: bool):
        if not adapting:
            return
        self.count += 1
        self.accepts += bool(accepted)
        if self.count >= self.window:
            self.rounds += 1
            rate = self.accepts / self.count
            self.value *= math.exp((rate - self.target) / math.sqrt(self.rounds))
            self.value = min(max(self.value, 1e-5), 50.0)
            self.accepts = 0
            self.count = 0


def run_chain(model: RainModel, config: ChainConfig,
              rng: np.random.Generator | None = None) -> ChainOutput:
    """Run one MCMC chain and return its kept draws.

    The update cycle is: augmented potential W, latent field xi (FFBS or
    single-t per the configured strategy), beta, phi, tau2, sigma2, lambda,
    then the joint range/kernel block. Proposal scales adapt during burn-in
    only. Draws are deterministic given the seed.
    """
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    state = initial_state(model)
    strategy = _resolve_strategy(config, state.cache)
    xi_update = ffbs_update_xi if strategy == "ffbs" else single_site_update_xi

    lam_scale = _AdaptiveScale(config.proposal_scales["lambda"], config.adapt_target,
                               config.adapt_window)
    range_base = np.array([config.proposal_scales[f] for f in model.range_fields])
    range_mult = _AdaptiveScale(1.0, config.adapt_target, config.adapt_window)

    n_iter = config.n_burnin + config.n_samples
    n_keep = config.n_samples // config.thin
    columns = [name for name, _ in
               Params(1, np.zeros(model.x.n_coefs), 1, 1, 1, 0, 0, 1, 0, 1)
               .scalar_items(model.x.names)]
    draws = np.empty((n_keep, len(columns)))
    log_post = np.empty(n_keep)
    latent_xi = (np.empty((n_keep, model.n_times + 1, model.n_stations))
                 if config.store_latent else None)
    latent_w = (np.empty((n_keep, model.n_times, model.n_stations))
                if config.store_latent else None)
    accept_counts = {"lambda": [0, 0], "ranges": [0, 0]}

    kept = 0
    for it in range(n_iter):
        adapting = it < config.n_burnin
        post_burn = not adapting

        update_w(model, state, rng)
        xi_update(model, state, rng)
        update_beta(model, state, rng)
        if model.kind != "no-ar":
            update_phi(model, state, rng)
        update_tau2(model, state, rng)
        update_sigma2(model, state, rng)

        acc = mh_update_lambda(model, state, rng, lam_scale.value)
        if acc is not None:
            lam_scale.record(acc, adapting)
            if post_burn:
                accept_counts["lambda"][0] += bool(acc)
                accept_counts["lambda"][1] += 1

        scales = dict(zip(model.range_fields, range_mult.value * range_base))
        acc = mh_update_ranges(model, state, rng, scales)
        range_mult.record(acc, adapting)
        if post_burn:
            accept_counts["ranges"][0] += bool(acc)
            accept_counts["ranges"][1] += 1

        lp = log_posterior(model, state.params, state.latent, state.cache)
        if not np.isfinite(lp):
            dump = {name: val for name, val in state.params.scalar_items(model.x.names)}
            raise ChainError(f"non-finite log posterior at iteration {it}; state: {dump}")

        if post_burn:
            j = it - config.n_burnin
            if j % config.thin == 0 and kept < n_keep:
                draws[kept] = [v for _, v in state.params.scalar_items(model.x.names)]
                log_post[kept] = lp
                if config.store_latent:
                    latent_xi[kept] = state.latent.xi  # type: ignore[index]
                    latent_w[kept] = state.latent.w  # type: ignore[index]
                kept += 1

    acceptance = {key: ((cnt[0] / cnt[1] if cnt[1] else 0.0), cnt[1])
                  for key, cnt in accept_counts.items()}
    out = ChainOutput(columns=columns, draws=draws[:kept], log_post=log_post[:kept],
                      beta_names=model.x.names, kind=model.kind, acceptance=acceptance,
                      latent_xi=latent_xi[:kept] if latent_xi is not None else None,
                      latent_w=latent_w[:kept] if latent_w is not None else None,
                      seed=config.seed)
    out.mode_index = int(np.argmax(out.log_post))
    mode_params = out.params_at(out.mode_index)
    mode_cache = model.build_cache(mode_params)
    out.mode_spectral_radius = max(
        stability_spectral_radius(mode_params.phi, g) for g in _unique_gs(mode_cache)
    )
    return out


def _unique_gs(cache: ParamCache):
    if cache.g_constant:
        return [cache.gs[0]]
    return list(cache.gs)
