"""Sampling from predictive distributions.

Three prediction surfaces: k-step-ahead rainfall at the observed stations,
interpolation at new sites through the augmented propagator, and areal
averages through Voronoi weights. All of them reuse retained posterior
draws; each draw contributes one sample per target.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .geometry import EPS_GEOM, Site, StationSet, build_tessellation
from .mcmc import ChainOutput, RainModel, _mvn_draw, ffbs_draw, sample_std_normal_below
from .model import (
    CovariateGrid,
    ModelError,
    ObservationGrid,
    Params,
    WindSeries,
    chol_with_jitter,
    exp_covariance,
    propagator,
    propagators_for_kind,
    transform,
)

log = logging.getLogger(__name__)

DEFAULT_ENSEMBLE_SIZE = 200
DEFAULT_REFRESH_SWEEPS = 20


@dataclass
class PredictiveEnsemble:
    """Sampled rainfall values per (time, target).

    ``samples[i, m]`` is the m-th sampled value (mm) for target i; every
    target carries the same number of samples. ``draw_indices`` records
    which retained posterior draw produced each sample column.
    """

    targets: list[tuple[int, str]]
    samples: np.ndarray
    draw_indices: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim != 2 or self.samples.shape[0] != len(self.targets):
            raise ModelError("ensemble needs one sample row per target")
        if np.any(self.samples < 0):
            raise ModelError("rainfall samples must be nonnegative")

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    def for_target(self, time: int, target: str) -> np.ndarray:
        return self.samples[self.targets.index((time, target))]


def _draw_innovation(l_corr: np.ndarray, sigma2: float, rng: np.random.Generator) -> np.ndarray:
    if sigma2 == 0.0:
        return np.zeros(l_corr.shape[0])
    return np.sqrt(sigma2) * (l_corr @ rng.standard_normal(l_corr.shape[0]))


def _refresh_window(model: RainModel, params: Params, corr: np.ndarray, gs_window: np.ndarray,
                    xi_start: np.ndarray, obs_window: np.ndarray, x_window: np.ndarray,
                    sweeps: int, rng: np.random.Generator) -> np.ndarray:
    """Condition the latent path on observations between fit end and origin.

    Runs a fixed number of Gibbs refresh sweeps of (W, xi) over the window
    with the parameters frozen, starting the state-space recursion exactly
    at ``xi_start``. Returns the latent value at the window end.
    """
    win_len, n = obs_window.shape
    mean = x_window @ params.beta  # (win, N)
    with np.errstate(invalid="ignore"):
        pos = obs_window > 0
    zero = obs_window == 0
    miss = np.isnan(obs_window)
    sd = np.sqrt(params.tau2)

    # start from a zero-innovation propagation of the last fitted state
    xi = np.empty((win_len + 1, n))
    xi[0] = xi_start
    for t in range(1, win_len + 1):
        xi[t] = params.phi * gs_window[t - 1] @ xi[t - 1]
    w = mean + xi[1:]
    if pos.any():
        w[pos] = np.power(obs_window[pos], 1.0 / params.lam)

    c0 = np.zeros((n, n))
    for _ in range(sweeps):
        mu = mean + xi[1:]
        if miss.any():
            w[miss] = mu[miss] + sd * rng.standard_normal(int(miss.sum()))
        if zero.any():
            b = (0.0 - mu[zero]) / sd
            w[zero] = mu[zero] + sd * sample_std_normal_below(b, rng)
        xi = ffbs_draw(w - mean, gs_window, params.phi, corr, params.sigma2, params.tau2,
                       xi_start, c0, rng)
    return xi[-1]


def predict_ahead(output: ChainOutput, model: RainModel, obs_all: ObservationGrid,
                  x_all: CovariateGrid, wind_all: WindSeries | None, horizon: int,
                  n_ensemble: int = DEFAULT_ENSEMBLE_SIZE,
                  refresh_sweeps: int = DEFAULT_REFRESH_SWEEPS,
                  rng: np.random.Generator | None = None) -> PredictiveEnsemble:
    """Sample rainfall for the next ``horizon`` steps at every station.

    ``obs_all`` runs from the first fitted step to the forecast origin;
    rows past the fitted window condition each draw's latent state through
    Gibbs refresh sweeps with the primary parameters frozen. Covariates
    (scaled like the training grid) and wind must extend ``horizon`` steps
    past the origin.
    """
    if output.latent_xi is None:
        raise ModelError("prediction needs latent-state snapshots in the chain output")
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(output.seed + 1))
    t_fit = model.n_times
    t_origin = obs_all.n_times
    if t_origin < t_fit:
        raise ModelError("observation grid for prediction must include the fitted window")
    if x_all.values.shape[0] < t_origin + horizon:
        raise ModelError(
            f"covariates cover {x_all.values.shape[0]} steps; need {t_origin + horizon}")
    if model.kind == "conv-drift":
        if wind_all is None or wind_all.values.shape[0] < t_origin + horizon:
            raise ModelError(f"wind series must cover {t_origin + horizon} steps")

    idx = output.subsample_indices(n_ensemble)
    m = idx.size
    n = model.n_stations
    ids = model.stations.ids
    targets = [(t_origin + k, sid) for k in range(1, horizon + 1) for sid in ids]
    samples = np.empty((horizon * n, m))

    wind_km = wind_all.km_steps() if wind_all is not None else None
    win = slice(t_fit, t_origin)
    obs_window = obs_all.values[win]

    for col, i in enumerate(idx):
        p = output.params_at(int(i))
        corr = exp_covariance(model.dist, p.rho0, 1.0)
        chol, _ = chol_with_jitter(corr)
        l_corr = np.tril(chol[0])
        gs_needed = propagators_for_kind(
            model.kind, model.coords, model.areas, p,
            wind_km[t_fit:t_origin + horizon] if model.kind == "conv-drift" else None)
        if gs_needed.shape[0] == 1:
            gs_needed = np.broadcast_to(gs_needed[0], (t_origin + horizon - t_fit, n, n))

        xi_t = output.latent_xi[int(i), -1].copy()
        if t_origin > t_fit:
            xi_t = _refresh_window(model, p, corr, gs_needed[: t_origin - t_fit], xi_t,
                                   obs_window, x_all.values[win], refresh_sweeps, rng)

        for k in range(1, horizon + 1):
            g = gs_needed[t_origin - t_fit + k - 1]
            xi_t = p.phi * g @ xi_t + _draw_innovation(l_corr, p.sigma2, rng)
            w_star = (x_all.values[t_origin + k - 1] @ p.beta + xi_t
                      + np.sqrt(p.tau2) * rng.standard_normal(n))
            samples[(k - 1) * n: k * n, col] = transform(w_star, p.lam)

    return PredictiveEnsemble(targets=targets, samples=samples, draw_indices=idx)


def _augmented_areas(model: RainModel, new_coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Re-tessellate with the new sites included; returns (orig areas, new areas)."""
    sites = list(model.stations.sites)
    sites += [Site(f"new{i}", (float(x), float(y))) for i, (x, y) in enumerate(new_coords)]
    tess = build_tessellation(StationSet(sites))
    n = model.n_stations
    return tess.area[:n], tess.area[n:]


def _kernel_shape(model: RainModel, params: Params) -> np.ndarray | None:
    """Inverse kernel shape matrix for the model class; None for identity classes."""
    if model.kind in ("separable", "no-ar"):
        return None
    if model.kind == "conv-iso":
        return np.eye(2) / params.rho1**2
    from .model import anisotropy_matrix

    return anisotropy_matrix(params.rho1, params.c, params.alpha)


def _kernel_block(sigma_inv: np.ndarray | None, rows: np.ndarray, cols: np.ndarray,
                  areas: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """Displaced-kernel quadrature block h(row_i - col_j - mu) * area_j.

    Identity model classes (no convolution) couple a point only to itself.
    """
    if sigma_inv is None:
        d = np.hypot(rows[:, None, 0] - cols[None, :, 0],
                     rows[:, None, 1] - cols[None, :, 1])
        return (d < EPS_GEOM).astype(float)
    diff = rows[:, None, :] - cols[None, :, :] - mu
    quad = np.einsum("ijk,kl,ijl->ij", diff, sigma_inv, diff)
    return np.exp(-quad) * areas[None, :]


def _g_original(model: RainModel, params: Params, mu: np.ndarray) -> np.ndarray:
    """The fitted model's own transition matrix for one displacement."""
    if model.kind in ("separable", "no-ar"):
        return np.eye(model.n_stations)
    sigma_inv = _kernel_shape(model, params)
    return propagator(model.coords, model.areas, sigma_inv, mu)


def new_site_conditional(model: RainModel, params: Params, new_coords: np.ndarray,
                         xi_prev: np.ndarray, xi_t: np.ndarray,
                         xi_next: np.ndarray | None,
                         mu_t: np.ndarray, mu_next: np.ndarray | None
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian conditional of the new-site field values at one time.

    Builds the augmented one-step model: the new-site propagator rows and
    the next-step propagator (split over old and new columns) use areas
    from the tessellation recomputed with the new sites included, while the
    old-site transition keeps the fitted model's matrix. Completing the
    square over the joint innovation correlation yields the conditional
    given the latent field at t-1, t and (when available) t+1; ``xi_next``
    is None at the final fitted step, dropping the forward constraint.

    Returns (mean, covariance) of the new-site values.
    """
    n = model.n_stations
    m = new_coords.shape[0]
    area_orig, area_new = _augmented_areas(model, new_coords)
    all_coords = np.vstack([model.coords, new_coords])
    sigma_inv = _kernel_shape(model, params)

    g_star = params.phi * _kernel_block(sigma_inv, new_coords, model.coords, area_orig, mu_t)
    m_star = g_star @ xi_prev
    m_old = params.phi * (_g_original(model, params, mu_t) @ xi_prev)

    dist_aug = np.hypot(all_coords[:, None, 0] - all_coords[None, :, 0],
                        all_coords[:, None, 1] - all_coords[None, :, 1])
    corr_aug = exp_covariance(dist_aug, params.rho0, 1.0)
    chol_aug, _ = chol_with_jitter(corr_aug)
    q_full = cho_solve(chol_aug, np.eye(n + m)) / params.sigma2
    q22 = q_full[n:, n:]
    q21 = q_full[n:, :n]

    prec = q22.copy()
    b = q22 @ m_star - q21 @ (xi_t - m_old)

    if xi_next is not None:
        h_old = params.phi * _kernel_block(sigma_inv, model.coords, model.coords,
                                           area_orig, mu_next)
        h_star = params.phi * _kernel_block(sigma_inv, model.coords, new_coords,
                                            area_new, mu_next)
        corr = exp_covariance(model.dist, params.rho0, 1.0)
        chol_v, _ = chol_with_jitter(corr)
        r = xi_next - h_old @ xi_t
        vin_h = cho_solve(chol_v, h_star) / params.sigma2
        prec = prec + h_star.T @ vin_h
        b = b + vin_h.T @ r

    chol_p = cho_factor(0.5 * (prec + prec.T), lower=True)
    mean = cho_solve(chol_p, b)
    cov = cho_solve(chol_p, np.eye(m))
    return mean, 0.5 * (cov + cov.T)


def predict_new_sites(output: ChainOutput, model: RainModel, new_coords: np.ndarray,
                      time: int, new_x: np.ndarray | None = None,
                      n_ensemble: int = DEFAULT_ENSEMBLE_SIZE,
                      rng: np.random.Generator | None = None) -> PredictiveEnsemble:
    """Sample rainfall at unobserved sites for one fitted time step.

    Draws the new-site field values from their Gaussian conditional given
    the neighbouring latent states of each retained posterior draw (the
    temporal Markov property confines the conditioning to t-1, t, t+1),
    adds the regression mean and nugget, and transforms. A new site
    coincident with a station degenerates to that station's latent value.

    ``new_x`` carries covariate rows for the new sites (already on the
    standardized scale); by default each new site borrows the covariates of
    its nearest station.
    """
    if output.latent_xi is None:
        raise ModelError("prediction needs latent-state snapshots in the chain output")
    new_coords = np.asarray(new_coords, dtype=float).reshape(-1, 2)
    m = new_coords.shape[0]
    t_fit = model.n_times
    if not (1 <= time <= t_fit):
        raise ModelError(f"new-site prediction time must lie in the fitted window 1..{t_fit}")
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(output.seed + 2))

    # coincidence with stations: the conditional collapses to the station value
    d_new = np.hypot(new_coords[:, None, 0] - model.coords[None, :, 0],
                     new_coords[:, None, 1] - model.coords[None, :, 1])
    coincident = d_new.min(axis=1) < EPS_GEOM
    station_of = d_new.argmin(axis=1)

    if new_x is None:
        new_x = model.x.values[time - 1, station_of, :]
    new_x = np.asarray(new_x, dtype=float).reshape(m, model.x.n_coefs)

    idx = output.subsample_indices(n_ensemble)
    samples = np.empty((m, idx.size))
    free = ~coincident

    wind_km = model.wind_km
    for col, i in enumerate(idx):
        p = output.params_at(int(i))
        xi_path = output.latent_xi[int(i)]
        xi_prev, xi_t = xi_path[time - 1], xi_path[time]
        xi_next = xi_path[time + 1] if time < t_fit else None
        z = np.empty(m)
        z[coincident] = xi_t[station_of[coincident]]
        if free.any():
            if model.kind == "conv-drift":
                mu_t = p.u * wind_km[time - 1]
                mu_next = p.u * wind_km[time] if xi_next is not None else None
            else:
                mu_t = np.zeros(2)
                mu_next = np.zeros(2) if xi_next is not None else None
            mean, cov = new_site_conditional(model, p, new_coords[free], xi_prev, xi_t,
                                             xi_next, mu_t, mu_next)
            z[free] = _mvn_draw(mean, cov, rng)
        w_star = new_x @ p.beta + z + np.sqrt(p.tau2) * rng.standard_normal(m)
        samples[:, col] = transform(w_star, p.lam)

    targets = [(time, f"{x:g}:{y:g}") for x, y in new_coords]
    return PredictiveEnsemble(targets=targets, samples=samples, draw_indices=idx)


def areal_combine(values: np.ndarray, weights: np.ndarray,
                  extra_values: np.ndarray | None = None,
                  extra_weights: np.ndarray | None = None) -> np.ndarray:
    """Weighted station combination for one time: values is (n_stations, m)."""
    w = np.asarray(weights, dtype=float)
    v = np.asarray(values, dtype=float)
    if extra_values is not None:
        v = np.vstack([v, extra_values])
        w = np.concatenate([w, np.asarray(extra_weights, dtype=float)])
    total = w.sum()
    if abs(total - 1.0) > 1e-9:
        warnings.warn(f"areal weights sum to {total:.6g}; renormalizing")
        if total <= 0:
            raise ModelError("areal weights sum to zero; region does not meet the ensemble")
        w = w / total
    return w @ v


def predict_areal(station_ensemble: PredictiveEnsemble, station_ids: list[str],
                  weights: np.ndarray, region_id: str = "region",
                  extra_ensemble: PredictiveEnsemble | None = None,
                  extra_weights: np.ndarray | None = None) -> PredictiveEnsemble:
    """Areal-average ensemble from a stationwise ensemble.

    For each distinct time in the station ensemble, combines samples across
    stations with the given Voronoi-overlap weights (sample index by sample
    index). Optional extra targets (predicted unobserved sites) join the
    weighted sum with their own weights.
    """
    times = sorted({t for t, _ in station_ensemble.targets})
    rows = []
    for t in times:
        block = np.empty((len(station_ids), station_ensemble.n_samples))
        for j, sid in enumerate(station_ids):
            block[j] = station_ensemble.for_target(t, sid)
        ev = ew = None
        if extra_ensemble is not None:
            sub = [i for i, (tt, _) in enumerate(extra_ensemble.targets) if tt == t]
            ev = extra_ensemble.samples[sub]
            ew = np.asarray(extra_weights, dtype=float)
        rows.append(areal_combine(block, weights, ev, ew))
    return PredictiveEnsemble(targets=[(t, region_id) for t in times],
                              samples=np.vstack(rows),
                              draw_indices=station_ensemble.draw_indices)


def ensemble_quantiles(ens: PredictiveEnsemble,
                       qs=(0.05, 0.25, 0.5, 0.75, 0.95)) -> list[tuple]:
    """Rows of (time, target, q05, ..., q95) for reporting."""
    out = []
    for i, (t, tgt) in enumerate(ens.targets):
        out.append((t, tgt, *np.quantile(ens.samples[i], qs)))
    return out
