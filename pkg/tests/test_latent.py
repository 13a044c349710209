"""FFBS and single-time latent-field updates against dense Gaussian oracles."""

import math

import numpy as np
import pytest

from rainfield.mcmc import (
    ffbs_draw,
    ffbs_update_xi,
    single_site_update_xi,
    single_t_conditional,
)
from rainfield.model import CovariateGrid, ObservationGrid

from _helpers import default_params, fresh_state, station_set, tiny_model, unit_tessellation
from rainfield.mcmc import RainModel


def dense_xi_posterior(model, params, w_grid):
    """Joint-Gaussian conditioning oracle for the latent path given W.

    Builds the full (T+1)N prior covariance of the stacked path by explicit
    transition products, then conditions on the stacked centered
    observations.
    """
    t_len, n = w_grid.shape
    corr = np.exp(-model.dist / params.rho0)
    s_innov = params.sigma2 * corr
    gs = model.build_cache(params).gs
    a_mats = [params.phi * gs[t] for t in range(t_len)]  # xi_t -> xi_{t+1}

    dim = (t_len + 1) * n
    m_map = np.zeros((dim, dim))  # maps stacked innovations to stacked path
    for t in range(t_len + 1):
        blk = np.eye(n)
        m_map[t * n:(t + 1) * n, t * n:(t + 1) * n] = blk
        for s in range(t - 1, -1, -1):
            blk = blk @ a_mats[s]
            m_map[t * n:(t + 1) * n, s * n:(s + 1) * n] = blk
    innov_cov = np.kron(np.eye(t_len + 1), s_innov)
    sigma_x = m_map @ innov_cov @ m_map.T

    h_sel = np.zeros((t_len * n, dim))
    h_sel[:, n:] = np.eye(t_len * n)
    sigma_w = h_sel @ sigma_x @ h_sel.T + params.tau2 * np.eye(t_len * n)
    cross = sigma_x @ h_sel.T
    obs_centered = (w_grid - model.mean_grid(params.beta)).ravel()
    sol = np.linalg.solve(sigma_w, obs_centered)
    mean = cross @ sol
    cov = sigma_x - cross @ np.linalg.solve(sigma_w, cross.T)
    return mean.reshape(t_len + 1, n), np.diag(cov).reshape(t_len + 1, n)


def uncensored_model(n_t, n_s, seed=0, kind="conv-drift"):
    rng = np.random.default_rng(seed)
    coords = np.array([[0.0, 0.0], [30.0, 10.0], [10.0, 40.0], [45.0, 35.0]])[:n_s]
    stations = station_set(coords)
    vals = rng.gamma(2.0, 2.0, size=(n_t, n_s)) + 0.5
    obs = ObservationGrid(values=vals)
    x = CovariateGrid.build(rng.standard_normal((n_t, n_s, 1)), ["c0"])
    from rainfield.model import WindSeries

    wind = WindSeries(1.0 + 0.2 * rng.standard_normal((n_t, 2)))
    return RainModel(stations, unit_tessellation(stations), obs, x,
                     wind if kind == "conv-drift" else None, kind=kind)


class TestFFBS:
    def test_scalar_conjugacy(self):
        # N=1, T=1, phi=0, x=0: xi_1 | W ~ N(s2 W/(s2+t2), s2 t2/(s2+t2))
        sigma2, tau2, w_val = 1.3, 0.4, 2.0
        rng = np.random.default_rng(0)
        n_draws = 50_000
        draws = np.empty(n_draws)
        draws0 = np.empty(n_draws)
        gs = np.ones((1, 1, 1))
        corr = np.ones((1, 1))
        for i in range(n_draws):
            xi = ffbs_draw(np.array([[w_val]]), gs, 0.0, corr, sigma2, tau2,
                           np.zeros(1), sigma2 * corr, rng)
            draws[i] = xi[1, 0]
            draws0[i] = xi[0, 0]
        mean = sigma2 * w_val / (sigma2 + tau2)
        var = sigma2 * tau2 / (sigma2 + tau2)
        assert draws.mean() == pytest.approx(mean, abs=4 * math.sqrt(var / n_draws))
        assert draws.var() == pytest.approx(var, rel=4 * math.sqrt(2 / n_draws))
        # xi_0 carries no information: prior N(0, sigma2)
        assert draws0.mean() == pytest.approx(0.0, abs=4 * math.sqrt(sigma2 / n_draws))
        assert draws0.var() == pytest.approx(sigma2, rel=4 * math.sqrt(2 / n_draws))

    def test_noiseless_limit_exact(self):
        model = uncensored_model(3, 2, seed=1)
        params = default_params(k=2)
        state = fresh_state(model, params, seed=2)
        # tau2 = 0 exactly: draws pin to W - x'beta
        gs = state.cache.gs
        obs_centered = state.latent.w - model.mean_grid(params.beta)
        xi = ffbs_draw(obs_centered, gs, params.phi, state.cache.corr, params.sigma2,
                       0.0, np.zeros(2), params.sigma2 * state.cache.corr,
                       np.random.default_rng(3))
        np.testing.assert_allclose(xi[1:], obs_centered, atol=1e-10)

    def test_dense_conditioning_oracle_n2_t3(self):
        model = uncensored_model(3, 2, seed=4)
        params = default_params(k=2, phi=0.4, sigma2=0.8, tau2=0.3)
        # make G well-scaled for phi=0.4 stability
        state = fresh_state(model, params, seed=5)
        w_grid = state.latent.w
        mean, var = dense_xi_posterior(model, params, w_grid)
        rng = np.random.default_rng(6)
        n_draws = 30_000
        acc = np.zeros((2, model.n_times + 1, model.n_stations))
        obs_centered = w_grid - model.mean_grid(params.beta)
        for _ in range(n_draws):
            xi = ffbs_draw(obs_centered, state.cache.gs, params.phi, state.cache.corr,
                           params.sigma2, params.tau2, np.zeros(2),
                           params.sigma2 * state.cache.corr, rng)
            acc[0] += xi
            acc[1] += xi * xi
        emp_mean = acc[0] / n_draws
        emp_var = acc[1] / n_draws - emp_mean**2
        scale = np.sqrt(var)
        np.testing.assert_allclose(emp_mean, mean, atol=4 * scale.max() / math.sqrt(n_draws))
        np.testing.assert_allclose(emp_var, var, rtol=0.05)

    def test_deterministic_start_for_windows(self):
        # C0 = 0 pins the initial state exactly
        model = uncensored_model(2, 2, seed=7)
        params = default_params(k=2)
        state = fresh_state(model, params, seed=8)
        xi_start = np.array([1.5, -0.5])
        obs_centered = state.latent.w - model.mean_grid(params.beta)
        xi = ffbs_draw(obs_centered, state.cache.gs, params.phi, state.cache.corr,
                       params.sigma2, params.tau2, xi_start, np.zeros((2, 2)),
                       np.random.default_rng(9))
        np.testing.assert_allclose(xi[0], xi_start, atol=1e-12)


class TestSingleT:
    def test_interior_conditional_matches_complete_the_square(self):
        # N=1, T=2: hand complete-the-square for the middle time
        model = uncensored_model(2, 1, seed=10, kind="separable")
        params = default_params(k=2, phi=0.6, sigma2=0.9, tau2=0.2)
        state = fresh_state(model, params, seed=11)
        xi = state.latent.xi
        obs_centered = state.latent.w - model.mean_grid(params.beta)
        prec, b = single_t_conditional(model, params, state.cache, xi, obs_centered, 1)
        # oracle (V = 1, G = 1): prec = 1/t2 + (1 + phi^2)/s2
        expect_prec = 1 / params.tau2 + (1 + params.phi**2) / params.sigma2
        expect_b = (obs_centered[0, 0] / params.tau2
                    + params.phi * (xi[0, 0] + xi[2, 0]) / params.sigma2)
        assert prec[0, 0] == pytest.approx(expect_prec, rel=1e-12)
        assert b[0] == pytest.approx(expect_b, rel=1e-12)

    def test_boundary_t0_uses_prior_and_forward_term(self):
        model = uncensored_model(2, 1, seed=12, kind="separable")
        params = default_params(k=2, phi=0.5, sigma2=1.1)
        state = fresh_state(model, params, seed=13)
        xi = state.latent.xi
        obs_centered = state.latent.w - model.mean_grid(params.beta)
        prec, b = single_t_conditional(model, params, state.cache, xi, obs_centered, 0)
        assert prec[0, 0] == pytest.approx((1 + params.phi**2) / params.sigma2, rel=1e-12)
        assert b[0] == pytest.approx(params.phi * xi[1, 0] / params.sigma2, rel=1e-12)

    def test_final_time_has_no_forward_term(self):
        model = uncensored_model(2, 1, seed=14, kind="separable")
        params = default_params(k=2, phi=0.5)
        state = fresh_state(model, params, seed=15)
        obs_centered = state.latent.w - model.mean_grid(params.beta)
        prec, _ = single_t_conditional(model, params, state.cache, state.latent.xi,
                                       obs_centered, 2)
        assert prec[0, 0] == pytest.approx(1 / params.tau2 + 1 / params.sigma2, rel=1e-12)

    def test_sweep_matches_ffbs_marginals(self):
        # cross-algorithm agreement on a small uncensored instance
        model = uncensored_model(3, 2, seed=16, kind="separable")
        params = default_params(k=2, phi=0.5, sigma2=0.8, tau2=0.3)
        state = fresh_state(model, params, seed=17)
        w_grid = state.latent.w
        mean, var = dense_xi_posterior(model, params, w_grid)

        rng = np.random.default_rng(18)
        n_sweeps, burn = 40_000, 1000
        acc = np.zeros((2, model.n_times + 1, model.n_stations))
        for i in range(n_sweeps + burn):
            single_site_update_xi(model, state, rng)
            if i >= burn:
                acc[0] += state.latent.xi
                acc[1] += state.latent.xi**2
        emp_mean = acc[0] / n_sweeps
        emp_var = acc[1] / n_sweeps - emp_mean**2
        np.testing.assert_allclose(emp_mean, mean, atol=0.05 * np.sqrt(var.max()))
        np.testing.assert_allclose(emp_var, var, rtol=0.06)

    def test_sweep_keeps_shapes_and_finiteness(self):
        model = tiny_model(n_t=4, n_s=3, seed=19)
        params = default_params(k=model.x.n_coefs)
        state = fresh_state(model, params, seed=20)
        single_site_update_xi(model, state, np.random.default_rng(21))
        assert state.latent.xi.shape == (5, 3)
        assert np.isfinite(state.latent.xi).all()
