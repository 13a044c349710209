"""Parameter vector, covariance and kernel constructions for the rainfall model.

The observation model couples rain occurrence and amount through a censored
power transform of a latent Gaussian potential; the latent field evolves as
a vector autoregression whose transition matrix is a displaced anisotropic
Gaussian kernel weighted by Voronoi cell areas.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

COV_JITTER = 1e-10  # relative diagonal jitter applied before factorization
WIND_TO_KM_PER_STEP = 3600.0 * 3.0 / 1000.0  # m/s -> km displacement per 3 h step

MODEL_KINDS = ("conv-drift", "conv-iso", "separable", "no-ar")


class ModelError(ValueError):
    """Invalid parameter values or inconsistent model inputs."""


@dataclass
class Params:
    """Primary parameters of the hierarchical model.

    lam : power-transform exponent (> 0)
    beta : regression coefficients, intercept first
    tau2 : nugget variance (> 0)
    sigma2 : innovation variance (> 0)
    rho0 : innovation correlation range in km (> 0)
    phi : autoregressive scale
    u : drift scale multiplying the wind vector
    rho1 : kernel range in km (> 0)
    alpha : anisotropy rotation angle in [0, pi/2]
    c : anisotropy axis ratio (> 0)
    """

    lam: float
    beta: np.ndarray
    tau2: float
    sigma2: float
    rho0: float
    phi: float
    u: float
    rho1: float
    alpha: float
    c: float

    def __post_init__(self):
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        self.validate()

    def validate(self):
        # zero variances are admitted as degenerate (noiseless) simulator
        # limits; the posterior density guards against them itself
        checks = [
            ("lam", self.lam > 0),
            ("tau2", self.tau2 >= 0),
            ("sigma2", self.sigma2 >= 0),
            ("rho0", self.rho0 > 0),
            ("rho1", self.rho1 > 0),
            ("alpha", 0.0 <= self.alpha <= np.pi / 2),
            ("c", self.c > 0),
        ]
        for name, ok in checks:
            if not ok:
                raise ModelError(f"parameter {name} out of range: {getattr(self, name)}")
        vals = [self.lam, self.tau2, self.sigma2, self.rho0, self.phi, self.u, self.rho1,
                self.alpha, self.c] + list(self.beta)
        if not np.all(np.isfinite(vals)):
            raise ModelError("non-finite parameter value")

    def in_support(self) -> bool:
        try:
            self.validate()
            return True
        except ModelError:
            return False

    def copy(self, **changes) -> "Params":
        changes.setdefault("beta", self.beta.copy())
        return replace(self, **changes)

    def scalar_items(self, beta_names: list[str] | None = None) -> list[tuple[str, float]]:
        """Flat (name, value) pairs in canonical output order."""
        if beta_names is None:
            beta_names = [f"b{i}" for i in range(len(self.beta))]
        items = [("lambda", self.lam)]
        items += [(f"beta.{n}", v) for n, v in zip(beta_names, self.beta)]
        items += [("tau2", self.tau2), ("sigma2", self.sigma2), ("rho0", self.rho0),
                  ("phi", self.phi), ("u", self.u), ("rho1", self.rho1),
                  ("alpha", self.alpha), ("c", self.c)]
        return items


@dataclass
class ObservationGrid:
    """T x N rainfall observations in mm.

    ``values[t-1, i]`` is the reading at time step t, station i: strictly
    positive for rain, 0.0 for a dry reading, NaN for missing.
    """

    values: np.ndarray
    times: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ModelError("observation grid must be T x N")
        with np.errstate(invalid="ignore"):
            if np.any(self.values < 0):
                raise ModelError("negative rainfall amounts in observation grid")
        if self.times is None:
            self.times = np.arange(1, self.values.shape[0] + 1)
        self.times = np.asarray(self.times, dtype=int)
        if self.times.shape != (self.values.shape[0],):
            raise ModelError("times must have one entry per observation row")

    @property
    def n_times(self) -> int:
        return self.values.shape[0]

    @property
    def n_stations(self) -> int:
        return self.values.shape[1]

    @property
    def is_positive(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return self.values > 0

    @property
    def is_zero(self) -> np.ndarray:
        return self.values == 0

    @property
    def is_missing(self) -> np.ndarray:
        return np.isnan(self.values)


@dataclass
class CovariateGrid:
    """T x N x k regressor array, intercept column first.

    Non-intercept covariates are centered and scaled to unit variance with
    statistics frozen from the window the grid was built on, so the same
    scaling can be replayed on forecast covariates.
    """

    values: np.ndarray
    names: list[str]
    means: np.ndarray
    sds: np.ndarray

    @classmethod
    def build(cls, raw: np.ndarray, names: list[str], stats: tuple[np.ndarray, np.ndarray] | None = None) -> "CovariateGrid":
        """Standardize raw (T, N, k_raw) covariates and prepend an intercept.

        ``stats`` replays previously frozen (means, sds); otherwise they are
        computed over all (t, i) entries of ``raw``.
        """
        raw = np.asarray(raw, dtype=float)
        if raw.ndim == 2:  # no covariates beyond intercept: allow (T, N)
            raise ModelError("raw covariates must be (T, N, k); use k=0 for intercept-only")
        t, n, k = raw.shape
        if len(names) != k:
            raise ModelError(f"{k} covariate columns but {len(names)} names")
        if np.isnan(raw).any():
            raise ModelError("missing covariate entries are not allowed")
        if stats is None:
            means = raw.reshape(-1, k).mean(axis=0) if k else np.zeros(0)
            sds = raw.reshape(-1, k).std(axis=0) if k else np.zeros(0)
            sds = np.where(sds > 0, sds, 1.0)
        else:
            means, sds = (np.asarray(a, dtype=float) for a in stats)
        std = (raw - means) / sds if k else raw
        values = np.concatenate([np.ones((t, n, 1)), std], axis=2)
        return cls(values=values, names=["intercept"] + list(names), means=means, sds=sds)

    @property
    def n_coefs(self) -> int:
        return self.values.shape[2]


@dataclass
class WindSeries:
    """Domain-averaged wind vectors, one (wx, wy) pair in m/s per time step."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(-1, 2)
        if not np.all(np.isfinite(self.values)):
            raise ModelError("non-finite wind values")

    def km_steps(self) -> np.ndarray:
        """Per-step displacement of the kernel per unit drift scale, in km."""
        return self.values * WIND_TO_KM_PER_STEP


def transform(w, lam: float):
    """Censored power transform: rainfall = w**lam for w > 0, else 0."""
    if lam <= 0:
        raise ModelError(f"lambda must be positive, got {lam}")
    w = np.asarray(w, dtype=float)
    out = np.where(w > 0, np.power(np.maximum(w, 0.0), lam), 0.0)
    return out if out.ndim else float(out)


def inverse_transform(y, lam: float):
    """Latent potential recovering a positive rainfall amount: y**(1/lam)."""
    if lam <= 0:
        raise ModelError(f"lambda must be positive, got {lam}")
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise ModelError("inverse transform defined for strictly positive amounts only")
    out = np.power(y, 1.0 / lam)
    return out if out.ndim else float(out)


def exp_covariance(dist: np.ndarray, rho0: float, sigma2: float) -> np.ndarray:
    """Exponential innovation covariance sigma2 * exp(-d_ij / rho0)."""
    if rho0 <= 0 or sigma2 <= 0:
        raise ModelError("rho0 and sigma2 must be positive")
    dist = np.asarray(dist, dtype=float)
    if not np.all(np.isfinite(dist)):
        raise ModelError("non-finite distances")
    return sigma2 * np.exp(-dist / rho0)


def chol_with_jitter(cov: np.ndarray):
    """Cholesky factor of a covariance, adding relative diagonal jitter on failure.

    Returns (cho_factor result, log-determinant).
    """
    scale = float(np.mean(np.diag(cov)))
    try:
        c, low = cho_factor(cov, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        c, low = cho_factor(cov + COV_JITTER * scale * np.eye(cov.shape[0]), lower=True,
                            check_finite=False)
    logdet = 2.0 * float(np.sum(np.log(np.diag(c))))
    return (c, low), logdet


def anisotropy_matrix(rho1: float, c: float, alpha: float) -> np.ndarray:
    """Inverse kernel shape matrix (1/rho1^2) R'R for rotation alpha, ratio c."""
    if rho1 <= 0 or c <= 0 or not (0.0 <= alpha <= np.pi / 2):
        raise ModelError(f"kernel parameters out of range: rho1={rho1}, c={c}, alpha={alpha}")
    ca, sa = np.cos(alpha), np.sin(alpha)
    r = np.array([[ca, sa], [-c * sa, c * ca]])
    return (r.T @ r) / rho1**2


def drift(u: float, w) -> np.ndarray:
    """Kernel displacement u * w for a single wind vector w."""
    w = np.asarray(w, dtype=float)
    if not (np.isfinite(u) and np.all(np.isfinite(w))):
        raise ModelError("non-finite drift inputs")
    return u * w


def propagator(coords: np.ndarray, areas: np.ndarray, sigma_inv: np.ndarray,
               mu_t: np.ndarray) -> np.ndarray:
    """Transition matrix: displaced Gaussian kernel times receiving-cell area.

    Entry (i, j) is exp(-(s_i - s_j - mu)' SigmaInv (s_i - s_j - mu)) * |A_j|.
    """
    coords = np.asarray(coords, dtype=float)
    areas = np.asarray(areas, dtype=float)
    mu_t = np.asarray(mu_t, dtype=float).reshape(2)
    diff = coords[:, None, :] - coords[None, :, :] - mu_t  # (N, N, 2)
    quad = np.einsum("ijk,kl,ijl->ij", diff, sigma_inv, diff)
    return np.exp(-quad) * areas[None, :]


def propagators_for_kind(kind: str, coords: np.ndarray, areas: np.ndarray,
                         params: Params, wind_km: np.ndarray | None) -> np.ndarray:
    """Stack of per-step transition matrices (T, N, N) for a model class.

    ``wind_km`` carries per-step kernel displacements per unit drift scale
    (required for 'conv-drift'); separable and no-AR classes use identity.
    """
    n = coords.shape[0]
    if kind not in MODEL_KINDS:
        raise ModelError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    if kind in ("separable", "no-ar"):
        t = 1 if wind_km is None else len(wind_km)
        return np.broadcast_to(np.eye(n), (t, n, n)).copy()
    if kind == "conv-iso":
        sigma_inv = np.eye(2) / params.rho1**2
        g = propagator(coords, areas, sigma_inv, np.zeros(2))
        t = 1 if wind_km is None else len(wind_km)
        return np.broadcast_to(g, (t, n, n)).copy()
    # conv-drift
    if wind_km is None:
        raise ModelError("conv-drift propagators need a wind series")
    sigma_inv = anisotropy_matrix(params.rho1, params.c, params.alpha)
    mus = drift(params.u, wind_km).reshape(-1, 2)
    diff = (coords[None, :, None, :] - coords[None, None, :, :]
            - mus[:, None, None, :])  # (T, N, N, 2)
    quad = np.einsum("tijk,kl,tijl->tij", diff, sigma_inv, diff)
    return np.exp(-quad) * areas[None, None, :]


def stability_spectral_radius(phi: float, g: np.ndarray, tol: float = 1e-8,
                              max_iter: int = 10_000) -> float:
    """Largest |eigenvalue| of phi * G by power iteration.

    G has positive entries, so its dominant eigenvalue is simple and
    positive and plain power iteration converges.
    """
    g = np.asarray(g, dtype=float)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ModelError("propagator must be a square matrix")
    if phi == 0.0:
        return 0.0
    n = g.shape[0]
    v = np.full(n, 1.0 / np.sqrt(n))
    lam_prev = np.inf
    for _ in range(max_iter):
        w = g @ v
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return 0.0
        v = w / nrm
        lam = float(v @ (g @ v))
        if abs(lam - lam_prev) <= tol * max(abs(lam), 1e-300):
            return abs(phi) * abs(lam)
        lam_prev = lam
    raise ModelError(f"power iteration did not converge in {max_iter} iterations")


def damping(phi: float, sigma_inv: np.ndarray) -> float:
    """Damping rate -log(phi * pi * |Sigma|^(1/2)) of the continuous-time limit."""
    if phi <= 0:
        raise ModelError("damping defined for phi > 0 only")
    det_inv = float(np.linalg.det(sigma_inv))
    if det_inv <= 0:
        raise ModelError("kernel shape matrix must be positive definite")
    sqrt_det_sigma = 1.0 / np.sqrt(det_inv)
    return float(-np.log(phi * np.pi * sqrt_det_sigma))


def latent_mean(x_t: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Regression mean x_t' beta for one time step; x_t is (N, k)."""
    x_t = np.asarray(x_t, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if x_t.shape[-1] != beta.shape[0]:
        raise ModelError(f"covariate row length {x_t.shape[-1]} != len(beta) {beta.shape[0]}")
    return x_t @ beta


def solve_spd(chol, b: np.ndarray) -> np.ndarray:
    """Solve C x = b given ``chol`` from :func:`chol_with_jitter`."""
    return cho_solve(chol, b, check_finite=False)
