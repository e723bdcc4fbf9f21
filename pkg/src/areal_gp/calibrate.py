"""Independent per-region GP fits by maximum likelihood, and the priors derived from them.

The same fits serve as the spatially independent benchmark and as the source
of the data-driven prior constants used by the spatial sampler.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import linalg, optimize

from .errors import CalibrationError, NumericalError, ValidationError
from .model import LOG_2PI, DesignSpec, build_design, chol_logdet, cholesky_jitter, correlation_matrix, time_distances

VARIANCE_FLOOR = 1e-4
SIGMA2_LOWER = 1e-8
LOG_NU2_BOUNDS = (math.log(1e-6), math.log(1e4))


@dataclass
class MLFit:
    region_id: str
    beta_hat: np.ndarray
    sigma2_hat: float
    phi_hat: float
    nu2_hat: float
    max_loglik: float
    converged: bool
    degenerate: bool = False

    @property
    def usable(self) -> bool:
        return self.converged and not self.degenerate and np.isfinite(self.max_loglik)


@dataclass
class PriorSpec:
    """Full prior hierarchy.

    ``log phi_i | log sigma2_i ~ N(phi_a + phi_b * log sigma2_i, phi_chi2)``,
    ``log nu2_i ~ N(nu_mean, nu_var)``, ``beta_i ~ N(0, beta_prior_variance I)``,
    and a proper CAR on ``log sigma2`` with hyperpriors
    ``m ~ N(car_mean_prior_mean, car_mean_prior_var)``,
    ``omega2 ~ InvGamma(omega2_shape, omega2_rate)``.
    """

    phi_a: float
    phi_b: float
    phi_chi2: float
    nu_mean: float
    nu_var: float
    beta_prior_variance: float = 1e5
    car_mean_prior_mean: float = 0.0
    car_mean_prior_var: float = 10.0
    omega2_shape: float = 1.0
    omega2_rate: float = 0.01
    car_rho: float = 0.9
    car_rho_mode: str = "fixed"

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("phi_chi2", "nu_var", "beta_prior_variance", "car_mean_prior_var", "omega2_shape", "omega2_rate"):
            if not (getattr(self, name) > 0):
                raise ValidationError(f"prior constant {name} must be positive")
        if not (0.0 <= self.car_rho < 1.0):
            raise ValidationError("car_rho must lie in [0, 1)")
        if self.car_rho_mode not in ("fixed", "sampled"):
            raise ValidationError("car_rho_mode must be 'fixed' or 'sampled'")

    def to_dict(self) -> dict:
        return {
            "beta_prior_variance": self.beta_prior_variance,
            "phi_cond": {"a": self.phi_a, "b": self.phi_b, "chi2": self.phi_chi2},
            "nu_prior": {"mu_nu": self.nu_mean, "sigma2_nu": self.nu_var},
            "car": {
                "m_prior_mean": self.car_mean_prior_mean,
                "m_prior_variance": self.car_mean_prior_var,
                "omega2_shape": self.omega2_shape,
                "omega2_rate": self.omega2_rate,
                "rho": self.car_rho,
                "rho_mode": self.car_rho_mode,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PriorSpec":
        car = d.get("car", {})
        return cls(
            phi_a=float(d["phi_cond"]["a"]),
            phi_b=float(d["phi_cond"]["b"]),
            phi_chi2=float(d["phi_cond"]["chi2"]),
            nu_mean=float(d["nu_prior"]["mu_nu"]),
            nu_var=float(d["nu_prior"]["sigma2_nu"]),
            beta_prior_variance=float(d.get("beta_prior_variance", 1e5)),
            car_mean_prior_mean=float(car.get("m_prior_mean", 0.0)),
            car_mean_prior_var=float(car.get("m_prior_variance", 10.0)),
            omega2_shape=float(car.get("omega2_shape", 1.0)),
            omega2_rate=float(car.get("omega2_rate", 0.01)),
            car_rho=float(car.get("rho", 0.9)),
            car_rho_mode=str(car.get("rho_mode", "fixed")),
        )


# ---------------------------------------------------------------------------
# Profile likelihood
# ---------------------------------------------------------------------------


def _profile(y, X, R, nu2):
    """GLS profile of ``beta`` and ``sigma2`` under covariance ``sigma2 (R + nu2 I)``.

    Returns ``(loglik, beta_hat, sigma2_hat, degenerate)``.
    """
    n = len(y)
    V = R + nu2 * np.eye(n)
    L, _ = cholesky_jitter(V, 1.0 + nu2)
    Xw = linalg.solve_triangular(L, X, lower=True, check_finite=False)
    yw = linalg.solve_triangular(L, y, lower=True, check_finite=False)
    beta, *_ = np.linalg.lstsq(Xw, yw, rcond=None)
    resid = yw - Xw @ beta
    sigma2 = float(resid @ resid) / n
    degenerate = sigma2 < SIGMA2_LOWER
    if degenerate:
        sigma2 = SIGMA2_LOWER
        quad = float(resid @ resid) / sigma2
    else:
        quad = n
    loglik = -0.5 * (n * LOG_2PI + n * math.log(sigma2) + chol_logdet(L) + quad)
    return loglik, beta, sigma2, degenerate


def profile_beta(y, X, phi: float, nu2: float, kappa: float = 1.5, times=None) -> np.ndarray:
    """GLS estimate of the mean coefficients at fixed ``(phi, nu2)``."""
    y = np.asarray(y, dtype=float)
    times = np.arange(1, len(y) + 1) if times is None else np.asarray(times)
    R = correlation_matrix(times, kappa, phi)
    return _profile(y, np.asarray(X, dtype=float), R, nu2)[1]


def fit_independent_gp(
    y,
    X,
    kernel_kappa: float = 1.5,
    times=None,
    region_id: str = "",
    phi_starts: Optional[Sequence[float]] = None,
    nu2_starts: Sequence[float] = (0.1, 1.0, 10.0),
) -> MLFit:
    """Maximum-likelihood fit of ``y ~ N(X beta, sigma2 (R(phi) + nu2 I))``.

    ``beta`` and ``sigma2`` are profiled out in closed form and
    ``(log phi, log nu2)`` are searched with Nelder-Mead from a grid of
    starting points; the best local optimum wins. Missing (NaN) entries of
    ``y`` are dropped together with their design rows.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    T = len(y)
    times = np.arange(1, T + 1) if times is None else np.asarray(times)
    obs = ~np.isnan(y)
    yo, Xo, to = y[obs], X[obs], times[obs]
    n = len(yo)
    if n <= X.shape[1]:
        raise ValidationError(f"region {region_id!r}: need more observations than mean coefficients")
    D = time_distances(to)
    span = float(to.max() - to.min()) + 1.0
    if phi_starts is None:
        phi_starts = (span / 20.0, span / 5.0, span / 2.0)
    bounds = [(math.log(0.05), math.log(5.0 * span)), LOG_NU2_BOUNDS]

    def negll(theta):
        lphi = min(max(theta[0], bounds[0][0]), bounds[0][1])
        lnu = min(max(theta[1], bounds[1][0]), bounds[1][1])
        try:
            R = correlation_matrix(None, kernel_kappa, math.exp(lphi), D)
            return -_profile(yo, Xo, R, math.exp(lnu))[0]
        except NumericalError:
            return np.inf

    best = None
    any_converged = False
    for p0 in phi_starts:
        for v0 in nu2_starts:
            x0 = np.array([math.log(p0), math.log(v0)])
            start_val = negll(x0)
            res = optimize.minimize(
                negll, x0, method="Nelder-Mead", bounds=bounds,
                options={"xatol": 1e-6, "fatol": 1e-9, "maxiter": 2000},
            )
            x, val = (res.x, res.fun) if res.fun <= start_val else (x0, start_val)
            any_converged |= bool(res.success and np.isfinite(res.fun))
            if best is None or val < best[1]:
                best = (x, val)

    lphi, lnu = best[0]
    R = correlation_matrix(None, kernel_kappa, math.exp(lphi), D)
    loglik, beta, sigma2, degenerate = _profile(yo, Xo, R, math.exp(lnu))
    return MLFit(
        region_id=str(region_id),
        beta_hat=beta,
        sigma2_hat=sigma2,
        phi_hat=math.exp(lphi),
        nu2_hat=math.exp(lnu),
        max_loglik=loglik,
        converged=any_converged and not degenerate,
        degenerate=degenerate,
    )


def fit_panel(values, X, kernel_kappa: float, times, region_ids) -> list:
    """Independent ML fit for every row of an ``I x T`` panel, in id order."""
    return [
        fit_independent_gp(values[i], X, kernel_kappa, times, region_id=rid)
        for i, rid in enumerate(region_ids)
    ]


# ---------------------------------------------------------------------------
# Prior calibration
# ---------------------------------------------------------------------------


def calibrate_priors(fits: Iterable[MLFit], **car_overrides) -> PriorSpec:
    """Derive the conditional log-range prior and the log signal-to-noise prior.

    ``(a, b)`` come from OLS of ``log phi_hat`` on ``log sigma2_hat``, ``chi2``
    is the residual variance with ``I - 2`` degrees of freedom, and
    ``(mu_nu, sigma2_nu)`` are the sample mean and variance of
    ``log nu2_hat``. Both variances are floored at 1e-4.
    """
    usable = sorted((f for f in fits if f.usable), key=lambda f: f.region_id)
    if len(usable) < 3:
        raise CalibrationError(
            f"only {len(usable)} converged ML fits; at least 3 are needed, supply a PriorSpec file instead"
        )
    ls = np.array([math.log(f.sigma2_hat) for f in usable])
    lp = np.array([math.log(f.phi_hat) for f in usable])
    ln = np.array([math.log(f.nu2_hat) for f in usable])
    A = np.column_stack([np.ones_like(ls), ls])
    coef, *_ = np.linalg.lstsq(A, lp, rcond=None)
    resid = lp - A @ coef
    chi2 = float(resid @ resid) / (len(usable) - 2)
    nu_var = float(np.var(ln, ddof=1))
    params = dict(
        phi_a=float(coef[0]),
        phi_b=float(coef[1]),
        phi_chi2=max(chi2, VARIANCE_FLOOR),
        nu_mean=float(np.mean(ln)),
        nu_var=max(nu_var, VARIANCE_FLOOR),
        car_mean_prior_mean=float(np.mean(ls)),
    )
    params.update(car_overrides)
    return PriorSpec(**params)


# ---------------------------------------------------------------------------
# Fourier degree selection
# ---------------------------------------------------------------------------


def fourier_aic(y, times, period: int, J: int) -> float:
    """AIC of an OLS Fourier regression with ``k = 2J + 2`` parameters.

    A 2-D ``y`` is treated as independent series with their own coefficients
    and the AICs are summed.
    """
    Y = np.atleast_2d(np.asarray(y, dtype=float))
    X = build_design(DesignSpec(J, period), times)
    total = 0.0
    for row in Y:
        obs = ~np.isnan(row)
        n = int(obs.sum())
        if 2 * J + 1 >= n:
            raise ValidationError(f"Fourier degree {J} needs more than {2 * J + 1} observations")
        coef, *_ = np.linalg.lstsq(X[obs], row[obs], rcond=None)
        r = row[obs] - X[obs] @ coef
        s2 = max(float(r @ r) / n, 1e-300)
        loglik = -0.5 * n * (LOG_2PI + math.log(s2) + 1.0)
        total += 2.0 * (2 * J + 2) - 2.0 * loglik
    return total


def select_fourier_degree(y, times, period: int, candidate_Js: Sequence[int]) -> int:
    """Candidate degree with the smallest AIC; ties go to the smaller degree."""
    cands = sorted(set(int(j) for j in candidate_Js))
    if not cands:
        raise ValidationError("candidate Fourier degrees must not be empty")
    best_j, best_aic = None, np.inf
    for J in cands:
        aic = fourier_aic(y, times, period, J)
        if aic < best_aic:
            best_j, best_aic = J, aic
    return best_j


def fits_to_rows(fits: Sequence[MLFit], design: DesignSpec) -> list:
    """Flatten fits into calibration-report rows (fixed column order)."""
    names = design.column_names()
    rows = []
    for f in fits:
        row = {"region_id": f.region_id}
        for name, b in zip(names, f.beta_hat):
            row[f"beta_{name}"] = float(b)
        row.update(
            sigma2_hat=f.sigma2_hat, phi_hat=f.phi_hat, nu2_hat=f.nu2_hat,
            loglik=f.max_loglik, converged=bool(f.converged),
        )
        rows.append(row)
    return rows


def fits_from_rows(rows: Sequence[dict], design: DesignSpec) -> list:
    names = design.column_names()
    out = []
    for row in rows:
        conv = row["converged"]
        if isinstance(conv, str):
            conv = conv.strip().lower() in ("true", "1")
        out.append(MLFit(
            region_id=str(row["region_id"]),
            beta_hat=np.array([float(row[f"beta_{n}"]) for n in names]),
            sigma2_hat=float(row["sigma2_hat"]),
            phi_hat=float(row["phi_hat"]),
            nu2_hat=float(row["nu2_hat"]),
            max_loglik=float(row["loglik"]),
            converged=bool(conv),
            degenerate=float(row["sigma2_hat"]) <= SIGMA2_LOWER,
        ))
    return out
