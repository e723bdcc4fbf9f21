"""Domain types and the Gaussian building blocks of the model.

Everything here is a pure function of its inputs. The observation model for
region ``i`` is::

    y_i = X beta_i + Z_i + eps_i,   Z_i ~ GP(0, sigma2_i * rho(|t - t'|; kappa, phi_i)),
    eps_i ~ N(0, tau2_i I),         tau2_i = nu2_i * sigma2_i

with a Matern correlation ``rho``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg, special

from .errors import NumericalError, ValidationError

LOG_2PI = math.log(2.0 * math.pi)
TRANSFORM_KINDS = ("identity", "log-rate", "empirical-logit")
HALF_INTEGER_KAPPAS = (0.5, 1.5, 2.5)

JITTER_START = 1e-10
JITTER_MAX = 1e-6


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass
class PanelDataset:
    """Region x time panel on the transformed (Gaussian) scale.

    Missing cells are stored as NaN in ``values``; ``mask`` is True where a
    value was observed.
    """

    region_ids: list
    times: np.ndarray
    values: np.ndarray
    period: int = 12
    transform_kind: str = "identity"
    denominators: Optional[np.ndarray] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.region_ids = [str(r) for r in self.region_ids]
        self.times = np.asarray(self.times, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=float)
        if self.denominators is not None:
            self.denominators = np.asarray(self.denominators, dtype=float)
        self.validate()

    @property
    def n_regions(self) -> int:
        return len(self.region_ids)

    @property
    def n_times(self) -> int:
        return len(self.times)

    @property
    def mask(self) -> np.ndarray:
        return ~np.isnan(self.values)

    def validate(self):
        I, T = self.n_regions, self.n_times
        if I < 1:
            raise ValidationError("panel needs at least one region")
        if T < 3:
            raise ValidationError(f"panel needs at least 3 time points, got {T}")
        if len(set(self.region_ids)) != I:
            raise ValidationError("region ids must be unique")
        if np.any(np.diff(self.times) <= 0):
            raise ValidationError("times must be strictly increasing")
        if self.values.shape != (I, T):
            raise ValidationError(f"values must have shape {(I, T)}, got {self.values.shape}")
        if np.any(np.isinf(self.values)):
            raise ValidationError("observed values must be finite")
        if int(self.period) < 1:
            raise ValidationError("period must be a positive integer")
        if self.transform_kind not in TRANSFORM_KINDS:
            raise ValidationError(f"unknown transform kind {self.transform_kind!r}")
        if self.denominators is not None:
            if self.denominators.shape != (I, T):
                raise ValidationError("denominators must match the values shape")
            d = self.denominators[~np.isnan(self.denominators)]
            if np.any(d <= 0):
                raise ValidationError("denominators must be strictly positive")
        elif self.transform_kind != "identity":
            raise ValidationError(f"transform {self.transform_kind!r} requires denominators")

    def subset_times(self, stop: int) -> "PanelDataset":
        """Return the panel restricted to the first ``stop`` time columns."""
        den = None if self.denominators is None else self.denominators[:, :stop].copy()
        return PanelDataset(
            region_ids=list(self.region_ids),
            times=self.times[:stop].copy(),
            values=self.values[:, :stop].copy(),
            period=self.period,
            transform_kind=self.transform_kind,
            denominators=den,
            metadata=dict(self.metadata),
        )


@dataclass
class AdjacencyGraph:
    """Symmetric binary neighbourhood structure."""

    weights: np.ndarray

    def __post_init__(self):
        W = np.asarray(self.weights)
        if W.ndim != 2 or W.shape[0] != W.shape[1]:
            raise ValidationError("adjacency matrix must be square")
        if not np.all((W == 0) | (W == 1)):
            raise ValidationError("adjacency matrix must be binary")
        if not np.array_equal(W, W.T):
            raise ValidationError("adjacency matrix must be symmetric")
        if np.any(np.diag(W) != 0):
            raise ValidationError("adjacency matrix must have a zero diagonal")
        self.weights = W.astype(np.int64)

    @classmethod
    def from_edges(cls, n_nodes: int, edges) -> "AdjacencyGraph":
        W = np.zeros((n_nodes, n_nodes), dtype=np.int64)
        for a, b in edges:
            if a == b:
                raise ValidationError(f"self-loop at node {a}")
            W[a, b] = W[b, a] = 1
        return cls(W)

    @property
    def n_nodes(self) -> int:
        return self.weights.shape[0]

    @property
    def degrees(self) -> np.ndarray:
        return self.weights.sum(axis=1)

    def edges(self) -> list:
        a, b = np.nonzero(np.triu(self.weights, 1))
        return list(zip(a.tolist(), b.tolist()))

    @property
    def connected(self) -> bool:
        n = self.n_nodes
        seen = np.zeros(n, dtype=bool)
        stack = [0]
        seen[0] = True
        while stack:
            k = stack.pop()
            for j in np.nonzero(self.weights[k])[0]:
                if not seen[j]:
                    seen[j] = True
                    stack.append(j)
        return bool(seen.all())

    def laplacian(self) -> np.ndarray:
        """``D - W``."""
        return np.diag(self.degrees).astype(float) - self.weights


@dataclass(frozen=True)
class MaternKernel:
    kappa: float = 1.5
    phi: float = 1.0

    def __post_init__(self):
        if not (self.kappa > 0):
            raise ValidationError(f"kappa must be positive, got {self.kappa}")
        if not (self.phi > 0):
            raise ValidationError(f"phi must be positive, got {self.phi}")


@dataclass
class RegionParams:
    beta: np.ndarray
    sigma2: float
    phi: float
    nu2: float

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        for name in ("sigma2", "phi", "nu2"):
            if not (getattr(self, name) > 0):
                raise ValidationError(f"{name} must be positive")

    @property
    def tau2(self) -> float:
        return self.nu2 * self.sigma2


@dataclass(frozen=True)
class DesignSpec:
    fourier_degree: int = 1
    period: int = 12

    def __post_init__(self):
        if self.fourier_degree < 0:
            raise ValidationError("fourier_degree must be non-negative")
        if self.period < 1:
            raise ValidationError("period must be positive")

    @property
    def p(self) -> int:
        return 2 * self.fourier_degree

    @property
    def n_columns(self) -> int:
        return self.p + 1

    def column_names(self) -> list:
        names = ["intercept"]
        for j in range(1, self.fourier_degree + 1):
            names += [f"sin{j}", f"cos{j}"]
        return names


@dataclass
class ModelState:
    """All latent quantities at one MCMC iteration.

    Positive parameters are held on the log scale, which is where the sampler
    moves them. ``region(i)`` gives the natural-scale view.
    """

    log_sigma2: np.ndarray
    log_phi: np.ndarray
    log_nu2: np.ndarray
    beta: np.ndarray
    z: np.ndarray
    car_mean: float
    car_omega2: float
    car_rho: float

    def __post_init__(self):
        if not (self.car_omega2 > 0):
            raise ValidationError("car_omega2 must be positive")
        if not (0.0 <= self.car_rho < 1.0):
            raise ValidationError("car_rho must lie in [0, 1)")
        if not np.all(np.isfinite(self.z)):
            raise ValidationError("latent Z must be finite")

    @property
    def n_regions(self) -> int:
        return len(self.log_sigma2)

    @property
    def tau2(self) -> np.ndarray:
        return np.exp(self.log_nu2 + self.log_sigma2)

    def region(self, i: int) -> RegionParams:
        return RegionParams(
            beta=self.beta[i].copy(),
            sigma2=float(np.exp(self.log_sigma2[i])),
            phi=float(np.exp(self.log_phi[i])),
            nu2=float(np.exp(self.log_nu2[i])),
        )

    def copy(self) -> "ModelState":
        return ModelState(
            log_sigma2=self.log_sigma2.copy(),
            log_phi=self.log_phi.copy(),
            log_nu2=self.log_nu2.copy(),
            beta=self.beta.copy(),
            z=self.z.copy(),
            car_mean=float(self.car_mean),
            car_omega2=float(self.car_omega2),
            car_rho=float(self.car_rho),
        )


# ---------------------------------------------------------------------------
# Matern correlation
# ---------------------------------------------------------------------------


def matern(h, kappa: float, phi: float) -> np.ndarray:
    """Vectorised Matern correlation ``2^(1-k)/Gamma(k) u^k K_k(u)``, ``u = h/phi``."""
    h = np.asarray(h, dtype=float)
    if np.any(h < 0):
        raise ValidationError("distances must be non-negative")
    u = h / phi
    if kappa == 0.5:
        return np.exp(-u)
    if kappa == 1.5:
        return (1.0 + u) * np.exp(-u)
    if kappa == 2.5:
        return (1.0 + u + u * u / 3.0) * np.exp(-u)
    out = np.ones_like(u)
    pos = u > 0
    up = u[pos]
    with np.errstate(over="ignore", invalid="ignore", under="ignore"):
        val = np.exp((1.0 - kappa) * math.log(2.0) - special.gammaln(kappa)) * up**kappa * special.kv(kappa, up)
    out[pos] = np.where(np.isfinite(val), val, 0.0)
    return out


def matern_dlogphi(h, kappa: float, phi: float) -> np.ndarray:
    """Derivative of the correlation with respect to ``log(phi)``.

    Closed forms only; other smoothness values go through finite differences
    at the caller.
    """
    u = np.asarray(h, dtype=float) / phi
    e = np.exp(-u)
    if kappa == 0.5:
        return u * e
    if kappa == 1.5:
        return u * u * e
    if kappa == 2.5:
        return u * u * (1.0 + u) * e / 3.0
    raise ValueError(f"no closed-form derivative for kappa={kappa}")


def matern_correlation(h: float, kernel: MaternKernel) -> float:
    """Scalar Matern correlation; ``rho(0) = 1``."""
    if h < 0:
        raise ValidationError(f"distance must be non-negative, got {h}")
    return float(matern(np.array([h]), kernel.kappa, kernel.phi)[0])


# ---------------------------------------------------------------------------
# Covariance and factorization
# ---------------------------------------------------------------------------


def time_distances(times) -> np.ndarray:
    t = np.asarray(times, dtype=float)
    return np.abs(t[:, None] - t[None, :])


def correlation_matrix(times, kappa: float, phi: float, distances=None) -> np.ndarray:
    if distances is None:
        distances = time_distances(times)
    return matern(distances, kappa, phi)


def build_covariance(kernel: MaternKernel, sigma2: float, times) -> np.ndarray:
    """``sigma2 * rho(|t - t'|)`` over the given time indices."""
    if not (sigma2 > 0):
        raise ValidationError("sigma2 must be positive")
    K = sigma2 * correlation_matrix(times, kernel.kappa, kernel.phi)
    return 0.5 * (K + K.T)


def cholesky_jitter(K: np.ndarray, scale: float = 1.0, **context):
    """Lower Cholesky factor of ``K``, adding diagonal jitter on failure.

    Jitter starts at ``1e-10 * scale`` and grows tenfold up to ``1e-6 *
    scale``. Returns ``(L, jitter)``.
    """
    try:
        return linalg.cholesky(K, lower=True, check_finite=False), 0.0
    except linalg.LinAlgError:
        pass
    jitter = JITTER_START * scale
    eye = np.eye(K.shape[0])
    while jitter <= JITTER_MAX * scale * (1 + 1e-9):
        try:
            return linalg.cholesky(K + jitter * eye, lower=True, check_finite=False), jitter
        except linalg.LinAlgError:
            jitter *= 10.0
    raise NumericalError("covariance factorization failed after maximum jitter", **context)


def factor_correlation(times, kappa: float, phi: float, distances=None):
    """Cholesky factor of the correlation matrix, with the jitter policy applied."""
    R = correlation_matrix(times, kappa, phi, distances)
    L, _ = cholesky_jitter(R, 1.0, phi=phi)
    return L


def chol_logdet(L: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(L))))


# ---------------------------------------------------------------------------
# Design matrix
# ---------------------------------------------------------------------------


def build_design(spec: DesignSpec, times) -> np.ndarray:
    """Intercept plus Fourier terms ordered ``(sin1, cos1, sin2, cos2, ...)``."""
    t = np.asarray(times, dtype=float)
    cols = [np.ones_like(t)]
    for j in range(1, spec.fourier_degree + 1):
        arg = 2.0 * math.pi * j * t / spec.period
        cols.append(np.sin(arg))
        cols.append(np.cos(arg))
    return np.column_stack(cols)


# ---------------------------------------------------------------------------
# Transformations
# ---------------------------------------------------------------------------


def log_rate_correction(counts) -> float:
    """Continuity correction for the log-rate transform: 0.5 if any zero count."""
    c = np.asarray(counts, dtype=float)
    return 0.5 if np.any(c[~np.isnan(c)] == 0) else 0.0


def transform(raw, denominators=None, kind: str = "identity", scale: float = 1.0, correction=None):
    """Map raw observations to the modelling scale.

    ``log-rate`` gives ``log((count + c) / denominator * scale)``;
    ``empirical-logit`` gives ``log((x + 0.5) / (n - x + 0.5))``. NaNs pass
    through untouched.
    """
    raw = np.asarray(raw, dtype=float)
    if kind == "identity":
        return raw.copy()
    if kind not in TRANSFORM_KINDS:
        raise ValidationError(f"unknown transform kind {kind!r}")
    if denominators is None:
        raise ValidationError(f"transform {kind!r} requires denominators")
    den = np.broadcast_to(np.asarray(denominators, dtype=float), raw.shape)
    ok = ~np.isnan(raw)
    if np.any(den[ok] <= 0):
        raise ValidationError("denominators must be strictly positive")
    if np.any(raw[ok] < 0):
        raise ValidationError("raw counts must be non-negative")
    if kind == "log-rate":
        c = log_rate_correction(raw) if correction is None else float(correction)
        with np.errstate(divide="ignore"):
            out = np.log((raw + c) / den * scale)
        if np.any(np.isinf(out[ok])):
            raise ValidationError("zero count with no continuity correction")
        return out
    if np.any(raw[ok] > den[ok]):
        raise ValidationError("count exceeds denominator in empirical-logit transform")
    return np.log((raw + 0.5) / (den - raw + 0.5))


def inverse_transform(values, denominators=None, kind: str = "identity", scale: float = 1.0, correction: float = 0.0):
    """Exact inverse of :func:`transform` back to counts."""
    v = np.asarray(values, dtype=float)
    if kind == "identity":
        return v.copy()
    den = np.broadcast_to(np.asarray(denominators, dtype=float), v.shape)
    if kind == "log-rate":
        return np.exp(v) * den / scale - correction
    if kind == "empirical-logit":
        e = np.exp(v)
        return (e * (den + 0.5) - 0.5) / (1.0 + e)
    raise ValidationError(f"unknown transform kind {kind!r}")


def to_natural_scale(values, kind: str):
    """Denominator-free back-transform: rate per ``scale`` or prevalence."""
    v = np.asarray(values, dtype=float)
    if kind == "identity":
        return v.copy()
    if kind == "log-rate":
        return np.exp(v)
    if kind == "empirical-logit":
        return special.expit(v)
    raise ValidationError(f"unknown transform kind {kind!r}")


# ---------------------------------------------------------------------------
# Log densities
# ---------------------------------------------------------------------------


def loglik_region(params: RegionParams, z, y, X) -> float:
    """Gaussian noise log-likelihood of ``y - X beta - z``; NaN cells are skipped."""
    y = np.asarray(y, dtype=float)
    r = y - np.asarray(X) @ params.beta - np.asarray(z, dtype=float)
    obs = ~np.isnan(y)
    n = int(obs.sum())
    tau2 = params.tau2
    return -0.5 * n * (LOG_2PI + math.log(tau2)) - 0.5 * float(r[obs] @ r[obs]) / tau2


def logdens_gp(z, sigma2: float, kernel: MaternKernel, times) -> float:
    """Zero-mean Gaussian log-density of ``z`` under :func:`build_covariance`."""
    z = np.asarray(z, dtype=float)
    K = build_covariance(kernel, sigma2, times)
    L, _ = cholesky_jitter(K, sigma2, sigma2=sigma2, phi=kernel.phi)
    w = linalg.solve_triangular(L, z, lower=True, check_finite=False)
    return -0.5 * (len(z) * LOG_2PI + chol_logdet(L) + float(w @ w))


def gaussian_logpdf(x, mean, var) -> float:
    return -0.5 * (LOG_2PI + math.log(var)) - 0.5 * (x - mean) ** 2 / var


def car_precision(graph: AdjacencyGraph, rho: float) -> np.ndarray:
    """Unscaled proper-CAR precision ``rho (D - W) + (1 - rho) I``."""
    return rho * graph.laplacian() + (1.0 - rho) * np.eye(graph.n_nodes)


def car_logdensity(s, mean: float, omega2: float, rho: float, graph: AdjacencyGraph, laplacian_eigs=None) -> float:
    """Log-density of ``s ~ N(mean, omega2 * Q(rho)^-1)``."""
    s = np.asarray(s, dtype=float)
    n = len(s)
    if laplacian_eigs is None:
        laplacian_eigs = np.linalg.eigvalsh(graph.laplacian())
    logdet_q = float(np.sum(np.log(rho * laplacian_eigs + 1.0 - rho)))
    d = s - mean
    quad = float(d @ car_precision(graph, rho) @ d)
    return -0.5 * n * (LOG_2PI + math.log(omega2)) + 0.5 * logdet_q - 0.5 * quad / omega2

