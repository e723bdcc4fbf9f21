"""MCMC for the spatially correlated GP time-series model.

One iteration is

1. a joint MALA move on ``s = log sigma2`` (all regions at once);
2. for each region, in order: MALA on ``log phi_i``, an independence MH move
   on ``log nu2_i`` proposing from its prior, an exact Gibbs draw of
   ``beta_i`` and an exact Gibbs draw of the latent path ``Z_i``;
3. conjugate updates of the CAR mean and variance (plus an optional
   random-walk move on the CAR propriety parameter).

Step functions update the :class:`ModelState` in place and return it along
with a :class:`Move` record. Every random draw comes from a counter-based
Philox stream keyed by ``(seed, iteration, region, block)``, so region
updates can run on any number of threads without changing the output.
"""

from __future__ import annotations

import csv
import math
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.linalg import lapack

from .calibrate import MLFit, PriorSpec
from .errors import NumericalError, ValidationError
from .model import (
    HALF_INTEGER_KAPPAS,
    LOG_2PI,
    AdjacencyGraph,
    DesignSpec,
    ModelState,
    car_precision,
    chol_logdet,
    cholesky_jitter,
    matern,
    time_distances,
)

BLOCK_SIGMA = 0
BLOCK_REGION = 1
BLOCK_CAR = 2
GLOBAL_REGION = 2**32 - 1

FD_STEP = 1e-5
RHO_LOGIT_BOUNDS = (-12.0, 12.0)


def stream(seed: int, iteration: int, region: int, block: int) -> np.random.Generator:
    """Counter-based random stream for one (iteration, region, block) cell."""
    bitgen = np.random.Philox(key=int(seed) & (2**64 - 1), counter=[0, block, region, iteration])
    return np.random.Generator(bitgen)


class Move(NamedTuple):
    accepted: bool
    prob: float
    failed: bool = False


# ---------------------------------------------------------------------------
# Config and problem bundle
# ---------------------------------------------------------------------------


@dataclass
class MCMCConfig:
    n_iter: int = 50000
    burn_in: int = 10000
    thin: int = 10
    seed: int = 0
    mala_sigma_eps: float = 0.05
    mala_phi_eps: float = 0.3
    target_accept: float = 0.574
    adapt_decay: float = 0.6
    rho_car_mode: str = "fixed"
    rho_car_step: float = 0.5
    workers: int = 1
    max_failure_rate: float = 0.01

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.n_iter < 1 or self.burn_in < 0:
            raise ValidationError("n_iter must be positive and burn_in non-negative")
        if self.burn_in >= self.n_iter:
            raise ValidationError(f"burn_in ({self.burn_in}) must be smaller than n_iter ({self.n_iter})")
        if self.thin < 1:
            raise ValidationError("thin must be at least 1")
        if (self.n_iter - self.burn_in) % self.thin:
            raise ValidationError("(n_iter - burn_in) must be a multiple of thin")
        if not (self.mala_sigma_eps > 0 and self.mala_phi_eps > 0):
            raise ValidationError("MALA step sizes must be positive")
        if self.rho_car_mode not in ("fixed", "sampled"):
            raise ValidationError("rho_car_mode must be 'fixed' or 'sampled'")
        if self.workers < 1:
            raise ValidationError("workers must be at least 1")

    @property
    def n_draws(self) -> int:
        return (self.n_iter - self.burn_in) // self.thin

    @property
    def parallel_regions(self) -> bool:
        return self.workers > 1


@dataclass
class _Factor:
    log_phi: float
    R: np.ndarray
    L: np.ndarray
    logdet: float
    rdot: Optional[np.ndarray]
    trace: float


class Problem:
    """Data, design, graph and priors the sampler conditions on.

    Also owns a one-entry-per-region cache of the correlation factorization,
    keyed by the exact ``log phi`` value it was built for.
    """

    def __init__(self, y, times, X, graph: AdjacencyGraph, priors: PriorSpec, kappa: float = 1.5,
                 region_ids: Optional[Sequence[str]] = None):
        self.y = np.asarray(y, dtype=float)
        self.times = np.asarray(times)
        self.X = np.asarray(X, dtype=float)
        self.graph = graph
        self.priors = priors
        self.kappa = float(kappa)
        I, T = self.y.shape
        if graph.n_nodes != I:
            raise ValidationError(f"graph has {graph.n_nodes} nodes but data has {I} regions")
        if self.X.shape[0] != T:
            raise ValidationError("design rows must match the number of time points")
        self.region_ids = [str(r) for r in (region_ids if region_ids is not None else range(I))]
        self.mask = ~np.isnan(self.y)
        self.obs_idx = [np.nonzero(self.mask[i])[0] for i in range(I)]
        self.n_obs = self.mask.sum(axis=1)
        self.dist = time_distances(self.times)
        self.laplacian = graph.laplacian()
        self.lap_eigs = np.linalg.eigvalsh(self.laplacian)
        self.full_rank = [
            len(idx) >= self.X.shape[1] and np.linalg.matrix_rank(self.X[idx]) == self.X.shape[1]
            for idx in self.obs_idx
        ]
        self._factors = [None] * I

    @property
    def n_regions(self) -> int:
        return self.y.shape[0]

    @property
    def n_times(self) -> int:
        return self.y.shape[1]

    @property
    def analytic_phi_grad(self) -> bool:
        return self.kappa in HALF_INTEGER_KAPPAS

    def build_factor(self, log_phi: float, with_derivative: bool = True) -> _Factor:
        phi = math.exp(log_phi)
        rdot, trace = None, 0.0
        if self.analytic_phi_grad:
            R, rdot = _matern_with_derivative(self.dist, self.kappa, phi)
        else:
            R = matern(self.dist, self.kappa, phi)
        L, _ = cholesky_jitter(R, 1.0, phi=phi)
        if with_derivative and rdot is not None:
            # dpotri fills only the lower triangle; L's upper triangle is zero
            # and rdot has a zero diagonal, so the full trace is twice the sum.
            Rinv_lower, info = lapack.dpotri(L, lower=1)
            if info != 0:
                raise NumericalError("correlation inverse failed", phi=phi)
            trace = 2.0 * float(np.sum(Rinv_lower * rdot))
        return _Factor(float(log_phi), R, L, chol_logdet(L), rdot, trace)

    def factor(self, i: int, log_phi: float) -> _Factor:
        f = self._factors[i]
        if f is None or f.log_phi != log_phi:
            f = self.build_factor(log_phi)
            self._factors[i] = f
        return f

    def set_factor(self, i: int, f: _Factor):
        self._factors[i] = f

    def residual(self, state: ModelState, i: int) -> np.ndarray:
        """Observed entries of ``y_i - X beta_i - Z_i``."""
        idx = self.obs_idx[i]
        return self.y[i, idx] - self.X[idx] @ state.beta[i] - state.z[i, idx]


def _matern_with_derivative(dist, kappa, phi):
    u = dist / phi
    e = np.exp(-u)
    if kappa == 0.5:
        return e, u * e
    u2e = u * u * e
    if kappa == 1.5:
        return e + u * e, u2e
    return e * (1.0 + u + u * u / 3.0), u2e * (1.0 + u) / 3.0


# ---------------------------------------------------------------------------
# Log targets and gradients
# ---------------------------------------------------------------------------


def _gp_quadratic(f: _Factor, z) -> float:
    w = linalg.solve_triangular(f.L, z, lower=True, check_finite=False)
    return float(w @ w)


def sigma_block_logpost(s, state: ModelState, problem: Problem, q=None, ssr=None):
    """Log target of the ``log sigma2`` vector and its analytic gradient.

    Sums the GP density of each ``Z_i``, the noise likelihood (``tau2_i =
    nu2_i * exp(s_i)``), the conditional log-range prior and the proper CAR
    density. ``q`` (``Z_i' R_i^-1 Z_i``) and ``ssr`` (residual sums of
    squares) can be passed in when already known.
    """
    s = np.asarray(s, dtype=float)
    pr = problem.priors
    I, T = problem.n_regions, problem.n_times
    facs = [problem.factor(i, state.log_phi[i]) for i in range(I)]
    if q is None:
        q = np.array([_gp_quadratic(f, state.z[i]) for i, f in enumerate(facs)])
    if ssr is None:
        ssr = np.array([float(r @ r) for r in (problem.residual(state, i) for i in range(I))])
    logdet = np.array([f.logdet for f in facs])
    n = problem.n_obs
    lnu = state.log_nu2
    es = np.exp(-s)
    val = -0.5 * np.sum(T * LOG_2PI + T * s + logdet + q * es)
    grad = -0.5 * T + 0.5 * q * es
    enoise = np.exp(-lnu - s)
    val += -0.5 * np.sum(n * (LOG_2PI + lnu + s) + ssr * enoise)
    grad += -0.5 * n + 0.5 * ssr * enoise
    dev = state.log_phi - pr.phi_a - pr.phi_b * s
    val += -0.5 * np.sum(math.log(2 * math.pi * pr.phi_chi2) + dev**2 / pr.phi_chi2)
    grad += pr.phi_b * dev / pr.phi_chi2
    Q = car_precision(problem.graph, state.car_rho)
    d = s - state.car_mean
    Qd = Q @ d
    logdet_q = float(np.sum(np.log(state.car_rho * problem.lap_eigs + 1.0 - state.car_rho)))
    val += -0.5 * I * (LOG_2PI + math.log(state.car_omega2)) + 0.5 * logdet_q - 0.5 * float(d @ Qd) / state.car_omega2
    grad = grad - Qd / state.car_omega2
    return float(val), grad


def _phi_value_grad(problem: Problem, i: int, f: _Factor, z, log_sigma2: float, log_phi: float):
    pr = problem.priors
    sigma2 = math.exp(log_sigma2)
    T = problem.n_times
    alpha = linalg.cho_solve((f.L, True), z, check_finite=False)
    quad = float(z @ alpha)
    mu = pr.phi_a + pr.phi_b * log_sigma2
    val = -0.5 * (T * LOG_2PI + T * log_sigma2 + f.logdet + quad / sigma2)
    val += -0.5 * (math.log(2 * math.pi * pr.phi_chi2) + (log_phi - mu) ** 2 / pr.phi_chi2)
    if f.rdot is None:
        return val, None
    grad = -0.5 * f.trace + 0.5 * float(alpha @ f.rdot @ alpha) / sigma2 - (log_phi - mu) / pr.phi_chi2
    return val, grad


def phi_logpost(problem: Problem, state: ModelState, i: int, log_phi: float, factor: Optional[_Factor] = None):
    """Log target of ``log phi_i`` and its gradient (finite differences for non-half-integer kappa)."""
    f = factor if factor is not None else problem.build_factor(log_phi)
    val, grad = _phi_value_grad(problem, i, f, state.z[i], state.log_sigma2[i], log_phi)
    if grad is None:
        hi = problem.build_factor(log_phi + FD_STEP, with_derivative=False)
        lo = problem.build_factor(log_phi - FD_STEP, with_derivative=False)
        vh, _ = _phi_value_grad(problem, i, hi, state.z[i], state.log_sigma2[i], log_phi + FD_STEP)
        vl, _ = _phi_value_grad(problem, i, lo, state.z[i], state.log_sigma2[i], log_phi - FD_STEP)
        grad = (vh - vl) / (2 * FD_STEP)
    return val, grad, f


def noise_loglik(ssr: float, n_obs: int, tau2: float) -> float:
    return -0.5 * n_obs * (LOG_2PI + math.log(tau2)) - 0.5 * ssr / tau2


# ---------------------------------------------------------------------------
# MALA kernel
# ---------------------------------------------------------------------------


def _mala_log_q(to, frm, grad_frm, eps):
    d = to - frm - 0.5 * eps * eps * grad_frm
    return -float(np.sum(d * d)) / (2.0 * eps * eps)


# ---------------------------------------------------------------------------
# Steps
# ---------------------------------------------------------------------------


def step_sigma(state: ModelState, problem: Problem, eps: float, rng):
    """Joint MALA move on the ``log sigma2`` vector."""
    s0 = state.log_sigma2.copy()
    I = problem.n_regions
    q = np.array([_gp_quadratic(problem.factor(i, state.log_phi[i]), state.z[i]) for i in range(I)])
    ssr = np.array([float(r @ r) for r in (problem.residual(state, i) for i in range(I))])
    f0, g0 = sigma_block_logpost(s0, state, problem, q, ssr)
    xi = rng.standard_normal(I)
    s1 = s0 + 0.5 * eps * eps * g0 + eps * xi
    u_draw = rng.random()
    if not np.all(np.isfinite(s1)):
        return state, Move(False, 0.0, True)
    f1, g1 = sigma_block_logpost(s1, state, problem, q, ssr)
    if not (np.isfinite(f1) and np.all(np.isfinite(g1))):
        return state, Move(False, 0.0, True)
    log_alpha = f1 - f0 + _mala_log_q(s0, s1, g1, eps) - _mala_log_q(s1, s0, g0, eps)
    prob = 1.0 if log_alpha >= 0 else math.exp(log_alpha)
    accepted = bool(math.log(u_draw) < log_alpha)
    if accepted:
        state.log_sigma2[:] = s1
    return state, Move(accepted, prob)


def step_phi(state: ModelState, i: int, problem: Problem, eps: float, rng):
    """MALA move on ``log phi_i``."""
    x0 = float(state.log_phi[i])
    f0_val, g0, fac0 = phi_logpost(problem, state, i, x0, problem.factor(i, x0))
    xi = rng.standard_normal()
    u_draw = rng.random()
    x1 = x0 + 0.5 * eps * eps * g0 + eps * xi
    if not np.isfinite(x1) or abs(x1) > 50:
        return state, Move(False, 0.0, True)
    try:
        f1_val, g1, fac1 = phi_logpost(problem, state, i, x1)
    except NumericalError:
        return state, Move(False, 0.0, True)
    log_alpha = (f1_val - f0_val + _mala_log_q(np.array(x0), np.array(x1), g1, eps)
                 - _mala_log_q(np.array(x1), np.array(x0), g0, eps))
    prob = 1.0 if log_alpha >= 0 else math.exp(log_alpha)
    accepted = bool(math.log(u_draw) < log_alpha)
    if accepted:
        state.log_phi[i] = x1
        problem.set_factor(i, fac1)
    return state, Move(accepted, prob)


def step_nu(state: ModelState, i: int, problem: Problem, rng):
    """Independence MH on ``log nu2_i`` proposing from its Gaussian prior.

    The prior and proposal cancel, leaving the noise likelihood ratio.
    """
    pr = problem.priors
    prop = pr.nu_mean + math.sqrt(pr.nu_var) * rng.standard_normal()
    u_draw = rng.random()
    r = problem.residual(state, i)
    ssr = float(r @ r)
    n = int(problem.n_obs[i])
    ls = float(state.log_sigma2[i])
    log_alpha = noise_loglik(ssr, n, math.exp(prop + ls)) - noise_loglik(ssr, n, math.exp(state.log_nu2[i] + ls))
    prob = 1.0 if log_alpha >= 0 else math.exp(log_alpha)
    accepted = bool(math.log(u_draw) < log_alpha)
    if accepted:
        state.log_nu2[i] = prop
    return state, Move(accepted, prob)


def beta_conditional(state: ModelState, i: int, problem: Problem):
    """Mean and Cholesky factor of the precision of ``beta_i``'s full conditional."""
    if not problem.full_rank[i]:
        raise NumericalError(f"design matrix is rank deficient on the observed rows of region {problem.region_ids[i]!r}",
                             region=problem.region_ids[i])
    idx = problem.obs_idx[i]
    tau2 = math.exp(state.log_nu2[i] + state.log_sigma2[i])
    Xo = problem.X[idx]
    r = problem.y[i, idx] - state.z[i, idx]
    P = Xo.T @ Xo / tau2 + np.eye(Xo.shape[1]) / problem.priors.beta_prior_variance
    L = linalg.cholesky(P, lower=True, check_finite=False)
    mean = linalg.cho_solve((L, True), Xo.T @ r / tau2, check_finite=False)
    return mean, L


def step_beta(state: ModelState, i: int, problem: Problem, rng):
    """Exact Gibbs draw of the mean coefficients of region ``i``."""
    mean, L = beta_conditional(state, i, problem)
    xi = rng.standard_normal(len(mean))
    state.beta[i] = mean + linalg.solve_triangular(L.T, xi, lower=False, check_finite=False)
    return state, Move(True, 1.0)


def z_conditional(state: ModelState, i: int, problem: Problem):
    """Mean and covariance of ``Z_i`` given everything else, via factorizations."""
    idx = problem.obs_idx[i]
    sigma2 = math.exp(state.log_sigma2[i])
    tau2 = math.exp(state.log_nu2[i]) * sigma2
    R = matern(problem.dist, problem.kappa, math.exp(state.log_phi[i]))
    S = sigma2 * R
    if len(idx) == 0:
        return np.zeros(problem.n_times), S
    A = S[np.ix_(idx, idx)] + tau2 * np.eye(len(idx))
    LA, _ = cholesky_jitter(A, sigma2, region=problem.region_ids[i])
    r = problem.y[i, idx] - problem.X[idx] @ state.beta[i]
    B = linalg.solve_triangular(LA, S[idx], lower=True, check_finite=False)
    w = linalg.solve_triangular(LA, r, lower=True, check_finite=False)
    return B.T @ w, S - B.T @ B


def step_z(state: ModelState, i: int, problem: Problem, rng):
    """Exact Gibbs draw of the latent path ``Z_i``.

    Uses conditioning of a joint prior draw: ``z = z0 + S_.O A^-1 (r - z0_O - e)``
    with ``z0 ~ N(0, S)``, ``e ~ N(0, tau2 I)`` and ``A = S_OO + tau2 I``.
    """
    idx = problem.obs_idx[i]
    sigma2 = math.exp(state.log_sigma2[i])
    tau2 = math.exp(state.log_nu2[i]) * sigma2
    f = problem.factor(i, state.log_phi[i])
    xi = rng.standard_normal(problem.n_times)
    e = rng.standard_normal(len(idx)) * math.sqrt(tau2)
    z0 = math.sqrt(sigma2) * (f.L @ xi)
    if len(idx) == 0:
        state.z[i] = z0
        return state, Move(True, 1.0)
    R = f.R
    full = len(idx) == problem.n_times
    A = sigma2 * (R if full else R[np.ix_(idx, idx)])
    A.flat[:: len(idx) + 1] += tau2
    LA, _ = cholesky_jitter(A, sigma2, region=problem.region_ids[i])
    r = problem.y[i, idx] - problem.X[idx] @ state.beta[i]
    v = linalg.cho_solve((LA, True), r - (z0 if full else z0[idx]) - e, check_finite=False)
    state.z[i] = z0 + sigma2 * ((R if full else R[:, idx]) @ v)
    return state, Move(True, 1.0)


def car_mean_conditional(s, omega2: float, rho: float, problem: Problem):
    """Gaussian full conditional of the CAR mean: ``(mean, variance)``."""
    pr = problem.priors
    Q = car_precision(problem.graph, rho)
    one = np.ones(len(s))
    prec = float(one @ Q @ one) / omega2 + 1.0 / pr.car_mean_prior_var
    mean = (float(one @ Q @ s) / omega2 + pr.car_mean_prior_mean / pr.car_mean_prior_var) / prec
    return mean, 1.0 / prec


def omega2_conditional(s, m: float, rho: float, problem: Problem):
    """Inverse-gamma full conditional of the CAR variance: ``(shape, rate)``."""
    pr = problem.priors
    d = np.asarray(s) - m
    quad = float(d @ car_precision(problem.graph, rho) @ d)
    return pr.omega2_shape + 0.5 * len(d), pr.omega2_rate + 0.5 * quad


def _car_rho_logtarget(s, m, omega2, rho, problem):
    d = s - m
    logdet_q = float(np.sum(np.log(rho * problem.lap_eigs + 1.0 - rho)))
    quad = float(d @ car_precision(problem.graph, rho) @ d)
    return 0.5 * logdet_q - 0.5 * quad / omega2 + math.log(rho) + math.log1p(-rho)


def step_car_hyper(state: ModelState, problem: Problem, rng, rho_mode: str = "fixed", rho_step: float = 0.5):
    """Gibbs draws of the CAR mean and variance; optional logit-scale RW move on rho."""
    s = state.log_sigma2
    mean, var = car_mean_conditional(s, state.car_omega2, state.car_rho, problem)
    state.car_mean = mean + math.sqrt(var) * rng.standard_normal()
    shape, rate = omega2_conditional(s, state.car_mean, state.car_rho, problem)
    state.car_omega2 = rate / rng.gamma(shape)
    if rho_mode != "sampled":
        return state, None
    rho0 = state.car_rho
    if rho0 <= 0.0:
        rho0 = 1e-6
    lg0 = math.log(rho0) - math.log1p(-rho0)
    lg1 = lg0 + rho_step * rng.standard_normal()
    u_draw = rng.random()
    if not (RHO_LOGIT_BOUNDS[0] < lg1 < RHO_LOGIT_BOUNDS[1]):
        return state, Move(False, 0.0)
    rho1 = 1.0 / (1.0 + math.exp(-lg1))
    log_alpha = (_car_rho_logtarget(s, state.car_mean, state.car_omega2, rho1, problem)
                 - _car_rho_logtarget(s, state.car_mean, state.car_omega2, rho0, problem))
    prob = 1.0 if log_alpha >= 0 else math.exp(log_alpha)
    accepted = bool(math.log(u_draw) < log_alpha)
    if accepted:
        state.car_rho = rho1
    return state, Move(accepted, prob)


# ---------------------------------------------------------------------------
# Chain storage
# ---------------------------------------------------------------------------


@dataclass
class ChainStore:
    """Thinned post-burn-in draws plus sampler telemetry."""

    region_ids: list
    times: np.ndarray
    design: DesignSpec
    kappa: float
    log_sigma2: np.ndarray
    log_phi: np.ndarray
    log_nu2: np.ndarray
    beta: np.ndarray
    z: np.ndarray
    car_mean: np.ndarray
    car_omega2: np.ndarray
    car_rho: np.ndarray
    acceptance: dict = field(default_factory=dict)
    phi_acceptance_by_region: list = field(default_factory=list)
    burnin_acceptance: dict = field(default_factory=dict)
    step_sizes: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return self.log_sigma2.shape[0]

    @property
    def n_regions(self) -> int:
        return len(self.region_ids)

    def acceptance_rates(self) -> dict:
        out = {}
        for block, c in self.acceptance.items():
            out[block] = c["accepted"] / c["proposed"] if c["proposed"] else None
        return out

    def state_at(self, d: int) -> ModelState:
        return ModelState(
            log_sigma2=self.log_sigma2[d].copy(), log_phi=self.log_phi[d].copy(),
            log_nu2=self.log_nu2[d].copy(), beta=self.beta[d].copy(), z=self.z[d].copy(),
            car_mean=float(self.car_mean[d]), car_omega2=float(self.car_omega2[d]),
            car_rho=float(self.car_rho[d]),
        )

    def scalar_series(self):
        """Yield ``(parameter, region_id, values)`` for every scalar parameter."""
        names = self.design.column_names()
        for i, rid in enumerate(self.region_ids):
            yield "log_sigma2", rid, self.log_sigma2[:, i]
            yield "log_phi", rid, self.log_phi[:, i]
            yield "log_nu2", rid, self.log_nu2[:, i]
            for k, nm in enumerate(names):
                yield f"beta_{nm}", rid, self.beta[:, i, k]
        yield "car_mean", "", self.car_mean
        yield "car_omega2", "", self.car_omega2
        yield "car_rho", "", self.car_rho


# ---------------------------------------------------------------------------
# Initialization and driver
# ---------------------------------------------------------------------------


def initial_state(fits: Sequence[MLFit], problem: Problem, rho: Optional[float] = None) -> ModelState:
    """Start at the per-region ML estimates.

    ``Z_i`` starts at its conditional mean given the ML parameters; the CAR
    mean and variance start at the mean and variance of ``log sigma2_hat``.
    """
    ls = np.array([math.log(f.sigma2_hat) for f in fits])
    state = ModelState(
        log_sigma2=ls,
        log_phi=np.array([math.log(f.phi_hat) for f in fits]),
        log_nu2=np.array([math.log(f.nu2_hat) for f in fits]),
        beta=np.array([np.asarray(f.beta_hat, dtype=float) for f in fits]),
        z=np.zeros((problem.n_regions, problem.n_times)),
        car_mean=float(np.mean(ls)),
        car_omega2=max(float(np.var(ls, ddof=1)) if len(ls) > 1 else 1.0, 1e-3),
        car_rho=problem.priors.car_rho if rho is None else rho,
    )
    for i in range(problem.n_regions):
        state.z[i] = z_conditional(state, i, problem)[0]
    return state


class _Counter:
    __slots__ = ("accepted", "proposed", "failed", "prob_sum")

    def __init__(self):
        self.accepted = self.proposed = self.failed = 0
        self.prob_sum = 0.0

    def add(self, move: Move):
        self.proposed += 1
        self.accepted += int(move.accepted)
        self.failed += int(move.failed)
        self.prob_sum += move.prob

    def as_dict(self) -> dict:
        return {"accepted": self.accepted, "proposed": self.proposed, "failed": self.failed}


def _region_sweep(state, i, problem, eps_phi, seed, it):
    rng = stream(seed, it, i, BLOCK_REGION)
    _, m_phi = step_phi(state, i, problem, eps_phi, rng)
    _, m_nu = step_nu(state, i, problem, rng)
    step_beta(state, i, problem, rng)
    step_z(state, i, problem, rng)
    return m_phi, m_nu


def run_chain(problem: Problem, config: MCMCConfig, init: ModelState, design: DesignSpec,
              meta: Optional[dict] = None, progress=None) -> ChainStore:
    """Run the sampler and keep every ``thin``-th post-burn-in state.

    MALA step sizes are tuned during burn-in with Robbins-Monro updates of
    ``log eps`` toward the target acceptance probability and frozen after.
    """
    config.validate()
    state = init.copy()
    if config.rho_car_mode == "fixed":
        state.car_rho = problem.priors.car_rho
    I, T = problem.n_regions, problem.n_times
    q = problem.X.shape[1]
    n_keep = config.n_draws
    out = {
        "log_sigma2": np.empty((n_keep, I)), "log_phi": np.empty((n_keep, I)),
        "log_nu2": np.empty((n_keep, I)), "beta": np.empty((n_keep, I, q)),
        "z": np.empty((n_keep, I, T)), "car_mean": np.empty(n_keep),
        "car_omega2": np.empty(n_keep), "car_rho": np.empty(n_keep),
    }
    log_eps_sigma = math.log(config.mala_sigma_eps)
    log_eps_phi = np.full(I, math.log(config.mala_phi_eps))
    blocks = ("sigma_mala", "phi_mala", "nu_mh", "car_rho_mh")
    post = {b: _Counter() for b in blocks}
    burn = {b: _Counter() for b in blocks}
    post_phi_region = [_Counter() for _ in range(I)]
    fail_total = {b: 0 for b in blocks}
    prop_total = {b: 0 for b in blocks}
    pool = ThreadPoolExecutor(config.workers) if config.parallel_regions else None
    t_start = time.perf_counter()
    kept = 0
    try:
        for it in range(config.n_iter):
            adapting = it < config.burn_in
            counters = burn if adapting else post
            gain = (it + 1) ** (-config.adapt_decay)

            _, m_sig = step_sigma(state, problem, math.exp(log_eps_sigma), stream(config.seed, it, GLOBAL_REGION, BLOCK_SIGMA))
            counters["sigma_mala"].add(m_sig)
            prop_total["sigma_mala"] += 1
            fail_total["sigma_mala"] += int(m_sig.failed)
            if adapting:
                log_eps_sigma += gain * (m_sig.prob - config.target_accept)

            eps_phi = np.exp(log_eps_phi)
            if pool is None:
                moves = [_region_sweep(state, i, problem, eps_phi[i], config.seed, it) for i in range(I)]
            else:
                moves = list(pool.map(lambda i: _region_sweep(state, i, problem, eps_phi[i], config.seed, it), range(I)))
            for i, (m_phi, m_nu) in enumerate(moves):
                counters["phi_mala"].add(m_phi)
                counters["nu_mh"].add(m_nu)
                prop_total["phi_mala"] += 1
                fail_total["phi_mala"] += int(m_phi.failed)
                if adapting:
                    log_eps_phi[i] += gain * (m_phi.prob - config.target_accept)
                else:
                    post_phi_region[i].add(m_phi)

            _, m_rho = step_car_hyper(state, problem, stream(config.seed, it, GLOBAL_REGION, BLOCK_CAR),
                                      config.rho_car_mode, config.rho_car_step)
            if m_rho is not None:
                counters["car_rho_mh"].add(m_rho)

            if (it + 1) % 1000 == 0 or it + 1 == config.n_iter:
                for b in ("sigma_mala", "phi_mala"):
                    if prop_total[b] >= 100 and fail_total[b] > config.max_failure_rate * prop_total[b]:
                        raise NumericalError(
                            f"sampler block {b} auto-rejected {fail_total[b]} of {prop_total[b]} proposals",
                            block=b, iteration=it + 1, failed=fail_total[b], proposed=prop_total[b],
                        )
                if progress is not None:
                    progress(it + 1, config.n_iter)

            if not adapting and (it + 1 - config.burn_in) % config.thin == 0:
                out["log_sigma2"][kept] = state.log_sigma2
                out["log_phi"][kept] = state.log_phi
                out["log_nu2"][kept] = state.log_nu2
                out["beta"][kept] = state.beta
                out["z"][kept] = state.z
                out["car_mean"][kept] = state.car_mean
                out["car_omega2"][kept] = state.car_omega2
                out["car_rho"][kept] = state.car_rho
                kept += 1
    finally:
        if pool is not None:
            pool.shutdown()

    assert kept == n_keep
    return ChainStore(
        region_ids=list(problem.region_ids), times=np.asarray(problem.times).copy(), design=design,
        kappa=problem.kappa, acceptance={b: c.as_dict() for b, c in post.items()},
        phi_acceptance_by_region=[c.as_dict() for c in post_phi_region],
        burnin_acceptance={b: c.as_dict() for b, c in burn.items()},
        step_sizes={"sigma": math.exp(log_eps_sigma), "phi": np.exp(log_eps_phi).tolist()},
        config={k: getattr(config, k) for k in config.__dataclass_fields__},
        meta=dict(meta or {}, seconds=time.perf_counter() - t_start),
        **out,
    )


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

Z_MAGIC = b"ZDRW"
Z_VERSION = 1
_Z_HEADER = struct.Struct("<4sIqqq")


def write_z_draws(path, z: np.ndarray):
    """Write ``(n_draws, I, T)`` latent paths.

    Layout (little-endian): 4-byte magic ``ZDRW``, uint32 version, int64
    ``I``, int64 ``T``, int64 ``n_draws``, then ``n_draws * I * T`` float64
    values in C order (draw, region, time).
    """
    z = np.ascontiguousarray(z, dtype="<f8")
    n, I, T = z.shape
    with open(path, "wb") as fh:
        fh.write(_Z_HEADER.pack(Z_MAGIC, Z_VERSION, I, T, n))
        fh.write(z.tobytes())


def read_z_draws(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(_Z_HEADER.size)
        if len(head) != _Z_HEADER.size:
            raise ValidationError(f"{path}: truncated header")
        magic, version, I, T, n = _Z_HEADER.unpack(head)
        if magic != Z_MAGIC or version != Z_VERSION:
            raise ValidationError(f"{path}: not a version-{Z_VERSION} draw file")
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != n * I * T:
        raise ValidationError(f"{path}: expected {n * I * T} values, found {data.size}")
    return data.reshape(n, I, T).astype(float)


def save_chain(chain: ChainStore, directory):
    """Persist as ``draws.csv``, ``z_draws.bin`` and ``telemetry.json``."""
    from .io import write_json

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "draws.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["draw", "region_id", "parameter", "value"])
        series = list(chain.scalar_series())
        for d in range(chain.n_draws):
            for name, rid, values in series:
                w.writerow([d, rid, name, repr(float(values[d]))])
    write_z_draws(directory / "z_draws.bin", chain.z)
    rates = chain.acceptance_rates()
    meta = dict(chain.meta)
    seconds = meta.pop("seconds", None)
    write_json(directory / "telemetry.json", {
        "seed": chain.config.get("seed"),
        "n_draws": chain.n_draws,
        "acceptance_rates": rates,
        "acceptance": chain.acceptance,
        "burnin_acceptance": chain.burnin_acceptance,
        "phi_acceptance_by_region": chain.phi_acceptance_by_region,
        "step_sizes": chain.step_sizes,
        "timing": {"seconds": seconds},
        "config": chain.config,
        "region_ids": chain.region_ids,
        "times": np.asarray(chain.times).tolist(),
        "design": {"fourier_degree": chain.design.fourier_degree, "period": chain.design.period},
        "kappa": chain.kappa,
        "meta": meta,
    })


def load_chain(directory) -> ChainStore:
    from .io import read_json

    directory = Path(directory)
    tel = read_json(directory / "telemetry.json")
    region_ids = [str(r) for r in tel["region_ids"]]
    design = DesignSpec(int(tel["design"]["fourier_degree"]), int(tel["design"]["period"]))
    names = design.column_names()
    n, I, q = int(tel["n_draws"]), len(region_ids), design.n_columns
    pos = {rid: i for i, rid in enumerate(region_ids)}
    arrays = {
        "log_sigma2": np.full((n, I), np.nan), "log_phi": np.full((n, I), np.nan),
        "log_nu2": np.full((n, I), np.nan), "beta": np.full((n, I, q), np.nan),
        "car_mean": np.full(n, np.nan), "car_omega2": np.full(n, np.nan), "car_rho": np.full(n, np.nan),
    }
    beta_col = {f"beta_{nm}": k for k, nm in enumerate(names)}
    with open(directory / "draws.csv", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["draw", "region_id", "parameter", "value"]:
            raise ValidationError(f"{directory / 'draws.csv'}: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            try:
                d, rid, name, value = int(row[0]), row[1], row[2], float(row[3])
                if name in beta_col:
                    arrays["beta"][d, pos[rid], beta_col[name]] = value
                elif rid == "":
                    arrays[name][d] = value
                else:
                    arrays[name][d, pos[rid]] = value
            except (ValueError, KeyError, IndexError) as exc:
                raise ValidationError(f"draws.csv line {lineno}: bad row {row!r} ({exc})") from None
    z = read_z_draws(directory / "z_draws.bin")
    if z.shape[:2] != (n, I):
        raise ValidationError("z_draws.bin does not match telemetry")
    meta = dict(tel.get("meta", {}))
    meta["seconds"] = tel.get("timing", {}).get("seconds")
    return ChainStore(
        region_ids=region_ids, times=np.asarray(tel["times"]), design=design, kappa=float(tel["kappa"]),
        z=z, acceptance=tel["acceptance"], phi_acceptance_by_region=tel["phi_acceptance_by_region"],
        burnin_acceptance=tel["burnin_acceptance"], step_sizes=tel["step_sizes"], config=tel["config"],
        meta=meta, **arrays,
    )
