"""Synthetic panels drawn from the full generative model on a square lattice."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import ValidationError
from .io import PolygonSet, lattice_polygons, queen_adjacency
from .model import (
    AdjacencyGraph,
    DesignSpec,
    PanelDataset,
    build_design,
    car_precision,
    cholesky_jitter,
    correlation_matrix,
)


@dataclass
class SimulationSettings:
    rows: int = 3
    cols: int = 3
    n_times: int = 127
    kappa: float = 1.5
    period: int = 12
    fourier_degree: int = 1
    beta: list = field(default_factory=lambda: [2.0, 0.8, -0.5])
    beta_region_sd: float = 0.3
    phi_a: float = 1.5
    phi_b: float = 0.5
    phi_chi2: float = 0.05
    nu_mean: float = -1.2
    nu_var: float = 0.1
    car_mean: float = -0.7
    car_omega2: float = 0.3
    car_rho: float = 0.9
    missing_fraction: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.rows < 1 or self.cols < 1:
            raise ValidationError("lattice dimensions must be positive")
        if self.n_times < 3:
            raise ValidationError("n_times must be at least 3")
        if len(self.beta) != 2 * self.fourier_degree + 1:
            raise ValidationError(f"beta needs {2 * self.fourier_degree + 1} entries for degree {self.fourier_degree}")
        if self.phi_chi2 < 0 or self.nu_var < 0 or self.car_omega2 < 0 or self.beta_region_sd < 0:
            raise ValidationError("variances must be non-negative")
        if not (0.0 <= self.car_rho < 1.0):
            raise ValidationError("car_rho must lie in [0, 1)")
        if not (0.0 <= self.missing_fraction < 1.0):
            raise ValidationError("missing_fraction must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationSettings":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown simulation settings: {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SimulationResult:
    dataset: PanelDataset
    graph: AdjacencyGraph
    polygons: PolygonSet
    truth: dict


def draw_car(graph: AdjacencyGraph, mean: float, omega2: float, rho: float, rng) -> np.ndarray:
    """One draw of ``N(mean, omega2 Q(rho)^-1)``."""
    n = graph.n_nodes
    xi = rng.standard_normal(n)
    if omega2 == 0:
        return np.full(n, float(mean))
    Q = car_precision(graph, rho)
    Lq = np.linalg.cholesky(Q)
    # Q = Lq Lq^T, so Lq^-T xi has covariance Q^-1
    return mean + math.sqrt(omega2) * np.linalg.solve(Lq.T, xi)


def simulate(settings: SimulationSettings, seed: int, time_offset: int = 1) -> SimulationResult:
    """Draw a full panel and its ground truth.

    ``log sigma2`` comes from the CAR prior on the lattice's Queen graph,
    ``log phi`` and ``log nu2`` from their priors, each ``Z_i`` from its GP
    and ``y`` from the Gaussian observation model.
    """
    settings.validate()
    rng = np.random.default_rng(seed)
    polygons = lattice_polygons(settings.rows, settings.cols)
    graph = queen_adjacency(polygons)
    I, T = graph.n_nodes, settings.n_times
    times = np.arange(time_offset, time_offset + T)
    design = DesignSpec(settings.fourier_degree, settings.period)
    X = build_design(design, times)

    s = draw_car(graph, settings.car_mean, settings.car_omega2, settings.car_rho, rng)
    lphi = settings.phi_a + settings.phi_b * s + math.sqrt(settings.phi_chi2) * rng.standard_normal(I)
    lnu = settings.nu_mean + math.sqrt(settings.nu_var) * rng.standard_normal(I)
    beta = np.asarray(settings.beta, dtype=float)[None, :] + np.zeros((I, design.n_columns))
    beta[:, 0] += settings.beta_region_sd * rng.standard_normal(I)

    Z = np.empty((I, T))
    y = np.empty((I, T))
    for i in range(I):
        sigma2 = math.exp(s[i])
        R = correlation_matrix(times, settings.kappa, math.exp(lphi[i]))
        L, _ = cholesky_jitter(R, 1.0)
        Z[i] = math.sqrt(sigma2) * (L @ rng.standard_normal(T))
        tau = math.sqrt(math.exp(lnu[i]) * sigma2)
        y[i] = X @ beta[i] + Z[i] + tau * rng.standard_normal(T)
    if settings.missing_fraction > 0:
        y[rng.random((I, T)) < settings.missing_fraction] = np.nan

    ds = PanelDataset(polygons.ids, times, y, period=settings.period, transform_kind="identity",
                      metadata={"source": "simulate", "seed": int(seed)})
    truth = {
        "seed": int(seed),
        "settings": settings.to_dict(),
        "region_ids": list(polygons.ids),
        "times": times.tolist(),
        "log_sigma2": s.tolist(),
        "log_phi": lphi.tolist(),
        "log_nu2": lnu.tolist(),
        "beta": beta.tolist(),
        "z": Z.tolist(),
    }
    return SimulationResult(ds, graph, polygons, truth)


def benchmark_settings(overrides: Optional[dict] = None) -> SimulationSettings:
    """The bundled 3x3 lattice benchmark (120 training + 7 held-out time points)."""
    base = SimulationSettings().to_dict()
    base.update(overrides or {})
    return SimulationSettings.from_dict(base)
