"""Posterior-predictive draws by Gaussian conditioning of each region's GP."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import linalg

from .errors import NumericalError, ValidationError
from .model import build_design, cholesky_jitter, matern, time_distances, to_natural_scale
from .sampler import ChainStore

BLOCK_FORECAST = 3
QUANTILES = (0.025, 0.5, 0.975)
FORECAST_COLUMNS = ("region_id", "time", "mean", "q025", "q50", "q975", "scale")
MAX_SKIP_RATE = 0.01


def forecast_stream(seed: int, draw: int, region: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1),
                                                counter=[0, BLOCK_FORECAST, region, draw]))


@dataclass
class ForecastSet:
    """Predictive samples over the fitted times followed by the horizon.

    ``linpred`` holds ``X beta + Z`` and ``obs`` adds observation noise; both
    are ``(n_draws, I, T + H)``. Draws whose factorization failed are NaN and
    counted in ``n_skipped``.
    """

    region_ids: list
    times: np.ndarray
    horizon_times: np.ndarray
    linpred: np.ndarray
    obs: np.ndarray
    n_skipped: int = 0
    transform_kind: str = "identity"
    meta: dict = field(default_factory=dict)

    @property
    def all_times(self) -> np.ndarray:
        return np.concatenate([self.times, self.horizon_times])

    @property
    def n_draws(self) -> int:
        return self.obs.shape[0]

    @property
    def horizon(self) -> int:
        return len(self.horizon_times)


def gp_conditional(times, future_times, z, sigma2: float, kappa: float, phi: float):
    """Mean and covariance of ``Z(future) | Z(times) = z`` under a Matern GP."""
    t_all = np.concatenate([np.asarray(times, float), np.asarray(future_times, float)])
    n = len(times)
    R = matern(time_distances(t_all), kappa, phi)
    L, _ = cholesky_jitter(R[:n, :n], 1.0, phi=phi)
    A = linalg.solve_triangular(L, R[:n, n:], lower=True, check_finite=False)
    w = linalg.solve_triangular(L, np.asarray(z, float), lower=True, check_finite=False)
    mean = A.T @ w
    cov = sigma2 * (R[n:, n:] - A.T @ A)
    return mean, 0.5 * (cov + cov.T)


def predictive_draws(chain: ChainStore, horizon: int, seed: int = 0,
                     transform_kind: Optional[str] = None) -> ForecastSet:
    """One predictive path per kept draw and region.

    The horizon part conditions on the draw's stored ``Z_i`` (no redrawing of
    the in-sample path), adds ``X_new beta_i`` and then ``N(0, tau2_i)`` noise.
    The in-sample part is ``X beta_i + Z_i`` plus the same kind of noise.
    """
    if horizon < 0:
        raise ValidationError("horizon must be non-negative")
    if chain.n_draws < 1:
        raise ValidationError("chain has no draws")
    times = np.asarray(chain.times)
    I, T, n = chain.n_regions, len(times), chain.n_draws
    step = int(times[1] - times[0]) if T > 1 else 1
    future = times[-1] + step * np.arange(1, horizon + 1)
    X = build_design(chain.design, times)
    Xf = build_design(chain.design, future)
    H = horizon
    linpred = np.empty((n, I, T + H))
    obs = np.empty((n, I, T + H))
    skipped = 0
    for d in range(n):
        for i in range(I):
            rng = forecast_stream(seed, d, i)
            beta = chain.beta[d, i]
            sigma2 = math.exp(chain.log_sigma2[d, i])
            tau = math.sqrt(math.exp(chain.log_nu2[d, i]) * sigma2)
            z = chain.z[d, i]
            linpred[d, i, :T] = X @ beta + z
            eta = rng.standard_normal(T + H)
            if H:
                try:
                    mean, cov = gp_conditional(times, future, z, sigma2, chain.kappa,
                                               math.exp(chain.log_phi[d, i]))
                    Lc, _ = cholesky_jitter(cov, sigma2, region=chain.region_ids[i], draw=d)
                except NumericalError:
                    skipped += 1
                    linpred[d, i] = np.nan
                    obs[d, i] = np.nan
                    continue
                linpred[d, i, T:] = Xf @ beta + mean + Lc @ rng.standard_normal(H)
            obs[d, i] = linpred[d, i] + tau * eta
    if skipped > MAX_SKIP_RATE * n * I:
        raise NumericalError(f"forecast skipped {skipped} of {n * I} draws", skipped=skipped)
    kind = transform_kind or chain.meta.get("transform_kind", "identity")
    return ForecastSet(list(chain.region_ids), times.copy(), future, linpred, obs, skipped, kind,
                       meta={"seed": int(seed)})


def summarize(samples, axis: int = 0) -> dict:
    """Mean and type-7 quantiles at 0.025, 0.5, 0.975, ignoring NaN draws."""
    x = np.asarray(samples, dtype=float)
    if x.size == 0 or x.shape[axis] == 0:
        raise ValidationError("cannot summarize an empty sample")
    q = np.nanquantile(x, QUANTILES, axis=axis, method="linear")
    return {"mean": np.nanmean(x, axis=axis), "q025": q[0], "q50": q[1], "q975": q[2]}


def forecast_rows(fs: ForecastSet) -> list:
    """Rows for ``forecast.csv``: transformed scale, then natural scale if a transform applies."""
    scales = [("transformed", fs.obs)]
    if fs.transform_kind != "identity":
        scales.append(("natural", to_natural_scale(fs.obs, fs.transform_kind)))
    rows = []
    times = fs.all_times
    for scale, samples in scales:
        summ = summarize(samples, axis=0)
        for i, rid in enumerate(fs.region_ids):
            for k, t in enumerate(times):
                rows.append({"region_id": rid, "time": int(t), "mean": float(summ["mean"][i, k]),
                             "q025": float(summ["q025"][i, k]), "q50": float(summ["q50"][i, k]),
                             "q975": float(summ["q975"][i, k]), "scale": scale})
    return rows


def write_forecast_csv(path, fs: ForecastSet):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FORECAST_COLUMNS)
        for r in forecast_rows(fs):
            w.writerow([r["region_id"], r["time"], repr(r["mean"]), repr(r["q025"]),
                        repr(r["q50"]), repr(r["q975"]), r["scale"]])


def read_forecast_csv(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != FORECAST_COLUMNS:
            raise ValidationError(f"{path}: expected columns {FORECAST_COLUMNS}")
        return [dict(r, time=int(r["time"]), **{k: float(r[k]) for k in ("mean", "q025", "q50", "q975")})
                for r in reader]


# Predictive samples are stored next to forecast.csv so scoring can compute
# CRPS. Same layout as the latent-path file, with magic "YPRD".
_Y_MAGIC = b"YPRD"


def save_forecast(fs: ForecastSet, directory):
    from .io import write_json
    from .sampler import _Z_HEADER, Z_VERSION

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_forecast_csv(directory / "forecast.csv", fs)
    y = np.ascontiguousarray(fs.obs, dtype="<f8")
    with open(directory / "predictive_draws.bin", "wb") as fh:
        n, I, T = y.shape
        fh.write(_Z_HEADER.pack(_Y_MAGIC, Z_VERSION, I, T, n))
        fh.write(y.tobytes())
    write_json(directory / "forecast_meta.json", {
        "region_ids": fs.region_ids, "times": fs.times.tolist(), "horizon_times": fs.horizon_times.tolist(),
        "n_draws": fs.n_draws, "n_skipped": fs.n_skipped, "transform_kind": fs.transform_kind,
        "meta": fs.meta,
    })


def load_predictive(directory):
    """Return ``(meta, samples)`` with samples shaped ``(n_draws, I, T + H)``."""
    from .io import read_json
    from .sampler import _Z_HEADER, Z_VERSION

    directory = Path(directory)
    meta = read_json(directory / "forecast_meta.json")
    with open(directory / "predictive_draws.bin", "rb") as fh:
        magic, version, I, T, n = _Z_HEADER.unpack(fh.read(_Z_HEADER.size))
        if magic != _Y_MAGIC or version != Z_VERSION:
            raise ValidationError(f"{directory}: not a predictive draw file")
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != n * I * T:
        raise ValidationError(f"{directory}: predictive draw file is truncated")
    return meta, data.reshape(n, I, T).astype(float)
