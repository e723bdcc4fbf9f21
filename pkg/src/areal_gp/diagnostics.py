"""Single-chain convergence diagnostics: Geweke z-scores, ACF, ESS, acceptance bands."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError

GEWEKE_FIRST = 0.1
GEWEKE_LAST = 0.5
GEWEKE_THRESHOLD = 1.96
RUNNING_CUTS = 20
MAX_LAG = 50
MIN_GEWEKE_LENGTH = 100
MIN_ESS_LENGTH = 10

# Expected acceptance bands per sampler block.
BANDS = {
    "sigma_mala": ("mala", 0.45, 0.70),
    "phi_mala": ("mala", 0.45, 0.70),
    "nu_mh": ("independence_mh", 0.10, 0.40),
    "car_rho_mh": ("random_walk_mh", 0.10, 0.60),
}

DIAGNOSTIC_COLUMNS = ("parameter", "region_id", "n", "mean", "sd", "geweke_z", "ess", "ess_capped",
                      "acf1", "acf10", "acf50", "status")
ACCEPTANCE_COLUMNS = ("block", "kind", "proposed", "accepted", "rate", "band_low", "band_high", "status")


def autocorrelation(x, max_lag: int | None = None) -> np.ndarray:
    """Sample autocorrelation (biased, ``1/n`` normalization) via FFT.

    Lag 0 is exactly 1. A constant chain gives NaN beyond lag 0.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    if n == 0:
        raise ValidationError("empty chain")
    max_lag = n - 1 if max_lag is None else min(int(max_lag), n - 1)
    d = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(d, size)
    acov = np.fft.irfft(f * np.conj(f), size)[: max_lag + 1] / n
    out = np.full(max_lag + 1, np.nan)
    if acov[0] > 0:
        out = acov / acov[0]
        out = np.clip(out, -1.0, 1.0)
    out[0] = 1.0
    return out


def spectral_variance(x) -> float:
    """Spectral density at frequency zero from Bartlett-weighted autocovariances.

    Bandwidth ``floor(sqrt(n))``; returns the long-run variance, so the
    variance of the segment mean is this value divided by ``n``.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    b = int(math.isqrt(n))
    d = x - x.mean()
    gamma0 = float(d @ d) / n
    total = gamma0
    for k in range(1, min(b, n - 1) + 1):
        gk = float(d[:-k] @ d[k:]) / n
        total += 2.0 * (1.0 - k / (b + 1.0)) * gk
    return total


def geweke_z(chain, first: float = GEWEKE_FIRST, last: float = GEWEKE_LAST) -> float:
    """Geweke z comparing the first 10% with the last 50% of a chain; NaN when degenerate."""
    x = np.asarray(chain, dtype=float)
    n = x.size
    if n < MIN_GEWEKE_LENGTH:
        raise ValidationError(f"geweke_z needs at least {MIN_GEWEKE_LENGTH} draws, got {n}")
    if not np.all(np.isfinite(x)):
        return math.nan
    a = x[: int(math.floor(first * n))]
    b = x[n - int(math.floor(last * n)):]
    va = spectral_variance(a) / a.size
    vb = spectral_variance(b) / b.size
    denom = va + vb
    scale = max(float(np.max(np.abs(x))), 1.0)
    if not (denom > (1e-14 * scale) ** 2):
        return math.nan
    return float((a.mean() - b.mean()) / math.sqrt(denom))


def running_geweke(chain, n_cuts: int = RUNNING_CUTS):
    """Geweke z after discarding ``0, n/(2 n_cuts), ..., (n_cuts - 1) n/(2 n_cuts)`` early draws.

    Returns ``(starts, z)`` arrays; segments too short to score give NaN.
    """
    x = np.asarray(chain, dtype=float)
    n = x.size
    starts = (np.arange(n_cuts) * (n // 2) // n_cuts).astype(int)
    z = np.array([geweke_z(x[s:]) if n - s >= MIN_GEWEKE_LENGTH else math.nan for s in starts])
    return starts, z


def ess(chain):
    """Effective sample size with Geyer's initial positive (monotone) sequence.

    Returns ``(value, capped)``. Antithetic chains can give an estimate above
    ``n``; the value is then reported as ``n`` and ``capped`` is True. A
    constant chain returns ``(nan, False)``.
    """
    x = np.asarray(chain, dtype=float)
    n = x.size
    if n < MIN_ESS_LENGTH:
        raise ValidationError(f"ess needs at least {MIN_ESS_LENGTH} draws, got {n}")
    rho = autocorrelation(x)
    if np.isnan(rho[1]):
        return math.nan, False
    total = 0.0
    prev = math.inf
    for m in range(0, (n - 1) // 2):
        pair = rho[2 * m] + rho[2 * m + 1]
        if pair <= 0:
            break
        pair = min(pair, prev)
        total += pair
        prev = pair
    tau = -1.0 + 2.0 * total
    tau = max(tau, 1.0 / math.log10(n))
    value = n / tau
    if value > n:
        return float(n), True
    return float(value), False


@dataclass
class ParameterDiagnostics:
    parameter: str
    region_id: str
    n: int
    mean: float
    sd: float
    geweke_z: float
    ess: float
    ess_capped: bool
    acf: np.ndarray
    running_starts: np.ndarray
    running_z: np.ndarray

    @property
    def status(self) -> str:
        if math.isnan(self.geweke_z):
            return "degenerate"
        if abs(self.geweke_z) > GEWEKE_THRESHOLD:
            return "flag"
        return "pass"


@dataclass
class DiagnosticsReport:
    parameters: list
    acceptance: list = field(default_factory=list)

    def rows(self) -> list:
        out = []
        for p in self.parameters:
            acf = p.acf
            pick = lambda k: float(acf[k]) if k < len(acf) else math.nan  # noqa: E731
            out.append({"parameter": p.parameter, "region_id": p.region_id, "n": p.n, "mean": p.mean,
                        "sd": p.sd, "geweke_z": p.geweke_z, "ess": p.ess, "ess_capped": int(p.ess_capped),
                        "acf1": pick(1), "acf10": pick(10), "acf50": pick(50), "status": p.status})
        return out

    def flagged(self) -> list:
        return [p for p in self.parameters if p.status == "flag"]


def diagnose_series(parameter: str, region_id: str, values) -> ParameterDiagnostics:
    x = np.asarray(values, dtype=float)
    n = x.size
    z = geweke_z(x) if n >= MIN_GEWEKE_LENGTH else math.nan
    e, capped = ess(x) if n >= MIN_ESS_LENGTH else (math.nan, False)
    starts, rz = running_geweke(x) if n >= MIN_GEWEKE_LENGTH else (np.array([], int), np.array([]))
    return ParameterDiagnostics(parameter, region_id, n, float(x.mean()), float(x.std(ddof=1)) if n > 1 else 0.0,
                                z, e, capped, autocorrelation(x, MAX_LAG), starts, rz)


def acceptance_report(chain_or_telemetry) -> list:
    """Per-block acceptance rates with their expected bands.

    Accepts a :class:`ChainStore` or a telemetry dict with an ``acceptance``
    mapping of ``{block: {"accepted", "proposed"}}``. Blocks with no proposals
    are reported with ``rate=None`` and status ``absent``.
    """
    acc = getattr(chain_or_telemetry, "acceptance", None)
    if acc is None:
        acc = chain_or_telemetry["acceptance"]
    rows = []
    for block, counts in acc.items():
        kind, lo, hi = BANDS.get(block, ("other", 0.0, 1.0))
        proposed, accepted = int(counts["proposed"]), int(counts["accepted"])
        if proposed == 0:
            rate, status = None, "absent"
        else:
            rate = accepted / proposed
            status = "low" if rate < lo else "high" if rate > hi else "ok"
        rows.append({"block": block, "kind": kind, "proposed": proposed, "accepted": accepted,
                     "rate": rate, "band_low": lo, "band_high": hi, "status": status})
    return rows


def diagnose_chain(chain) -> DiagnosticsReport:
    params = [diagnose_series(name, rid, values) for name, rid, values in chain.scalar_series()]
    return DiagnosticsReport(params, acceptance_report(chain))


def _cell(v):
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_diagnostics(directory, report: DiagnosticsReport):
    """Write ``diagnostics.csv``, ``acceptance.csv``, ``acf.csv`` and ``geweke_running.csv``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "diagnostics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DIAGNOSTIC_COLUMNS)
        for r in report.rows():
            w.writerow([_cell(r[c]) for c in DIAGNOSTIC_COLUMNS])
    with open(d / "acceptance.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ACCEPTANCE_COLUMNS)
        for r in report.acceptance:
            w.writerow([_cell(r[c]) for c in ACCEPTANCE_COLUMNS])
    with open(d / "acf.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["parameter", "region_id", "lag", "acf"])
        for p in report.parameters:
            for k, v in enumerate(p.acf):
                w.writerow([p.parameter, p.region_id, k, _cell(float(v))])
    with open(d / "geweke_running.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["parameter", "region_id", "start", "geweke_z"])
        for p in report.parameters:
            for s, z in zip(p.running_starts, p.running_z):
                w.writerow([p.parameter, p.region_id, int(s), _cell(float(z))])
