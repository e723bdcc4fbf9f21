"""Client for region-level food-consumption series from a HungerMap-style API.

The endpoint is configuration: the base URL comes from the
``AREAL_GP_HUNGERMAP_URL`` environment variable (or an explicit argument) and
requests go to ``{base}/{path}?country=..&admin_level=..&date_start=..&date_end=..``.
Each response is expected to be JSON of the form::

    {"country": "CMR", "admin_level": 1,
     "regions": [{"region_id": "CM-AD", "name": "Adamaoua", "population": 1200000,
                  "series": [{"date": "2023-01-02", "people_insufficient": 250000.0}, ...]},
                 ...]}

Raw payloads are cached verbatim under ``cache_dir`` so a populated cache
replays offline. Daily counts are averaged within ISO weeks and returned as a
panel on the empirical-logit scale with the population as denominator.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import os
import threading
import time
import urllib.error
import urllib.parse
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ArealGPError, ValidationError
from .model import PanelDataset, transform

BASE_URL_ENV = "AREAL_GP_HUNGERMAP_URL"
DEFAULT_PATH = "fcs/daily"
MAX_CONCURRENT = 2


class OfflineError(ArealGPError):
    """No network response and no cached payload."""


class PayloadError(ValidationError):
    """The payload does not match the expected schema; ``path`` locates the problem."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class RateLimiter:
    """Enforce a minimum interval between request starts across threads."""

    def __init__(self, min_interval: float):
        self.min_interval = float(min_interval)
        self._lock = threading.Lock()
        self._next = 0.0

    def wait(self):
        with self._lock:
            now = time.monotonic()
            start = max(now, self._next)
            self._next = start + self.min_interval
        if start > now:
            time.sleep(start - now)


def date_chunks(start: dt.date, end: dt.date, chunk_days: int):
    out = []
    cur = start
    while cur <= end:
        stop = min(cur + dt.timedelta(days=chunk_days - 1), end)
        out.append((cur, stop))
        cur = stop + dt.timedelta(days=1)
    return out


def cache_path(cache_dir, country: str, admin_level: int, start: dt.date, end: dt.date) -> Path:
    return Path(cache_dir) / f"{country}_adm{admin_level}_{start.isoformat()}_{end.isoformat()}.json"


def _request_url(base: str, path: str, country: str, admin_level: int, start: dt.date, end: dt.date) -> str:
    query = urllib.parse.urlencode({"country": country, "admin_level": admin_level,
                                    "date_start": start.isoformat(), "date_end": end.isoformat()})
    return f"{base.rstrip('/')}/{path.lstrip('/')}?{query}"


def _download(url: str, timeout: float) -> bytes:
    with urllib.request.urlopen(url, timeout=timeout) as resp:
        return resp.read()


def fetch_payloads(country: str, admin_level: int, date_range, cache_dir, base_url: Optional[str] = None,
                   path: str = DEFAULT_PATH, chunk_days: int = 400, min_interval: float = 0.5,
                   timeout: float = 30.0, offline: bool = False) -> list:
    """Return the raw JSON payloads covering ``date_range``, using the cache when present."""
    start, end = (d if isinstance(d, dt.date) else dt.date.fromisoformat(str(d)) for d in date_range)
    if end < start:
        raise ValidationError("date range end precedes start")
    base = base_url or os.environ.get(BASE_URL_ENV)
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    limiter = RateLimiter(min_interval)

    def one(chunk):
        cp = cache_path(cache_dir, country, admin_level, *chunk)
        if cp.exists():
            return cp.read_bytes()
        if offline or not base:
            why = "offline mode" if offline else f"{BASE_URL_ENV} is not set"
            raise OfflineError(f"no cached payload at {cp} and {why}")
        limiter.wait()
        url = _request_url(base, path, country, admin_level, *chunk)
        try:
            raw = _download(url, timeout)
        except (urllib.error.URLError, OSError) as exc:
            raise OfflineError(f"request to {url} failed ({exc}) and no cached payload at {cp}") from None
        tmp = cp.with_suffix(".tmp" + hashlib.sha1(url.encode()).hexdigest()[:8])
        tmp.write_bytes(raw)
        tmp.replace(cp)
        return raw

    chunks = date_chunks(start, end, chunk_days)
    with ThreadPoolExecutor(max_workers=MAX_CONCURRENT) as pool:
        raws = list(pool.map(one, chunks))
    payloads = []
    for chunk, raw in zip(chunks, raws):
        try:
            payloads.append(json.loads(raw))
        except json.JSONDecodeError as exc:
            raise PayloadError(f"$[{chunk[0]}..{chunk[1]}]", f"invalid JSON ({exc})") from None
    return payloads


def _get(obj, key, where):
    if not isinstance(obj, dict) or key not in obj:
        raise PayloadError(where, f"missing field {key!r}")
    return obj[key]


def parse_payloads(payloads) -> dict:
    """Collect ``{region_id: {"population": float, "daily": {date: count}}}`` from payloads."""
    regions: dict = {}
    for p, payload in enumerate(payloads):
        root = f"$[{p}]"
        items = _get(payload, "regions", root)
        if not isinstance(items, list):
            raise PayloadError(f"{root}.regions", "expected a list")
        for r, item in enumerate(items):
            where = f"{root}.regions[{r}]"
            rid = str(_get(item, "region_id", where))
            pop = _get(item, "population", where)
            if not isinstance(pop, (int, float)) or pop <= 0:
                raise PayloadError(f"{where}.population", f"expected a positive number, got {pop!r}")
            series = _get(item, "series", where)
            if not isinstance(series, list):
                raise PayloadError(f"{where}.series", "expected a list")
            entry = regions.setdefault(rid, {"population": float(pop), "daily": {}})
            for k, obs in enumerate(series):
                w = f"{where}.series[{k}]"
                try:
                    day = dt.date.fromisoformat(str(_get(obs, "date", w)))
                except ValueError:
                    raise PayloadError(f"{w}.date", f"not an ISO date: {obs.get('date')!r}") from None
                val = _get(obs, "people_insufficient", w)
                if val is None:
                    continue
                if not isinstance(val, (int, float)) or val < 0:
                    raise PayloadError(f"{w}.people_insufficient", f"expected a non-negative number, got {val!r}")
                entry["daily"][day] = float(val)
    if not regions:
        raise PayloadError("$", "no regions in payload")
    return regions


def iso_week_key(day: dt.date):
    y, w, _ = day.isocalendar()
    return (y, w)


def weekly_means(regions: dict):
    """ISO-week means of daily counts.

    Returns ``(region_ids, week_labels, means, populations)``; weeks run
    consecutively from the first to the last observed week and weeks with no
    daily value are NaN.
    """
    weeks = sorted({iso_week_key(d) for r in regions.values() for d in r["daily"]})
    if not weeks:
        raise PayloadError("$", "no dated observations")
    first = dt.date.fromisocalendar(weeks[0][0], weeks[0][1], 1)
    last = dt.date.fromisocalendar(weeks[-1][0], weeks[-1][1], 1)
    n_weeks = (last - first).days // 7 + 1
    labels = [tuple((first + dt.timedelta(weeks=k)).isocalendar()[:2]) for k in range(n_weeks)]
    index = {wk: k for k, wk in enumerate(labels)}
    ids = sorted(regions)
    means = np.full((len(ids), n_weeks), np.nan)
    for i, rid in enumerate(ids):
        sums = np.zeros(n_weeks)
        counts = np.zeros(n_weeks)
        for day, v in regions[rid]["daily"].items():
            k = index[iso_week_key(day)]
            sums[k] += v
            counts[k] += 1
        ok = counts > 0
        means[i, ok] = sums[ok] / counts[ok]
    pops = np.array([regions[rid]["population"] for rid in ids])
    return ids, labels, means, pops


def weekly_panel(regions: dict, period: int = 52) -> PanelDataset:
    """Weekly means as an empirical-logit panel with the population as denominator."""
    ids, labels, means, pops = weekly_means(regions)
    den = np.repeat(pops[:, None], len(labels), axis=1)
    if np.any(means[~np.isnan(means)] > den[~np.isnan(means)]):
        raise ValidationError("weekly count exceeds the population denominator")
    values = transform(means, den, "empirical-logit")
    return PanelDataset(ids, np.arange(1, len(labels) + 1), values, period=period,
                        transform_kind="empirical-logit", denominators=den,
                        metadata={"source": "hungermap", "weeks": [f"{y}-W{w:02d}" for y, w in labels]})


def fetch_hungermap(country_code: str, admin_level: int, date_range, cache_dir, **kwargs) -> PanelDataset:
    """Weekly panel of people with insufficient food consumption, cache-first."""
    payloads = fetch_payloads(country_code, admin_level, date_range, cache_dir, **kwargs)
    ds = weekly_panel(parse_payloads(payloads))
    ds.metadata.update({"country": country_code, "admin_level": int(admin_level)})
    return ds
