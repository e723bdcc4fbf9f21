"""The pipeline stages behind the CLI; each reads and writes files under the output directory.

Layout of ``output_dir``::

    panel.csv adjacency.csv regions.geojson truth.json   (simulate)
    calibration.csv priors.json design.json              (calibrate)
    chain/{draws.csv,z_draws.bin,telemetry.json}         (fit)
    forecast/{forecast.csv,predictive_draws.bin,forecast_meta.json}
    scores/{scores.csv,scores_summary.csv,ecp_table.csv}
    diagnostics/{diagnostics.csv,acceptance.csv,acf.csv,geweke_running.csv}
    report/...
"""

from __future__ import annotations

import csv
import logging
import math
import shutil

import numpy as np

from .calibrate import PriorSpec, calibrate_priors, fit_panel, fits_from_rows, fits_to_rows, select_fourier_degree
from .config import RunConfig, validate_document
from .diagnostics import diagnose_chain, write_diagnostics
from .errors import ValidationError
from .forecast import load_predictive, predictive_draws, read_forecast_csv, save_forecast
from .io import (
    load_dense_matrix,
    load_edge_list,
    load_geojson,
    load_panel,
    queen_adjacency,
    read_json,
    reorder_graph,
    write_edge_list,
    write_geojson,
    write_json,
    write_panel,
)
from .model import AdjacencyGraph, DesignSpec, PanelDataset, build_design
from .plotting import crps_box_png, series_png, series_svg
from .sampler import Problem, initial_state, load_chain, run_chain, save_chain
from .scoring import read_scores, score_forecast, write_scores
from .simulate import SimulationSettings, simulate

log = logging.getLogger("areal_gp")

CALIBRATION_COLUMNS_FIXED = ("region_id",)


# ---------------------------------------------------------------------------
# Inputs
# ---------------------------------------------------------------------------


def load_dataset(cfg: RunConfig) -> PanelDataset:
    ds_cfg = cfg["dataset"]
    if ds_cfg["format"] == "hungermap":
        from .hungermap import fetch_hungermap

        h = ds_cfg["hungermap"]
        cache = cfg.resolve(h.get("cache_dir", "hungermap_cache"))
        kwargs = {"offline": bool(h.get("offline", False))}
        if "path" in h:
            kwargs["path"] = h["path"]
        ds = fetch_hungermap(h["country"], h["admin_level"], (h["date_start"], h["date_end"]), cache, **kwargs)
        ds.period = int(ds_cfg["period"])
        return ds
    path = cfg.dataset_path()
    if not path.exists():
        raise ValidationError(f"panel file {path} does not exist (run `simulate` or set dataset.path)")
    return load_panel(path, ds_cfg["transform"], period=ds_cfg["period"], scale=ds_cfg["scale"],
                      correction=ds_cfg["correction"])


def load_graph(cfg: RunConfig, region_ids) -> AdjacencyGraph:
    adj = cfg["adjacency"]
    path = cfg.adjacency_path() if adj["path"] is None and adj["source"] == "edge-list" else (
        cfg.resolve(adj["path"]) if adj["path"] is not None else cfg.output_dir / "regions.geojson")
    if not path.exists():
        raise ValidationError(f"adjacency file {path} does not exist")
    if adj["source"] == "edge-list":
        return load_edge_list(path, region_ids)
    if adj["source"] == "dense-matrix":
        g = load_dense_matrix(path)
        if g.n_nodes != len(region_ids):
            raise ValidationError(f"{path}: matrix has {g.n_nodes} rows for {len(region_ids)} regions")
        return g
    polys = load_geojson(path, adj["id_property"])
    return reorder_graph(queen_adjacency(polys, adj["snap_tol"]), polys.ids, region_ids)


def training_panel(cfg: RunConfig, ds: PanelDataset) -> PanelDataset:
    cfg.check_split(ds.n_times, int(ds.times[0]), int(ds.times[-1]))
    st = cfg.split_time(int(ds.times[-1]))
    return ds.subset_times(int(np.searchsorted(ds.times, st, side="right")))


def load_design(cfg: RunConfig):
    path = cfg.output_dir / "design.json"
    if not path.exists():
        raise ValidationError(f"{path} not found; run `calibrate` first")
    d = read_json(path)
    return DesignSpec(int(d["fourier_degree"]), int(d["period"])), float(d["kappa"])


def load_priors(cfg: RunConfig) -> PriorSpec:
    path = cfg.priors_path() or cfg.output_dir / "priors.json"
    if not path.exists():
        raise ValidationError(f"{path} not found; run `calibrate` first or set priors_path")
    doc = read_json(path)
    validate_document(doc, "priors", str(path))
    return PriorSpec.from_dict(doc)


def read_calibration(path, design: DesignSpec) -> list:
    with open(path, newline="") as fh:
        return fits_from_rows(list(csv.DictReader(fh)), design)


def write_calibration(path, fits, design: DesignSpec):
    rows = fits_to_rows(fits, design)
    cols = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def run_simulate(cfg: RunConfig) -> dict:
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    settings = SimulationSettings.from_dict(dict(cfg["simulation"] if "simulation" in cfg.doc else {}))
    sim = simulate(settings, cfg.seed)
    write_panel(out / "panel.csv", sim.dataset)
    write_edge_list(out / "adjacency.csv", sim.graph, sim.dataset.region_ids)
    write_geojson(out / "regions.geojson", sim.polygons)
    write_json(out / "truth.json", sim.truth)
    log.info("simulated %d regions x %d times into %s", sim.dataset.n_regions, sim.dataset.n_times, out)
    return {"panel": out / "panel.csv", "truth": out / "truth.json"}


def run_calibrate(cfg: RunConfig) -> dict:
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(cfg)
    train = training_panel(cfg, ds)
    deg = cfg["design"]["fourier_degree"]
    if deg == "auto":
        deg = select_fourier_degree(train.values, train.times, train.period, cfg["design"]["candidate_degrees"])
    design = DesignSpec(int(deg), int(train.period))
    X = build_design(design, train.times)
    kappa = float(cfg["kappa"])
    fits = fit_panel(train.values, X, kappa, train.times, train.region_ids)
    priors = calibrate_priors(fits)
    write_calibration(out / "calibration.csv", fits, design)
    write_json(out / "priors.json", priors.to_dict())
    write_json(out / "design.json", {"fourier_degree": design.fourier_degree, "period": design.period,
                                     "kappa": kappa, "split_time": int(train.times[-1])})
    log.info("calibrated %d regions, Fourier degree %d", len(fits), design.fourier_degree)
    return {"priors": priors, "fits": fits, "design": design}


def run_fit(cfg: RunConfig, progress=None):
    out = cfg.output_dir
    mcmc = cfg.mcmc_config()
    ds = load_dataset(cfg)
    train = training_panel(cfg, ds)
    design, kappa = load_design(cfg)
    priors = load_priors(cfg)
    graph = load_graph(cfg, train.region_ids)
    fits = read_calibration(out / "calibration.csv", design)
    if [f.region_id for f in fits] != train.region_ids:
        raise ValidationError("calibration.csv regions do not match the panel")
    X = build_design(design, train.times)
    problem = Problem(train.values, train.times, X, graph, priors, kappa, train.region_ids)
    init = initial_state(fits, problem)
    chain = run_chain(problem, mcmc, init, design,
                      meta={"transform_kind": train.transform_kind, "split_time": int(train.times[-1])},
                      progress=progress)
    save_chain(chain, out / "chain")
    log.info("kept %d draws; acceptance %s", chain.n_draws, chain.acceptance_rates())
    return chain


def run_forecast(cfg: RunConfig):
    out = cfg.output_dir
    chain = load_chain(out / "chain")
    h = cfg["forecast"]["horizon"]
    if h is None:
        ds = load_dataset(cfg)
        h = int(np.sum(ds.times > chain.times[-1]))
    fs = predictive_draws(chain, int(h), seed=cfg.seed)
    save_forecast(fs, out / "forecast")
    log.info("forecast horizon %d, %d draws, %d skipped", fs.horizon, fs.n_draws, fs.n_skipped)
    return fs


def run_score(cfg: RunConfig):
    out = cfg.output_dir
    meta, samples = load_predictive(out / "forecast")
    ds = load_dataset(cfg)
    times = np.array(meta["times"] + meta["horizon_times"], dtype=np.int64)
    if list(meta["region_ids"]) != ds.region_ids:
        raise ValidationError("forecast regions do not match the panel")
    col = {int(t): j for j, t in enumerate(ds.times)}
    observed = np.full((ds.n_regions, len(times)), np.nan)
    for k, t in enumerate(times):
        if int(t) in col:
            observed[:, k] = ds.values[:, col[int(t)]]
    split = int(meta["times"][-1])
    report = score_forecast(samples, observed, ds.region_ids, times, split)
    write_scores(out / "scores", report)
    overall = {r["partition"]: r for r in report.summary if r["region_id"] == "ALL"}
    log.info("train ECP %.3f, test ECP %s", overall["train"]["ecp"], overall["test"]["ecp"])
    return report


def run_diagnose(cfg: RunConfig):
    out = cfg.output_dir
    chain = load_chain(out / "chain")
    report = diagnose_chain(chain)
    write_diagnostics(out / "diagnostics", report)
    for row in report.acceptance:
        if row["status"] in ("low", "high"):
            log.warning("acceptance for %s is %s (%.3f outside [%.2f, %.2f])", row["block"], row["status"],
                        row["rate"], row["band_low"], row["band_high"])
    slow = [p for p in report.parameters if not math.isnan(p.ess) and p.ess < 100]
    if slow:
        log.warning("%d parameters have ESS below 100; log sigma2 / log phi mixing may be slow", len(slow))
    return report


def _five_number(values):
    v = np.asarray(values, float)
    if v.size == 0:
        return [math.nan] * 6
    q = np.quantile(v, (0.0, 0.25, 0.5, 0.75, 1.0), method="linear")
    return [*map(float, q), float(v.mean())]


def run_report(cfg: RunConfig) -> dict:
    out = cfg.output_dir
    rep = out / "report"
    rep.mkdir(parents=True, exist_ok=True)
    rows = read_forecast_csv(out / "forecast" / "forecast.csv")
    meta = read_json(out / "forecast" / "forecast_meta.json")
    scores = read_scores(out / "scores")
    ds = load_dataset(cfg)
    split = int(meta["times"][-1])
    col = {int(t): j for j, t in enumerate(ds.times)}
    pos = {r: i for i, r in enumerate(ds.region_ids)}
    written = []
    for rid in meta["region_ids"]:
        for scale in ("transformed", "natural"):
            sel = [r for r in rows if r["region_id"] == rid and r["scale"] == scale]
            if not sel:
                continue
            t = np.array([r["time"] for r in sel])
            obs = np.array([ds.values[pos[rid], col[int(x)]] if int(x) in col else math.nan for x in t])
            if scale == "natural":
                from .model import to_natural_scale

                obs = to_natural_scale(obs, meta["transform_kind"])
            stem = f"series_{rid}" + ("" if scale == "transformed" else "_natural")
            with open(rep / f"{stem}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["time", "partition", "observed", "mean", "q025", "q50", "q975"])
                for r, o in zip(sel, obs):
                    w.writerow([r["time"], "train" if r["time"] <= split else "test", repr(float(o)),
                                repr(r["mean"]), repr(r["q025"]), repr(r["q50"]), repr(r["q975"])])
            mean = np.array([r["mean"] for r in sel])
            lo = np.array([r["q025"] for r in sel])
            hi = np.array([r["q975"] for r in sel])
            title = f"{rid} ({scale} scale)"
            (rep / f"{stem}.svg").write_text(series_svg(t, mean, lo, hi, obs, title, split), encoding="utf-8")
            series_png(rep / f"{stem}.png", t, mean, lo, hi, obs, title, split)
            written += [f"{stem}.csv", f"{stem}.svg", f"{stem}.png"]
    # per-region CRPS box summaries
    regions = list(meta["region_ids"])
    by = {(c["region_id"], c["partition"]): [] for c in scores.cells}
    for c in scores.cells:
        by[(c["region_id"], c["partition"])].append(c["crps"])
    with open(rep / "crps_box.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["region_id", "partition", "n", "min", "q1", "median", "q3", "max", "mean"])
        for part in ("train", "test"):
            for rid in regions:
                vals = by.get((rid, part), [])
                w.writerow([rid, part, len(vals)] + [repr(v) for v in _five_number(vals)])
    crps_box_png(rep / "crps_box.png", regions, [by.get((r, "train"), []) for r in regions],
                 [by.get((r, "test"), []) for r in regions])
    shutil.copyfile(out / "scores" / "ecp_table.csv", rep / "ecp_table.csv")
    written += ["crps_box.csv", "crps_box.png", "ecp_table.csv"]
    write_json(rep / "index.json", {"files": written})
    return {"directory": rep, "files": written}
