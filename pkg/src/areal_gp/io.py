"""File formats and spatial adjacency construction."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError
from .model import AdjacencyGraph, PanelDataset, inverse_transform, log_rate_correction, transform

PANEL_COLUMNS = ("region_id", "time", "value")


# ---------------------------------------------------------------------------
# Panel CSV
# ---------------------------------------------------------------------------


def load_panel(path, transform_kind: str = "identity", period: int = 12, scale: float = 1.0,
               correction: Optional[float] = None, region_order: Optional[Sequence[str]] = None) -> PanelDataset:
    """Read a ``region_id,time,value[,denominator]`` CSV into a :class:`PanelDataset`.

    For non-identity transforms ``value`` holds raw counts and ``denominator``
    is required. Regions are ordered by ``region_order`` when given, else
    sorted. The time axis is the full integer range spanned by the file, so
    absent rows become missing cells.
    """
    path = Path(path)
    records = {}
    has_den = False
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        if tuple(header[:3]) != PANEL_COLUMNS or len(header) > 4 or (len(header) == 4 and header[3] != "denominator"):
            raise ValidationError(f"{path}: header must be region_id,time,value[,denominator], got {','.join(header)}")
        has_den = len(header) == 4
        dupes = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ValidationError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            rid = row[0].strip()
            try:
                t = int(row[1])
                v = float(row[2]) if row[2].strip() not in ("", "NA", "nan", "NaN") else math.nan
                d = float(row[3]) if has_den else math.nan
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: malformed row {row!r}") from None
            if not rid:
                raise ValidationError(f"{path}:{lineno}: empty region_id")
            key = (rid, t)
            if key in records:
                dupes.append(key)
            records[key] = (v, d)
    if dupes:
        raise ValidationError(f"{path}: duplicate (region_id, time) keys: {sorted(set(dupes))}")
    if not records:
        raise ValidationError(f"{path}: no data rows")
    regions = sorted({k[0] for k in records})
    if region_order is not None:
        region_order = [str(r) for r in region_order]
        if sorted(region_order) != regions:
            raise ValidationError(f"{path}: region ids do not match the requested order")
        regions = region_order
    tvals = [k[1] for k in records]
    times = np.arange(min(tvals), max(tvals) + 1)
    col = {t: j for j, t in enumerate(times)}
    row_of = {r: i for i, r in enumerate(regions)}
    raw = np.full((len(regions), len(times)), np.nan)
    den = np.full_like(raw, np.nan) if has_den else None
    for (rid, t), (v, d) in records.items():
        raw[row_of[rid], col[t]] = v
        if has_den:
            den[row_of[rid], col[t]] = d
    metadata = {"scale": scale}
    if transform_kind == "identity":
        values = raw
    else:
        if den is None:
            raise ValidationError(f"{path}: transform {transform_kind!r} needs a denominator column")
        if transform_kind == "log-rate":
            correction = log_rate_correction(raw) if correction is None else correction
            metadata["correction"] = correction
        values = transform(raw, den, transform_kind, scale=scale, correction=correction)
        # cells without a denominator are unusable
        values[np.isnan(den)] = np.nan
    return PanelDataset(regions, times, values, period=period, transform_kind=transform_kind,
                        denominators=den, metadata=metadata)


def write_panel(path, ds: PanelDataset):
    """Write a panel in the format :func:`load_panel` reads (raw scale for transforms)."""
    if ds.transform_kind == "identity":
        raw = ds.values
    else:
        raw = inverse_transform(ds.values, ds.denominators, ds.transform_kind,
                                scale=ds.metadata.get("scale", 1.0), correction=ds.metadata.get("correction", 0.0))
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(PANEL_COLUMNS) + (["denominator"] if ds.denominators is not None else []))
        for i, rid in enumerate(ds.region_ids):
            for j, t in enumerate(ds.times):
                if np.isnan(ds.values[i, j]):
                    continue
                row = [rid, int(t), repr(float(raw[i, j]))]
                if ds.denominators is not None:
                    row.append(repr(float(ds.denominators[i, j])))
                w.writerow(row)


# ---------------------------------------------------------------------------
# Adjacency files
# ---------------------------------------------------------------------------


def load_edge_list(path, region_ids: Sequence[str]) -> AdjacencyGraph:
    """Read an undirected ``region_a,region_b`` edge list."""
    index = {str(r): k for k, r in enumerate(region_ids)}
    edges = set()
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != ["region_a", "region_b"]:
            raise ValidationError(f"{path}: header must be region_a,region_b")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ValidationError(f"{path}:{lineno}: expected 2 fields")
            a, b = row[0].strip(), row[1].strip()
            for r in (a, b):
                if r not in index:
                    raise ValidationError(f"{path}:{lineno}: unknown region {r!r}")
            if a == b:
                raise ValidationError(f"{path}:{lineno}: self-loop on {a!r}")
            edges.add(tuple(sorted((index[a], index[b]))))
    return AdjacencyGraph.from_edges(len(index), sorted(edges))


def write_edge_list(path, graph: AdjacencyGraph, region_ids: Sequence[str]):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["region_a", "region_b"])
        for a, b in graph.edges():
            w.writerow([region_ids[a], region_ids[b]])


def load_dense_matrix(path) -> AdjacencyGraph:
    """Read a headerless square 0/1 CSV matrix."""
    W = np.loadtxt(path, delimiter=",", ndmin=2)
    return AdjacencyGraph(W.astype(np.int64))


# ---------------------------------------------------------------------------
# Polygons and Queen contiguity
# ---------------------------------------------------------------------------


@dataclass
class PolygonSet:
    """Region polygons as lists of closed rings of ``(x, y)`` pairs."""

    ids: list
    rings: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.ids) != len(self.rings):
            raise ValidationError("one ring list per region id is required")
        self.rings = [[np.asarray(r, dtype=float) for r in rs] for rs in self.rings]
        for rid, rs in zip(self.ids, self.rings):
            if not rs:
                raise ValidationError(f"region {rid!r} has no rings")
            for ring in rs:
                if ring.ndim != 2 or ring.shape[1] != 2 or len(ring) < 4:
                    raise ValidationError(f"region {rid!r}: degenerate ring (need >= 4 points)")
                if not np.array_equal(ring[0], ring[-1]):
                    raise ValidationError(f"region {rid!r}: ring is not closed")


def _on_segment(p, a, b, tol) -> bool:
    """True when point ``p`` lies on segment ``ab`` within ``tol``."""
    ab = b - a
    L2 = float(ab @ ab)
    if L2 == 0.0:
        return float(np.hypot(*(p - a))) <= tol
    t = min(max(float((p - a) @ ab) / L2, 0.0), 1.0)
    proj = a + t * ab
    return float(np.hypot(*(p - proj))) <= tol


def queen_adjacency(polygons: PolygonSet, snap_tol: float = 1e-9) -> AdjacencyGraph:
    """Queen contiguity: neighbours iff boundaries share at least one point.

    Vertices are snapped to a grid of spacing ``snap_tol`` and shared snapped
    vertices mark neighbours. Vertices lying on another region's boundary
    segment (T-junctions, partially overlapping collinear edges) also count.
    """
    if snap_tol < 0:
        raise ValidationError("snap_tol must be non-negative")
    n = len(polygons.ids)
    grid = snap_tol if snap_tol > 0 else None

    def key(pt):
        if grid is None:
            return (float(pt[0]), float(pt[1]))
        return (int(round(pt[0] / grid)), int(round(pt[1] / grid)))

    owners = {}
    verts = []
    boxes = np.empty((n, 4))
    for k, rs in enumerate(polygons.rings):
        pts = np.vstack([r[:-1] for r in rs])
        verts.append(pts)
        boxes[k] = (pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max())
        for pt in pts:
            owners.setdefault(key(pt), set()).add(k)
    W = np.zeros((n, n), dtype=np.int64)
    for owner in owners.values():
        for a in owner:
            for b in owner:
                if a != b:
                    W[a, b] = 1
    pad = max(snap_tol, 0.0)
    for a in range(n):
        for b in range(a + 1, n):
            if W[a, b]:
                continue
            ba, bb = boxes[a], boxes[b]
            if ba[0] > bb[2] + pad or bb[0] > ba[2] + pad or ba[1] > bb[3] + pad or bb[1] > ba[3] + pad:
                continue
            if _touches(verts[a], polygons.rings[b], pad) or _touches(verts[b], polygons.rings[a], pad):
                W[a, b] = W[b, a] = 1
    return AdjacencyGraph(W)


def _touches(points, rings, tol) -> bool:
    for ring in rings:
        for s in range(len(ring) - 1):
            a, b = ring[s], ring[s + 1]
            lo = np.minimum(a, b) - tol
            hi = np.maximum(a, b) + tol
            cand = points[np.all((points >= lo) & (points <= hi), axis=1)]
            for p in cand:
                if _on_segment(p, a, b, tol):
                    return True
    return False


def lattice_polygons(rows: int, cols: int, jitter: Optional[np.ndarray] = None) -> PolygonSet:
    """Unit-square lattice, regions numbered row-major as ``r{row}c{col}``.

    ``jitter`` (shape ``(rows+1, cols+1, 2)``) displaces the shared corner
    points, so neighbouring squares still agree on their common vertices.
    """
    xs, ys = np.meshgrid(np.arange(cols + 1, dtype=float), np.arange(rows + 1, dtype=float))
    pts = np.stack([xs, ys], axis=-1)
    if jitter is not None:
        pts = pts + jitter
    ids, rings = [], []
    for r in range(rows):
        for c in range(cols):
            ring = [pts[r, c], pts[r, c + 1], pts[r + 1, c + 1], pts[r + 1, c], pts[r, c]]
            ids.append(f"r{r}c{c}")
            rings.append([np.array(ring)])
    return PolygonSet(ids, rings)


def load_geojson(path, id_property: str = "id") -> PolygonSet:
    """Read Polygon/MultiPolygon features from a GeoJSON FeatureCollection."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("type") != "FeatureCollection":
        raise ValidationError(f"{path}: expected a FeatureCollection")
    ids, rings = [], []
    for k, feat in enumerate(doc.get("features", [])):
        props = feat.get("properties") or {}
        if id_property not in props:
            raise ValidationError(f"{path}: feature {k} has no property {id_property!r}")
        geom = feat.get("geometry") or {}
        gtype = geom.get("type")
        if gtype == "Polygon":
            polys = [geom["coordinates"]]
        elif gtype == "MultiPolygon":
            polys = geom["coordinates"]
        else:
            raise ValidationError(f"{path}: feature {k} has unsupported geometry {gtype!r}")
        ids.append(str(props[id_property]))
        rings.append([np.asarray(r, dtype=float)[:, :2] for poly in polys for r in poly])
    return PolygonSet(ids, rings)


def write_geojson(path, polygons: PolygonSet, id_property: str = "id"):
    feats = []
    for rid, rs in zip(polygons.ids, polygons.rings):
        feats.append({
            "type": "Feature",
            "properties": {id_property: rid},
            "geometry": {"type": "Polygon", "coordinates": [r.tolist() for r in rs]},
        })
    Path(path).write_text(json.dumps({"type": "FeatureCollection", "features": feats}), encoding="utf-8")


def reorder_graph(graph: AdjacencyGraph, from_ids: Sequence[str], to_ids: Sequence[str]) -> AdjacencyGraph:
    """Permute a graph built over ``from_ids`` into the order of ``to_ids``."""
    pos = {str(r): k for k, r in enumerate(from_ids)}
    missing = [r for r in to_ids if str(r) not in pos]
    if missing or len(to_ids) != len(from_ids):
        raise ValidationError(f"adjacency regions do not match the panel regions: {missing}")
    perm = [pos[str(r)] for r in to_ids]
    return AdjacencyGraph(graph.weights[np.ix_(perm, perm)])


# ---------------------------------------------------------------------------
# JSON helpers
# ---------------------------------------------------------------------------


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=False, default=_json_default) + "\n", encoding="utf-8")


def read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")
