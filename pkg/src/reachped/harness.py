"""Four-way comparison of historical-data selection for reachability.

Every method answers the same question for a detected pedestrian: which
historical chunks should parameterize the reachable-set prediction?

  baseline_all      every chunk passing near the current position
  external_labels   chunks sharing a precomputed behavior label,
                    location- and heading-filtered
  cluster_raw       the nearest cluster of pooled raw features
  cluster_encoded   the nearest cluster of pooled encoded embeddings

Trials that cannot produce a model (no data, too far from any cluster,
memory cap, rank deficiency) are excluded and tracked by reason.
"""
from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .ann import AnnForest
from .cluster import ClusterModel, mean_pool
from .data import Standardizer, TrajectoryChunk
from .encoder import TrajectoryEncoder
from .errors import ContractError, DataExcluded
from .reach import ReachConfig, TrialResult, area_2d, contains_point, identify_models, reach

METHOD_KINDS = ("baseline_all", "external_labels", "cluster_raw", "cluster_encoded")

# Average reachable-set areas (m^2) reported for these four selection
# strategies in the original large-scale pedestrian study on the SIND
# intersection recordings. Reference context only; desk-scale runs are
# not expected to reproduce them.
REFERENCE_AVERAGE_AREA_M2 = {
    "baseline_all": 309.2136,
    "external_labels": 175.6101,
    "cluster_raw": 320.1112,
    "cluster_encoded": 259.526,
}
REFERENCE_SCENARIO_AREA_M2 = {
    "cross_illegal": {"baseline_all": 657.0511, "external_labels": 122.0815,
                      "cluster_raw": 204.1029, "cluster_encoded": 73.8813},
    "cross_now": {"baseline_all": 454.6648, "external_labels": 98.4315,
                  "cluster_raw": None, "cluster_encoded": 172.4226},
    "not_cross": {"baseline_all": 396.1144, "external_labels": 141.6194,
                  "cluster_raw": 169.2804, "cluster_encoded": 52.6826},
}


@dataclass
class MethodSpec:
    kind: str
    radius: float = 1.5              # meters; baseline and labeling location filter
    heading_tol_deg: float = 45.0    # labeling method heading filter
    label_file: str | None = None
    ann_k: int = 10

    def __post_init__(self):
        if self.kind not in METHOD_KINDS:
            raise ContractError(f"unknown method kind {self.kind!r}")
        if self.kind == "external_labels" and not self.label_file:
            raise ContractError("external_labels needs a label_file")


@dataclass
class Stores:
    """Artifacts shared by all trials."""

    historical: list
    standardizer: Standardizer
    encoder: TrajectoryEncoder | None = None
    cluster_encoded: ClusterModel | None = None
    index_encoded: AnnForest | None = None
    cluster_raw: ClusterModel | None = None
    index_raw: AnnForest | None = None
    labels: dict | None = None

    def __post_init__(self):
        self._members_cache = {}
        rows, owners = [], []
        for i, chunk in enumerate(self.historical):
            real = chunk.values[chunk.padding == 1, :2]
            rows.append(real)
            owners.append(np.full(len(real), i))
        self._xy = np.concatenate(rows, axis=0) if rows else np.zeros((0, 2))
        self._xy_owner = np.concatenate(owners) if owners else np.zeros(0, dtype=int)
        self._by_id = {c.chunk_id: c for c in self.historical}

    def chunks_near(self, point, radius: float):
        d2 = ((self._xy - np.asarray(point, dtype=np.float64)) ** 2).sum(axis=1)
        hit = np.unique(self._xy_owner[d2 <= radius * radius])
        return [self.historical[i] for i in hit]

    def cluster_members(self, mode: str, label: int):
        key = (mode, int(label))
        if key not in self._members_cache:
            model = self.cluster_encoded if mode == "encoded" else self.cluster_raw
            ids = [model.chunk_ids[i] for i in model.members(label)]
            self._members_cache[key] = [self._by_id[c] for c in ids if c in self._by_id]
        return self._members_cache[key]


@dataclass
class Selection:
    status: str                  # "ok" or "rejected"
    chunks: list = field(default_factory=list)
    reason: str = ""
    cluster: int = -1
    distance: float = float("nan")


def _mean_heading(values) -> float:
    v = np.asarray(values, dtype=np.float64)[:, 2:4].mean(axis=0)
    return float(np.arctan2(v[1], v[0]))


def _heading_within(a: float, b: float, tol_deg: float) -> bool:
    diff = np.angle(np.exp(1j * (a - b)))
    return bool(abs(diff) <= np.deg2rad(tol_deg))


def _observed_prefix(chunk: TrajectoryChunk, k_obs: int):
    return chunk.values[:k_obs].astype(np.float64)


def _pool_query(observed, standardizer):
    std = standardizer.transform(observed, np.ones(len(observed), dtype=np.uint8))
    return mean_pool(std, np.ones(len(observed), dtype=np.uint8))


def _encode_query(observed, stores: Stores, d_c: int):
    k = len(observed)
    values = np.zeros((d_c, 6), dtype=np.float32)
    values[:k] = observed
    padding = np.zeros(d_c, dtype=np.uint8)
    padding[:k] = 1
    std = stores.standardizer.transform(values, padding)
    _, h = _encode_batch(stores.encoder, std[None], padding[None])
    return mean_pool(h[0], padding)


def _encode_batch(encoder, values, padding):
    from . import nn

    with nn.no_grad():
        h = encoder.encode(values, padding, training=False)
    return None, h.data


def select_data(method: MethodSpec, observed, query_chunk_id: str, stores: Stores,
                cfg: ReachConfig, d_c: int = 50) -> Selection:
    """Choose the historical chunks a trial will learn its model from."""
    if len(observed) < cfg.k_obs:
        return Selection(status="rejected", reason="no_data")

    if method.kind == "baseline_all":
        last = observed[-1, :2]
        chunks = stores.chunks_near(last, method.radius)
        if not chunks:
            return Selection(status="rejected", reason="no_data")
        return Selection(status="ok", chunks=chunks)

    if method.kind == "external_labels":
        label = (stores.labels or {}).get(query_chunk_id)
        if label is None:
            return Selection(status="rejected", reason="no_data")
        last = observed[-1, :2]
        near = {c.chunk_id for c in stores.chunks_near(last, method.radius)}
        q_heading = _mean_heading(observed)
        chunks = [
            c for c in stores.historical
            if stores.labels.get(c.chunk_id) == label and c.chunk_id in near
            and _heading_within(_mean_heading(c.values[c.padding == 1]), q_heading,
                                method.heading_tol_deg)
        ]
        if not chunks:
            return Selection(status="rejected", reason="no_data")
        return Selection(status="ok", chunks=chunks)

    mode = "encoded" if method.kind == "cluster_encoded" else "raw"
    model = stores.cluster_encoded if mode == "encoded" else stores.cluster_raw
    index = stores.index_encoded if mode == "encoded" else stores.index_raw
    if model is None or index is None:
        raise ContractError(f"{method.kind} requires the {mode} cluster model and index")
    if mode == "encoded":
        query = _encode_query(observed, stores, d_c)
    else:
        query = _pool_query(observed, stores.standardizer)
    assignment = index.assign_cluster(query, model.tau, k=method.ann_k)
    if assignment.status != "ok":
        return Selection(status="rejected", reason=assignment.reason,
                         cluster=assignment.label, distance=assignment.distance)
    chunks = stores.cluster_members(mode, assignment.label)
    if not chunks:
        return Selection(status="rejected", reason="no_data")
    return Selection(status="ok", chunks=chunks, cluster=assignment.label,
                     distance=assignment.distance)


def run_trial(method: MethodSpec, chunk: TrajectoryChunk, stores: Stores,
              cfg: ReachConfig, d_c: int = 50) -> TrialResult:
    """Observe a prefix, select data, identify a model set, and predict."""
    real = chunk.real_length
    if real <= cfg.k_obs:
        raise ContractError(f"chunk {chunk.chunk_id} has only {real} real steps")
    observed = _observed_prefix(chunk, cfg.k_obs)
    selection = select_data(method, observed, chunk.chunk_id, stores, cfg, d_c=d_c)
    if selection.status != "ok":
        return TrialResult(chunk.chunk_id, method.kind, status="excluded", reason=selection.reason)

    noise = cfg.noise_zonotope()
    try:
        models = identify_models(selection.chunks, noise, cfg.dt, memory_cap=cfg.memory_cap)
    except DataExcluded as exc:
        return TrialResult(chunk.chunk_id, method.kind, status="excluded", reason=exc.reason)

    r0 = cfg.initial_set(chunk.values[cfg.k_obs - 1, :4])
    n_steps = min(cfg.horizon, real - cfg.k_obs)
    result = reach(models, r0, noise, n_steps, cfg.max_order)
    truth = chunk.values[:, :2].astype(np.float64)
    areas, included = [], []
    for k, z in enumerate(result.sets, start=1):
        areas.append(area_2d(z, dims=(0, 1)))
        included.append(contains_point(z, truth[cfg.k_obs - 1 + k], dims=(0, 1)))
    return TrialResult(chunk.chunk_id, method.kind, status="ok",
                       sets=result.sets, areas=areas, included=included,
                       truncated=result.truncated)


@dataclass
class EvalReport:
    methods: dict
    n_test_chunks: int
    k_obs: int

    def to_json(self) -> str:
        payload = {
            "n_test_chunks": self.n_test_chunks,
            "k_obs": self.k_obs,
            "reference_average_area_m2": REFERENCE_AVERAGE_AREA_M2,
            "methods": self.methods,
        }
        return json.dumps(payload, sort_keys=True, indent=2)


def _aggregate(trials):
    ok = [t for t in trials if t.ok]
    areas = [a for t in ok for a in t.areas]
    flags = [f for t in ok for f in t.included]
    counts = {"ok": len(ok)}
    for t in trials:
        if not t.ok:
            key = f"excluded_{t.reason}"
            counts[key] = counts.get(key, 0) + 1
    return {
        "average_area_m2": float(np.mean(areas)) if areas else None,
        "inclusion_accuracy": float(np.mean(flags)) if flags else None,
        "counts": counts,
        "n_trials": len(trials),
        "trials": [
            {
                "chunk_id": t.chunk_id,
                "status": t.status,
                "reason": t.reason,
                "mean_area_m2": float(np.mean(t.areas)) if t.areas else None,
                "inclusion_rate": float(np.mean(t.included)) if t.included else None,
                "steps": len(t.areas),
                "truncated": t.truncated,
            }
            for t in trials
        ],
    }


def evaluate(methods, test_chunks, stores: Stores, cfg: ReachConfig,
             d_c: int = 50, threads: int = 1, progress=None) -> EvalReport:
    """Run every method over the eligible test chunks and aggregate.

    Averages cover ok trials only; excluded trials are counted by
    reason. Deterministic for fixed artifacts regardless of thread
    count (results are reduced in input order).
    """
    eligible = [c for c in test_chunks if c.real_length > cfg.k_obs]
    report = {}
    for method in methods:
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                trials = list(pool.map(
                    lambda c: run_trial(method, c, stores, cfg, d_c=d_c), eligible))
        else:
            trials = [run_trial(method, c, stores, cfg, d_c=d_c) for c in eligible]
        report[method.kind] = _aggregate(trials)
        if progress:
            agg = report[method.kind]
            progress(f"{method.kind}: area={agg['average_area_m2']} "
                     f"accuracy={agg['inclusion_accuracy']} counts={agg['counts']}")
    return EvalReport(methods=report, n_test_chunks=len(eligible), k_obs=cfg.k_obs)


def write_area_table_csv(path, report: EvalReport, scenario_rows=None):
    """Area comparison table: one column per method, optional scenario
    rows above the average row; excluded cells show a dash."""
    kinds = list(report.methods)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scenario"] + kinds)
        for name, row in (scenario_rows or {}).items():
            writer.writerow([name] + [
                repr(round(row[k], 4)) if row.get(k) is not None else "-" for k in kinds])
        writer.writerow(["average"] + [
            repr(round(report.methods[k]["average_area_m2"], 4))
            if report.methods[k]["average_area_m2"] is not None else "-"
            for k in kinds])


def scenario_report(scenarios: dict, methods, test_chunks, stores: Stores,
                    cfg: ReachConfig, d_c: int = 50):
    """Named-scenario runs with full set exports for plotting.

    ``scenarios`` maps a name to a chunk id expected in the test split;
    unknown ids are listed as skipped. Returns (rows, exports, skipped)
    where rows[name][method_kind] is the mean area or None when the
    trial was excluded.
    """
    by_id = {c.chunk_id: c for c in test_chunks}
    rows, exports, skipped = {}, {}, []
    for name, chunk_id in scenarios.items():
        chunk = by_id.get(chunk_id)
        if chunk is None or chunk.real_length <= cfg.k_obs:
            skipped.append(name)
            continue
        rows[name] = {}
        exports[name] = {}
        for method in methods:
            trial = run_trial(method, chunk, stores, cfg, d_c=d_c)
            rows[name][method.kind] = float(np.mean(trial.areas)) if trial.ok and trial.areas else None
            exports[name][method.kind] = {
                "chunk_id": chunk_id,
                "status": trial.status,
                "reason": trial.reason,
                "truncated": trial.truncated,
                "steps": [
                    {
                        "step": k + 1,
                        "center": z.center.tolist(),
                        "generators": z.generators.tolist(),
                        "area_m2": trial.areas[k],
                        "included": bool(trial.included[k]),
                    }
                    for k, z in enumerate(trial.sets)
                ],
            }
    return rows, exports, skipped


def load_labels_csv(path) -> dict:
    labels = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if "chunk_id" not in (reader.fieldnames or []) or "label" not in (reader.fieldnames or []):
            raise ContractError(f"{path}: label file needs chunk_id,label columns")
        for row in reader:
            labels[row["chunk_id"]] = row["label"]
    return labels
