"""Command-line pipeline: synth, ingest, train, cluster, index, eval, scenario.

Each stage reads artifacts produced by earlier stages from the working
directory, writes its own outputs there along with a resolved-config
echo, and is idempotent for fixed inputs and seeds. Failures exit
nonzero with a machine-readable JSON error on stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import ann as ann_mod
from . import cluster as cluster_mod
from .config import RunConfig
from .data import (Standardizer, chunk_and_pad, filter_stationary, load_chunk_store,
                   load_tracks, save_chunk_store, split_dataset)
from .encoder import (EncoderConfig, MaskingSchedule, TrainConfig, TrajectoryEncoder,
                      encode_dataset, load_encoder, save_encoder, train)
from .errors import MissingArtifactError, ReachpedError
from .harness import (MethodSpec, Stores, evaluate, load_labels_csv, scenario_report,
                      write_area_table_csv)
from .reach import ReachConfig
from .synth import SynthConfig, generate_tracks, write_chunk_labels_csv, write_tracks_csv

ARTIFACTS = {
    "tracks": "tracks.csv",
    "labels": "labels.csv",
    "chunks": "chunks.rpdc",
    "checkpoint": "encoder.rpnn",
    "train_log": "train_log.csv",
    "cluster_encoded": "cluster_encoded.rpcm",
    "cluster_raw": "cluster_raw.rpcm",
    "index_encoded": "index_encoded.rpan",
    "index_raw": "index_raw.rpan",
    "eval_report": "eval_report.json",
    "area_table": "table_areas.csv",
    "scenario_sets": "scenario_sets.json",
    "scenario_table": "table_scenarios.csv",
}


def _workdir(cfg: RunConfig) -> Path:
    path = Path(cfg.get("workdir"))
    path.mkdir(parents=True, exist_ok=True)
    return path


def _artifact(cfg: RunConfig, name: str) -> Path:
    return _workdir(cfg) / ARTIFACTS[name]


def _require(cfg: RunConfig, name: str, producer: str) -> Path:
    path = _artifact(cfg, name)
    if not path.exists():
        raise MissingArtifactError(
            f"missing {path}", hint=f"run `reachped {producer}` first")
    return path


def _reach_config(cfg: RunConfig) -> ReachConfig:
    return ReachConfig(
        horizon=cfg.get("horizon"), noise_w=cfg.get("noise_w"),
        init_pos_gen=cfg.get("init_pos_gen"), init_vel_gen=cfg.get("init_vel_gen"),
        max_order=cfg.get("max_order"), memory_cap=cfg.get("memory_cap"),
        k_obs=cfg.get("k_obs"), dt=cfg.get("dt"))


def _load_split_chunks(cfg: RunConfig):
    chunks, d_c = load_chunk_store(_require(cfg, "chunks", "ingest"))
    train_c = [c for c in chunks if c.split == "train"]
    val_c = [c for c in chunks if c.split == "val"]
    test_c = [c for c in chunks if c.split == "test"]
    return train_c, val_c, test_c, d_c


def cmd_synth(cfg: RunConfig) -> dict:
    scfg = SynthConfig(
        n_tracks=cfg.get("synth_tracks"), map_size=cfg.get("synth_map_size"),
        dt=cfg.get("dt"), min_len=cfg.get("synth_min_len"), max_len=cfg.get("synth_max_len"),
        vel_noise=cfg.get("synth_vel_noise"), turn_rate=cfg.get("synth_turn_rate"),
        seed=cfg.get("synth_seed"))
    tracks, mode_of = generate_tracks(scfg)
    write_tracks_csv(_artifact(cfg, "tracks"), tracks)
    write_chunk_labels_csv(_artifact(cfg, "labels"), tracks, mode_of, cfg.get("d_c"))
    return {"tracks": len(tracks), "tracks_csv": str(_artifact(cfg, "tracks")),
            "labels_csv": str(_artifact(cfg, "labels"))}


def cmd_ingest(cfg: RunConfig) -> dict:
    source = cfg.get("data_csv") or _artifact(cfg, "tracks")
    if not Path(source).exists():
        raise MissingArtifactError(
            f"no input csv at {source}",
            hint="run `reachped synth` or point data_csv at a trajectory file")
    tracks = load_tracks(source, schema=cfg.columns_schema(), frame_dt=cfg.get("frame_dt"))
    tracks = filter_stationary(tracks)
    chunks, skipped = chunk_and_pad(tracks, cfg.get("d_c"))
    split = split_dataset(chunks, seed=cfg.get("seed"))
    ordered = split.train + split.val + split.test
    save_chunk_store(_artifact(cfg, "chunks"), ordered, cfg.get("d_c"))
    return {"tracks": len(tracks), "chunks": len(ordered), "skipped_tracks": skipped,
            "split": {"train": len(split.train), "val": len(split.val), "test": len(split.test)},
            "store": str(_artifact(cfg, "chunks"))}


def cmd_train(cfg: RunConfig, progress=None) -> dict:
    train_c, val_c, _, d_c = _load_split_chunks(cfg)
    standardizer = Standardizer.fit(train_c)
    ecfg = EncoderConfig(
        d_model=cfg.get("d_model"), n_layers=cfg.get("n_layers"), n_heads=cfg.get("n_heads"),
        ff_dim=cfg.get("ff_dim"), dropout=cfg.get("dropout"), d_c=d_c)
    encoder = TrajectoryEncoder(ecfg, seed=cfg.get("seed"))
    schedule = MaskingSchedule(
        r_start=cfg.get("r_start"), r_end=cfg.get("r_end"),
        l_m_start=cfg.get("l_m_start"), l_m_end=cfg.get("l_m_end"),
        epochs_per_increment=cfg.get("epochs_per_increment"))
    tcfg = TrainConfig(epochs=cfg.get("epochs"), batch_size=cfg.get("batch_size"),
                       lr=cfg.get("lr"), l2=cfg.get("l2"), seed=cfg.get("seed"))
    log = train(encoder, train_c, val_c, standardizer, schedule, tcfg,
                log_path=_artifact(cfg, "train_log"), progress=progress)
    save_encoder(_artifact(cfg, "checkpoint"), encoder, standardizer,
                 extra_meta={"train": {"epochs": tcfg.epochs, "batch_size": tcfg.batch_size,
                                       "lr": tcfg.lr, "l2": tcfg.l2, "seed": tcfg.seed}})
    last = log.rows[-1]
    return {"epochs": tcfg.epochs, "final_train_mse": last.train_mse,
            "final_val_mse": last.val_mse, "checkpoint": str(_artifact(cfg, "checkpoint")),
            "train_log": str(_artifact(cfg, "train_log"))}


def _historical(cfg):
    train_c, val_c, test_c, d_c = _load_split_chunks(cfg)
    return train_c + val_c, test_c, d_c


def cmd_cluster(cfg: RunConfig) -> dict:
    historical, _, d_c = _historical(cfg)
    encoder, standardizer, _ = load_encoder(_require(cfg, "checkpoint", "train"))
    params = cluster_mod.ClusterParams(
        min_cluster_size=cfg.get("min_cluster_size"), min_samples=cfg.get("min_samples"))
    out = {}
    ids, h = encode_dataset(encoder, historical, standardizer, batch_size=cfg.get("batch_size"))
    paddings = np.stack([c.padding for c in historical])
    for mode, pooled in (
        ("encoded", cluster_mod.pool_embeddings(h, paddings)),
        ("raw", cluster_mod.pool_embeddings(
            np.stack([standardizer.transform(c.values, c.padding) for c in historical]), paddings)),
    ):
        model = cluster_mod.hdbscan(pooled, params, chunk_ids=ids)
        if model.n_clusters > 0:
            cluster_mod.cluster_distance_stats(model)
        cluster_mod.save_cluster_model(_artifact(cfg, f"cluster_{mode}"), model)
        base = _workdir(cfg)
        cluster_mod.export_assignments_csv(base / f"assignments_{mode}.csv", model)
        cluster_mod.export_condensed_csv(base / f"condensed_{mode}.csv", model)
        if len(model.pooled) > 3:
            cluster_mod.export_pca_csv(base / f"pca_{mode}.csv", model)
        noise = int((model.labels == -1).sum())
        out[mode] = {"clusters": model.n_clusters, "noise": noise,
                     "model": str(_artifact(cfg, f"cluster_{mode}"))}
    return out


def cmd_index(cfg: RunConfig) -> dict:
    out = {}
    for mode in ("encoded", "raw"):
        model = cluster_mod.load_cluster_model(_require(cfg, f"cluster_{mode}", "cluster"))
        forest = ann_mod.AnnForest(
            model.pooled, model.labels, ids=model.chunk_ids,
            n_trees=cfg.get("n_trees"), leaf_capacity=cfg.get("leaf_capacity"),
            seed=cfg.get("seed"))
        ann_mod.save_index(_artifact(cfg, f"index_{mode}"), forest)
        out[mode] = {"items": len(model.pooled), "index": str(_artifact(cfg, f"index_{mode}"))}
    return out


def _build_stores(cfg: RunConfig, kinds):
    historical, test_c, d_c = _historical(cfg)
    encoder, standardizer, _ = load_encoder(_require(cfg, "checkpoint", "train"))
    stores = Stores(historical=historical, standardizer=standardizer, encoder=encoder)
    if "cluster_encoded" in kinds:
        stores.cluster_encoded = cluster_mod.load_cluster_model(_require(cfg, "cluster_encoded", "cluster"))
        stores.index_encoded = ann_mod.load_index(_require(cfg, "index_encoded", "index"))
    if "cluster_raw" in kinds:
        stores.cluster_raw = cluster_mod.load_cluster_model(_require(cfg, "cluster_raw", "cluster"))
        stores.index_raw = ann_mod.load_index(_require(cfg, "index_raw", "index"))
    if "external_labels" in kinds:
        label_path = cfg.get("labels_csv") or _artifact(cfg, "labels")
        if not Path(label_path).exists():
            raise MissingArtifactError(
                f"no label file at {label_path}",
                hint="set labels_csv or run `reachped synth` for generated labels")
        stores.labels = load_labels_csv(label_path)
    return stores, test_c, d_c


def _method_specs(cfg: RunConfig, kinds):
    label_file = cfg.get("labels_csv") or str(_artifact(cfg, "labels"))
    return [MethodSpec(kind=k, radius=cfg.get("radius"),
                       heading_tol_deg=cfg.get("heading_tol_deg"),
                       label_file=label_file if k == "external_labels" else None,
                       ann_k=cfg.get("ann_k"))
            for k in kinds]


def cmd_eval(cfg: RunConfig, progress=None) -> dict:
    kinds = cfg.method_kinds()
    stores, test_c, d_c = _build_stores(cfg, kinds)
    methods = _method_specs(cfg, kinds)
    report = evaluate(methods, test_c, stores, _reach_config(cfg), d_c=d_c,
                      threads=cfg.threads(), progress=progress)
    report_path = _artifact(cfg, "eval_report")
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    write_area_table_csv(_artifact(cfg, "area_table"), report)
    summary = {kind: {"average_area_m2": report.methods[kind]["average_area_m2"],
                      "inclusion_accuracy": report.methods[kind]["inclusion_accuracy"],
                      "counts": report.methods[kind]["counts"]}
               for kind in report.methods}
    summary["report"] = str(report_path)
    return summary


def cmd_scenario(cfg: RunConfig) -> dict:
    scenarios = cfg.scenario_map()
    kinds = cfg.method_kinds()
    stores, test_c, d_c = _build_stores(cfg, kinds)
    methods = _method_specs(cfg, kinds)
    rows, exports, skipped = scenario_report(scenarios, methods, test_c, stores,
                                             _reach_config(cfg), d_c=d_c)
    with open(_artifact(cfg, "scenario_sets"), "w", encoding="utf-8") as fh:
        json.dump(exports, fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(_artifact(cfg, "scenario_table"), "w", newline="") as fh:
        fh.write("scenario," + ",".join(kinds) + "\n")
        for name in sorted(rows):
            cells = [repr(round(rows[name][k], 4)) if rows[name].get(k) is not None else "-"
                     for k in kinds]
            fh.write(name + "," + ",".join(cells) + "\n")
    return {"scenarios": sorted(rows), "skipped": skipped,
            "sets": str(_artifact(cfg, "scenario_sets")),
            "table": str(_artifact(cfg, "scenario_table"))}


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "cluster": cmd_cluster,
    "index": cmd_index,
    "eval": cmd_eval,
    "scenario": cmd_scenario,
}

# config keys exposed as dedicated flags (value goes through --set machinery)
_FLAG_KEYS = ("epochs", "batch_size", "lr", "l2", "dropout", "d_c", "seed",
              "r_start", "r_end", "l_m_start", "l_m_end", "epochs_per_increment")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reachped",
        description="Behavior-clustered pedestrian reachability pipeline")
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config key (repeatable)")
    parser.add_argument("--workdir", help="artifact directory (shorthand for --set workdir=...)")
    parser.add_argument("--threads", type=int, help="worker pool cap (or env REACHPED_THREADS)")
    parser.add_argument("--quiet", action="store_true", help="suppress progress lines")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"{name} stage")
        if name == "train":
            for key in _FLAG_KEYS:
                p.add_argument(f"--{key.replace('_', '-')}", dest=f"key_{key}", default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.overrides)
    if args.workdir:
        overrides.append(f"workdir={args.workdir}")
    if args.threads is not None:
        overrides.append(f"threads={args.threads}")
    for key in _FLAG_KEYS:
        value = getattr(args, f"key_{key}", None)
        if value is not None:
            overrides.append(f"{key}={value}")
    try:
        cfg = RunConfig.resolve(config_file=args.config, overrides=overrides)
        workdir = _workdir(cfg)
        progress = None if args.quiet else lambda msg: print(msg, flush=True)
        started = time.time()
        command = COMMANDS[args.command]
        result = command(cfg, progress=progress) if command in (cmd_train, cmd_eval) else command(cfg)
        cfg.write_echo(workdir / f"{args.command}.config")
        print(json.dumps({"command": args.command, "ok": True, "result": result,
                          "seconds": round(time.time() - started, 2)},
                         sort_keys=True, indent=2))
        return 0
    except ReachpedError as exc:
        json.dump({"error": exc.kind, "message": str(exc), "hint": exc.hint},
                  sys.stderr, sort_keys=True)
        sys.stderr.write("\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
