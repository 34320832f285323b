"""Flat key=value run configuration with provenance tracking.

Precedence: command-line overrides > config file > defaults. The fully
resolved configuration is echoed next to every command's outputs; the
echo is itself a valid config file, so any run can be reproduced from
its echo alone.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

from .errors import ContractError

DEFAULTS = {
    # paths
    "workdir": "runs/default",
    "data_csv": "",
    "labels_csv": "",
    # ingest
    "d_c": 50,
    "frame_dt": 0.1,
    "columns": "track_id,frame,x,y,vx,vy,ax,ay",
    # split / reproducibility
    "seed": 1234,
    # encoder architecture
    "d_model": 128,
    "n_layers": 3,
    "n_heads": 8,
    "ff_dim": 256,
    "dropout": 0.1,
    # training
    "epochs": 37,
    "batch_size": 256,
    "lr": 5.011e-4,
    "l2": 0.05,
    "r_start": 0.15,
    "r_end": 0.45,
    "l_m_start": 3.0,
    "l_m_end": 7.0,
    "epochs_per_increment": 5,
    # clustering
    "min_cluster_size": 15,
    "min_samples": 5,
    # ann
    "n_trees": 10,
    "leaf_capacity": 32,
    "ann_k": 10,
    # reachability / evaluation
    "horizon": 50,
    "noise_w": 0.005,
    "init_pos_gen": 0.05,
    "init_vel_gen": 0.05,
    "max_order": 5,
    "memory_cap": 20000,
    "k_obs": 10,
    "radius": 1.5,
    "heading_tol_deg": 45.0,
    "dt": 0.1,
    "methods": "baseline_all,cluster_raw,cluster_encoded",
    # synthetic data
    "synth_tracks": 240,
    "synth_map_size": 30.0,
    "synth_min_len": 60,
    "synth_max_len": 150,
    "synth_vel_noise": 0.006,
    "synth_turn_rate": 0.05,
    "synth_seed": 0,
    # execution
    "threads": 0,  # 0: use REACHPED_THREADS or 1
}


def _convert(key: str, raw: str):
    if key.startswith("scenario."):
        return raw
    if key not in DEFAULTS:
        raise ContractError(f"unknown config key {key!r}")
    default = DEFAULTS[key]
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ContractError(f"config key {key!r} expects a number, got {raw!r}") from None
    return raw


def _parse_lines(text):
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ContractError(f"config line {lineno}: expected key = value, got {line!r}")
        key, raw = body.split("=", 1)
        yield key.strip(), raw.strip()


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    @classmethod
    def resolve(cls, config_file=None, overrides=None) -> "RunConfig":
        values = dict(DEFAULTS)
        provenance = {k: "default" for k in DEFAULTS}
        if config_file:
            with open(config_file, encoding="utf-8") as fh:
                for key, raw in _parse_lines(fh.read()):
                    values[key] = _convert(key, raw)
                    provenance[key] = "file"
        for item in overrides or []:
            if "=" not in item:
                raise ContractError(f"override must look like key=value, got {item!r}")
            key, raw = item.split("=", 1)
            key, raw = key.strip(), raw.strip()
            values[key] = _convert(key, raw)
            provenance[key] = "flag"
        return cls(values=values, provenance=provenance)

    def get(self, key: str):
        return self.values[key]

    def scenario_map(self) -> dict:
        prefix = "scenario."
        return {k[len(prefix):]: v for k, v in sorted(self.values.items()) if k.startswith(prefix)}

    def method_kinds(self) -> list:
        return [m.strip() for m in str(self.values["methods"]).split(",") if m.strip()]

    def columns_schema(self) -> dict:
        from .data import DEFAULT_COLUMNS

        names = [c.strip() for c in str(self.values["columns"]).split(",")]
        if len(names) != len(DEFAULT_COLUMNS):
            raise ContractError(
                f"columns must list {len(DEFAULT_COLUMNS)} names in the order "
                f"{','.join(DEFAULT_COLUMNS)}")
        return dict(zip(DEFAULT_COLUMNS, names))

    def threads(self) -> int:
        n = int(self.values["threads"])
        if n <= 0:
            n = int(os.environ.get("REACHPED_THREADS", "1") or "1")
        return max(n, 1)

    def echo_text(self) -> str:
        lines = ["# resolved run configuration; overridden defaults are marked"]
        for key in sorted(self.values):
            source = self.provenance.get(key, "file")
            mark = "" if source == "default" else f"  # from {source}"
            lines.append(f"{key} = {self.values[key]}{mark}")
        return "\n".join(lines) + "\n"

    def write_echo(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.echo_text())
