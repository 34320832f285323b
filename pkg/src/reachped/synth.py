"""Bundled synthetic pedestrian world with three behavior modes.

Provides CI- and demo-scale data without external datasets: straight
walkers, steady left-turners, and periodic slow-go pedestrians, all
with bounded per-step velocity perturbations so that reachability with
a modest noise bound stays sound.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import RawTrack, chunk_spans
from .rng import named_stream

MODES = ("constant_velocity", "turning", "stop_and_go")


@dataclass
class SynthConfig:
    n_tracks: int = 240
    map_size: float = 30.0
    dt: float = 0.1
    min_len: int = 60
    max_len: int = 150
    vel_noise: float = 0.006      # per-step uniform velocity perturbation bound
    turn_rate: float = 0.08       # radians per step for the turning mode
    turn_rate_std: float = 0.003
    stop_go_period: int = 70      # steps per slow-go cycle
    stop_go_depth: float = 0.30   # relative speed modulation amplitude
    seed: int = 0


def _rotation(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def generate_tracks(cfg: SynthConfig):
    """Returns (tracks, {track_id: mode})."""
    rng = named_stream(cfg.seed, "synth")
    tracks = []
    mode_of = {}
    for i in range(cfg.n_tracks):
        mode = MODES[i % len(MODES)]
        track_id = f"p{i:04d}"
        length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        start = rng.uniform(2.0, cfg.map_size - 2.0, size=2)
        heading = rng.uniform(0.0, 2.0 * np.pi)
        u = np.array([np.cos(heading), np.sin(heading)])

        pos = np.empty((length, 2))
        vel = np.empty((length, 2))
        pos[0] = start
        if mode == "constant_velocity":
            speed = float(np.clip(rng.normal(1.5, 0.15), 1.1, 1.9))
            vel[0] = speed * u
            for k in range(1, length):
                pos[k] = pos[k - 1] + cfg.dt * vel[k - 1]
                vel[k] = vel[k - 1] + rng.uniform(-cfg.vel_noise, cfg.vel_noise, 2)
        elif mode == "turning":
            speed = float(np.clip(rng.normal(1.2, 0.1), 0.95, 1.45))
            omega = float(np.clip(rng.normal(cfg.turn_rate, cfg.turn_rate_std),
                                  cfg.turn_rate - 3 * cfg.turn_rate_std,
                                  cfg.turn_rate + 3 * cfg.turn_rate_std))
            rot = _rotation(omega)
            vel[0] = speed * u
            for k in range(1, length):
                pos[k] = pos[k - 1] + cfg.dt * vel[k - 1]
                vel[k] = rot @ vel[k - 1] + rng.uniform(-cfg.vel_noise, cfg.vel_noise, 2)
        else:  # stop_and_go
            base = float(np.clip(rng.normal(0.75, 0.07), 0.58, 0.95))
            phase = rng.uniform(0.0, 2.0 * np.pi)
            omega = 2.0 * np.pi / cfg.stop_go_period

            def speed_at(k):
                return base * (1.0 - cfg.stop_go_depth + cfg.stop_go_depth * np.cos(omega * k + phase))

            vel[0] = speed_at(0) * u
            for k in range(1, length):
                pos[k] = pos[k - 1] + cfg.dt * vel[k - 1]
                vel[k] = speed_at(k) * u + rng.uniform(-cfg.vel_noise, cfg.vel_noise, 2)

        acc = np.empty_like(vel)
        acc[1:] = (vel[1:] - vel[:-1]) / cfg.dt
        acc[0] = acc[1]
        values = np.concatenate([pos, vel, acc], axis=1)
        frames = np.arange(length, dtype=np.int64)
        tracks.append(RawTrack(track_id, frames, values, dt=cfg.dt))
        mode_of[track_id] = mode
    return tracks, mode_of


def write_tracks_csv(path, tracks):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["track_id", "frame", "x", "y", "vx", "vy", "ax", "ay"])
        for t in tracks:
            for frame, row in zip(t.frames, t.values):
                writer.writerow([t.track_id, int(frame)] + [repr(float(v)) for v in row])


def write_chunk_labels_csv(path, tracks, mode_of, d_c: int):
    """Per-chunk behavior labels, using the same chunk boundaries as ingest."""
    with open(path, "w", newline="") as fh:
        fh.write("chunk_id,label\n")
        for t in tracks:
            for start, _ in chunk_spans(len(t), d_c):
                fh.write(f"{t.track_id}:{int(t.frames[start])},{mode_of[t.track_id]}\n")
