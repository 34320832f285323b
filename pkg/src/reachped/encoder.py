"""Transformer trajectory encoder and its unsupervised denoising training.

The encoder lifts 6-feature trajectory chunks into 128-dimensional
sequence embeddings. Training corrupts the input by zeroing random
feature spans and asks the model to reproduce the clean values; the
loss covers every non-padded cell, not just the corrupted ones.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .data import Standardizer
from .errors import ContractError, DimensionError, FormatError, NonFiniteError
from .nn.layers import BatchNorm, xavier_uniform
from .nn.tensor import Tensor
from .rng import named_stream


@dataclass
class EncoderConfig:
    d_model: int = 128
    n_layers: int = 3
    n_heads: int = 8
    ff_dim: int = 256
    dropout: float = 0.1
    input_dim: int = 6
    d_c: int = 50

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ContractError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")


@dataclass
class MaskingSchedule:
    """Curriculum for the denoising task: both the corrupted fraction and
    the mean corrupted-span length ratchet up as training progresses."""

    r_start: float = 0.15
    r_end: float = 0.45
    l_m_start: float = 3.0
    l_m_end: float = 7.0
    epochs_per_increment: int = 5

    def at_epoch(self, epoch: int, total_epochs: int):
        n_stages = max(1, (total_epochs - 1) // self.epochs_per_increment)
        stage = min(epoch // self.epochs_per_increment, n_stages)
        frac = stage / n_stages
        r = self.r_start + (self.r_end - self.r_start) * frac
        l_m = self.l_m_start + (self.l_m_end - self.l_m_start) * frac
        return r, l_m


@dataclass
class TrainConfig:
    epochs: int = 37
    batch_size: int = 256
    lr: float = 5.011e-4
    l2: float = 0.05
    seed: int = 0
    metrics_every: int = 1


def sinusoidal_position_encoding(length: int, dim: int) -> np.ndarray:
    """Fixed sine/cosine positional table of shape (length, dim)."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange((dim + 1) // 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / dim)
    table = np.zeros((length, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : dim // 2])
    return table.astype(np.float32)


def sample_mask(shape, r: float, l_m: float, rng: np.random.Generator, padding=None) -> np.ndarray:
    """Span-corruption keep-mask for one chunk (1 = keep, 0 = corrupt).

    Each feature column is an independent two-state chain whose corrupted
    spans have geometric lengths with mean ``l_m`` and whose kept spans
    have mean ``l_m * (1 - r) / r``, giving corrupted fraction ``r``.
    Padded rows are never corrupted.
    """
    if not 0.0 < r < 1.0:
        raise ContractError(f"masking ratio must be in (0, 1), got {r}")
    if l_m < 1.0:
        raise ContractError(f"mean span length must be >= 1, got {l_m}")
    t, f = shape
    keep = _sample_mask_batch(1, t, f, r, l_m, rng)[0]
    if padding is not None:
        keep[np.asarray(padding) == 0] = 1
    return keep


def _sample_mask_batch(n_batch, n_time, n_feat, r, l_m, rng):
    p_leave_masked = 1.0 / l_m
    p_leave_kept = r / (l_m * (1.0 - r))
    cols = n_batch * n_feat
    masked = rng.random(cols) < r
    out = np.empty((cols, n_time), dtype=bool)
    for t in range(n_time):
        out[:, t] = masked
        u = rng.random(cols)
        flip = np.where(masked, u < p_leave_masked, u < p_leave_kept)
        masked = masked ^ flip
    keep = (~out).reshape(n_batch, n_feat, n_time).transpose(0, 2, 1)
    return np.ascontiguousarray(keep, dtype=np.uint8)


class _EncoderLayer:
    def __init__(self, cfg: EncoderConfig, rng, prefix: str, params: dict):
        d = cfg.d_model
        self.cfg = cfg
        self.head_dim = d // cfg.n_heads

        def add_linear(name, fan_in, fan_out):
            w = nn.param(xavier_uniform(rng, fan_in, fan_out))
            b = nn.param(np.zeros(fan_out, dtype=np.float32))
            params[f"{prefix}.{name}.w"] = w
            params[f"{prefix}.{name}.b"] = b
            return w, b

        self.wq = add_linear("attn_q", d, d)
        self.wk = add_linear("attn_k", d, d)
        self.wv = add_linear("attn_v", d, d)
        self.wo = add_linear("attn_o", d, d)
        self.ff1 = add_linear("ff1", d, cfg.ff_dim)
        self.ff2 = add_linear("ff2", cfg.ff_dim, d)
        self.bn1 = BatchNorm(d)
        self.bn2 = BatchNorm(d)
        params[f"{prefix}.bn1.gamma"] = self.bn1.gamma
        params[f"{prefix}.bn1.beta"] = self.bn1.beta
        params[f"{prefix}.bn2.gamma"] = self.bn2.gamma
        params[f"{prefix}.bn2.beta"] = self.bn2.beta

    def _attention(self, x: Tensor, key_mask: np.ndarray, training, rng):
        b, t, d = x.shape
        h, dh = self.cfg.n_heads, self.head_dim

        def split_heads(v):
            return nn.transpose(nn.reshape(v, (b, t, h, dh)), (0, 2, 1, 3))

        q = split_heads(nn.linear(x, *self.wq))
        k = split_heads(nn.linear(x, *self.wk))
        v = split_heads(nn.linear(x, *self.wv))
        scores = nn.matmul(q, nn.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
        attn = nn.softmax_lastdim(scores, mask=key_mask[:, None, None, :])
        ctx = nn.matmul(attn, v)
        ctx = nn.reshape(nn.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
        return nn.linear(ctx, *self.wo)

    def forward(self, x: Tensor, key_mask, training, rng, update_bn, batch_stats):
        p = self.cfg.dropout
        a = nn.dropout(self._attention(x, key_mask, training, rng), p, training, rng)
        x = self.bn1(x + a, batch_stats, valid_mask=key_mask, update_stats=training and update_bn)
        f = nn.linear(nn.relu(nn.linear(x, *self.ff1)), *self.ff2)
        x = self.bn2(x + nn.dropout(f, p, training, rng), batch_stats,
                     valid_mask=key_mask, update_stats=training and update_bn)
        return x


class TrajectoryEncoder:
    """Stack of attention/feed-forward layers over embedded chunks."""

    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        rng = named_stream(seed, "init")
        self.params["embed.w"] = nn.param(xavier_uniform(rng, cfg.input_dim, cfg.d_model))
        self.params["embed.b"] = nn.param(np.zeros(cfg.d_model, dtype=np.float32))
        self.pe = sinusoidal_position_encoding(cfg.d_c, cfg.d_model)
        self.layers = [_EncoderLayer(cfg, rng, f"layers.{i}", self.params) for i in range(cfg.n_layers)]
        self.params["head.w"] = nn.param(xavier_uniform(rng, cfg.d_model, cfg.input_dim))
        self.params["head.b"] = nn.param(np.zeros(cfg.input_dim, dtype=np.float32))

    # -- forward --------------------------------------------------------

    def embed(self, values) -> Tensor:
        """Project (batch, d_c, input_dim) features and add positional codes."""
        values = np.asarray(values)
        if values.ndim != 3 or values.shape[2] != self.cfg.input_dim:
            raise DimensionError(f"expected (batch, d_c, {self.cfg.input_dim}), got {values.shape}")
        if values.shape[1] != self.cfg.d_c:
            raise DimensionError(f"expected chunk length {self.cfg.d_c}, got {values.shape[1]}")
        x = Tensor(values.astype(np.float32, copy=False))
        return nn.linear(x, self.params["embed.w"], self.params["embed.b"]) + Tensor(self.pe)

    def encode(self, values, padding, training=False, rng=None, update_bn=True,
               batch_stats=None) -> Tensor:
        """Run the full stack; the output carries a final ReLU.

        ``batch_stats`` selects batch-wise normalization statistics
        (default: follow ``training``); running statistics otherwise.
        """
        key_mask = np.asarray(padding, dtype=np.uint8)
        if batch_stats is None:
            batch_stats = training
        x = self.embed(values)
        for layer in self.layers:
            x = layer.forward(x, key_mask, training, rng, update_bn, batch_stats)
        return nn.relu(x)

    def reconstruct(self, h_out: Tensor, training=False, rng=None) -> Tensor:
        """Map encoded embeddings back to feature space (with dropout)."""
        h = nn.dropout(h_out, self.cfg.dropout, training, rng)
        return nn.linear(h, self.params["head.w"], self.params["head.b"])

    # -- persistence ------------------------------------------------------

    def state_arrays(self) -> dict:
        out = {name: p.data for name, p in self.params.items()}
        for i, layer in enumerate(self.layers):
            for tag, bn in (("bn1", layer.bn1), ("bn2", layer.bn2)):
                out[f"layers.{i}.{tag}.running_mean"] = bn.running_mean
                out[f"layers.{i}.{tag}.running_var"] = bn.running_var
        return out

    def load_state_arrays(self, arrays: dict):
        own = self.state_arrays()
        missing = sorted(set(own) - set(arrays))
        if missing:
            raise FormatError(f"checkpoint is missing tensors: {missing[:4]}")
        for name, p in self.params.items():
            arr = np.asarray(arrays[name], dtype=np.float32)
            if arr.shape != p.data.shape:
                raise FormatError(
                    f"checkpoint tensor {name!r} has shape {arr.shape}, model expects {p.data.shape}")
            p.data = arr.copy()
        for i, layer in enumerate(self.layers):
            for tag, bn in (("bn1", layer.bn1), ("bn2", layer.bn2)):
                bn.running_mean = np.asarray(arrays[f"layers.{i}.{tag}.running_mean"], dtype=np.float64).copy()
                bn.running_var = np.asarray(arrays[f"layers.{i}.{tag}.running_var"], dtype=np.float64).copy()
                bn.n_updates = 1

    def snapshot(self) -> dict:
        return {name: arr.copy() for name, arr in self.state_arrays().items()}


@dataclass
class EpochMetrics:
    epoch: int
    train_mse: float
    val_mse: float
    r: float
    l_m: float


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_mse", "val_mse", "r", "l_m"])
            for m in self.rows:
                writer.writerow([m.epoch, repr(m.train_mse), repr(m.val_mse), repr(m.r), repr(m.l_m)])


def _stack_chunks(chunks, standardizer: Standardizer):
    values = np.stack([standardizer.transform(c.values, c.padding) for c in chunks])
    padding = np.stack([c.padding for c in chunks]).astype(np.uint8)
    return values, padding


def _masked_batch(values, padding, r, l_m, rng):
    b, t, f = values.shape
    keep = _sample_mask_batch(b, t, f, r, l_m, rng)
    keep[padding == 0] = 1
    return values * keep, keep


def _batch_loss(encoder, values, padding, r, l_m, mask_rng, drop_rng, training):
    noised, _ = _masked_batch(values, padding, r, l_m, mask_rng)
    h = encoder.encode(noised, padding, training=training, rng=drop_rng,
                       update_bn=training, batch_stats=True)
    pred = encoder.reconstruct(h, training=training, rng=drop_rng)
    cell_mask = np.repeat(padding[:, :, None], values.shape[2], axis=2)
    return nn.masked_mse(pred, values, cell_mask), int(cell_mask.sum())


def evaluate_mse(encoder, values, padding, r, l_m, seed, batch_size=256, tag="valmask"):
    """Denoising MSE at a fixed (r, l_m) setting: no dropout, batch-wise
    normalization statistics (left unchanged), fixed masking stream."""
    total, cells = 0.0, 0
    with nn.no_grad():
        for i, start in enumerate(range(0, len(values), batch_size)):
            sl = slice(start, start + batch_size)
            loss, n = _batch_loss(encoder, values[sl], padding[sl], r, l_m,
                                  named_stream(seed, tag, i), None, training=False)
            total += loss.item() * n
            cells += n
    return total / max(cells, 1)


def train(encoder: TrajectoryEncoder, train_chunks, val_chunks, standardizer: Standardizer,
          schedule: MaskingSchedule, tcfg: TrainConfig, log_path=None, progress=None):
    """Run the denoising curriculum; returns the TrainingLog.

    Aborts on a non-finite loss, restoring the last epoch-end weights
    before raising.
    """
    train_v, train_p = _stack_chunks(train_chunks, standardizer)
    val_v, val_p = _stack_chunks(val_chunks, standardizer) if val_chunks else (train_v[:0], train_p[:0])
    state = nn.AdamState(lr=tcfg.lr, weight_decay=tcfg.l2)
    log = TrainingLog()
    last_good = encoder.snapshot()

    for epoch in range(tcfg.epochs):
        r, l_m = schedule.at_epoch(epoch, tcfg.epochs)
        order = named_stream(tcfg.seed, "shuffle", epoch).permutation(len(train_v))
        total, cells = 0.0, 0
        for bi, start in enumerate(range(0, len(order), tcfg.batch_size)):
            idx = order[start:start + tcfg.batch_size]
            loss, n = _batch_loss(
                encoder, train_v[idx], train_p[idx], r, l_m,
                named_stream(tcfg.seed, "mask", epoch, bi),
                named_stream(tcfg.seed, "dropout", epoch, bi),
                training=True,
            )
            if not np.isfinite(loss.item()):
                encoder.load_state_arrays(last_good)
                raise NonFiniteError(
                    f"training loss became non-finite at epoch {epoch} batch {bi}; "
                    f"weights restored to end of epoch {epoch - 1}")
            nn.backward(loss)
            nn.adam_step(encoder.params, state)
            nn.zero_grads(encoder.params)
            total += loss.item() * n
            cells += n
        train_mse = total / max(cells, 1)
        if len(val_v) and epoch % tcfg.metrics_every == 0:
            val_mse = evaluate_mse(encoder, val_v, val_p, r, l_m, tcfg.seed)
        else:
            val_mse = float("nan")
        log.rows.append(EpochMetrics(epoch, train_mse, val_mse, r, l_m))
        last_good = encoder.snapshot()
        if progress:
            progress(f"epoch {epoch}: train_mse={train_mse:.5f} val_mse={val_mse:.5f} r={r:.3f} l_m={l_m:.2f}")

    if log_path:
        log.write_csv(log_path)
    return log


def encode_dataset(encoder: TrajectoryEncoder, chunks, standardizer: Standardizer, batch_size=256):
    """Deterministic evaluation-mode encoding; returns (ids, (n, d_c, d_model))."""
    if not chunks:
        return [], np.zeros((0, encoder.cfg.d_c, encoder.cfg.d_model), dtype=np.float32)
    ids = [c.chunk_id for c in chunks]
    values, padding = _stack_chunks(chunks, standardizer)
    outputs = []
    with nn.no_grad():
        for start in range(0, len(values), batch_size):
            sl = slice(start, start + batch_size)
            h = encoder.encode(values[sl], padding[sl], training=False)
            outputs.append(h.data)
    return ids, np.concatenate(outputs, axis=0)


def save_encoder(path, encoder: TrajectoryEncoder, standardizer: Standardizer, extra_meta=None):
    meta = {"encoder": asdict(encoder.cfg), "standardizer": standardizer.to_dict()}
    meta.update(extra_meta or {})
    nn.save_checkpoint(path, encoder.state_arrays(), meta)


def load_encoder(path):
    """Rebuild the encoder and standardizer from a checkpoint."""
    arrays, meta = nn.load_checkpoint(path)
    cfg = EncoderConfig(**meta["encoder"])
    encoder = TrajectoryEncoder(cfg, seed=0)
    encoder.load_state_arrays(arrays)
    standardizer = Standardizer.from_dict(meta["standardizer"])
    return encoder, standardizer, meta
