"""Toy transformer encoder with three execution semantics.

The encoder can run on a single device, or distributed across ``P`` logical
devices by splitting the token sequence into contiguous row blocks. Under
distribution each block is synchronised once per layer through an
all-gather of either

* the full partition activations (``FULL_TENSOR`` exchange), or
* ``L`` segment means per partition (``SEGMENT_MEANS`` exchange): the
  column-wise mean of each of ``L`` near-equal token segments.

Attention is asymmetric: queries come from the device's own rows, keys and
values from the augmented matrix (own rows followed by the other devices'
exchanged blocks). With segment means, one summary key stands in for the
``s`` tokens it averages, so its logit optionally receives an additive
``ln(s)`` bias; at segment size one the bias vanishes and the computation
reproduces the full-tensor exchange bit for bit.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import linalg
from .errors import ConfigError, PartitionError, ShapeError, TransportError

WEIGHT_MAGIC = b"SMWT0001"


@dataclass(frozen=True)
class ModelConfig:
    """Encoder hyperparameters. Defaults give ViT-Base geometry at 224px."""

    embed_dim: int = 768
    num_heads: int = 12
    num_layers: int = 12
    mlp_ratio: float = 4.0
    seq_len: int = 197  # token count, class token included
    num_classes: int = 10

    def __post_init__(self):
        if self.embed_dim < 1 or self.num_heads < 1 or self.num_layers < 1:
            raise ConfigError("embed_dim, num_heads and num_layers must be positive")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.seq_len < 1:
            raise ConfigError("seq_len must be at least 1")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    def to_dict(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "num_heads": self.num_heads,
            "num_layers": self.num_layers,
            "mlp_ratio": self.mlp_ratio,
            "seq_len": self.seq_len,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class PartitionSpec:
    """How a sequence is split across devices and summarised per partition.

    The sequence is padded to the next multiple of ``devices`` by repeating
    the final token row, then split into contiguous blocks of
    ``per_device`` rows. Each block is summarised by ``means`` segment
    means over near-equal segments (sizes differ by at most one across the
    block; the leading ``per_device % means`` segments take the larger
    size). ``means == per_device`` is the full-tensor case.
    """

    seq_len: int
    devices: int
    means: int

    def __post_init__(self):
        if self.devices < 1:
            raise ConfigError(f"device count must be at least 1, got {self.devices}")
        if self.seq_len < 1:
            raise ConfigError("seq_len must be at least 1")
        if not 1 <= self.means <= self.per_device:
            raise PartitionError(
                f"means {self.means} outside [1, {self.per_device}] for "
                f"{self.seq_len} tokens on {self.devices} devices"
            )

    @property
    def effective_len(self) -> int:
        return -(-self.seq_len // self.devices) * self.devices

    @property
    def padding(self) -> int:
        return self.effective_len - self.seq_len

    @property
    def per_device(self) -> int:
        return self.effective_len // self.devices

    @property
    def compression_rate(self) -> float:
        return self.effective_len / (self.means * self.devices)

    def segment_sizes(self) -> list[int]:
        return segment_sizes(self.per_device, self.means)


class ExchangeMode(Enum):
    FULL_TENSOR = "voltage"
    SEGMENT_MEANS = "prism"


@dataclass(frozen=True)
class ExecutionPlan:
    """Either single-device execution or a partitioned exchange scheme."""

    partition: PartitionSpec | None = None
    exchange: ExchangeMode | None = None
    multiplicity_bias: bool = True

    def __post_init__(self):
        if (self.partition is None) != (self.exchange is None):
            raise ConfigError("partition and exchange must be given together")
        if self.partition is not None and self.exchange is ExchangeMode.FULL_TENSOR:
            if self.partition.means != self.partition.per_device:
                raise ConfigError(
                    "full-tensor exchange requires means == per-device token count"
                )

    @classmethod
    def local(cls) -> "ExecutionPlan":
        return cls()

    @classmethod
    def segment_means(cls, seq_len: int, devices: int, means: int,
                      multiplicity_bias: bool = True) -> "ExecutionPlan":
        spec = PartitionSpec(seq_len=seq_len, devices=devices, means=means)
        return cls(partition=spec, exchange=ExchangeMode.SEGMENT_MEANS,
                   multiplicity_bias=multiplicity_bias)

    @classmethod
    def full_tensor(cls, seq_len: int, devices: int) -> "ExecutionPlan":
        if devices < 1:
            raise ConfigError(f"device count must be at least 1, got {devices}")
        per_device = -(-seq_len // devices)
        spec = PartitionSpec(seq_len=seq_len, devices=devices, means=per_device)
        return cls(partition=spec, exchange=ExchangeMode.FULL_TENSOR)

    @property
    def is_local(self) -> bool:
        return self.partition is None

    @property
    def mode_name(self) -> str:
        if self.is_local:
            return "local"
        return self.exchange.value

    def describe(self) -> str:
        if self.is_local:
            return "local"
        p = self.partition
        return f"{self.mode_name} P={p.devices} L={p.means} CR={p.compression_rate:g}"


@dataclass(frozen=True)
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    mlp_in: np.ndarray
    mlp_out: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray


@dataclass(frozen=True)
class Weights:
    """Encoder parameters, deterministically derived from a seed."""

    config: ModelConfig
    seed: int
    layers: tuple[LayerWeights, ...]
    final_gamma: np.ndarray
    final_beta: np.ndarray
    head: np.ndarray

    # serialisation order for the flat binary; one entry per layer field
    _LAYER_FIELDS = ("wq", "wk", "wv", "wo", "ln1_gamma", "ln1_beta",
                     "mlp_in", "mlp_out", "ln2_gamma", "ln2_beta")


WEIGHT_SCALE = 0.05


def init_weights(cfg: ModelConfig, seed: int = 0) -> Weights:
    """Gaussian projections (std 0.05), unit layer-norm gains, zero shifts."""
    rng = linalg.make_rng(seed)
    d, h = cfg.embed_dim, cfg.mlp_hidden
    layers = []
    for _ in range(cfg.num_layers):
        layers.append(LayerWeights(
            wq=linalg.seeded_matrix(d, d, WEIGHT_SCALE, rng),
            wk=linalg.seeded_matrix(d, d, WEIGHT_SCALE, rng),
            wv=linalg.seeded_matrix(d, d, WEIGHT_SCALE, rng),
            wo=linalg.seeded_matrix(d, d, WEIGHT_SCALE, rng),
            ln1_gamma=np.ones(d, dtype=linalg.DTYPE),
            ln1_beta=np.zeros(d, dtype=linalg.DTYPE),
            mlp_in=linalg.seeded_matrix(d, h, WEIGHT_SCALE, rng),
            mlp_out=linalg.seeded_matrix(h, d, WEIGHT_SCALE, rng),
            ln2_gamma=np.ones(d, dtype=linalg.DTYPE),
            ln2_beta=np.zeros(d, dtype=linalg.DTYPE),
        ))
    return Weights(
        config=cfg,
        seed=seed,
        layers=tuple(layers),
        final_gamma=np.ones(d, dtype=linalg.DTYPE),
        final_beta=np.zeros(d, dtype=linalg.DTYPE),
        head=linalg.seeded_matrix(d, cfg.num_classes, WEIGHT_SCALE, rng),
    )


def _weight_arrays(w: Weights) -> list[np.ndarray]:
    arrays = []
    for layer in w.layers:
        for name in Weights._LAYER_FIELDS:
            arrays.append(getattr(layer, name))
    arrays.extend([w.final_gamma, w.final_beta, w.head])
    return arrays


def save_weights(w: Weights, path) -> None:
    """Write a magic/header/payload container.

    Header is JSON (config, seed, per-array shapes in serialisation order);
    payload is the concatenation of all arrays as little-endian float32.
    """
    arrays = _weight_arrays(w)
    header = json.dumps({
        "config": w.config.to_dict(),
        "seed": w.seed,
        "shapes": [list(a.shape) for a in arrays],
    }).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_weights(path) -> Weights:
    with open(path, "rb") as fh:
        magic = fh.read(len(WEIGHT_MAGIC))
        if magic != WEIGHT_MAGIC:
            raise ShapeError(f"not a weight container: bad magic {magic!r}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        cfg = ModelConfig.from_dict(header["config"])
        shapes = [tuple(s) for s in header["shapes"]]
        arrays = []
        for shape in shapes:
            count = int(np.prod(shape))
            buf = fh.read(4 * count)
            if len(buf) != 4 * count:
                raise ShapeError("weight container truncated")
            arrays.append(np.frombuffer(buf, dtype="<f4").astype(linalg.DTYPE).reshape(shape))
    n_fields = len(Weights._LAYER_FIELDS)
    layers = []
    for i in range(cfg.num_layers):
        chunk = arrays[i * n_fields:(i + 1) * n_fields]
        layers.append(LayerWeights(**dict(zip(Weights._LAYER_FIELDS, chunk))))
    final_gamma, final_beta, head = arrays[cfg.num_layers * n_fields:]
    return Weights(config=cfg, seed=header["seed"], layers=tuple(layers),
                   final_gamma=final_gamma, final_beta=final_beta, head=head)


def segment_sizes(tokens: int, segments: int) -> list[int]:
    """Near-equal segment sizes; the leading remainder segments are larger."""
    if not 1 <= segments <= tokens:
        raise PartitionError(f"cannot cut {tokens} tokens into {segments} segments")
    base, extra = divmod(tokens, segments)
    return [base + 1] * extra + [base] * (segments - extra)


def pad_tokens(x: np.ndarray, spec: PartitionSpec) -> np.ndarray:
    """Extend to the partitionable length by repeating the final row."""
    if spec.padding == 0:
        return x
    return np.vstack([x, np.repeat(x[-1:, :], spec.padding, axis=0)])


def partition_input(x: np.ndarray, spec: PartitionSpec) -> list[np.ndarray]:
    """Split into ``devices`` contiguous row blocks of ``per_device`` rows.

    Concatenating the blocks and dropping the padding reconstructs ``x``
    exactly. The class token (row 0) lands in partition 0.
    """
    if x.shape[0] != spec.seq_len:
        raise ShapeError(f"input has {x.shape[0]} rows, spec expects {spec.seq_len}")
    padded = pad_tokens(x, spec)
    n = spec.per_device
    return [padded[p * n:(p + 1) * n] for p in range(spec.devices)]


def segment_means(x_p: np.ndarray, segments: int) -> np.ndarray:
    """Column-wise mean of each of ``segments`` near-equal row blocks.

    Means accumulate in float64. A size-one segment reproduces its row bit
    for bit, so ``segments == len(x_p)`` is the identity.
    """
    sizes = segment_sizes(x_p.shape[0], segments)
    out = np.empty((segments, x_p.shape[1]), dtype=linalg.DTYPE)
    start = 0
    for i, size in enumerate(sizes):
        block = x_p[start:start + size].astype(np.float64)
        out[i] = (block.sum(axis=0) / size).astype(linalg.DTYPE)
        start += size
    return out


def augment(x_p: np.ndarray, others: list[np.ndarray]) -> np.ndarray:
    """Stack own rows first, then the other devices' exchanged blocks.

    ``others`` must already be ordered by ascending device index with the
    caller's own entry removed.
    """
    for i, z in enumerate(others):
        if z.ndim != 2 or z.shape[1] != x_p.shape[1]:
            raise ShapeError(
                f"exchanged block {i} has shape {z.shape}, expected columns {x_p.shape[1]}"
            )
    if not others:
        return x_p
    return np.vstack([x_p, *others])


def multiplicity_bias_vector(own_rows: int, peer_sizes: list[list[int]]) -> np.ndarray:
    """Additive key-logit bias: 0 for real tokens, ln(s) for a mean of s."""
    parts = [np.zeros(own_rows, dtype=np.float64)]
    parts.extend(np.log(np.asarray(sizes, dtype=np.float64)) for sizes in peer_sizes)
    return np.concatenate(parts)


def _multi_head_attention(q_src: np.ndarray, kv_src: np.ndarray, lw: LayerWeights,
                          cfg: ModelConfig, key_bias: np.ndarray | None) -> np.ndarray:
    q = linalg.matmul(q_src, lw.wq)
    k = linalg.matmul(kv_src, lw.wk)
    v = linalg.matmul(kv_src, lw.wv)
    scale = linalg.DTYPE(1.0 / np.sqrt(cfg.head_dim))
    bias_row = None if key_bias is None else key_bias[None, :]
    out = np.empty_like(q)
    for h in range(cfg.num_heads):
        lo, hi = h * cfg.head_dim, (h + 1) * cfg.head_dim
        logits = linalg.matmul(q[:, lo:hi], k[:, lo:hi].T) * scale
        probs = linalg.softmax_rows(logits, bias=bias_row)
        out[:, lo:hi] = linalg.matmul(probs, v[:, lo:hi])
    return linalg.matmul(out, lw.wo)


def encoder_block(x_p: np.ndarray, x_hat: np.ndarray, lw: LayerWeights,
                  cfg: ModelConfig, key_bias: np.ndarray | None = None) -> np.ndarray:
    """Pre-norm block: LN, attention, residual, LN, MLP, residual.

    Queries are built from ``x_p``; keys and values from ``x_hat``. Both go
    through the same first layer norm.
    """
    if x_hat.shape[1] != x_p.shape[1]:
        raise ShapeError(f"augmented width {x_hat.shape[1]} != partition width {x_p.shape[1]}")
    q_src = linalg.layer_norm(x_p, lw.ln1_gamma, lw.ln1_beta)
    kv_src = linalg.layer_norm(x_hat, lw.ln1_gamma, lw.ln1_beta)
    h = x_p + _multi_head_attention(q_src, kv_src, lw, cfg, key_bias)
    mlp_src = linalg.layer_norm(h, lw.ln2_gamma, lw.ln2_beta)
    mlp = linalg.matmul(linalg.gelu(linalg.matmul(mlp_src, lw.mlp_in)), lw.mlp_out)
    return h + mlp


def forward_local(x: np.ndarray, w: Weights, cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Single-device forward pass: returns (features, class-token logits)."""
    if x.shape != (cfg.seq_len, cfg.embed_dim):
        raise ShapeError(f"input shape {x.shape} != ({cfg.seq_len}, {cfg.embed_dim})")
    state = x
    for lw in w.layers:
        state = encoder_block(state, state, lw, cfg)
    features = linalg.layer_norm(state, w.final_gamma, w.final_beta)
    logits = linalg.matmul(features[:1], w.head)[0]
    return features, logits


class CountingCollective:
    """All-gather stand-in that only records exchanged element counts."""

    def __init__(self):
        self.log: list[list[int]] = []  # per block: elements received per device

    def exchange(self, blocks: list[np.ndarray]) -> list[np.ndarray]:
        counts = [b.size for b in blocks]
        if len(set(counts)) > 1:
            raise TransportError(f"participants exchanged unequal payloads: {counts}")
        total = sum(counts)
        self.log.append([total - c for c in counts])
        return blocks


@dataclass
class DistributedResult:
    features: np.ndarray          # original-length rows, padding dropped
    logits: np.ndarray
    comm_log: list[list[int]]     # per block: elements received per device
    plan: ExecutionPlan


def forward_distributed(x: np.ndarray, plan: ExecutionPlan, w: Weights,
                        cfg: ModelConfig, comm=None) -> DistributedResult:
    """Partitioned forward pass over lockstep logical devices.

    Per layer, every device summarises its current block input (full rows
    under full-tensor exchange by taking size-one segments), one all-gather
    distributes the summaries, and each device runs the encoder block on
    its own rows against the augmented keys. Device 0 owns the class token
    and produces the logits. Devices advance in lockstep, so the result is
    independent of any real scheduling.
    """
    if plan.is_local:
        raise ConfigError("forward_distributed needs a distributed plan")
    spec = plan.partition
    if spec.seq_len != cfg.seq_len:
        raise ConfigError(f"plan sequence length {spec.seq_len} != config {cfg.seq_len}")
    if comm is None:
        comm = CountingCollective()

    parts = partition_input(x, spec)
    devices = spec.devices
    sizes = spec.segment_sizes()
    use_bias = plan.multiplicity_bias and max(sizes) > 1
    key_bias = None
    if use_bias:
        peer_sizes = [sizes] * (devices - 1)
        key_bias = multiplicity_bias_vector(spec.per_device, peer_sizes)

    states = list(parts)
    for lw in w.layers:
        blocks = [segment_means(states[p], spec.means) for p in range(devices)]
        gathered = comm.exchange(blocks)
        new_states = []
        for p in range(devices):
            others = [gathered[j] for j in range(devices) if j != p]
            x_hat = augment(states[p], others)
            new_states.append(encoder_block(states[p], x_hat, lw, cfg, key_bias))
        states = new_states

    normed = [linalg.layer_norm(s, w.final_gamma, w.final_beta) for s in states]
    features = np.vstack(normed)[:cfg.seq_len]
    logits = linalg.matmul(normed[0][:1], w.head)[0]
    return DistributedResult(features=features, logits=logits,
                             comm_log=comm.log if hasattr(comm, "log") else [],
                             plan=plan)


def output_deviation(a: np.ndarray, b: np.ndarray) -> float:
    """Relative Frobenius deviation ``|a - b| / |b|``; zero iff equal."""
    if a.shape != b.shape:
        raise ShapeError(f"deviation operands differ in shape: {a.shape} vs {b.shape}")
    denom = linalg.frobenius_norm(b)
    num = linalg.frobenius_norm(a.astype(np.float64) - b.astype(np.float64))
    if num == 0.0:
        return 0.0
    if denom == 0.0:
        return float("inf")
    return num / denom
