"""Closed-form compute and communication accounting.

Conventions, also echoed by the CLI report:

* one multiply-accumulate counts as 2 FLOPs;
* the token embedding projection (one dense D x D map per token row) is
  included and is partitioned across devices like the encoder itself;
* the classification head, softmax, layer norms, biases and GELU are
  excluded as conventionally negligible.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError
from .model import ExchangeMode, ExecutionPlan, ModelConfig


@dataclass(frozen=True)
class FlopsReport:
    label: str
    devices: int
    gflops_per_device: float
    comp_speedup_pct: float | None
    cr: float | None
    comm_speedup_pct: float | None
    comm_elements_per_block: int


def compression_rate(seq_len: int, means: int, devices: int) -> float:
    """Padded sequence length over total exchanged mean count."""
    plan = ExecutionPlan.segment_means(seq_len, devices, means)
    return plan.partition.compression_rate


def _query_and_key_rows(cfg: ModelConfig, plan: ExecutionPlan) -> tuple[int, int]:
    if plan.is_local:
        return cfg.seq_len, cfg.seq_len
    spec = plan.partition
    if plan.exchange is ExchangeMode.FULL_TENSOR:
        return spec.per_device, spec.effective_len
    return spec.per_device, spec.per_device + (spec.devices - 1) * spec.means


def comm_elements_per_block(cfg: ModelConfig, plan: ExecutionPlan) -> int:
    """Elements received per device per encoder block."""
    if plan.is_local:
        return 0
    spec = plan.partition
    if plan.exchange is ExchangeMode.FULL_TENSOR:
        return (spec.devices - 1) * spec.per_device * cfg.embed_dim
    return (spec.devices - 1) * spec.means * cfg.embed_dim


def sent_elements_per_block(cfg: ModelConfig, plan: ExecutionPlan) -> int:
    """Elements each device contributes to one all-gather."""
    if plan.is_local:
        return 0
    spec = plan.partition
    if plan.exchange is ExchangeMode.FULL_TENSOR:
        return spec.per_device * cfg.embed_dim
    return spec.means * cfg.embed_dim


def flops_per_device(cfg: ModelConfig, plan: ExecutionPlan) -> float:
    """Analytic forward-pass GFLOPs on one device for one sample."""
    rows, keys = _query_and_key_rows(cfg, plan)
    d = cfg.embed_dim
    hidden = cfg.mlp_hidden
    per_layer_macs = (
        rows * d * d            # query projection
        + 2 * keys * d * d      # key and value projections
        + 2 * rows * keys * d   # attention scores and attention-times-value
        + rows * d * d          # output projection
        + 2 * rows * d * hidden  # two-layer MLP
    )
    embed_macs = rows * d * d
    total_macs = cfg.num_layers * per_layer_macs + embed_macs
    return 2.0 * total_macs / 1e9


def speedups(single_gflops: float, dist_gflops: float,
             cr: float | None) -> tuple[float, float | None]:
    """Percent compute saving vs the one-device run, and the communication
    saving implied by the compression rate."""
    if single_gflops <= 0:
        raise ConfigError("single-device GFLOPs must be positive")
    comp = 100.0 * (1.0 - dist_gflops / single_gflops)
    comm = None if cr is None else 100.0 * (cr - 1.0) / cr
    return comp, comm


def build_report(cfg: ModelConfig, plan: ExecutionPlan,
                 baseline: ExecutionPlan | None = None, label: str | None = None,
                 cr: float | None = None) -> FlopsReport:
    baseline = baseline or ExecutionPlan.local()
    single = flops_per_device(cfg, baseline)
    own = flops_per_device(cfg, plan)
    if plan.is_local:
        return FlopsReport(label=label or "no-partition", devices=1,
                           gflops_per_device=own, comp_speedup_pct=None,
                           cr=None, comm_speedup_pct=None, comm_elements_per_block=0)
    if cr is None and plan.exchange is ExchangeMode.SEGMENT_MEANS:
        cr = plan.partition.compression_rate
    comp, comm = speedups(single, own, cr)
    return FlopsReport(
        label=label or plan.mode_name,
        devices=plan.partition.devices,
        gflops_per_device=own,
        comp_speedup_pct=comp,
        cr=cr,
        comm_speedup_pct=comm,
        comm_elements_per_block=comm_elements_per_block(cfg, plan),
    )


def standard_reports(cfg: ModelConfig, devices: int = 2,
                     crs: tuple[float, ...] = (9.9, 4.95, 3.3)) -> list[FlopsReport]:
    """One row per execution strategy, mirroring the usual comparison table."""
    rows = [build_report(cfg, ExecutionPlan.local())]
    rows.append(build_report(cfg, ExecutionPlan.full_tensor(cfg.seq_len, devices),
                             label="full-exchange"))
    for cr in crs:
        plan = plan_for_cr(cfg, devices, cr)
        rows.append(build_report(cfg, plan, label="segment-means", cr=cr))
    return rows


def plan_for_cr(cfg: ModelConfig, devices: int, cr: float,
                multiplicity_bias: bool = True) -> ExecutionPlan:
    """Translate a compression rate into a segment-means plan.

    The mean count is ``effective_len / (devices * cr)`` and must land on
    an integer; a rate of exactly 1 gives the full-tensor plan.
    """
    effective = -(-cfg.seq_len // devices) * devices
    means_f = effective / (devices * cr)
    means = int(round(means_f))
    if means < 1 or abs(means_f - means) > 1e-6:
        raise ConfigError(
            f"compression rate {cr} does not give an integer mean count for "
            f"{effective} padded tokens on {devices} devices"
        )
    if means == effective // devices:
        return ExecutionPlan.full_tensor(cfg.seq_len, devices)
    return ExecutionPlan.segment_means(cfg.seq_len, devices, means,
                                       multiplicity_bias=multiplicity_bias)
