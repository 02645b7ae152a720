"""Deterministic simulator of CPU-staged collective communication.

Integrated-GPU boards lack a direct GPU-to-GPU path, so every exchanged
tensor is staged twice through host memory: a device-to-host copy before
transmission and a host-to-device copy after receipt. Staging time is
proportional to the staged bytes and independent of network bandwidth; the
wire transfer itself scales inversely with bandwidth.

The wire model charges, per collective, the logical payload plus a fitted
framing overhead (``net_wire_overhead_bits``), both divided by a fitted
medium efficiency (``net_efficiency``). Under a token-bucket bandwidth
throttle, protocol chatter is rate limited exactly like payload, which is
why the overhead term shares the 1/bandwidth scaling instead of being a
constant. ``net_fixed_ms`` remains available as a bandwidth-independent
per-round constant.

Compute time per device is affine in batch size with per-mode constants,
and the per-sample slope scales with the analytic per-device FLOPs of the
concrete plan relative to the geometry the constants were fitted on. A
phase-power model converts breakdowns to energy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import flops as flops_mod
from . import linalg
from . import model as model_mod
from .errors import (
    CalibrationError,
    ConfigError,
    DeadlockError,
    ProtocolError,
)
from .model import ExecutionPlan, ModelConfig

BYTES_PER_ELEMENT = 4  # 32-bit activations
DEFAULT_DEADLOCK_TIMEOUT_MS = 1e6


@dataclass(frozen=True)
class PhaseBreakdown:
    """Milliseconds attributed to compute, host staging and wire transfer."""

    comp_ms: float = 0.0
    staging_ms: float = 0.0
    comm_ms: float = 0.0

    @property
    def total_ms(self) -> float:
        return self.comp_ms + self.staging_ms + self.comm_ms

    def scaled(self, k: float) -> "PhaseBreakdown":
        return PhaseBreakdown(self.comp_ms * k, self.staging_ms * k, self.comm_ms * k)

    def __add__(self, other: "PhaseBreakdown") -> "PhaseBreakdown":
        return PhaseBreakdown(
            self.comp_ms + other.comp_ms,
            self.staging_ms + other.staging_ms,
            self.comm_ms + other.comm_ms,
        )

    def to_dict(self) -> dict:
        return {
            "comp_ms": self.comp_ms,
            "staging_ms": self.staging_ms,
            "comm_ms": self.comm_ms,
            "total_ms": self.total_ms,
        }


@dataclass
class CostModel:
    """Fitted constants for staging, wire transfer, compute and power."""

    stage_d2h_bytes_per_ms: float
    stage_h2d_bytes_per_ms: float
    collective_overhead_ms: float
    net_bandwidth_mbps: float
    net_fixed_ms: float = 0.0
    net_efficiency: float = 1.0
    net_wire_overhead_bits: float = 0.0
    comp_intercept_ms: dict[str, float] = field(default_factory=dict)
    comp_per_sample_ms: dict[str, float] = field(default_factory=dict)
    comp_ref_gflops: dict[str, float] = field(default_factory=dict)
    power_comp_w: dict[str, float] = field(default_factory=dict)
    power_xfer_w: dict[str, float] = field(default_factory=dict)
    power_idle_w: float = 1.0

    def __post_init__(self):
        positive = {
            "stage_d2h_bytes_per_ms": self.stage_d2h_bytes_per_ms,
            "stage_h2d_bytes_per_ms": self.stage_h2d_bytes_per_ms,
            "net_bandwidth_mbps": self.net_bandwidth_mbps,
            "net_efficiency": self.net_efficiency,
            "power_idle_w": self.power_idle_w,
        }
        for name, value in positive.items():
            if value <= 0:
                raise CalibrationError(f"{name} must be positive, got {value}")
        for name, value in (("collective_overhead_ms", self.collective_overhead_ms),
                            ("net_fixed_ms", self.net_fixed_ms),
                            ("net_wire_overhead_bits", self.net_wire_overhead_bits)):
            if value < 0:
                raise CalibrationError(f"{name} must be non-negative, got {value}")
        for table in (self.power_comp_w, self.power_xfer_w):
            for mode, value in table.items():
                if value <= 0:
                    raise CalibrationError(f"power for mode {mode!r} must be positive")

    def with_bandwidth(self, bandwidth_mbps: float) -> "CostModel":
        if bandwidth_mbps <= 0:
            raise ConfigError(f"bandwidth must be positive, got {bandwidth_mbps}")
        return replace(self, net_bandwidth_mbps=bandwidth_mbps)

    def to_json(self) -> str:
        payload = {
            "stage_d2h_bytes_per_ms": self.stage_d2h_bytes_per_ms,
            "stage_h2d_bytes_per_ms": self.stage_h2d_bytes_per_ms,
            "collective_overhead_ms": self.collective_overhead_ms,
            "net_bandwidth_mbps": self.net_bandwidth_mbps,
            "net_fixed_ms": self.net_fixed_ms,
            "net_efficiency": self.net_efficiency,
            "net_wire_overhead_bits": self.net_wire_overhead_bits,
            "comp_intercept_ms": self.comp_intercept_ms,
            "comp_per_sample_ms": self.comp_per_sample_ms,
            "comp_ref_gflops": self.comp_ref_gflops,
            "power_comp_w": self.power_comp_w,
            "power_xfer_w": self.power_xfer_w,
            "power_idle_w": self.power_idle_w,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CostModel":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CalibrationError(f"cost model JSON is malformed: {exc}") from exc
        if not isinstance(payload, dict):
            raise CalibrationError("cost model JSON must be an object")
        try:
            return cls(**payload)
        except TypeError as exc:
            raise CalibrationError(f"cost model JSON has wrong fields: {exc}") from exc

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "CostModel":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def staging_time(nbytes: float, cm: CostModel) -> float:
    """Round-trip host staging cost of ``nbytes``: one copy each way."""
    if nbytes < 0:
        raise ConfigError(f"byte count must be non-negative, got {nbytes}")
    return nbytes / cm.stage_d2h_bytes_per_ms + nbytes / cm.stage_h2d_bytes_per_ms


def network_time(nbytes: float, cm: CostModel, bandwidth_mbps: float | None = None) -> float:
    """Wire time for ``nbytes`` at the given (or model) bandwidth."""
    if nbytes < 0:
        raise ConfigError(f"byte count must be non-negative, got {nbytes}")
    bw = cm.net_bandwidth_mbps if bandwidth_mbps is None else bandwidth_mbps
    if bw <= 0:
        raise ConfigError(f"bandwidth must be positive, got {bw}")
    return (nbytes * 8.0) / (bw * 1000.0) + cm.net_fixed_ms


def collective_wire_time(recv_bytes: float, cm: CostModel,
                         bandwidth_mbps: float | None = None) -> float:
    """One collective's comm phase: effective wire bytes plus overhead."""
    effective = (recv_bytes + cm.net_wire_overhead_bits / 8.0) / cm.net_efficiency
    return network_time(effective, cm, bandwidth_mbps) + cm.collective_overhead_ms


class VirtualClock:
    """Monotone virtual time in milliseconds."""

    def __init__(self, start_ms: float = 0.0):
        self._now = float(start_ms)

    @property
    def now(self) -> float:
        return self._now

    def advance(self, delta_ms: float) -> float:
        if delta_ms < 0:
            raise ConfigError("virtual time cannot go backwards")
        self._now += delta_ms
        return self._now

    def advance_to(self, t_ms: float) -> float:
        if t_ms > self._now:
            self._now = t_ms
        return self._now


@dataclass
class GatherOutcome:
    payloads: list[np.ndarray]
    phases: PhaseBreakdown
    completed_at_ms: float


class CollectiveWorld:
    """Rendezvous point for one simulated all-gather across ``devices``.

    Participants ``submit`` their payload at their clock's current time;
    ``complete`` resolves the barrier once everyone has arrived, advancing
    all clocks to the shared completion instant. Calling ``complete``
    while participants are missing models them never arriving: virtual
    time runs past the timeout and a deadlock error is raised.
    """

    def __init__(self, devices: int, cm: CostModel,
                 bandwidth_mbps: float | None = None,
                 timeout_ms: float = DEFAULT_DEADLOCK_TIMEOUT_MS,
                 payload_scale: float = 1.0):
        if devices < 1:
            raise ConfigError(f"device count must be at least 1, got {devices}")
        if payload_scale <= 0:
            raise ConfigError(f"payload scale must be positive, got {payload_scale}")
        self.devices = devices
        self.cm = cm
        self.bandwidth_mbps = bandwidth_mbps
        self.timeout_ms = timeout_ms
        self.payload_scale = payload_scale
        self.clocks = [VirtualClock() for _ in range(devices)]
        self._pending: dict[int, np.ndarray] = {}

    def submit(self, device_id: int, payload: np.ndarray) -> None:
        if not 0 <= device_id < self.devices:
            raise ConfigError(f"device id {device_id} outside world of {self.devices}")
        if device_id in self._pending:
            raise ProtocolError(f"device {device_id} submitted twice to one collective")
        self._pending[device_id] = payload

    def complete(self) -> dict[int, GatherOutcome]:
        missing = sorted(set(range(self.devices)) - set(self._pending))
        if missing:
            deadline = max(c.now for c in self.clocks) + self.timeout_ms
            for c in self.clocks:
                c.advance_to(deadline)
            raise DeadlockError(
                f"collective timed out after {self.timeout_ms:g} virtual ms; "
                f"missing devices {missing}"
            )
        sizes = {d: p.size for d, p in self._pending.items()}
        if len(set(sizes.values())) > 1:
            raise ProtocolError(f"payload element counts differ across devices: {sizes}")

        ordered = [self._pending[d] for d in range(self.devices)]
        outcomes: dict[int, GatherOutcome] = {}
        completion = 0.0
        per_device = []
        for d in range(self.devices):
            if self.devices == 1:
                phases = PhaseBreakdown()
            else:
                scale = BYTES_PER_ELEMENT * self.payload_scale
                sent_bytes = ordered[d].size * scale
                recv_bytes = sum(p.size for j, p in enumerate(ordered) if j != d) * scale
                stag = (sent_bytes / self.cm.stage_d2h_bytes_per_ms
                        + recv_bytes / self.cm.stage_h2d_bytes_per_ms)
                comm = collective_wire_time(recv_bytes, self.cm, self.bandwidth_mbps)
                phases = PhaseBreakdown(staging_ms=stag, comm_ms=comm)
            per_device.append(phases)
            completion = max(completion, self.clocks[d].now + phases.total_ms)
        for d in range(self.devices):
            self.clocks[d].advance_to(completion)
            outcomes[d] = GatherOutcome(payloads=list(ordered), phases=per_device[d],
                                        completed_at_ms=completion)
        self._pending.clear()
        return outcomes


def all_gather(payloads: list[np.ndarray], cm: CostModel,
               bandwidth_mbps: float | None = None,
               timeout_ms: float = DEFAULT_DEADLOCK_TIMEOUT_MS,
               payload_scale: float = 1.0) -> dict[int, GatherOutcome]:
    """Convenience wrapper: run one lockstep all-gather over ``payloads``."""
    world = CollectiveWorld(len(payloads), cm, bandwidth_mbps, timeout_ms,
                            payload_scale=payload_scale)
    for d, p in enumerate(payloads):
        world.submit(d, p)
    return world.complete()


class SimulatedCollective:
    """Collective handle for forward passes that also advances a clock.

    Payload bytes are scaled by ``batch`` so a single-sample forward pass
    can drive the timing of a batched run.
    """

    def __init__(self, cm: CostModel, batch: int = 1,
                 bandwidth_mbps: float | None = None):
        self.cm = cm
        self.batch = batch
        self.bandwidth_mbps = bandwidth_mbps
        self.log: list[list[int]] = []
        self.phases = PhaseBreakdown()

    def exchange(self, blocks: list[np.ndarray]) -> list[np.ndarray]:
        outcomes = all_gather(blocks, self.cm, self.bandwidth_mbps,
                              payload_scale=self.batch)
        self.log.append([sum(b.size for b in blocks) - b.size for b in blocks])
        # homogeneous world: device 0 is representative
        self.phases = self.phases + outcomes[0].phases
        return outcomes[0].payloads


@dataclass
class SimulationResult:
    plan: ExecutionPlan
    batch: int
    bandwidth_mbps: float
    per_device: list[PhaseBreakdown]
    overall: PhaseBreakdown
    energy_j: float
    comm_elements_per_block: int
    staged_bytes_per_device: int
    numerics: model_mod.DistributedResult | None = None
    local_numerics: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def per_sample_ms(self) -> float:
        return self.overall.total_ms / self.batch

    @property
    def per_sample_j(self) -> float:
        return self.energy_j / self.batch


def _mode_constant(table: dict[str, float], mode: str, what: str) -> float:
    try:
        return table[mode]
    except KeyError:
        raise CalibrationError(f"cost model lacks {what} for mode {mode!r}") from None


def compute_time_ms(plan: ExecutionPlan, cfg: ModelConfig, batch: int, cm: CostModel) -> float:
    """Affine-in-batch compute model, FLOPs-scaled to the concrete plan."""
    mode = plan.mode_name
    intercept = _mode_constant(cm.comp_intercept_ms, mode, "a compute intercept")
    slope = _mode_constant(cm.comp_per_sample_ms, mode, "a per-sample compute cost")
    ref = cm.comp_ref_gflops.get(mode)
    if ref:
        slope *= flops_mod.flops_per_device(cfg, plan) / ref
    return intercept + slope * batch


def run_simulation(plan: ExecutionPlan, cfg: ModelConfig, batch: int, cm: CostModel,
                   execute_numerics: bool = False, bandwidth_mbps: float | None = None,
                   seed: int = 0) -> SimulationResult:
    """Advance the virtual clock through one batched forward pass.

    Staging and comm accumulate over ``num_layers`` all-gathers whose
    payloads are the per-block exchanged elements times batch size. With
    ``execute_numerics`` the real toy forward pass drives those collectives
    (one sample, byte counts scaled by batch), so outputs and timings come
    from a single pass; otherwise the closed forms are used directly.
    """
    if batch < 1:
        raise ConfigError(f"batch must be at least 1, got {batch}")
    if not plan.is_local and plan.partition.seq_len != cfg.seq_len:
        raise ConfigError(
            f"plan sequence length {plan.partition.seq_len} != config {cfg.seq_len}"
        )
    bw = cm.net_bandwidth_mbps if bandwidth_mbps is None else bandwidth_mbps
    if bw <= 0:
        raise ConfigError(f"bandwidth must be positive, got {bw}")

    comp = compute_time_ms(plan, cfg, batch, cm)
    numerics = None
    local_numerics = None

    if plan.is_local:
        xfer = PhaseBreakdown()
        devices = 1
        comm_elems = 0
        staged = 0
        if execute_numerics:
            rng = linalg.make_rng(seed)
            x = linalg.seeded_matrix(cfg.seq_len, cfg.embed_dim, 1.0, rng)
            w = model_mod.init_weights(cfg, seed)
            local_numerics = model_mod.forward_local(x, w, cfg)
    else:
        spec = plan.partition
        devices = spec.devices
        comm_elems = flops_mod.comm_elements_per_block(cfg, plan)
        sent_elems = flops_mod.sent_elements_per_block(cfg, plan)
        sent_bytes = batch * sent_elems * BYTES_PER_ELEMENT
        recv_bytes = batch * comm_elems * BYTES_PER_ELEMENT
        staged = cfg.num_layers * (sent_bytes + recv_bytes)
        if execute_numerics:
            rng = linalg.make_rng(seed)
            x = linalg.seeded_matrix(cfg.seq_len, cfg.embed_dim, 1.0, rng)
            w = model_mod.init_weights(cfg, seed)
            collective = SimulatedCollective(cm, batch=batch, bandwidth_mbps=bw)
            numerics = model_mod.forward_distributed(x, plan, w, cfg, comm=collective)
            local_numerics = model_mod.forward_local(x, w, cfg)
            xfer = collective.phases
        else:
            per_block_staging = (sent_bytes / cm.stage_d2h_bytes_per_ms
                                 + recv_bytes / cm.stage_h2d_bytes_per_ms)
            per_block_comm = collective_wire_time(recv_bytes, cm, bw)
            xfer = PhaseBreakdown(staging_ms=cfg.num_layers * per_block_staging,
                                  comm_ms=cfg.num_layers * per_block_comm)

    breakdown = PhaseBreakdown(comp_ms=comp, staging_ms=xfer.staging_ms, comm_ms=xfer.comm_ms)
    per_device = [breakdown] * devices
    energy_j = energy(breakdown, cm, devices, plan.mode_name)
    return SimulationResult(
        plan=plan, batch=batch, bandwidth_mbps=bw,
        per_device=per_device, overall=breakdown, energy_j=energy_j,
        comm_elements_per_block=comm_elems, staged_bytes_per_device=staged,
        numerics=numerics, local_numerics=local_numerics,
    )


def energy(breakdown: PhaseBreakdown, cm: CostModel, devices: int,
           mode: str, idle_ms: float = 0.0) -> float:
    """Joules over all participating devices for one breakdown.

    Workers here are homogeneous and the barrier keeps them in phase, so
    per-device idle time is zero unless the caller says otherwise.
    """
    p_comp = _mode_constant(cm.power_comp_w, mode, "a compute power")
    p_xfer = _mode_constant(cm.power_xfer_w, mode, "a transfer power")
    per_device_mj = (p_comp * breakdown.comp_ms
                     + p_xfer * (breakdown.staging_ms + breakdown.comm_ms)
                     + cm.power_idle_w * idle_ms)
    return devices * per_device_mj / 1000.0
