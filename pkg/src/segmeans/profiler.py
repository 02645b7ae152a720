"""Offline sweep engine and the persisted performance map.

The profiler walks a (batch, compression rate, bandwidth) grid against a
pluggable execution engine, discarding warm-up runs, and stores one record
per grid point per plan. Local execution does not see the network, so it
is measured once per batch and the record is replicated across bandwidth
keys to keep runtime lookups uniform.

The map is a small JSON document; the schema is part of the package's
public surface and is versioned.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from datetime import datetime, timezone
from hashlib import sha256

from . import commsim, flops
from .commsim import CostModel
from .errors import ConfigError, MapFormatError, MapVersionError
from .model import ExecutionPlan, ModelConfig

SCHEMA_VERSION = 1

DEFAULT_BATCHES = (1, 2, 4, 8, 16, 32)
DEFAULT_CRS = (3.3, 4.95, 9.9)
DEFAULT_BANDWIDTHS = (200, 300, 400, 500, 600, 700, 800, 900)
DEFAULT_WARMUP_RUNS = 20
DEFAULT_MEASURED_RUNS = 20

_RECORD_FIELDS = ("batch", "mode", "cr", "bandwidth_mbps", "total_ms",
                  "per_sample_ms", "per_sample_j", "comp_ms", "staging_ms",
                  "comm_ms", "runs", "std_ms", "failed")


def _record_order(r: "PerfRecord") -> tuple:
    # None-safe, collision-free ordering over record keys
    return (r.mode, r.cr is not None, r.cr or 0.0, r.batch, r.bandwidth_mbps)


@dataclass(frozen=True)
class SweepGrid:
    batches: tuple[int, ...] = DEFAULT_BATCHES
    crs: tuple[float, ...] = DEFAULT_CRS
    bandwidths_mbps: tuple[int, ...] = DEFAULT_BANDWIDTHS
    warmup_runs: int = DEFAULT_WARMUP_RUNS
    measured_runs: int = DEFAULT_MEASURED_RUNS

    def __post_init__(self):
        if not self.batches or not self.crs or not self.bandwidths_mbps:
            raise ConfigError("sweep grid lists must be non-empty")
        if self.warmup_runs < 0 or self.measured_runs < 1:
            raise ConfigError("warmup_runs must be >= 0 and measured_runs >= 1")

    def to_dict(self) -> dict:
        return {
            "batches": list(self.batches),
            "crs": list(self.crs),
            "bandwidths_mbps": list(self.bandwidths_mbps),
            "warmup_runs": self.warmup_runs,
            "measured_runs": self.measured_runs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SweepGrid":
        return cls(batches=tuple(d["batches"]), crs=tuple(d["crs"]),
                   bandwidths_mbps=tuple(d["bandwidths_mbps"]),
                   warmup_runs=d["warmup_runs"], measured_runs=d["measured_runs"])


@dataclass(frozen=True)
class PerfRecord:
    batch: int
    mode: str                 # local | prism | voltage
    cr: float | None
    bandwidth_mbps: int
    total_ms: float
    per_sample_ms: float
    per_sample_j: float
    comp_ms: float
    staging_ms: float
    comm_ms: float
    runs: int
    std_ms: float
    failed: bool = False

    @property
    def key(self) -> tuple:
        return (self.batch, self.mode, self.cr, self.bandwidth_mbps)

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in _RECORD_FIELDS}

    @classmethod
    def from_dict(cls, d: dict) -> "PerfRecord":
        missing = [name for name in _RECORD_FIELDS if name not in d]
        if missing:
            raise MapFormatError(f"performance record lacks fields: {missing}")
        return cls(**{name: d[name] for name in _RECORD_FIELDS})


@dataclass
class PerformanceMap:
    model: dict
    grid: dict
    records: list[PerfRecord]
    cost_model_hash: str = ""
    created: str = ""

    def __post_init__(self):
        self._index = {r.key: r for r in self.records}

    def lookup(self, batch: int, mode: str, cr: float | None,
               bandwidth_mbps: int) -> PerfRecord | None:
        return self._index.get((batch, mode, cr, bandwidth_mbps))

    @property
    def plans(self) -> list[tuple[str, float | None]]:
        seen = []
        for r in self.records:
            key = (r.mode, r.cr)
            if key not in seen:
                seen.append(key)
        return sorted(seen, key=lambda k: (k[0] != "local", k[0], k[1] or 0.0))

    @property
    def batches(self) -> list[int]:
        return sorted({r.batch for r in self.records})

    @property
    def bandwidths(self) -> list[int]:
        return sorted({r.bandwidth_mbps for r in self.records})

    def value_equal(self, other: "PerformanceMap") -> bool:
        """Equality on content; creation time is not part of the value."""
        return (self.model == other.model and self.grid == other.grid
                and self.cost_model_hash == other.cost_model_hash
                and sorted(self.records, key=_record_order)
                == sorted(other.records, key=_record_order))


def cost_model_hash(cm: CostModel) -> str:
    return sha256(cm.to_json().encode("utf-8")).hexdigest()[:16]


class SimulatorEngine:
    """Default execution engine: the deterministic simulator."""

    def __init__(self, cm: CostModel, cfg: ModelConfig | None = None):
        self.cm = cm
        self.cfg = cfg or ModelConfig()
        self.invocations = 0

    def plan_for(self, mode: str, cr: float | None) -> ExecutionPlan:
        if mode == "local":
            return ExecutionPlan.local()
        if mode == "voltage":
            return ExecutionPlan.full_tensor(self.cfg.seq_len, 2)
        return flops.plan_for_cr(self.cfg, 2, cr)

    def __call__(self, mode: str, cr: float | None, batch: int,
                 bandwidth_mbps: int) -> commsim.SimulationResult:
        self.invocations += 1
        plan = self.plan_for(mode, cr)
        return commsim.run_simulation(plan, self.cfg, batch, self.cm,
                                      bandwidth_mbps=bandwidth_mbps)


def _measure(engine, mode: str, cr: float | None, batch: int, bandwidth: int,
             grid: SweepGrid) -> PerfRecord:
    for _ in range(grid.warmup_runs):
        engine(mode, cr, batch, bandwidth)
    totals, samples = [], []
    for _ in range(grid.measured_runs):
        sim = engine(mode, cr, batch, bandwidth)
        totals.append(sim.overall.total_ms)
        samples.append(sim)
    if all(t == totals[0] for t in totals):
        mean, var = totals[0], 0.0
    else:
        mean = sum(totals) / len(totals)
        var = sum((t - mean) ** 2 for t in totals) / len(totals)
    last = samples[-1]
    return PerfRecord(
        batch=batch, mode=mode, cr=cr, bandwidth_mbps=bandwidth,
        total_ms=mean, per_sample_ms=mean / batch,
        per_sample_j=last.energy_j / batch,
        comp_ms=last.overall.comp_ms, staging_ms=last.overall.staging_ms,
        comm_ms=last.overall.comm_ms, runs=grid.measured_runs,
        std_ms=math.sqrt(var), failed=False,
    )


def _failed_record(mode, cr, batch, bandwidth) -> PerfRecord:
    return PerfRecord(batch=batch, mode=mode, cr=cr, bandwidth_mbps=bandwidth,
                      total_ms=0.0, per_sample_ms=0.0, per_sample_j=0.0,
                      comp_ms=0.0, staging_ms=0.0, comm_ms=0.0,
                      runs=0, std_ms=0.0, failed=True)


def run_sweep(grid: SweepGrid, engine, cm: CostModel,
              model_config: ModelConfig | None = None) -> PerformanceMap:
    """Profile every grid point; failures mark records, not the sweep."""
    cfg = model_config or getattr(engine, "cfg", None) or ModelConfig()
    records: list[PerfRecord] = []
    failures: list[tuple] = []

    for batch in grid.batches:
        # one measurement, replicated across the bandwidth axis
        try:
            base = _measure(engine, "local", None, batch, grid.bandwidths_mbps[0], grid)
            local_records = [
                PerfRecord(**{**base.to_dict(), "bandwidth_mbps": bw})
                for bw in grid.bandwidths_mbps
            ]
        except Exception as exc:
            failures.append(("local", None, batch, None, str(exc)))
            local_records = [_failed_record("local", None, batch, bw)
                             for bw in grid.bandwidths_mbps]
        records.extend(local_records)

        for cr in grid.crs:
            mode = "voltage" if abs(cr - 1.0) < 1e-9 else "prism"
            for bw in grid.bandwidths_mbps:
                try:
                    records.append(_measure(engine, mode, cr, batch, bw, grid))
                except Exception as exc:
                    failures.append((mode, cr, batch, bw, str(exc)))
                    records.append(_failed_record(mode, cr, batch, bw))

    pm = PerformanceMap(
        model=cfg.to_dict(),
        grid=grid.to_dict(),
        records=sorted(records, key=_record_order),
        cost_model_hash=cost_model_hash(cm),
        created=datetime.now(timezone.utc).isoformat(timespec="seconds"),
    )
    if failures:
        pm.grid["failures"] = [list(f) for f in failures]
    return pm


def save_map(pm: PerformanceMap, path) -> None:
    payload = {
        "schema": SCHEMA_VERSION,
        "model": pm.model,
        "grid": pm.grid,
        "cost_model_hash": pm.cost_model_hash,
        "created": pm.created,
        "records": [r.to_dict() for r in sorted(pm.records, key=_record_order)],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, separators=(",", ":"), sort_keys=True)
        fh.write("\n")


def load_map(path) -> PerformanceMap:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise MapFormatError(
            f"performance map {path} is not valid JSON "
            f"(line {exc.lineno}, column {exc.colno}): {exc.msg}"
        ) from exc
    if not isinstance(payload, dict) or "schema" not in payload:
        raise MapFormatError(f"performance map {path} lacks a schema field")
    if payload["schema"] != SCHEMA_VERSION:
        raise MapVersionError(
            f"performance map {path} has schema {payload['schema']}, "
            f"this build reads {SCHEMA_VERSION}"
        )
    try:
        records = [PerfRecord.from_dict(r) for r in payload["records"]]
        return PerformanceMap(model=payload["model"], grid=payload["grid"],
                              records=records,
                              cost_model_hash=payload.get("cost_model_hash", ""),
                              created=payload.get("created", ""))
    except (KeyError, TypeError) as exc:
        raise MapFormatError(f"performance map {path} is malformed: {exc}") from exc
