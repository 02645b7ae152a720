"""Runtime plan selection over a loaded performance map.

Given a batch size, the observed bandwidth and an objective, the selector
interpolates each candidate plan's profiled records to the query point and
returns the argmin. Ties fall to local execution first (no reason to pay
distribution overhead for zero gain), then to the lower compression rate.

Bandwidth interpolation is linear on the record values between adjacent
profiled points, clamped at the grid edges; comm time is affine in the
reciprocal of bandwidth, but on a 100 Mbps grid the linear error is small
and the approximation keeps lookups trivial.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

from .errors import MapLookupError, PolicyError
from .profiler import PerfRecord, PerformanceMap


class Objective(Enum):
    LATENCY = "latency"
    ENERGY = "energy"

    def metric(self, values) -> float:
        """Per-sample figure of merit; works on records and plan choices."""
        if self is Objective.LATENCY:
            return values.per_sample_ms
        return values.per_sample_j


@dataclass(frozen=True)
class PlanChoice:
    mode: str
    cr: float | None
    per_sample_ms: float
    per_sample_j: float
    total_ms: float

    def describe(self) -> str:
        if self.mode == "local":
            return "local"
        return f"{self.mode} cr={self.cr:g}"


@dataclass(frozen=True)
class Decision:
    chosen: PlanChoice
    runner_up: PlanChoice | None
    margin: float
    objective: Objective
    batch: int
    bandwidth_mbps: float
    nearest_batch_used: bool = False

    def to_dict(self) -> dict:
        return {
            "objective": self.objective.value,
            "batch": self.batch,
            "bandwidth_mbps": self.bandwidth_mbps,
            "chosen": {"mode": self.chosen.mode, "cr": self.chosen.cr,
                       "per_sample_ms": self.chosen.per_sample_ms,
                       "per_sample_j": self.chosen.per_sample_j,
                       "total_ms": self.chosen.total_ms},
            "runner_up": None if self.runner_up is None else {
                "mode": self.runner_up.mode, "cr": self.runner_up.cr,
                "per_sample_ms": self.runner_up.per_sample_ms,
                "per_sample_j": self.runner_up.per_sample_j},
            "margin": self.margin,
            "nearest_batch_used": self.nearest_batch_used,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _interp(lo: PerfRecord, hi: PerfRecord, bw: float) -> PlanChoice:
    if hi.bandwidth_mbps == lo.bandwidth_mbps:
        t = 0.0
    else:
        t = (bw - lo.bandwidth_mbps) / (hi.bandwidth_mbps - lo.bandwidth_mbps)

    def lerp(a, b):
        return a + t * (b - a)

    return PlanChoice(
        mode=lo.mode, cr=lo.cr,
        per_sample_ms=lerp(lo.per_sample_ms, hi.per_sample_ms),
        per_sample_j=lerp(lo.per_sample_j, hi.per_sample_j),
        total_ms=lerp(lo.total_ms, hi.total_ms),
    )


def _resolve_batch(pm: PerformanceMap, batch: int, nearest: bool) -> tuple[int, bool]:
    batches = pm.batches
    if batch in batches:
        return batch, False
    if not nearest:
        raise MapLookupError(
            f"batch {batch} is not profiled (grid: {batches}); "
            f"pass nearest_batch=True to use the closest one"
        )
    resolved = min(batches, key=lambda b: (abs(b - batch), b))
    return resolved, True


def _candidate(pm: PerformanceMap, mode: str, cr: float | None,
               batch: int, bw: float) -> PlanChoice | None:
    records = [r for r in pm.records
               if r.mode == mode and r.cr == cr and r.batch == batch and not r.failed]
    if not records:
        return None
    records.sort(key=lambda r: r.bandwidth_mbps)
    grid = [r.bandwidth_mbps for r in records]
    if bw <= grid[0]:
        return _interp(records[0], records[0], bw)
    if bw >= grid[-1]:
        return _interp(records[-1], records[-1], bw)
    for lo, hi in zip(records, records[1:]):
        if lo.bandwidth_mbps <= bw <= hi.bandwidth_mbps:
            return _interp(lo, hi, bw)
    return None


def select_plan(pm: PerformanceMap, batch: int, observed_bw_mbps: float,
                objective: Objective = Objective.LATENCY,
                nearest_batch: bool = False) -> Decision:
    """Pick the best profiled plan for the query point."""
    if not pm.records:
        raise PolicyError("performance map has no records")
    resolved, used_nearest = _resolve_batch(pm, batch, nearest_batch)

    candidates: list[tuple[tuple, PlanChoice]] = []
    for mode, cr in pm.plans:
        choice = _candidate(pm, mode, cr, resolved, observed_bw_mbps)
        if choice is None:
            continue
        # tie-break: local first, then lower compression rate
        candidates.append(((objective.metric(choice), mode != "local",
                            choice.cr or 0.0), choice))
    if not candidates:
        raise PolicyError(
            f"no usable records at batch {resolved} (all candidates failed)"
        )
    candidates.sort(key=lambda c: c[0])
    chosen = candidates[0][1]
    runner_up = candidates[1][1] if len(candidates) > 1 else None
    margin = 0.0
    if runner_up is not None:
        margin = candidates[1][0][0] - candidates[0][0][0]
    return Decision(chosen=chosen, runner_up=runner_up, margin=margin,
                    objective=objective, batch=batch,
                    bandwidth_mbps=observed_bw_mbps,
                    nearest_batch_used=used_nearest)


def crossover_batch(pm: PerformanceMap, bandwidth_mbps: float,
                    objective: Objective = Objective.LATENCY) -> int | None:
    """Smallest profiled batch where a distributed plan beats local."""
    batches = pm.batches
    if len(batches) < 2:
        raise PolicyError("crossover needs at least two profiled batches")
    for batch in batches:
        decision = select_plan(pm, batch, bandwidth_mbps, objective)
        if decision.chosen.mode != "local":
            return batch
    return None
