"""Reference benchmark tables shipped with the package.

Latency rows come from a two-board deployment of the default encoder
geometry (197 tokens, 12 layers) at a throttled 400 Mbps link. ``local``
rows ran on one device; ``prism`` rows exchanged 10 segment means per
partition (compression rate 9.9); ``voltage`` rows exchanged full
partition activations. The third latency column aggregates host staging
and residual synchronisation, which this package models as the staging
phase.

Energy rows pair the full-tensor baseline with the adaptive runtime at the
same batch sizes; the adaptive runtime executed locally below batch 8 and
with segment means from batch 8 up.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import CalibrationError

REFERENCE_BANDWIDTH_MBPS = 400.0
SUM_TOLERANCE_MS = 0.2


@dataclass(frozen=True)
class LatencyRow:
    mode: str           # local | prism | voltage
    devices: int
    tokens_per_device: int
    means: int | None
    cr: float | None
    batch: int
    comp_ms: float
    staging_ms: float
    comm_ms: float
    total_ms: float
    bandwidth_mbps: float = REFERENCE_BANDWIDTH_MBPS


@dataclass(frozen=True)
class EnergyRow:
    batch: int
    voltage_j: float
    adaptive_j: float


LATENCY_ROWS: tuple[LatencyRow, ...] = (
    LatencyRow("local", 1, 197, None, None, 1, 80.6, 0.0, 0.0, 80.6),
    LatencyRow("local", 1, 197, None, None, 2, 141.3, 0.0, 0.0, 141.3),
    LatencyRow("local", 1, 197, None, None, 4, 249.8, 0.0, 0.0, 249.8),
    LatencyRow("local", 1, 197, None, None, 8, 485.0, 0.0, 0.0, 485.0),
    LatencyRow("local", 1, 197, None, None, 16, 946.0, 0.0, 0.0, 946.0),
    LatencyRow("local", 1, 197, None, None, 32, 1864.8, 0.0, 0.0, 1864.8),
    LatencyRow("prism", 2, 99, 10, 9.9, 1, 123.0, 26.5, 18.6, 168.1),
    LatencyRow("prism", 2, 99, 10, 9.9, 2, 140.2, 29.8, 26.4, 196.4),
    LatencyRow("prism", 2, 99, 10, 9.9, 4, 179.5, 34.4, 39.0, 252.9),
    LatencyRow("prism", 2, 99, 10, 9.9, 8, 272.0, 52.3, 90.4, 414.7),
    LatencyRow("prism", 2, 99, 10, 9.9, 16, 494.0, 86.7, 124.0, 704.7),
    LatencyRow("prism", 2, 99, 10, 9.9, 32, 936.1, 182.0, 221.7, 1339.8),
    LatencyRow("voltage", 2, 99, 99, 1.0, 1, 176.0, 94.0, 81.0, 351.0),
    LatencyRow("voltage", 2, 99, 99, 1.0, 2, 240.5, 111.0, 146.0, 497.5),
    LatencyRow("voltage", 2, 99, 99, 1.0, 4, 385.0, 145.0, 276.0, 806.0),
    LatencyRow("voltage", 2, 99, 99, 1.0, 8, 561.0, 213.0, 514.0, 1288.0),
    LatencyRow("voltage", 2, 99, 99, 1.0, 16, 970.0, 344.0, 960.5, 2274.5),
    LatencyRow("voltage", 2, 99, 99, 1.0, 32, 1454.0, 533.0, 1856.0, 3843.0),
)

ENERGY_ROWS: tuple[EnergyRow, ...] = (
    EnergyRow(1, 1.05, 0.51),
    EnergyRow(2, 1.59, 0.96),
    EnergyRow(4, 2.74, 1.75),
    EnergyRow(8, 5.02, 3.31),
    EnergyRow(16, 9.78, 5.98),
    EnergyRow(32, 17.67, 11.52),
)


@dataclass(frozen=True)
class CalibrationTable:
    """Validated bundle of the latency and energy reference rows."""

    latency: tuple[LatencyRow, ...] = LATENCY_ROWS
    energy: tuple[EnergyRow, ...] = ENERGY_ROWS

    def __post_init__(self):
        if not self.latency:
            raise CalibrationError("calibration table has no latency rows")
        modes = {row.mode for row in self.latency}
        missing = {"local", "prism", "voltage"} - modes
        if missing:
            raise CalibrationError(f"calibration table lacks modes: {sorted(missing)}")
        for row in self.latency:
            gap = abs(row.total_ms - (row.comp_ms + row.staging_ms + row.comm_ms))
            if gap > SUM_TOLERANCE_MS:
                raise CalibrationError(
                    f"row ({row.mode}, batch {row.batch}) phases sum {gap:.3f} ms "
                    f"away from its total"
                )

    def rows_for(self, mode: str) -> list[LatencyRow]:
        return sorted((r for r in self.latency if r.mode == mode), key=lambda r: r.batch)
