"""Sequence-partitioned transformer inference with segment-means exchange,
a staged-collective cost model, and a profiling-driven execution policy."""

from .calibrate import FitReport, builtin_cost_model, fit_cost_model, predict
from .commsim import CostModel, PhaseBreakdown, run_simulation
from .model import (
    ExchangeMode,
    ExecutionPlan,
    ModelConfig,
    PartitionSpec,
    Weights,
    forward_distributed,
    forward_local,
    init_weights,
    output_deviation,
)
from .policy import Decision, Objective, crossover_batch, select_plan
from .profiler import (
    PerformanceMap,
    PerfRecord,
    SimulatorEngine,
    SweepGrid,
    load_map,
    run_sweep,
    save_map,
)

__version__ = "0.1.0"

__all__ = [
    "CostModel",
    "Decision",
    "ExchangeMode",
    "ExecutionPlan",
    "FitReport",
    "ModelConfig",
    "Objective",
    "PartitionSpec",
    "PerfRecord",
    "PerformanceMap",
    "PhaseBreakdown",
    "SimulatorEngine",
    "SweepGrid",
    "Weights",
    "builtin_cost_model",
    "crossover_batch",
    "fit_cost_model",
    "forward_distributed",
    "forward_local",
    "init_weights",
    "load_map",
    "output_deviation",
    "predict",
    "run_simulation",
    "run_sweep",
    "save_map",
    "select_plan",
    "__version__",
]
