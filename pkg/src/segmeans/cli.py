"""Command-line surface.

Subcommands: simulate, flops, calibrate, profile, run, report. All of
them are deterministic given their flags and seed. Exit codes: 0 on
success, 1 on runtime or I/O failure, 2 on usage errors.

The cost model defaults to the built-in calibration; point
``--cost-model`` or the ``SEGMEANS_COST_MODEL`` environment variable at a
JSON file to override it.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import calibrate, commsim, flops, policy, profiler
from .commsim import CostModel
from .errors import SegmeansError
from .model import ExecutionPlan, ModelConfig, output_deviation

COST_MODEL_ENV = "SEGMEANS_COST_MODEL"
FORMATS = ("json", "csv", "md")


def _emit_table(columns: list[str], rows: list[list], fmt: str, out=None) -> None:
    out = out or sys.stdout
    if fmt == "json":
        payload = [dict(zip(columns, row)) for row in rows]
        print(json.dumps(payload, indent=2), file=out)
        return
    cells = [[("" if v is None else f"{v:.6g}" if isinstance(v, float) else str(v))
              for v in row] for row in rows]
    if fmt == "csv":
        print(",".join(columns), file=out)
        for row in cells:
            print(",".join(row), file=out)
        return
    widths = [max(len(c), *(len(r[i]) for r in cells)) if cells else len(c)
              for i, c in enumerate(columns)]
    print("| " + " | ".join(c.ljust(w) for c, w in zip(columns, widths)) + " |", file=out)
    print("| " + " | ".join("-" * w for w in widths) + " |", file=out)
    for row in cells:
        print("| " + " | ".join(v.ljust(w) for v, w in zip(row, widths)) + " |", file=out)


def _load_cost_model(args) -> CostModel:
    path = getattr(args, "cost_model", None) or os.environ.get(COST_MODEL_ENV)
    if path:
        return CostModel.load(path)
    return calibrate.builtin_cost_model()


def _load_model_config(args) -> ModelConfig:
    path = getattr(args, "model_config", None)
    if not path:
        return ModelConfig()
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return ModelConfig.from_dict(json.load(fh))
        except (json.JSONDecodeError, TypeError) as exc:
            raise SegmeansError(f"model config {path} is malformed: {exc}") from exc


def _plan_from_flags(parser: argparse.ArgumentParser, cfg: ModelConfig,
                     mode: str, cr: float | None, devices: int,
                     multiplicity_bias: bool = True) -> ExecutionPlan:
    try:
        if mode == "local":
            return ExecutionPlan.local()
        if mode == "voltage":
            return ExecutionPlan.full_tensor(cfg.seq_len, devices)
        return flops.plan_for_cr(cfg, devices, cr if cr is not None else 9.9,
                                 multiplicity_bias=multiplicity_bias)
    except SegmeansError as exc:
        parser.error(str(exc))  # exits 2


def cmd_simulate(args, parser) -> int:
    cfg = _load_model_config(args)
    cm = _load_cost_model(args)
    if args.mode == "local" and args.cr is not None:
        parser.error("--cr applies to distributed modes only")
    plan = _plan_from_flags(parser, cfg, args.mode, args.cr, args.devices,
                            multiplicity_bias=not args.no_multiplicity_bias)
    sim = commsim.run_simulation(plan, cfg, args.batch, cm,
                                 execute_numerics=args.numerics,
                                 bandwidth_mbps=args.bandwidth, seed=args.seed)
    payload = {
        "plan": plan.describe(),
        "batch": args.batch,
        "bandwidth_mbps": sim.bandwidth_mbps,
        **sim.overall.to_dict(),
        "per_sample_ms": sim.per_sample_ms,
        "energy_j": sim.energy_j,
        "per_sample_j": sim.per_sample_j,
        "comm_elements_per_block": sim.comm_elements_per_block,
    }
    if args.numerics and sim.numerics is not None:
        local_features, _ = sim.local_numerics
        payload["output_deviation_vs_local"] = output_deviation(
            sim.numerics.features, local_features)
    if args.format == "json":
        print(json.dumps(payload, indent=2))
    else:
        _emit_table(list(payload.keys()), [list(payload.values())], args.format)
    return 0


def cmd_flops(args, parser) -> int:
    cfg = _load_model_config(args)
    crs = tuple(args.crs) if args.crs else (9.9, 4.95, 3.3)
    try:
        reports = flops.standard_reports(cfg, devices=args.devices, crs=crs)
    except SegmeansError as exc:
        parser.error(str(exc))
    columns = ["strategy", "devices", "gflops_per_device", "comp_speedup_pct",
               "cr", "comm_speedup_pct"]
    rows = [[r.label, r.devices, r.gflops_per_device, r.comp_speedup_pct,
             r.cr, r.comm_speedup_pct] for r in reports]
    _emit_table(columns, rows, args.format)
    if args.format == "md":
        print("\nconventions: 2 FLOPs per multiply-accumulate; token embedding "
              "included and partitioned; head, softmax, norms and GELU excluded")
    return 0


def cmd_calibrate(args, parser) -> int:
    report = calibrate.fit_cost_model()
    if args.out:
        report.cost_model.save(args.out)
    if args.report_out:
        with open(args.report_out, "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
            fh.write("\n")
    summary = {
        "max_latency_rel_err": report.max_latency_rel_err,
        "max_energy_rel_err": report.max_energy_rel_err,
        "crossover_bw_mbps": report.crossover_bw_mbps,
        "written_to": args.out,
    }
    print(json.dumps(summary, indent=2))
    return 0


def cmd_profile(args, parser) -> int:
    cm = _load_cost_model(args)
    try:
        grid = profiler.SweepGrid(
            batches=tuple(args.batches) if args.batches else profiler.DEFAULT_BATCHES,
            crs=tuple(args.crs) if args.crs else profiler.DEFAULT_CRS,
            bandwidths_mbps=tuple(args.bandwidths) if args.bandwidths
            else profiler.DEFAULT_BANDWIDTHS,
            warmup_runs=args.warmup, measured_runs=args.runs,
        )
    except SegmeansError as exc:
        parser.error(str(exc))
    engine = profiler.SimulatorEngine(cm, _load_model_config(args))
    pm = profiler.run_sweep(grid, engine, cm)
    profiler.save_map(pm, args.out)
    failures = pm.grid.get("failures", [])
    print(json.dumps({
        "records": len(pm.records),
        "engine_invocations": engine.invocations,
        "failures": failures,
        "written_to": args.out,
    }, indent=2))
    return 0


def cmd_run(args, parser) -> int:
    cm = _load_cost_model(args)
    pm = profiler.load_map(args.map)
    decision = policy.select_plan(pm, args.batch, args.bandwidth,
                                  policy.Objective(args.objective),
                                  nearest_batch=args.nearest_batch)
    cfg = ModelConfig.from_dict(pm.model)
    plan = _plan_from_flags(parser, cfg, decision.chosen.mode, decision.chosen.cr, 2)
    sim = commsim.run_simulation(plan, cfg, args.batch, cm,
                                 bandwidth_mbps=args.bandwidth)
    payload = decision.to_dict()
    payload["executed"] = {**sim.overall.to_dict(), "energy_j": sim.energy_j,
                           "per_sample_ms": sim.per_sample_ms}
    print(json.dumps(payload, indent=2))
    return 0


def cmd_report(args, parser) -> int:
    cm = _load_cost_model(args)
    pm = profiler.load_map(args.map)
    if not pm.records:
        print("no records")
        return 0
    cfg = ModelConfig.from_dict(pm.model)
    bw = args.bandwidth
    voltage_plan = ExecutionPlan.full_tensor(cfg.seq_len, 2)

    columns = ["batch", "voltage_ms", "adaptive_ms", "latency_gain_pct", "latency_plan",
               "voltage_j", "adaptive_j", "energy_gain_pct", "energy_plan"]
    rows = []
    for batch in pm.batches:
        lat = policy.select_plan(pm, batch, bw, policy.Objective.LATENCY)
        en = policy.select_plan(pm, batch, bw, policy.Objective.ENERGY)
        sv = commsim.run_simulation(voltage_plan, cfg, batch, cm, bandwidth_mbps=bw)
        rows.append([
            batch,
            round(sv.overall.total_ms, 1),
            round(lat.chosen.total_ms, 1),
            round(100.0 * (1.0 - lat.chosen.total_ms / sv.overall.total_ms), 1),
            lat.chosen.describe(),
            round(sv.energy_j, 2),
            round(en.chosen.per_sample_j * batch, 2),
            round(100.0 * (1.0 - en.chosen.per_sample_j * batch / sv.energy_j), 1),
            en.chosen.describe(),
        ])
    series_cols = ["mode", "cr", "batch", "per_sample_ms", "per_sample_j"]
    series_rows = []
    if args.series:
        lookup_bw = int(bw) if bw in pm.bandwidths else pm.bandwidths[0]
        for mode, cr in pm.plans:
            for batch in pm.batches:
                rec = pm.lookup(batch, mode, cr, lookup_bw)
                if rec and not rec.failed:
                    series_rows.append([mode, cr, batch,
                                        round(rec.per_sample_ms, 3), round(rec.per_sample_j, 4)])

    if args.format == "json":
        payload = {"comparison": [dict(zip(columns, row)) for row in rows]}
        if args.series:
            payload["series"] = [dict(zip(series_cols, row)) for row in series_rows]
        print(json.dumps(payload, indent=2))
        return 0

    _emit_table(columns, rows, args.format)
    if args.series:
        print()
        _emit_table(series_cols, series_rows, args.format)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segmeans",
        description="Partitioned transformer inference simulator, analytic "
                    "accounting, profiler and adaptive execution policy.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--format", choices=FORMATS, default="md")
        p.add_argument("--cost-model", help="path to a cost-model JSON file")
        p.add_argument("--model-config", help="path to a model-geometry JSON file")
        p.add_argument("--seed", type=int, default=0)

    p_sim = sub.add_parser("simulate", help="phase breakdown for one run")
    add_common(p_sim)
    p_sim.add_argument("--mode", choices=("local", "prism", "voltage"), required=True)
    p_sim.add_argument("--cr", type=float, help="compression rate for prism")
    p_sim.add_argument("--batch", type=int, default=1)
    p_sim.add_argument("--bandwidth", type=float, default=400.0)
    p_sim.add_argument("--devices", type=int, default=2)
    p_sim.add_argument("--numerics", action="store_true",
                       help="also run the toy forward pass and report deviation")
    p_sim.add_argument("--no-multiplicity-bias", action="store_true",
                       help="drop the ln(segment size) key-logit bias")
    p_sim.set_defaults(func=cmd_simulate)

    p_fl = sub.add_parser("flops", help="per-device compute and volume accounting")
    add_common(p_fl)
    p_fl.add_argument("--devices", type=int, default=2)
    p_fl.add_argument("--crs", type=float, nargs="+")
    p_fl.set_defaults(func=cmd_flops)

    p_cal = sub.add_parser("calibrate", help="fit the cost model and write it out")
    add_common(p_cal)
    p_cal.add_argument("--out", default="cost_model.json")
    p_cal.add_argument("--report-out", help="also write the full fit report")
    p_cal.set_defaults(func=cmd_calibrate)

    p_prof = sub.add_parser("profile", help="sweep the grid and write a performance map")
    add_common(p_prof)
    p_prof.add_argument("--batches", type=int, nargs="+")
    p_prof.add_argument("--crs", type=float, nargs="+")
    p_prof.add_argument("--bandwidths", type=int, nargs="+")
    p_prof.add_argument("--warmup", type=int, default=profiler.DEFAULT_WARMUP_RUNS)
    p_prof.add_argument("--runs", type=int, default=profiler.DEFAULT_MEASURED_RUNS)
    p_prof.add_argument("--out", default="performance_map.json")
    p_prof.set_defaults(func=cmd_profile)

    p_run = sub.add_parser("run", help="select and execute the best plan")
    add_common(p_run)
    p_run.add_argument("--map", required=True)
    p_run.add_argument("--batch", type=int, required=True)
    p_run.add_argument("--bandwidth", type=float, default=400.0)
    p_run.add_argument("--objective", choices=("latency", "energy"), default="latency")
    p_run.add_argument("--nearest-batch", action="store_true")
    p_run.set_defaults(func=cmd_run)

    p_rep = sub.add_parser("report", help="comparison tables and gain columns")
    add_common(p_rep)
    p_rep.add_argument("--map", required=True)
    p_rep.add_argument("--bandwidth", type=float, default=400.0)
    p_rep.add_argument("--series", action="store_true",
                       help="also emit per-sample series per plan")
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return 1
    except SegmeansError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
