"""Command-line front end: protected runs, host calibration, model checking.

Exit codes are part of the interface (scripts branch on them):
0 match / safe, 2 output mismatch, 3 replica failure, 4 timeout,
5 diversity loss, 1 model counterexample found, 64 usage error,
65 search space too large, 69 progress counter unavailable,
70 other setup failure.
"""

from __future__ import annotations

import argparse
import sys

from . import calibration, integrity, monitor, sim
from .core import DiversityLossPolicy, MonitorConfig, VerdictKind
from .progress import CounterUnavailable
from .replication import PinningFailure, SpawnFailure
from .workloads import parse_workload_id

EX_COUNTEREXAMPLE = 1
EX_USAGE = 64
EX_SEARCH_SPACE = 65
EX_UNAVAILABLE = 69
EX_SETUP = 70

_VERDICT_EXIT = {
    VerdictKind.MATCH: 0,
    VerdictKind.MISMATCH: 2,
    VerdictKind.REPLICA_FAILURE: 3,
    VerdictKind.TIMEOUT: 4,
    VerdictKind.DIVERSITY_LOSS: 5,
}


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; the contract here reserves 64 for usage.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EX_USAGE, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(
        prog="softlockstep",
        description="Run a computation twice with enforced instruction-count staggering.",
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="execute one protected run")
    run.add_argument("--workload", help="computation to protect, e.g. matmul:128, checksum:65536, spin:5000000")
    run.add_argument("--threshold", type=int, help="minimum staggering to enforce, in progress units")
    run.add_argument("--calibration-file", help="take threshold (and counter) from a calibration report")
    run.add_argument("--period-us", type=int, default=1000, help="check period in microseconds")
    run.add_argument("--timeout-ms", type=int, help="abort the run after this long")
    run.add_argument("--trace-out", help="write the staggering trace CSV here")
    run.add_argument("--inject", help="fault to inject: bitflip:ROLE:OUT:BYTE:BIT, freeze:ROLE:DUR, crash:ROLE")
    run.add_argument("--backend", default="process", help="'process' or 'scripted:FILE' with tick,head_delta,trail_delta rows")
    run.add_argument("--counter", default="auto", choices=["auto", "instructions", "task-clock"], help="progress counter kind")
    run.add_argument("--cores", help="pin replicas (and monitor) to cores: HEAD,TRAIL[,MONITOR]")
    run.add_argument("--seed", type=int, default=0, help="workload input generation seed")
    run.add_argument("--on-diversity-loss", default="record", choices=["record", "abort"], help="what to do when staggering goes negative")
    run.add_argument("--period-ticks", type=int, default=1, help="scripted backend: ticks per check")
    run.add_argument("--scripted-latency", type=int, default=0, help="scripted backend: suspension latency in ticks")

    cal = sub.add_parser("calibrate", help="measure this host and recommend a threshold")
    cal.add_argument("--period-us", type=int, default=1000, help="check period the threshold is for")
    cal.add_argument("--margin", type=float, default=2.0, help="safety margin multiplier (>= 1)")
    cal.add_argument("--duration-ms", type=int, default=300, help="rate measurement duration")
    cal.add_argument("--samples", type=int, default=30, help="suspension latency probe count")
    cal.add_argument("--counter", default="auto", choices=["auto", "instructions", "task-clock"], help="progress counter kind")
    cal.add_argument("--backend", default="process", help="'process' or 'scripted:FILE' for exact, privilege-free calibration")
    cal.add_argument("--tick-us", type=int, default=1, help="scripted backend: tick length in microseconds")
    cal.add_argument("--scripted-latency", type=int, default=0, help="scripted backend: suspension latency in ticks")
    cal.add_argument("--window-ticks", type=int, default=10, help="scripted backend: rate window length in ticks")
    cal.add_argument("--out", help="also write the report to this file")

    check = sub.add_parser("simulate", help="brute-force the staggering model over a rate alphabet")
    check.add_argument("--alphabet", required=True, help="comma-separated per-tick rates, e.g. 0,1,2")
    check.add_argument("--ticks", type=int, required=True, help="schedule length in ticks")
    check.add_argument("--period", type=int, default=1, help="ticks per monitor check")
    check.add_argument("--latency", type=int, default=0, help="suspension latency in ticks")
    check.add_argument("--threshold", type=int, required=True, help="staggering threshold to verify")
    check.add_argument("--counterexample-out", help="write a found counterexample schedule CSV here")

    return parser


def _parse_cores(text: str) -> tuple[int, int, int | None]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) not in (2, 3):
        raise ValueError("--cores needs HEAD,TRAIL or HEAD,TRAIL,MONITOR")
    values = [int(p) for p in parts]
    return values[0], values[1], values[2] if len(values) == 3 else None


def _run_config(args, threshold: int) -> MonitorConfig:
    head_core = trail_core = monitor_core = None
    if args.cores:
        head_core, trail_core, monitor_core = _parse_cores(args.cores)
    policy = (
        DiversityLossPolicy.ABORT_RUN
        if args.on_diversity_loss == "abort"
        else DiversityLossPolicy.RECORD_AND_CONTINUE
    )
    return MonitorConfig(
        threshold_instructions=threshold,
        check_period_us=args.period_us,
        diversity_loss_policy=policy,
        run_timeout_us=args.timeout_ms * 1000 if args.timeout_ms is not None else None,
        head_core=head_core,
        trail_core=trail_core,
        monitor_core=monitor_core,
    )


def _resolve_threshold(args) -> tuple[int, str]:
    """Threshold and counter kind, honoring a calibration report if given."""
    if args.threshold is not None and args.calibration_file:
        raise ValueError("give either --threshold or --calibration-file, not both")
    if args.threshold is not None:
        return args.threshold, args.counter
    if args.calibration_file:
        report = calibration.read_report(args.calibration_file)
        # A threshold is only meaningful against the counter it was measured
        # with; adopt the report's counter unless explicitly overridden.
        counter = report.counter if args.counter == "auto" else args.counter
        return report.recommended_threshold, counter
    raise ValueError("a threshold is required: --threshold N or --calibration-file FILE")


def _cmd_run(args) -> int:
    threshold, counter = _resolve_threshold(args)
    if args.backend == "process":
        if not args.workload:
            raise ValueError("the process backend needs --workload")
        workload = parse_workload_id(args.workload, seed=args.seed)
        config = _run_config(args, threshold)
        fault = integrity.parse_fault_spec(args.inject) if args.inject else None
        outputs = [bytearray(size) for size in workload.payload.output_sizes]
        verdict, trace = monitor.protect(
            workload.computation,
            workload.payload.inputs,
            workload.payload.input_sizes,
            outputs,
            workload.payload.output_sizes,
            config,
            counter=counter,
            inject=fault,
        )
    elif args.backend.startswith("scripted:"):
        if args.workload:
            raise ValueError("the scripted backend replays a schedule; it takes no --workload")
        if args.inject:
            raise ValueError("fault injection needs real replicas (process backend)")
        path = args.backend.partition(":")[2]
        if not path:
            raise ValueError("scripted backend needs a file: --backend scripted:FILE")
        with open(path) as f:
            schedule = sim.read_schedule_csv(
                f,
                period_ticks=args.period_ticks,
                suspend_latency_ticks=args.scripted_latency,
            )
        config = _run_config(args, threshold)
        verdict, trace = monitor.run_scripted(schedule, config)
    else:
        raise ValueError(f"unknown backend {args.backend!r} (expected process or scripted:FILE)")

    if args.trace_out:
        monitor.write_trace(trace, args.trace_out)
    print(verdict.describe())
    return _VERDICT_EXIT[verdict.kind]


def _cmd_calibrate(args) -> int:
    if args.margin < 1:
        raise ValueError("margin must be >= 1")
    if args.backend == "process":
        report = calibration.calibrate(
            check_period_us=args.period_us,
            safety_margin=args.margin,
            duration_us=args.duration_ms * 1000,
            probes=args.samples,
            counter=args.counter,
        )
    elif args.backend.startswith("scripted:"):
        path = args.backend.partition(":")[2]
        if not path:
            raise ValueError("scripted backend needs a file: --backend scripted:FILE")
        with open(path) as f:
            schedule = sim.read_schedule_csv(
                f, suspend_latency_ticks=args.scripted_latency
            )
        report = calibration.calibrate_scripted(
            schedule,
            tick_us=args.tick_us,
            check_period_us=args.period_us,
            safety_margin=args.margin,
            window_ticks=args.window_ticks,
        )
    else:
        raise ValueError(f"unknown backend {args.backend!r} (expected process or scripted:FILE)")
    calibration.write_report(report, sys.stdout)
    if args.out:
        calibration.write_report(report, args.out)
    return 0


def _cmd_simulate(args) -> int:
    alphabet = [int(p) for p in args.alphabet.split(",") if p.strip() != ""]
    result = sim.exhaustive_check(
        alphabet,
        ticks=args.ticks,
        period_ticks=args.period,
        suspend_latency_ticks=args.latency,
        threshold=args.threshold,
    )
    if result.safe:
        print(f"safe: no schedule out of {result.schedules_checked} drives staggering negative")
        return 0
    ce = result.counterexample
    trace = sim.simulate(ce, args.threshold)
    print(
        f"unsafe: schedule {result.schedules_checked} reaches staggering "
        f"{sim.min_staggering(trace)} (threshold {args.threshold})"
    )
    if args.counterexample_out:
        with open(args.counterexample_out, "w") as f:
            sim.write_schedule_csv(ce, f)
        print(f"counterexample written to {args.counterexample_out}")
    return EX_COUNTEREXAMPLE


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "calibrate":
            return _cmd_calibrate(args)
        return _cmd_simulate(args)
    except sim.SearchSpaceTooLarge as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EX_SEARCH_SPACE
    except CounterUnavailable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EX_UNAVAILABLE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EX_USAGE
    except (SpawnFailure, PinningFailure, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EX_SETUP


if __name__ == "__main__":
    sys.exit(main())
