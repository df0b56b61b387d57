"""Host calibration: peak progress rate, suspension latency, threshold choice.

The staggering threshold must cover the progress a replica can make between
the moment the monitor decides to suspend and the moment the freeze lands:
one check period plus the suspension latency, at the fastest rate the host
can sustain, times a safety margin. The arithmetic is done in exact rationals
over integer microseconds so that a recommended threshold is reproducible to
the last digit, and every report can be re-derived from its own fields.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from fractions import Fraction

from . import linuxperf
from .core import MonitorConfig, Role
from .progress import LoopClock, ProgressSource, RealClock, ReplicaHandle

_REPORT_KEYS = (
    "counter",
    "peak_rate",
    "check_period_us",
    "monitor_latency_us",
    "safety_margin",
    "recommended_threshold",
)


def recommend_threshold(
    peak_rate: float,
    check_period_us: int,
    monitor_latency_us: int,
    safety_margin: float,
) -> int:
    """ceil(peak_rate * (period + latency) * margin), computed exactly.

    peak_rate is in progress units per second, the durations in integer
    microseconds. Fractions avoid binary-float rounding: the result is the
    true ceiling, not the ceiling of an approximation.
    """
    if peak_rate <= 0:
        raise ValueError("peak_rate must be positive")
    if check_period_us <= 0:
        raise ValueError("check_period_us must be positive")
    if monitor_latency_us < 0:
        raise ValueError("monitor_latency_us must be non-negative")
    if safety_margin < 1:
        raise ValueError("safety_margin must be >= 1")
    exposure_s = Fraction(check_period_us + monitor_latency_us, 1_000_000)
    exact = Fraction(peak_rate) * exposure_s * Fraction(safety_margin)
    return math.ceil(exact)


@dataclass(frozen=True)
class CalibrationReport:
    """Everything needed to re-derive (and therefore audit) a threshold."""

    counter: str
    peak_rate: float
    check_period_us: int
    monitor_latency_us: int
    safety_margin: float
    recommended_threshold: int

    def validate(self) -> list[str]:
        problems = []
        if self.peak_rate <= 0:
            problems.append("peak_rate must be positive")
        if self.check_period_us <= 0:
            problems.append("check_period_us must be positive")
        if self.monitor_latency_us < 0:
            problems.append("monitor_latency_us must be non-negative")
        if self.safety_margin < 1:
            problems.append("safety_margin must be >= 1")
        if not problems:
            expected = recommend_threshold(
                self.peak_rate,
                self.check_period_us,
                self.monitor_latency_us,
                self.safety_margin,
            )
            if expected != self.recommended_threshold:
                problems.append(
                    f"recommended_threshold {self.recommended_threshold} does not "
                    f"match its own fields (expected {expected})"
                )
        return problems


def write_report(report: CalibrationReport, sink) -> None:
    """Serialize as stable key=value lines (floats via repr, round-trip safe)."""
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "w") as f:
            write_report(report, f)
        return
    for key in _REPORT_KEYS:
        sink.write(f"{key}={_render(getattr(report, key))}\n")


def _render(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_report(source) -> CalibrationReport:
    """Parse key=value lines; refuses internally inconsistent reports."""
    if isinstance(source, (str, os.PathLike)):
        with open(source) as f:
            return read_report(f)
    values: dict[str, str] = {}
    for lineno, line in enumerate(source, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    missing = [k for k in _REPORT_KEYS if k not in values]
    if missing:
        raise ValueError(f"calibration file is missing {', '.join(missing)}")
    report = CalibrationReport(
        counter=values["counter"],
        peak_rate=float(values["peak_rate"]),
        check_period_us=int(values["check_period_us"]),
        monitor_latency_us=int(values["monitor_latency_us"]),
        safety_margin=float(values["safety_margin"]),
        recommended_threshold=int(values["recommended_threshold"]),
    )
    problems = report.validate()
    if problems:
        raise ValueError("; ".join(problems))
    return report


def peak_rate_over_windows(
    source: ProgressSource,
    handle: ReplicaHandle,
    clock: LoopClock,
    windows: int,
) -> float:
    """Maximum per-window progress rate (units per second) of one replica.

    Works over any source/clock pair: real counters with a sleeping clock,
    or a scripted source where the result is exact by construction.
    """
    if windows < 1:
        raise ValueError("need at least one window")
    best = 0.0
    prev_count = source.read_count(handle)
    prev_ns = clock.now_ns()
    for _ in range(windows):
        clock.wait_one_period()
        count = source.read_count(handle)
        now = clock.now_ns()
        if now > prev_ns:
            rate = (count - prev_count) * 1e9 / (now - prev_ns)
            best = max(best, rate)
        prev_count, prev_ns = count, now
    return best


def suspend_latency_over_probes(
    source: ProgressSource,
    handle: ReplicaHandle,
    clock: LoopClock,
    probes: int,
    settle_polls: int = 3,
) -> int:
    """Worst observed suspension latency in whole microseconds (ceiling).

    Each probe suspends the running replica and then polls its count until it
    has been stable for settle_polls consecutive polls; the latency is the
    time from the suspend call to the last observed count change. Taking the
    maximum over probes keeps the estimate conservative, which is the safe
    direction for the threshold formula.
    """
    if probes < 1:
        raise ValueError("need at least one probe")
    worst_ns = 0
    for _ in range(probes):
        source.resume(handle)
        # Let it run so a frozen counter is distinguishable from a slow one.
        clock.wait_one_period()
        clock.wait_one_period()
        suspended_at = clock.now_ns()
        source.suspend(handle)
        last_change = suspended_at
        prev = source.read_count(handle)
        stable = 0
        while stable < settle_polls:
            clock.wait_one_period()
            count = source.read_count(handle)
            if count != prev:
                last_change = clock.now_ns()
                prev = count
                stable = 0
            else:
                stable += 1
        worst_ns = max(worst_ns, last_change - suspended_at)
    source.resume(handle)
    return math.ceil(worst_ns / 1000)


def _busy_session(counter: str):
    # Local import: replication pulls in fork/mmap machinery that pure
    # threshold arithmetic callers never need.
    from .replication import spawn_replicas
    from .workloads import spin_workload

    workload = spin_workload(10**15)  # effectively runs until killed
    config = MonitorConfig(threshold_instructions=1)
    return spawn_replicas(
        workload.computation, workload.payload, config, counter=counter
    )


def measure_peak_rate(
    duration_us: int = 300_000,
    window_us: int = 20_000,
    counter: str = "auto",
) -> float:
    """Peak rate of a busy replica on this host, sampled over sub-windows."""
    if duration_us < 100_000:
        raise ValueError("duration_us must be at least 100000 (100 ms) for a stable estimate")
    if not 0 < window_us <= duration_us:
        raise ValueError("window_us must be positive and at most duration_us")
    session = _busy_session(counter)
    try:
        return peak_rate_over_windows(
            session.progress_source,
            session.handle(Role.HEAD),
            RealClock(window_us),
            windows=max(1, duration_us // window_us),
        )
    finally:
        session.release()


def measure_monitor_latency(
    probes: int = 30,
    poll_us: int = 100,
    counter: str = "auto",
) -> int:
    """Worst suspend-to-freeze latency on this host, in whole microseconds."""
    if probes < 30:
        raise ValueError("need at least 30 probes for a usable worst case")
    session = _busy_session(counter)
    try:
        return suspend_latency_over_probes(
            session.progress_source,
            session.handle(Role.HEAD),
            RealClock(poll_us),
            probes=probes,
        )
    finally:
        session.release()


def calibrate_scripted(
    schedule,
    tick_us: int = 1,
    check_period_us: int = 1000,
    safety_margin: float = 2.0,
    window_ticks: int = 10,
    probes: int = 3,
    settle_polls: int = 3,
) -> CalibrationReport:
    """Calibrate against a scripted schedule: exact results, no privileges.

    The schedule's head deltas define the measured rate (constant delta d per
    tick of tick_us gives exactly d * 1e6 / tick_us units per second) and its
    suspend_latency_ticks the measured latency (exactly latency * tick_us).
    Rate and latency run over two fresh sources so neither measurement
    consumes the other's delta stream.
    """
    from .progress import ScriptedClock, ScriptedReplicaSpec, ScriptedSource

    if tick_us < 1:
        raise ValueError("tick_us must be >= 1")
    if window_ticks < 1:
        raise ValueError("window_ticks must be >= 1")

    def fresh_source() -> ScriptedSource:
        return ScriptedSource(
            {
                Role.HEAD: ScriptedReplicaSpec.of(
                    schedule.head_deltas,
                    suspend_latency_ticks=schedule.suspend_latency_ticks,
                ),
                Role.TRAIL: ScriptedReplicaSpec.of(
                    schedule.trail_deltas, start_suspended=True
                ),
            },
            tick_ns=tick_us * 1000,
        )

    source = fresh_source()
    rate = peak_rate_over_windows(
        source,
        source.handle(Role.HEAD),
        ScriptedClock(source, window_ticks),
        windows=max(1, schedule.ticks // window_ticks),
    )
    source = fresh_source()
    latency_us = suspend_latency_over_probes(
        source,
        source.handle(Role.HEAD),
        ScriptedClock(source, 1),
        probes=probes,
        settle_polls=settle_polls,
    )
    threshold = recommend_threshold(rate, check_period_us, latency_us, safety_margin)
    return CalibrationReport(
        counter="scripted",
        peak_rate=rate,
        check_period_us=check_period_us,
        monitor_latency_us=latency_us,
        safety_margin=safety_margin,
        recommended_threshold=threshold,
    )


def calibrate(
    check_period_us: int = 1000,
    safety_margin: float = 2.0,
    duration_us: int = 300_000,
    window_us: int = 20_000,
    probes: int = 30,
    poll_us: int = 100,
    counter: str = "auto",
) -> CalibrationReport:
    """Measure this host and recommend a threshold for the given period.

    One busy replica session serves both measurements; the report carries the
    resolved counter kind so thresholds are never reused across metrics.
    """
    if duration_us < 100_000:
        raise ValueError("duration_us must be at least 100000 (100 ms) for a stable estimate")
    if probes < 30:
        raise ValueError("need at least 30 probes for a usable worst case")
    resolved = linuxperf.probe_counter(counter)
    session = _busy_session(resolved)
    try:
        head = session.handle(Role.HEAD)
        rate = peak_rate_over_windows(
            session.progress_source,
            head,
            RealClock(window_us),
            windows=max(1, duration_us // window_us),
        )
        latency_us = suspend_latency_over_probes(
            session.progress_source, head, RealClock(poll_us), probes=probes
        )
    finally:
        session.release()
    threshold = recommend_threshold(rate, check_period_us, latency_us, safety_margin)
    return CalibrationReport(
        counter=session.counter_kind,
        peak_rate=rate,
        check_period_us=check_period_us,
        monitor_latency_us=latency_us,
        safety_margin=safety_margin,
        recommended_threshold=threshold,
    )
