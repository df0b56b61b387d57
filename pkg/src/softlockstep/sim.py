"""Discrete-time simulator of the staggering protocol.

Time advances in ticks. During tick i a running replica retires its scheduled
per-tick delta; every period_ticks the monitor samples both counts and applies
the enforcement rule; a suspend decision takes effect suspend_latency_ticks
later. Because the model also tracks staggering at every tick boundary (not
just at checks), it captures the true minimum staggering, which is exactly the
hazard the threshold guards against: the trail catching up between checks.

The model is small enough to brute-force. exhaustive_check enumerates every
per-tick rate assignment over a small alphabet and either certifies that no
schedule drives the staggering negative or returns one that does.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

from .core import (
    Action,
    DiversityLossPolicy,
    StaggeringSample,
    TrailState,
    decide,
)

# Bound on |alphabet|^(2*ticks) accepted by exhaustive_check.
MAX_SEARCH_SPACE = 10_000_000


class EmptyTrace(ValueError):
    pass


class SearchSpaceTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class Schedule:
    """Deterministic per-tick instruction-rate streams plus monitor timing.

    head_length / trail_length are the total instructions each replica needs
    to finish; None means the replica only terminates when its delta stream
    is exhausted. A replica whose stream is exhausted counts as successfully
    terminated even if a declared length was never reached.
    """

    head_deltas: tuple[int, ...]
    trail_deltas: tuple[int, ...]
    period_ticks: int = 1
    suspend_latency_ticks: int = 0
    head_length: int | None = None
    trail_length: int | None = None

    @classmethod
    def of(cls, head_deltas, trail_deltas, period_ticks=1, suspend_latency_ticks=0,
           head_length=None, trail_length=None) -> "Schedule":
        return cls(
            head_deltas=tuple(int(d) for d in head_deltas),
            trail_deltas=tuple(int(d) for d in trail_deltas),
            period_ticks=int(period_ticks),
            suspend_latency_ticks=int(suspend_latency_ticks),
            head_length=head_length,
            trail_length=trail_length,
        )

    @property
    def ticks(self) -> int:
        return max(len(self.head_deltas), len(self.trail_deltas))

    def validate(self) -> list[str]:
        errors = []
        if any(d < 0 for d in self.head_deltas) or any(d < 0 for d in self.trail_deltas):
            errors.append("deltas must be non-negative")
        if self.period_ticks < 1:
            errors.append("period_ticks must be >= 1")
        if self.suspend_latency_ticks < 0:
            errors.append("suspend_latency_ticks must be >= 0")
        if self.head_length is not None and self.head_length < 0:
            errors.append("head_length must be >= 0 when set")
        if self.trail_length is not None and self.trail_length < 0:
            errors.append("trail_length must be >= 0 when set")
        return errors


@dataclass
class SimTrace:
    """Simulation result: the sampled trace plus every tick-boundary staggering.

    instants holds (tick, staggering) for every completed tick while the head
    was still alive; samples holds what a live monitor would have recorded at
    check instants.
    """

    samples: list[StaggeringSample] = field(default_factory=list)
    instants: list[tuple[int, int]] = field(default_factory=list)
    diversity_lost: bool = False


def min_staggering(trace: SimTrace) -> int:
    """Minimum signed staggering over all modeled instants while the head lived."""
    if not trace.instants:
        raise EmptyTrace("trace has no modeled instants")
    return min(s for _, s in trace.instants)


def simulate(
    schedule: Schedule,
    threshold: int,
    diversity_loss_policy: DiversityLossPolicy = DiversityLossPolicy.RECORD_AND_CONTINUE,
    tick_ns: int = 1000,
) -> SimTrace:
    """Run the enforcement protocol over a schedule, tick by tick.

    The trail starts suspended. Checks happen at the end of every
    period_ticks-th tick: the monitor reads both counts, emits one sample,
    and applies the decision; a suspend freezes the trail starting
    suspend_latency_ticks + 1 ticks later. Once the head terminates the trail
    is released for good. The run ends when both replicas have terminated
    (or immediately on diversity loss under ABORT_RUN).
    """
    errors = schedule.validate()
    if errors:
        raise ValueError("; ".join(errors))

    head_count = 0
    trail_count = 0
    # Tick index before which the trail does not accrue; 0 = frozen from the start.
    trail_frozen_from: int | None = 0
    trail_view = TrailState.SUSPENDED
    head_done = False
    trail_done = False
    head_done_emitted = False
    trail_done_emitted = False
    trace = SimTrace()
    interval = 0
    tick = 0

    def terminated(count: int, length: int | None, deltas: tuple[int, ...]) -> bool:
        if length is not None and count >= length:
            return True
        return tick >= len(deltas)

    while True:
        # One monitor period: the replicas run period_ticks ticks, then a check.
        for _ in range(schedule.period_ticks):
            tick += 1
            head_alive_at_tick_start = not head_done
            if not head_done:
                delta = schedule.head_deltas[tick - 1] if tick <= len(schedule.head_deltas) else 0
                if schedule.head_length is not None:
                    delta = min(delta, schedule.head_length - head_count)
                head_count += delta
            if not trail_done and (trail_frozen_from is None or tick < trail_frozen_from):
                delta = schedule.trail_deltas[tick - 1] if tick <= len(schedule.trail_deltas) else 0
                if schedule.trail_length is not None:
                    delta = min(delta, schedule.trail_length - trail_count)
                trail_count += delta
            head_done = head_done or terminated(head_count, schedule.head_length, schedule.head_deltas)
            trail_done = trail_done or terminated(trail_count, schedule.trail_length, schedule.trail_deltas)
            if head_alive_at_tick_start:
                trace.instants.append((tick, head_count - trail_count))

        stag = head_count - trail_count
        timestamp_ns = tick * tick_ns

        if head_done and not head_done_emitted:
            head_done_emitted = True
            trace.samples.append(
                StaggeringSample.at(interval, timestamp_ns, head_count, trail_count, Action.HEAD_DONE)
            )
            if trail_view is TrailState.SUSPENDED:
                trail_frozen_from = None
                trail_view = TrailState.RUNNING
        elif trail_done and not trail_done_emitted:
            trail_done_emitted = True
            trace.samples.append(
                StaggeringSample.at(interval, timestamp_ns, head_count, trail_count, Action.TRAIL_DONE)
            )
        elif head_done_emitted or trail_done_emitted:
            trace.samples.append(
                StaggeringSample.at(interval, timestamp_ns, head_count, trail_count, Action.NONE)
            )
        elif stag < 0:
            trace.diversity_lost = True
            trace.samples.append(
                StaggeringSample.at(interval, timestamp_ns, head_count, trail_count, Action.DIVERSITY_LOSS)
            )
            if trail_view is TrailState.RUNNING:
                trail_frozen_from = tick + schedule.suspend_latency_ticks + 1
                trail_view = TrailState.SUSPENDED
            if diversity_loss_policy is DiversityLossPolicy.ABORT_RUN:
                return trace
        else:
            action = decide(stag, threshold, trail_view)
            trace.samples.append(
                StaggeringSample.at(interval, timestamp_ns, head_count, trail_count, action)
            )
            if action is Action.SUSPEND:
                trail_frozen_from = tick + schedule.suspend_latency_ticks + 1
                trail_view = TrailState.SUSPENDED
            elif action is Action.RESUME:
                trail_frozen_from = None
                trail_view = TrailState.RUNNING

        interval += 1
        if head_done_emitted and trail_done_emitted:
            return trace


def _min_staggering_fast(
    head_deltas, trail_deltas, period_ticks, latency_ticks, threshold, horizon
) -> int:
    """Tight inner loop for exhaustive_check: minimum tick-boundary staggering.

    Semantically identical to simulate() restricted to non-terminating replicas
    (no lengths), but without trace construction. Kept separate because the
    brute force runs it hundreds of thousands of times.
    """
    head_count = 0
    trail_count = 0
    frozen_from = 0  # trail frozen from the start; -1 encodes "running"
    suspended_view = True
    minimum = 0
    tick = 0
    while tick < horizon:
        for _ in range(period_ticks):
            tick += 1
            if tick <= len(head_deltas):
                head_count += head_deltas[tick - 1]
            if tick <= len(trail_deltas) and (frozen_from < 0 or tick < frozen_from):
                trail_count += trail_deltas[tick - 1]
            stag = head_count - trail_count
            if stag < minimum:
                minimum = stag
        stag = head_count - trail_count
        if stag < threshold:
            if not suspended_view:
                frozen_from = tick + latency_ticks + 1
                suspended_view = True
        elif suspended_view:
            frozen_from = -1
            suspended_view = False
    return minimum


@dataclass(frozen=True)
class CheckResult:
    safe: bool
    counterexample: Schedule | None = None
    schedules_checked: int = 0


def exhaustive_check(
    rate_alphabet,
    ticks: int,
    period_ticks: int,
    suspend_latency_ticks: int,
    threshold: int,
) -> CheckResult:
    """Brute-force the safety claim over every head/trail rate assignment.

    Enumerates |alphabet|^(2*ticks) schedules and returns the first one whose
    staggering goes negative at any tick boundary, or a safe verdict if none
    exists. The enumeration itself is the oracle: no schedule is skipped.
    """
    alphabet = tuple(sorted({int(r) for r in rate_alphabet}))
    if not alphabet or any(r < 0 for r in alphabet):
        raise ValueError("rate alphabet must be non-empty and non-negative")
    if period_ticks < 1 or suspend_latency_ticks < 0 or ticks < 1:
        raise ValueError("period_ticks >= 1, suspend_latency_ticks >= 0, ticks >= 1 required")
    space = len(alphabet) ** (2 * ticks)
    if space > MAX_SEARCH_SPACE:
        raise SearchSpaceTooLarge(
            f"{len(alphabet)}^(2*{ticks}) = {space} schedules exceeds the "
            f"enumerable bound of {MAX_SEARCH_SPACE}"
        )

    checked = 0
    fast = _min_staggering_fast
    for head in itertools.product(alphabet, repeat=ticks):
        for trail in itertools.product(alphabet, repeat=ticks):
            checked += 1
            if fast(head, trail, period_ticks, suspend_latency_ticks, threshold, ticks) < 0:
                return CheckResult(
                    safe=False,
                    counterexample=Schedule.of(
                        head, trail,
                        period_ticks=period_ticks,
                        suspend_latency_ticks=suspend_latency_ticks,
                    ),
                    schedules_checked=checked,
                )
    return CheckResult(safe=True, schedules_checked=checked)


def write_schedule_csv(schedule: Schedule, sink) -> None:
    """Serialize a schedule as `tick,head_delta,trail_delta` rows (1-based ticks)."""
    sink.write("tick,head_delta,trail_delta\n")
    for i in range(schedule.ticks):
        head = schedule.head_deltas[i] if i < len(schedule.head_deltas) else 0
        trail = schedule.trail_deltas[i] if i < len(schedule.trail_deltas) else 0
        sink.write(f"{i + 1},{head},{trail}\n")


def read_schedule_csv(source, period_ticks=1, suspend_latency_ticks=0,
                      head_length=None, trail_length=None) -> Schedule:
    """Parse `tick,head_delta,trail_delta` rows back into a Schedule."""
    lines = [line.strip() for line in source if line.strip()]
    if not lines or lines[0] != "tick,head_delta,trail_delta":
        raise ValueError("expected header 'tick,head_delta,trail_delta'")
    head_deltas = []
    trail_deltas = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 3:
            raise ValueError(f"line {lineno}: expected 3 fields, got {len(parts)}")
        tick, head, trail = (int(p) for p in parts)
        if tick != len(head_deltas) + 1:
            raise ValueError(f"line {lineno}: ticks must be consecutive from 1")
        head_deltas.append(head)
        trail_deltas.append(trail)
    return Schedule.of(
        head_deltas, trail_deltas,
        period_ticks=period_ticks,
        suspend_latency_ticks=suspend_latency_ticks,
        head_length=head_length,
        trail_length=trail_length,
    )
