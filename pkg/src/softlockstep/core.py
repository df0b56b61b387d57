"""Shared domain types and the staggering arithmetic every other module builds on.

Staggering is the head replica's progress count minus the trail's, as a signed
number. The monitor keeps it at or above a configured threshold by stopping the
trail whenever the observed staggering falls below the threshold and waking it
once the margin is restored. Everything here is pure data and pure functions.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass


class StartupPolicy(enum.Enum):
    """How the trail replica enters the run."""

    TRAIL_SUSPENDED_UNTIL_THRESHOLD = "trail-suspended-until-threshold"


class DiversityLossPolicy(enum.Enum):
    """What to do when the trail catches up with the head (staggering < 0)."""

    RECORD_AND_CONTINUE = "record-and-continue"
    ABORT_RUN = "abort-run"


class TrailState(enum.Enum):
    """The monitor's view of the trail replica."""

    RUNNING = "running"
    SUSPENDED = "suspended"


class Action(enum.Enum):
    """What the monitor did (or observed) at one check."""

    NONE = "NONE"
    SUSPEND = "SUSPEND"
    RESUME = "RESUME"
    HEAD_DONE = "HEAD_DONE"
    TRAIL_DONE = "TRAIL_DONE"
    DIVERSITY_LOSS = "DIVERSITY_LOSS"


class Role(enum.Enum):
    HEAD = "head"
    TRAIL = "trail"


@dataclass(frozen=True)
class MonitorConfig:
    """Parameters of one protected run.

    threshold_instructions is the minimum staggering the monitor enforces,
    in progress units of the counter backing the run (retired instructions
    for the hardware counter). It has no default: it is platform dependent
    and must be supplied by the caller or taken from a calibration report.
    Durations are integer microseconds.
    """

    threshold_instructions: int
    check_period_us: int = 1000
    startup_policy: StartupPolicy = StartupPolicy.TRAIL_SUSPENDED_UNTIL_THRESHOLD
    diversity_loss_policy: DiversityLossPolicy = DiversityLossPolicy.RECORD_AND_CONTINUE
    run_timeout_us: int | None = None
    head_core: int | None = None
    trail_core: int | None = None
    monitor_core: int | None = None


def validate_config(config: MonitorConfig) -> list[str]:
    """Return every violated MonitorConfig invariant; empty list means ok."""
    errors: list[str] = []
    if config.threshold_instructions <= 0:
        errors.append("threshold must be positive")
    if config.check_period_us <= 0:
        errors.append("check period must be positive")
    if config.run_timeout_us is not None and config.run_timeout_us <= 0:
        errors.append("run timeout must be positive when set")
    cores = {
        "head_core": config.head_core,
        "trail_core": config.trail_core,
        "monitor_core": config.monitor_core,
    }
    named = [(name, core) for name, core in cores.items() if core is not None]
    for i, (name_a, core_a) in enumerate(named):
        for name_b, core_b in named[i + 1 :]:
            if core_a == core_b:
                errors.append(f"cores must be distinct ({name_a}={core_a}, {name_b}={core_b})")
    return errors


@dataclass(frozen=True)
class PayloadSpec:
    """The unit of replication: ordered input buffers and output sizes.

    Inputs are whatever exposes the buffer protocol; input_sizes[i] must equal
    the byte length of inputs[i]. Lists may be empty and sizes may be zero.
    """

    inputs: tuple[bytes, ...]
    input_sizes: tuple[int, ...]
    output_sizes: tuple[int, ...]

    @classmethod
    def of(cls, inputs, input_sizes, output_sizes) -> "PayloadSpec":
        return cls(
            inputs=tuple(bytes(b) for b in inputs),
            input_sizes=tuple(int(n) for n in input_sizes),
            output_sizes=tuple(int(n) for n in output_sizes),
        )

    def validate(self) -> list[str]:
        errors: list[str] = []
        if len(self.inputs) != len(self.input_sizes):
            errors.append(
                f"{len(self.inputs)} input buffers but {len(self.input_sizes)} declared sizes"
            )
        else:
            for i, (buf, size) in enumerate(zip(self.inputs, self.input_sizes)):
                if len(buf) != size:
                    errors.append(f"input {i} is {len(buf)} bytes, declared {size}")
        for i, size in enumerate(self.input_sizes):
            if size < 0:
                errors.append(f"input size {i} is negative")
        for i, size in enumerate(self.output_sizes):
            if size < 0:
                errors.append(f"output size {i} is negative")
        return errors

    @property
    def total_input_bytes(self) -> int:
        return sum(self.input_sizes)

    @property
    def total_output_bytes(self) -> int:
        return sum(self.output_sizes)


@dataclass(frozen=True)
class StaggeringSample:
    """One monitor observation: both counts, their signed difference, the action."""

    interval_index: int
    timestamp_ns: int
    head_count: int
    trail_count: int
    staggering: int
    action: Action

    def __post_init__(self):
        if self.staggering != self.head_count - self.trail_count:
            raise ValueError(
                f"staggering {self.staggering} != head {self.head_count} - trail {self.trail_count}"
            )

    @classmethod
    def at(cls, interval_index, timestamp_ns, head_count, trail_count, action) -> "StaggeringSample":
        return cls(
            interval_index=interval_index,
            timestamp_ns=timestamp_ns,
            head_count=head_count,
            trail_count=trail_count,
            staggering=head_count - trail_count,
            action=action,
        )


class VerdictKind(enum.Enum):
    MATCH = "match"
    MISMATCH = "mismatch"
    REPLICA_FAILURE = "replica-failure"
    DIVERSITY_LOSS = "diversity-loss"
    TIMEOUT = "timeout"


# Causes a replica failure verdict can carry. "counter-failure" covers counter
# reads failing mid-run, which aborts the loop with replica-failure semantics.
FAILURE_CAUSES = ("crash", "nonzero-exit", "counter-failure")


@dataclass(frozen=True)
class Verdict:
    """Outcome of a protected run (tagged union over VerdictKind)."""

    kind: VerdictKind
    mismatches: tuple[tuple[int, int], ...] = ()
    failed_role: Role | None = None
    failure_cause: str | None = None
    loss_sample: StaggeringSample | None = None

    def __post_init__(self):
        if self.kind is VerdictKind.MISMATCH and not self.mismatches:
            raise ValueError("a mismatch verdict must carry at least one differing location")
        if self.kind is VerdictKind.REPLICA_FAILURE:
            if self.failed_role is None or self.failure_cause not in FAILURE_CAUSES:
                raise ValueError("replica-failure verdict needs a role and a known cause")
        if self.kind is VerdictKind.DIVERSITY_LOSS:
            if self.loss_sample is None or self.loss_sample.staggering >= 0:
                raise ValueError("diversity-loss verdict must carry the negative-staggering sample")

    @classmethod
    def match(cls) -> "Verdict":
        return cls(kind=VerdictKind.MATCH)

    @classmethod
    def mismatch(cls, locations) -> "Verdict":
        return cls(kind=VerdictKind.MISMATCH, mismatches=tuple((int(i), int(o)) for i, o in locations))

    @classmethod
    def replica_failure(cls, role: Role, cause: str) -> "Verdict":
        return cls(kind=VerdictKind.REPLICA_FAILURE, failed_role=role, failure_cause=cause)

    @classmethod
    def diversity_loss(cls, sample: StaggeringSample) -> "Verdict":
        return cls(kind=VerdictKind.DIVERSITY_LOSS, loss_sample=sample)

    @classmethod
    def timeout(cls) -> "Verdict":
        return cls(kind=VerdictKind.TIMEOUT)

    def describe(self) -> str:
        if self.kind is VerdictKind.MATCH:
            return "MATCH"
        if self.kind is VerdictKind.MISMATCH:
            locs = ", ".join(f"output {i} first differs at byte {o}" for i, o in self.mismatches)
            return f"MISMATCH ({locs})"
        if self.kind is VerdictKind.REPLICA_FAILURE:
            return f"REPLICA_FAILURE ({self.failed_role.value}: {self.failure_cause})"
        if self.kind is VerdictKind.DIVERSITY_LOSS:
            return (
                f"DIVERSITY_LOSS (staggering {self.loss_sample.staggering} "
                f"at interval {self.loss_sample.interval_index})"
            )
        return "TIMEOUT"


def staggering(head_count: int, trail_count: int) -> int:
    """Signed staggering: head count minus trail count.

    Negative values are meaningful (the trail caught up) and are never clamped.
    Python integers are unbounded, so the 64-bit overflow case of the contract
    cannot occur here; counts must simply be non-negative.
    """
    if head_count < 0 or trail_count < 0:
        raise ValueError("progress counts are non-negative")
    return head_count - trail_count


def decide(staggering_value: int, threshold: int, trail_state: TrailState) -> Action:
    """The enforcement rule applied at every check.

    Below the threshold (strictly) with the trail running: stop it. At or
    above the threshold with the trail stopped: wake it. Anything else needs
    no action; in particular staggering exactly at the threshold is safe.
    """
    if staggering_value < threshold:
        if trail_state is TrailState.RUNNING:
            return Action.SUSPEND
    elif trail_state is TrailState.SUSPENDED:
        return Action.RESUME
    return Action.NONE
