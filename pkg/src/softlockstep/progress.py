"""Per-replica progress counting and suspension control.

The monitor only ever talks to a ProgressSource: read a replica's cumulative
progress count, stop it, wake it, ask whether it exited. The OS-backed source
lives in linuxperf.py; this module holds the contract, the deterministic
scripted source used by protocol tests, and a replay source that feeds a
previously recorded run back through the live loop.

Scripted time is measured in ticks. During tick i a running scripted replica
accrues its i-th delta; a suspend issued at tick k with latency L lets it
accrue through tick k+L and freezes it from tick k+L+1; a resume at tick k
takes effect from tick k+1. These rules are deliberately identical to the
simulator's, which is what makes monitor-vs-simulator cross-validation exact.
"""

from __future__ import annotations

import enum
import itertools
import time
from dataclasses import dataclass
from typing import Protocol, runtime_checkable

from .core import Action, Role, StaggeringSample


class ProgressError(Exception):
    pass


class CounterUnavailable(ProgressError):
    """The host cannot provide the requested progress counter.

    The message always carries remediation hints (privilege knob or missing
    facility) because this is the error an operator has to act on.
    """


class StaleHandle(ProgressError):
    """Operation on a replica that has been reaped or released."""


class ExitKind(enum.Enum):
    SUCCESS = "success"
    NONZERO_EXIT = "nonzero-exit"
    CRASH = "crash"


@dataclass(frozen=True)
class ExitStatus:
    kind: ExitKind
    code: int = 0

    @property
    def success(self) -> bool:
        return self.kind is ExitKind.SUCCESS

    @property
    def failure_cause(self) -> str:
        return self.kind.value


_handle_ids = itertools.count(1)


@dataclass(frozen=True)
class ReplicaHandle:
    """Opaque token for one spawned replica (OS pid or script slot in ref)."""

    replica_id: int
    role: Role
    ref: int

    @classmethod
    def fresh(cls, role: Role, ref: int) -> "ReplicaHandle":
        return cls(replica_id=next(_handle_ids), role=role, ref=ref)


@runtime_checkable
class ProgressSource(Protocol):
    """Behavioral contract the monitor depends on.

    read_count is monotonically non-decreasing per handle and must work
    without any cooperation from the replica, including while it is stopped.
    suspend/resume are idempotent.
    """

    def read_count(self, handle: ReplicaHandle) -> int: ...

    def suspend(self, handle: ReplicaHandle) -> None: ...

    def resume(self, handle: ReplicaHandle) -> None: ...

    def is_terminated(self, handle: ReplicaHandle) -> tuple[bool, ExitStatus | None]: ...


class LoopClock(Protocol):
    """Advances the monitor loop by one check period and timestamps samples."""

    def wait_one_period(self) -> None: ...

    def now_ns(self) -> int: ...


class RealClock:
    """Wall-clock periods for runs over live processes."""

    def __init__(self, period_us: int):
        self.period_us = period_us

    def wait_one_period(self) -> None:
        time.sleep(self.period_us / 1_000_000)

    def now_ns(self) -> int:
        return time.monotonic_ns()


@dataclass(frozen=True)
class ScriptedReplicaSpec:
    """Per-tick deltas plus suspension behavior for one scripted replica.

    length, when set, terminates the replica as soon as its count reaches it;
    either way the replica terminates once its delta list is exhausted.
    """

    deltas: tuple[int, ...]
    length: int | None = None
    suspend_latency_ticks: int = 0
    start_suspended: bool = False

    @classmethod
    def of(cls, deltas, length=None, suspend_latency_ticks=0, start_suspended=False):
        return cls(tuple(int(d) for d in deltas), length, suspend_latency_ticks, start_suspended)


class _ScriptedReplica:
    def __init__(self, spec: ScriptedReplicaSpec):
        self.spec = spec
        self.count = 0
        # Tick index from which accrual stops; None while running, 0 = never ran.
        self.frozen_from: int | None = 0 if spec.start_suspended else None

    def accrue(self, tick: int) -> None:
        if self.terminated_at(tick - 1):
            return
        if self.frozen_from is not None and tick >= self.frozen_from:
            return
        delta = self.spec.deltas[tick - 1] if tick <= len(self.spec.deltas) else 0
        if self.spec.length is not None:
            delta = min(delta, self.spec.length - self.count)
        self.count += delta

    def terminated_at(self, tick: int) -> bool:
        if self.spec.length is not None and self.count >= self.spec.length:
            return True
        return tick >= len(self.spec.deltas)


class ScriptedSource:
    """Deterministic test double implementing the full ProgressSource contract.

    Time only moves when advance() is called; a ScriptedClock does that once
    per monitor period so scripted runs are exactly reproducible.
    """

    def __init__(self, specs: dict[Role, ScriptedReplicaSpec], tick_ns: int = 1000):
        self.tick = 0
        self.tick_ns = tick_ns
        self._replicas: dict[int, _ScriptedReplica] = {}
        self._handles: dict[Role, ReplicaHandle] = {}
        for slot, (role, spec) in enumerate(specs.items()):
            handle = ReplicaHandle.fresh(role, slot)
            self._handles[role] = handle
            self._replicas[handle.replica_id] = _ScriptedReplica(spec)

    def handle(self, role: Role) -> ReplicaHandle:
        return self._handles[role]

    def _replica(self, handle: ReplicaHandle) -> _ScriptedReplica:
        try:
            return self._replicas[handle.replica_id]
        except KeyError:
            raise StaleHandle(f"unknown scripted replica {handle.replica_id}") from None

    def advance(self, ticks: int) -> None:
        for _ in range(ticks):
            self.tick += 1
            for replica in self._replicas.values():
                replica.accrue(self.tick)

    @property
    def now_ns(self) -> int:
        return self.tick * self.tick_ns

    def read_count(self, handle: ReplicaHandle) -> int:
        return self._replica(handle).count

    def suspend(self, handle: ReplicaHandle) -> None:
        replica = self._replica(handle)
        if replica.frozen_from is None:
            replica.frozen_from = self.tick + replica.spec.suspend_latency_ticks + 1

    def resume(self, handle: ReplicaHandle) -> None:
        self._replica(handle).frozen_from = None

    def is_terminated(self, handle: ReplicaHandle) -> tuple[bool, ExitStatus | None]:
        if self._replica(handle).terminated_at(self.tick):
            return True, ExitStatus(ExitKind.SUCCESS)
        return False, None


class ScriptedClock:
    def __init__(self, source: ScriptedSource, period_ticks: int):
        self.source = source
        self.period_ticks = period_ticks

    def wait_one_period(self) -> None:
        self.source.advance(self.period_ticks)

    def now_ns(self) -> int:
        return self.source.now_ns


class ReplaySource:
    """Feeds counts recorded at each check of a previous run back to the loop.

    Suspend/resume are no-ops: the recorded counts already embody whatever
    suspensions the original monitor applied, so re-applying them would
    distort the replay. Termination is reproduced at the recorded intervals.
    """

    def __init__(
        self,
        head_counts: list[int],
        trail_counts: list[int],
        head_done_interval: int,
        trail_done_interval: int,
        timestamps_ns: list[int],
    ):
        if not (len(head_counts) == len(trail_counts) == len(timestamps_ns)):
            raise ValueError("replay streams must have equal length")
        self._head_counts = head_counts
        self._trail_counts = trail_counts
        self._timestamps = timestamps_ns
        self._done = {Role.HEAD: head_done_interval, Role.TRAIL: trail_done_interval}
        self.index = -1
        self._handles = {role: ReplicaHandle.fresh(role, 0) for role in Role}

    @classmethod
    def from_samples(cls, samples: list[StaggeringSample]) -> "ReplaySource":
        head_done = trail_done = len(samples)
        for sample in samples:
            if sample.action is Action.HEAD_DONE:
                head_done = sample.interval_index
            elif sample.action is Action.TRAIL_DONE:
                trail_done = sample.interval_index
        return cls(
            head_counts=[s.head_count for s in samples],
            trail_counts=[s.trail_count for s in samples],
            head_done_interval=head_done,
            trail_done_interval=trail_done,
            timestamps_ns=[s.timestamp_ns for s in samples],
        )

    def handle(self, role: Role) -> ReplicaHandle:
        return self._handles[role]

    def step(self) -> None:
        if self.index + 1 < len(self._head_counts):
            self.index += 1

    def now_ns(self) -> int:
        return self._timestamps[max(self.index, 0)]

    def read_count(self, handle: ReplicaHandle) -> int:
        counts = self._head_counts if handle.role is Role.HEAD else self._trail_counts
        return counts[max(self.index, 0)]

    def suspend(self, handle: ReplicaHandle) -> None:
        pass

    def resume(self, handle: ReplicaHandle) -> None:
        pass

    def is_terminated(self, handle: ReplicaHandle) -> tuple[bool, ExitStatus | None]:
        if self.index >= self._done[handle.role]:
            return True, ExitStatus(ExitKind.SUCCESS)
        return False, None


class ReplayClock:
    def __init__(self, source: ReplaySource):
        self.source = source

    def wait_one_period(self) -> None:
        self.source.step()

    def now_ns(self) -> int:
        return self.source.now_ns()
