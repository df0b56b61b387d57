"""Output comparison and fault injection.

Comparison is byte-exact: replicas run the same deterministic wrapper on
identical private input copies, so any differing byte is a detected fault,
never noise. Injection exists to prove that claim end to end: flip one output
bit, stall one replica, or kill it outright, and watch the verdict change
accordingly.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

from .core import Role, Verdict


class ShapeMismatch(ValueError):
    """Output lists disagree in arity or byte length; comparison is undefined."""


def compare_outputs(
    head_outputs: Sequence[bytes],
    trail_outputs: Sequence[bytes],
    output_sizes: Sequence[int],
) -> Verdict:
    """Byte-for-byte verdict over both replicas' outputs.

    Returns Match, or Mismatch carrying (output_index, first_differing_byte)
    for every output that differs. Shape violations raise instead of counting
    as mismatches: they indicate harness bugs, not computation faults.
    """
    if not (len(head_outputs) == len(trail_outputs) == len(output_sizes)):
        raise ShapeMismatch(
            f"output arity differs: head {len(head_outputs)}, "
            f"trail {len(trail_outputs)}, declared {len(output_sizes)}"
        )
    for i, (a, b, size) in enumerate(zip(head_outputs, trail_outputs, output_sizes)):
        if len(a) != size or len(b) != size:
            raise ShapeMismatch(
                f"output {i}: head {len(a)} bytes, trail {len(b)} bytes, declared {size}"
            )
    locations = []
    for i, (a, b) in enumerate(zip(head_outputs, trail_outputs)):
        if a == b:
            continue
        offset = next(j for j in range(len(a)) if a[j] != b[j])
        locations.append((i, offset))
    if locations:
        return Verdict.mismatch(locations)
    return Verdict.match()


class FaultKind(Enum):
    BIT_FLIP = "bitflip"
    FREEZE = "freeze"
    CRASH = "crash"


@dataclass(frozen=True)
class FaultSpec:
    """One injectable fault, parseable from 'kind:target[:params]' text."""

    kind: FaultKind
    target: Role
    output_index: int = 0
    byte_offset: int = 0
    bit_index: int = 0
    duration_us: int = 0

    @classmethod
    def bit_flip(cls, target: Role, output_index: int, byte_offset: int, bit_index: int) -> "FaultSpec":
        return cls(
            kind=FaultKind.BIT_FLIP,
            target=target,
            output_index=output_index,
            byte_offset=byte_offset,
            bit_index=bit_index,
        )

    @classmethod
    def freeze(cls, target: Role, duration_us: int) -> "FaultSpec":
        return cls(kind=FaultKind.FREEZE, target=target, duration_us=duration_us)

    @classmethod
    def crash(cls, target: Role) -> "FaultSpec":
        return cls(kind=FaultKind.CRASH, target=target)


_DURATION_SUFFIXES = (("us", 1), ("ms", 1000), ("s", 1_000_000))


def _parse_duration_us(text: str) -> int:
    for suffix, scale in _DURATION_SUFFIXES:
        if text.endswith(suffix):
            return int(text[: -len(suffix)]) * scale
    return int(text)  # bare numbers are microseconds


def parse_fault_spec(text: str) -> FaultSpec:
    """Parse 'bitflip:trail:0:0:3', 'freeze:head:3ms' or 'crash:head'."""
    parts = text.strip().split(":")
    if len(parts) < 2:
        raise ValueError(f"fault spec {text!r} needs at least kind:target")
    kind_text, target_text = parts[0], parts[1]
    try:
        kind = FaultKind(kind_text)
    except ValueError:
        raise ValueError(
            f"unknown fault kind {kind_text!r} (expected bitflip, freeze or crash)"
        ) from None
    try:
        target = Role(target_text)
    except ValueError:
        raise ValueError(f"unknown fault target {target_text!r} (expected head or trail)") from None
    params = parts[2:]
    if kind is FaultKind.BIT_FLIP:
        if len(params) != 3:
            raise ValueError("bitflip needs output_index:byte_offset:bit_index")
        output_index, byte_offset, bit_index = (int(p) for p in params)
        if not 0 <= bit_index < 8:
            raise ValueError("bit_index must be 0..7")
        if output_index < 0 or byte_offset < 0:
            raise ValueError("bitflip coordinates must be non-negative")
        return FaultSpec.bit_flip(target, output_index, byte_offset, bit_index)
    if kind is FaultKind.FREEZE:
        if len(params) != 1:
            raise ValueError("freeze needs a duration, e.g. freeze:head:3ms")
        duration_us = _parse_duration_us(params[0])
        if duration_us <= 0:
            raise ValueError("freeze duration must be positive")
        return FaultSpec.freeze(target, duration_us)
    if params:
        raise ValueError("crash takes no parameters")
    return FaultSpec.crash(target)


class _FreezeDriver:
    """Suspend the target out of band at the first check, resume after the hold."""

    def __init__(self, session, fault: FaultSpec):
        self.session = session
        self.fault = fault
        self.resume_after_ns: int | None = None
        self.done = False

    def on_check(self, now_ns: int, head_count: int, trail_count: int) -> None:
        if self.done:
            return
        handle = self.session.handle(self.fault.target)
        if self.resume_after_ns is None:
            self.session.progress_source.suspend(handle)
            self.resume_after_ns = now_ns + self.fault.duration_us * 1000
        elif now_ns >= self.resume_after_ns:
            self.session.progress_source.resume(handle)
            self.done = True


def inject_fault(session, fault: FaultSpec) -> Callable[[int, int, int], None] | None:
    """Arm one fault against a live session.

    Bit flips are applied to the target's output region after it terminates
    and before collection; a crash kills the target right now, before it can
    win the race against the first check. Both need no runtime hook. A freeze
    is a timed behavior, so it returns a hook the enforcement loop calls at
    each check (after reading counts, before deciding).
    """
    if fault.kind is FaultKind.BIT_FLIP:
        session.register_bitflip(fault.target, fault.output_index, fault.byte_offset, fault.bit_index)
        return None
    if fault.kind is FaultKind.FREEZE:
        return _FreezeDriver(session, fault).on_check
    session.kill_replica(fault.target)
    return None
