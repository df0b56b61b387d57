"""Output comparison exactness and the fault grammar/driver."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from softlockstep.core import Role, VerdictKind
from softlockstep.integrity import (
    FaultKind,
    FaultSpec,
    ShapeMismatch,
    compare_outputs,
    inject_fault,
    parse_fault_spec,
)


def test_identical_outputs_match():
    outs = [b"abc", b"", b"\x00" * 4]
    verdict = compare_outputs(outs, list(outs), [3, 0, 4])
    assert verdict.kind is VerdictKind.MATCH
    assert compare_outputs([], [], []).kind is VerdictKind.MATCH


def test_mismatch_reports_the_first_differing_byte_per_output():
    head = [b"aXcdY", b"same", b"zzzz"]
    trail = [b"abcde", b"same", b"zzzZ"]
    verdict = compare_outputs(head, trail, [5, 4, 4])
    assert verdict.kind is VerdictKind.MISMATCH
    assert verdict.mismatches == ((0, 1), (2, 3))  # earliest offset only


def test_comparison_is_symmetric():
    head, trail = [b"0123"], [b"01x3"]
    a = compare_outputs(head, trail, [4])
    b = compare_outputs(trail, head, [4])
    assert a.mismatches == b.mismatches == ((0, 2),)


def test_shape_violations_raise_instead_of_reporting_mismatch():
    with pytest.raises(ShapeMismatch, match="arity"):
        compare_outputs([b"a"], [b"a", b"b"], [1])
    with pytest.raises(ShapeMismatch, match="output 0"):
        compare_outputs([b"ab"], [b"a"], [2])
    with pytest.raises(ShapeMismatch, match="declared"):
        compare_outputs([b"ab"], [b"ab"], [3])


@settings(max_examples=300, deadline=None)
@given(
    data=st.binary(min_size=1, max_size=64),
    offset_frac=st.floats(min_value=0.0, max_value=1.0, exclude_max=True),
    bit=st.integers(min_value=0, max_value=7),
)
def test_single_bit_corruption_is_always_located_exactly(data, offset_frac, bit):
    offset = int(offset_frac * len(data))
    corrupted = bytearray(data)
    corrupted[offset] ^= 1 << bit
    verdict = compare_outputs([data], [bytes(corrupted)], [len(data)])
    assert verdict.kind is VerdictKind.MISMATCH
    assert verdict.mismatches == ((0, offset),)


def test_parse_bitflip():
    spec = parse_fault_spec("bitflip:trail:0:0:3")
    assert spec == FaultSpec.bit_flip(Role.TRAIL, 0, 0, 3)
    spec = parse_fault_spec("bitflip:head:2:117:7")
    assert (spec.kind, spec.target) == (FaultKind.BIT_FLIP, Role.HEAD)
    assert (spec.output_index, spec.byte_offset, spec.bit_index) == (2, 117, 7)


def test_parse_freeze_durations():
    assert parse_fault_spec("freeze:head:3ms").duration_us == 3000
    assert parse_fault_spec("freeze:head:2s").duration_us == 2_000_000
    assert parse_fault_spec("freeze:head:10us").duration_us == 10
    assert parse_fault_spec("freeze:trail:150").duration_us == 150  # bare = us


def test_parse_crash():
    assert parse_fault_spec("crash:head") == FaultSpec.crash(Role.HEAD)
    assert parse_fault_spec(" crash:trail ").target is Role.TRAIL


@pytest.mark.parametrize("text,fragment", [
    ("bitflip", "kind:target"),
    ("sulk:head", "unknown fault kind"),
    ("bitflip:nose:0:0:0", "unknown fault target"),
    ("bitflip:head:0:0", "output_index:byte_offset:bit_index"),
    ("bitflip:head:0:0:8", "bit_index must be 0..7"),
    ("bitflip:head:-1:0:0", "non-negative"),
    ("freeze:head", "needs a duration"),
    ("freeze:head:0", "must be positive"),
    ("freeze:head:-5ms", "must be positive"),
    ("crash:head:now", "no parameters"),
])
def test_parse_rejects_bad_specs(text, fragment):
    with pytest.raises(ValueError, match=fragment):
        parse_fault_spec(text)


class _FakeSource:
    def __init__(self, log):
        self.log = log

    def suspend(self, handle):
        self.log.append(("suspend", handle))

    def resume(self, handle):
        self.log.append(("resume", handle))


class _FakeSession:
    def __init__(self):
        self.log = []
        self.progress_source = _FakeSource(self.log)

    def handle(self, role):
        return role

    def register_bitflip(self, role, output_index, byte_offset, bit_index):
        self.log.append(("bitflip", role, output_index, byte_offset, bit_index))

    def kill_replica(self, role):
        self.log.append(("kill", role))


def test_inject_bitflip_registers_and_needs_no_hook():
    session = _FakeSession()
    hook = inject_fault(session, FaultSpec.bit_flip(Role.TRAIL, 1, 9, 2))
    assert hook is None
    assert session.log == [("bitflip", Role.TRAIL, 1, 9, 2)]


def test_inject_crash_kills_immediately():
    # The kill happens at arm time: a fast replica must not be able to finish
    # cleanly before the first check would have fired.
    session = _FakeSession()
    hook = inject_fault(session, FaultSpec.crash(Role.HEAD))
    assert hook is None
    assert session.log == [("kill", Role.HEAD)]


def test_freeze_driver_suspends_then_resumes_after_the_hold():
    session = _FakeSession()
    hook = inject_fault(session, FaultSpec.freeze(Role.HEAD, duration_us=100))
    assert callable(hook)
    assert session.log == []  # nothing until the first check
    hook(1_000_000, 0, 0)
    assert session.log == [("suspend", Role.HEAD)]
    hook(1_050_000, 0, 0)  # inside the hold: no action
    assert session.log == [("suspend", Role.HEAD)]
    hook(1_100_000, 0, 0)  # 100 us later: resume
    assert session.log == [("suspend", Role.HEAD), ("resume", Role.HEAD)]
    hook(1_200_000, 0, 0)  # done: never fires again
    assert session.log == [("suspend", Role.HEAD), ("resume", Role.HEAD)]
