"""Enforcement loop: simulator parity, replay fidelity, verdicts, trace CSV."""

import io

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from softlockstep import linuxperf
from softlockstep.core import (
    Action,
    DiversityLossPolicy,
    MonitorConfig,
    Role,
    StaggeringSample,
    VerdictKind,
)
from softlockstep.integrity import FaultSpec
from softlockstep.monitor import (
    LoopOutcome,
    TRACE_HEADER,
    Trace,
    enforcement_loop,
    protect,
    read_trace,
    replay,
    run_scripted,
    write_trace,
)
from softlockstep.progress import (
    CounterUnavailable,
    ScriptedClock,
    ScriptedReplicaSpec,
    ScriptedSource,
)
from softlockstep.sim import Schedule, simulate
from softlockstep.workloads import checksum_workload, direct_run

try:
    linuxperf.probe_counter("auto")
    _counter_reason = ""
except CounterUnavailable as exc:
    _counter_reason = str(exc)

requires_counter = pytest.mark.skipif(
    bool(_counter_reason), reason=f"no progress counter: {_counter_reason}"
)


def cfg(threshold, **kwargs):
    return MonitorConfig(threshold_instructions=threshold, **kwargs)


OVERTAKE = Schedule.of([5, 0, 0, 0, 5, 5], [0, 3, 3, 0, 0, 0])


# ---------------------------------------------------------------- scripted

schedules = st.builds(
    Schedule.of,
    st.lists(st.integers(min_value=0, max_value=5), min_size=1, max_size=10),
    st.lists(st.integers(min_value=0, max_value=5), min_size=1, max_size=10),
    period_ticks=st.integers(min_value=1, max_value=3),
    suspend_latency_ticks=st.integers(min_value=0, max_value=3),
)


@settings(max_examples=300, deadline=None)
@given(schedule=schedules, threshold=st.integers(min_value=1, max_value=12))
def test_live_loop_matches_simulator_sample_for_sample(schedule, threshold):
    # The scripted backend drives the real enforcement loop; its trace must
    # equal the simulator's prediction field for field.
    expected = simulate(schedule, threshold=threshold)
    verdict, trace = run_scripted(schedule, cfg(threshold))
    assert trace.samples == expected.samples
    assert trace.validate() == []


@settings(max_examples=100, deadline=None)
@given(schedule=schedules, threshold=st.integers(min_value=1, max_value=12))
def test_live_loop_matches_simulator_under_abort_policy(schedule, threshold):
    expected = simulate(schedule, threshold=threshold,
                        diversity_loss_policy=DiversityLossPolicy.ABORT_RUN)
    _, trace = run_scripted(
        schedule, cfg(threshold, diversity_loss_policy=DiversityLossPolicy.ABORT_RUN)
    )
    assert trace.samples == expected.samples


@settings(max_examples=300, deadline=None)
@given(schedule=schedules, threshold=st.integers(min_value=1, max_value=12))
def test_sampled_staggering_has_a_floor_after_the_first_release(schedule, threshold):
    # Once the trail has been released at least once, no sample while the
    # head lives can read below threshold - r_max * (period + latency).
    _, trace = run_scripted(schedule, cfg(threshold))
    acts = [s.action for s in trace.samples]
    if Action.RESUME not in acts:
        return
    r_max = max(schedule.trail_deltas, default=0)
    floor = threshold - r_max * (schedule.period_ticks + schedule.suspend_latency_ticks)
    for sample in trace.samples[acts.index(Action.RESUME):]:
        if sample.action is Action.HEAD_DONE:
            break
        assert sample.staggering >= floor


def test_head_completion_releases_a_suspended_trail():
    # Threshold is unreachable, so only head termination can free the trail.
    schedule = Schedule.of([100, 100], [1] * 20)
    verdict, trace = run_scripted(schedule, cfg(1000))
    acts = [s.action for s in trace.samples]
    done_at = acts.index(Action.HEAD_DONE)
    assert done_at == 1
    assert trace.samples[done_at].trail_count == 0
    assert trace.samples[-1].action is Action.TRAIL_DONE
    assert trace.samples[-1].trail_count == 18  # ran ticks 3..20 after release
    assert verdict.kind is VerdictKind.MATCH


def test_scripted_timeout_cuts_the_run_short():
    schedule = Schedule.of([1] * 10, [1] * 10)
    verdict, trace = run_scripted(schedule, cfg(1, run_timeout_us=3))
    assert verdict.kind is VerdictKind.TIMEOUT
    assert len(trace.samples) == 2  # checks at 1 us and 2 us; 3 us hits the deadline


def test_abort_policy_turns_overtake_into_diversity_loss_verdict():
    verdict, trace = run_scripted(
        OVERTAKE, cfg(1, diversity_loss_policy=DiversityLossPolicy.ABORT_RUN)
    )
    assert verdict.kind is VerdictKind.DIVERSITY_LOSS
    assert verdict.loss_sample.staggering < 0
    assert trace.samples[-1].action is Action.DIVERSITY_LOSS


def test_record_policy_logs_losses_and_completes():
    verdict, trace = run_scripted(OVERTAKE, cfg(1))
    losses = [s for s in trace.samples if s.action is Action.DIVERSITY_LOSS]
    assert len(losses) == 2 and all(s.staggering == -1 for s in losses)
    assert trace.samples[-1].action is Action.TRAIL_DONE
    assert verdict.kind is VerdictKind.MATCH
    assert trace.validate() == []


def test_run_scripted_rejects_bad_schedule_and_config():
    with pytest.raises(ValueError):
        run_scripted(Schedule.of([1], [-1]), cfg(1))
    with pytest.raises(ValueError):
        run_scripted(Schedule.of([1], [1]), cfg(0))


def test_on_check_sees_exactly_what_the_samples_record():
    source = ScriptedSource({
        Role.HEAD: ScriptedReplicaSpec.of([10, 10, 10]),
        Role.TRAIL: ScriptedReplicaSpec.of([10, 10, 10], start_suspended=True),
    })
    seen = []
    result = enforcement_loop(
        source=source,
        clock=ScriptedClock(source, period_ticks=1),
        head=source.handle(Role.HEAD),
        trail=source.handle(Role.TRAIL),
        config=cfg(15),
        on_check=lambda now, h, t: seen.append((now, h, t)),
        backend="scripted",
    )
    assert result.outcome is LoopOutcome.COMPLETED
    assert seen == [(s.timestamp_ns, s.head_count, s.trail_count) for s in result.trace.samples]


class _FlakyCounterSource:
    """Delegates to a scripted source until read_count starts failing."""

    def __init__(self, inner, fail_after):
        self._inner = inner
        self._reads_left = fail_after

    def read_count(self, handle):
        if self._reads_left <= 0:
            raise OSError("counter fd went away")
        self._reads_left -= 1
        return self._inner.read_count(handle)

    def __getattr__(self, name):
        return getattr(self._inner, name)


def test_counter_failure_mid_run_aborts_with_replica_trouble():
    source = ScriptedSource({
        Role.HEAD: ScriptedReplicaSpec.of([1] * 10),
        Role.TRAIL: ScriptedReplicaSpec.of([1] * 10, start_suspended=True),
    })
    flaky = _FlakyCounterSource(source, fail_after=4)
    result = enforcement_loop(
        source=flaky,
        clock=ScriptedClock(source, period_ticks=1),
        head=source.handle(Role.HEAD),
        trail=source.handle(Role.TRAIL),
        config=cfg(100),
    )
    assert result.outcome is LoopOutcome.REPLICA_TROUBLE
    assert result.failure_cause == "counter-failure"
    assert result.failed_role is Role.HEAD
    assert len(result.trace.samples) == 2  # two clean checks before the failure


# ------------------------------------------------------------------ replay

def test_replay_reproduces_a_scripted_run_exactly():
    schedule = Schedule.of([100, 100, 0, 0, 100, 100, 100, 0], [50] * 8)
    config = cfg(150)
    _, trace = run_scripted(schedule, config)
    result = replay(trace, config)
    assert result.outcome is LoopOutcome.COMPLETED
    assert result.trace.samples == trace.samples
    assert result.trace.backend == "replay"


def test_replay_reproduces_an_aborted_run():
    config = cfg(1, diversity_loss_policy=DiversityLossPolicy.ABORT_RUN)
    _, trace = run_scripted(OVERTAKE, config)
    result = replay(trace, config)
    assert result.outcome is LoopOutcome.DIVERSITY_ABORT
    assert result.trace.samples == trace.samples


def test_replay_ignores_the_recorded_run_timeout():
    schedule = Schedule.of([100] * 6, [100] * 6)
    _, trace = run_scripted(schedule, cfg(150))
    result = replay(trace, cfg(150, run_timeout_us=1))
    assert result.outcome is LoopOutcome.COMPLETED
    assert result.trace.samples == trace.samples


# --------------------------------------------------------------- trace CSV

def sample(interval, ts, head, trail, action):
    return StaggeringSample.at(interval, ts, head, trail, action)


def test_trace_csv_exact_format():
    trace = Trace(samples=[sample(3, 1000, 950_000_000, 740_000_000, Action.RESUME)])
    buf = io.StringIO()
    write_trace(trace, buf)
    assert buf.getvalue().splitlines() == [
        "interval,timestamp_ns,head_instr,trail_instr,staggering,action",
        "3,1000,950000000,740000000,210000000,RESUME",
    ]


def test_trace_csv_round_trip_preserves_every_sample():
    _, trace = run_scripted(OVERTAKE, cfg(1))
    buf = io.StringIO()
    write_trace(trace, buf)
    parsed = read_trace(io.StringIO(buf.getvalue()))
    assert parsed.samples == trace.samples
    assert parsed.backend == "file"


def test_trace_csv_round_trip_through_a_path(tmp_path):
    _, trace = run_scripted(Schedule.of([10, 10], [10, 10]), cfg(5))
    path = tmp_path / "trace.csv"
    write_trace(trace, path)
    assert read_trace(path).samples == trace.samples


def test_empty_trace_is_a_header_only_file():
    buf = io.StringIO()
    write_trace(Trace(), buf)
    assert buf.getvalue() == ",".join(TRACE_HEADER) + "\n"
    assert read_trace(io.StringIO(buf.getvalue())).samples == []


def test_read_trace_rejects_malformed_input():
    with pytest.raises(ValueError, match="empty"):
        read_trace(io.StringIO(""))
    with pytest.raises(ValueError, match="header"):
        read_trace(io.StringIO("tick,head,trail\n"))
    header = ",".join(TRACE_HEADER) + "\n"
    with pytest.raises(ValueError, match="6 fields"):
        read_trace(io.StringIO(header + "0,0,1,1,0\n"))
    # staggering column must equal head - trail
    with pytest.raises(ValueError, match="staggering"):
        read_trace(io.StringIO(header + "0,0,5,1,3,NONE\n"))
    with pytest.raises(ValueError):
        read_trace(io.StringIO(header + "0,0,5,1,4,FROB\n"))


def test_trace_validate_flags_illegal_structures():
    ok = Trace(samples=[
        sample(0, 10, 5, 0, Action.NONE),
        sample(1, 20, 10, 0, Action.RESUME),
        sample(2, 30, 11, 8, Action.SUSPEND),
        sample(3, 40, 20, 8, Action.RESUME),
        sample(4, 50, 25, 12, Action.HEAD_DONE),
        sample(5, 60, 25, 25, Action.TRAIL_DONE),
    ])
    assert ok.validate() == []

    assert Trace(samples=[
        sample(0, 10, 1, 0, Action.NONE),
        sample(0, 20, 2, 0, Action.NONE),
    ]).validate() == ["interval 0 not increasing"]

    assert "decreases" in Trace(samples=[
        sample(0, 20, 1, 0, Action.NONE),
        sample(1, 10, 2, 0, Action.NONE),
    ]).validate()[0]

    assert "suspend while suspended" in Trace(samples=[
        sample(0, 10, 1, 0, Action.SUSPEND),
    ]).validate()[0]

    assert "resume while running" in Trace(samples=[
        sample(0, 10, 5, 0, Action.RESUME),
        sample(1, 20, 9, 1, Action.RESUME),
    ]).validate()[0]

    assert "HEAD_DONE emitted twice" in Trace(samples=[
        sample(0, 10, 5, 0, Action.HEAD_DONE),
        sample(1, 20, 5, 3, Action.HEAD_DONE),
    ]).validate()[0]

    # a loss check suspends, so a following RESUME is legal
    assert Trace(samples=[
        sample(0, 10, 5, 0, Action.RESUME),
        sample(1, 20, 5, 6, Action.DIVERSITY_LOSS),
        sample(2, 30, 9, 6, Action.RESUME),
    ]).validate() == []


# ----------------------------------------------------------- real processes

REAL_CONFIG = MonitorConfig(threshold_instructions=2_000_000, check_period_us=200)


def run_protected(workload, config=REAL_CONFIG, **kwargs):
    outputs = [bytearray(size) for size in workload.payload.output_sizes]
    verdict, trace = protect(
        workload.computation,
        workload.payload.inputs,
        workload.payload.input_sizes,
        outputs,
        workload.payload.output_sizes,
        config,
        **kwargs,
    )
    return verdict, trace, outputs


@requires_counter
def test_protect_match_delivers_the_head_outputs():
    workload = checksum_workload(nbytes=4096)
    verdict, trace, outputs = run_protected(workload)
    assert verdict.kind is VerdictKind.MATCH
    assert [bytes(buf) for buf in outputs] == direct_run(workload)
    assert trace.validate() == []
    assert trace.backend == f"process/{trace.counter}"
    actions = [s.action for s in trace.samples]
    assert actions.count(Action.HEAD_DONE) == 1
    assert actions.count(Action.TRAIL_DONE) == 1


@requires_counter
def test_protect_replay_recomputes_the_recorded_actions():
    workload = checksum_workload(nbytes=4096)
    verdict, trace, _ = run_protected(workload)
    assert verdict.kind is VerdictKind.MATCH
    result = replay(trace, REAL_CONFIG)
    assert result.outcome is LoopOutcome.COMPLETED
    assert result.trace.samples == trace.samples


@requires_counter
def test_protect_bitflip_mismatch_leaves_caller_buffers_untouched():
    workload = checksum_workload(nbytes=1024)
    verdict, trace, outputs = run_protected(
        workload, inject=FaultSpec.bit_flip(Role.TRAIL, 0, 3, 5)
    )
    assert verdict.kind is VerdictKind.MISMATCH
    assert verdict.mismatches == ((0, 3),)
    assert all(bytes(buf) == bytes(len(buf)) for buf in outputs)


@requires_counter
def test_protect_crash_injection_reports_replica_failure():
    workload = checksum_workload(nbytes=1024)
    verdict, _, _ = run_protected(workload, inject=FaultSpec.crash(Role.HEAD))
    assert verdict.kind is VerdictKind.REPLICA_FAILURE
    assert verdict.failed_role is Role.HEAD
    assert verdict.failure_cause == "crash"


@requires_counter
def test_protect_timeout_on_a_stuck_computation():
    def stuck(inputs, outputs):
        acc = 0
        for i in range(10**10):
            acc = (acc + i) & 0xFFFFFFFF
        outputs[0][:] = acc.to_bytes(4, "little")

    import time

    config = MonitorConfig(
        threshold_instructions=2_000_000, check_period_us=200, run_timeout_us=50_000
    )
    outputs = [bytearray(4)]
    started = time.monotonic()
    verdict, _ = protect(stuck, [], [], outputs, [4], config)
    assert verdict.kind is VerdictKind.TIMEOUT
    assert time.monotonic() - started < 5.0


def test_protect_validates_caller_buffers():
    workload = checksum_workload(nbytes=64)
    with pytest.raises(ValueError, match="read-only"):
        protect(workload.computation, workload.payload.inputs,
                workload.payload.input_sizes, [b"\x00" * 16], [16], REAL_CONFIG)
    with pytest.raises(ValueError, match="holds"):
        protect(workload.computation, workload.payload.inputs,
                workload.payload.input_sizes, [bytearray(3)], [16], REAL_CONFIG)
    with pytest.raises(ValueError, match="output buffers"):
        protect(workload.computation, workload.payload.inputs,
                workload.payload.input_sizes, [], [16], REAL_CONFIG)
    with pytest.raises(ValueError, match="threshold"):
        protect(workload.computation, workload.payload.inputs,
                workload.payload.input_sizes, [bytearray(16)], [16], cfg(0))
