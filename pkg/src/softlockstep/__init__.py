"""Software lockstep: run a computation twice with enforced staggering.

A protected run forks the computation into two OS processes (head and trail)
on private copies of the inputs, keeps the trail at least a threshold of
progress behind the head by suspending and resuming it, and compares the two
output sets byte for byte when both finish. The staggering makes a transient
host fault land in different program states in the two replicas, so it cannot
corrupt both outputs identically; the comparison then catches it.
"""

from .calibration import (
    CalibrationReport,
    calibrate,
    measure_monitor_latency,
    measure_peak_rate,
    read_report,
    recommend_threshold,
    write_report,
)
from .core import (
    Action,
    DiversityLossPolicy,
    MonitorConfig,
    PayloadSpec,
    Role,
    StaggeringSample,
    StartupPolicy,
    TrailState,
    Verdict,
    VerdictKind,
    decide,
    staggering,
    validate_config,
)
from .integrity import FaultKind, FaultSpec, ShapeMismatch, compare_outputs, parse_fault_spec
from .monitor import (
    LoopOutcome,
    LoopResult,
    Trace,
    enforcement_loop,
    protect,
    read_trace,
    replay,
    run_scripted,
    write_trace,
)
from .progress import (
    CounterUnavailable,
    ExitKind,
    ExitStatus,
    ProgressError,
    ProgressSource,
    RealClock,
    ReplayClock,
    ReplaySource,
    ReplicaHandle,
    ScriptedClock,
    ScriptedReplicaSpec,
    ScriptedSource,
    StaleHandle,
)
from .replication import (
    PinningFailure,
    ReplicaIncomplete,
    ReplicaSession,
    SpawnFailure,
    WrappedComputation,
    spawn_replicas,
)
from .sim import (
    CheckResult,
    EmptyTrace,
    Schedule,
    SearchSpaceTooLarge,
    SimTrace,
    exhaustive_check,
    min_staggering,
    read_schedule_csv,
    simulate,
    write_schedule_csv,
)
from .workloads import (
    Workload,
    checksum_workload,
    direct_run,
    matmul_workload,
    parse_workload_id,
    spin_workload,
)

__version__ = "0.1.0"

__all__ = [
    "Action",
    "CalibrationReport",
    "CheckResult",
    "CounterUnavailable",
    "DiversityLossPolicy",
    "EmptyTrace",
    "ExitKind",
    "ExitStatus",
    "FaultKind",
    "FaultSpec",
    "LoopOutcome",
    "LoopResult",
    "MonitorConfig",
    "PayloadSpec",
    "PinningFailure",
    "ProgressError",
    "ProgressSource",
    "RealClock",
    "ReplayClock",
    "ReplaySource",
    "ReplicaHandle",
    "ReplicaIncomplete",
    "ReplicaSession",
    "Role",
    "Schedule",
    "ScriptedClock",
    "ScriptedReplicaSpec",
    "ScriptedSource",
    "SearchSpaceTooLarge",
    "ShapeMismatch",
    "SimTrace",
    "SpawnFailure",
    "StaggeringSample",
    "StaleHandle",
    "StartupPolicy",
    "Trace",
    "TrailState",
    "Verdict",
    "VerdictKind",
    "Workload",
    "WrappedComputation",
    "calibrate",
    "checksum_workload",
    "compare_outputs",
    "decide",
    "direct_run",
    "enforcement_loop",
    "exhaustive_check",
    "matmul_workload",
    "measure_monitor_latency",
    "measure_peak_rate",
    "min_staggering",
    "parse_fault_spec",
    "parse_workload_id",
    "protect",
    "read_report",
    "read_schedule_csv",
    "read_trace",
    "recommend_threshold",
    "replay",
    "run_scripted",
    "simulate",
    "spawn_replicas",
    "spin_workload",
    "staggering",
    "validate_config",
    "write_report",
    "write_schedule_csv",
    "write_trace",
]
