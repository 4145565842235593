"""pipefleet: pipeline-parallel staged inference over memory-constrained workers."""

from .errors import PipefleetError
from .model import (
    ExecutionMode,
    PartitionManifest,
    PipelineSpec,
    TaskRecord,
    TaskState,
    TelemetrySnapshot,
    ValidatedPipeline,
    WorkerDescriptor,
    validate_pipeline_spec,
)
from .taskgraph import TaskGraph, complete_task, fail_task, materialize_tasks, pending_tasks
from .transport import (
    PayloadEnvelope,
    PayloadRouting,
    PayloadStore,
    Tensor,
    compression_ratio,
    decode_payload,
    encode_payload,
    resolve_payload,
    route_payload,
)
from .scheduling import (
    AssignmentPlan,
    CriteriaMatrix,
    LoadPlan,
    ResidencyTier,
    compute_tier,
    entropy_weights,
    gate_workers,
    rank_workers,
    select_load_target,
    two_phase_assign,
)
from .foreman import Foreman, Prediction, aggregate_results
from .worker import SessionCache, WorkerAgent, WorkerDelays
from .harness import (
    FleetConfig,
    MetricsReport,
    StageConfig,
    WorkerConfig,
    render_report,
    run_experiment,
    run_single,
)
from .oracle import makespan_oracle

__version__ = "0.1.0"

__all__ = [
    "AssignmentPlan",
    "CriteriaMatrix",
    "ExecutionMode",
    "FleetConfig",
    "Foreman",
    "LoadPlan",
    "MetricsReport",
    "PartitionManifest",
    "PayloadEnvelope",
    "PayloadRouting",
    "PayloadStore",
    "PipefleetError",
    "PipelineSpec",
    "Prediction",
    "ResidencyTier",
    "SessionCache",
    "StageConfig",
    "TaskGraph",
    "TaskRecord",
    "TaskState",
    "TelemetrySnapshot",
    "Tensor",
    "ValidatedPipeline",
    "WorkerAgent",
    "WorkerConfig",
    "WorkerDelays",
    "WorkerDescriptor",
    "aggregate_results",
    "complete_task",
    "compression_ratio",
    "compute_tier",
    "decode_payload",
    "encode_payload",
    "entropy_weights",
    "fail_task",
    "gate_workers",
    "makespan_oracle",
    "materialize_tasks",
    "pending_tasks",
    "rank_workers",
    "render_report",
    "resolve_payload",
    "route_payload",
    "run_experiment",
    "run_single",
    "select_load_target",
    "two_phase_assign",
    "validate_pipeline_spec",
]
