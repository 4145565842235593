"""Core domain types: partition manifests, pipeline specs, tasks, workers.

Manifests, specs, telemetry and worker descriptors are immutable value
objects; construction performs the cheap local invariant checks while
`validate_pipeline_spec` performs the cross-stage ones.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from enum import Enum

from .errors import PipelineValidationError

_SHA256_RE = re.compile(r"^[0-9a-f]{64}$")


class ExecutionMode(str, Enum):
    STREAMING = "streaming"
    BARRIER = "barrier"


class TaskState(str, Enum):
    BLOCKED = "blocked"
    PENDING = "pending"
    DISPATCHED = "dispatched"
    RUNNING = "running"
    COMPLETE = "complete"
    FAILED = "failed"


def _check_shape(shape: tuple[int, ...], what: str) -> tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    if not shape or any(d <= 0 for d in shape):
        raise ValueError(f"{what} must be a non-empty tuple of positive ints, got {shape}")
    return shape


@dataclass(frozen=True, slots=True)
class PartitionManifest:
    """One stage artefact: identity, integrity and resource metadata."""

    stage_index: int
    artefact_id: str
    blob_checksum: str
    blob_size_bytes: int
    memory_footprint_bytes: int
    input_shape: tuple[int, ...]
    output_shape: tuple[int, ...]
    eager_broadcast: bool

    def __post_init__(self) -> None:
        if self.stage_index < 0:
            raise ValueError("stage_index must be >= 0")
        if not self.artefact_id:
            raise ValueError("artefact_id must be non-empty")
        if not _SHA256_RE.match(self.blob_checksum):
            raise ValueError("blob_checksum must be 64 lowercase hex chars")
        if self.blob_size_bytes <= 0:
            raise ValueError("blob_size_bytes must be > 0")
        if self.memory_footprint_bytes <= 0:
            raise ValueError("memory_footprint_bytes must be > 0")
        object.__setattr__(self, "input_shape", _check_shape(self.input_shape, "input_shape"))
        object.__setattr__(self, "output_shape", _check_shape(self.output_shape, "output_shape"))

    def to_wire(self) -> dict:
        return {
            "stage_index": self.stage_index,
            "artefact_id": self.artefact_id,
            "blob_checksum": self.blob_checksum,
            "blob_size_bytes": self.blob_size_bytes,
            "memory_footprint_bytes": self.memory_footprint_bytes,
            "input_shape": list(self.input_shape),
            "output_shape": list(self.output_shape),
            "eager_broadcast": self.eager_broadcast,
        }

    @classmethod
    def from_wire(cls, obj: dict) -> "PartitionManifest":
        return cls(
            stage_index=int(obj["stage_index"]),
            artefact_id=str(obj["artefact_id"]),
            blob_checksum=str(obj["blob_checksum"]),
            blob_size_bytes=int(obj["blob_size_bytes"]),
            memory_footprint_bytes=int(obj["memory_footprint_bytes"]),
            input_shape=tuple(obj["input_shape"]),
            output_shape=tuple(obj["output_shape"]),
            eager_broadcast=bool(obj["eager_broadcast"]),
        )


@dataclass(frozen=True, slots=True)
class PipelineSpec:
    """Ordered stage manifests plus the job-level execution parameters.

    `explicit_edges` is optional; when the submitter supplies a graph it is
    checked against the derived linear chain (and for cycles) instead of
    being trusted.
    """

    pipeline_id: str
    stages: tuple[PartitionManifest, ...]
    execution_mode: ExecutionMode
    input_count: int
    explicit_edges: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "execution_mode", ExecutionMode(self.execution_mode))
        if self.explicit_edges is not None:
            object.__setattr__(
                self, "explicit_edges", tuple((int(a), int(b)) for a, b in self.explicit_edges)
            )

    @property
    def stage_count(self) -> int:
        return len(self.stages)

    def stage(self, index: int) -> PartitionManifest:
        return self.stages[index]

    def artefact_for_stage(self, index: int) -> str:
        return self.stages[index].artefact_id

    def to_wire(self) -> dict:
        wire = {
            "pipeline_id": self.pipeline_id,
            "stages": [s.to_wire() for s in self.stages],
            "execution_mode": self.execution_mode.value,
            "input_count": self.input_count,
        }
        if self.explicit_edges is not None:
            wire["explicit_edges"] = [list(e) for e in self.explicit_edges]
        return wire

    @classmethod
    def from_wire(cls, obj: dict) -> "PipelineSpec":
        edges = obj.get("explicit_edges")
        return cls(
            pipeline_id=str(obj["pipeline_id"]),
            stages=tuple(PartitionManifest.from_wire(s) for s in obj["stages"]),
            execution_mode=ExecutionMode(obj["execution_mode"]),
            input_count=int(obj["input_count"]),
            explicit_edges=tuple((e[0], e[1]) for e in edges) if edges is not None else None,
        )


ROLE_SOURCE = "source"
ROLE_INTERMEDIATE = "intermediate"
ROLE_SINK = "sink"
ROLE_SOURCE_SINK = "source+sink"


@dataclass(frozen=True, slots=True)
class ValidatedPipeline:
    """A spec that passed validation, with derived stage classification."""

    spec: PipelineSpec
    stage_roles: tuple[str, ...]

    @property
    def source_stage(self) -> int:
        return 0

    @property
    def sink_stage(self) -> int:
        return self.spec.stage_count - 1


def _chain_is_cyclic(edges: tuple[tuple[int, int], ...], node_count: int) -> bool:
    adj: dict[int, list[int]] = {}
    indegree = dict.fromkeys(range(node_count), 0)
    for a, b in edges:
        adj.setdefault(a, []).append(b)
        if b in indegree:
            indegree[b] += 1
        else:
            indegree[b] = 0
    ready = [n for n, d in indegree.items() if d == 0]
    seen = 0
    while ready:
        node = ready.pop()
        seen += 1
        for child in adj.get(node, ()):
            indegree[child] -= 1
            if indegree[child] == 0:
                ready.append(child)
    return seen != len(indegree)


def validate_pipeline_spec(spec: PipelineSpec | ValidatedPipeline) -> ValidatedPipeline:
    """Validate a pipeline submission, collecting every violated invariant.

    Idempotent: validating an already-validated pipeline returns an equal
    result. Raises :class:`PipelineValidationError` listing all violations.
    """
    if isinstance(spec, ValidatedPipeline):
        spec = spec.spec

    violations: list[tuple[str, str]] = []
    stage_count = len(spec.stages)
    if stage_count == 0:
        raise PipelineValidationError([("EmptyPipeline", "pipeline has no stages")])

    if spec.input_count < 1:
        violations.append(("InvalidInputCount", f"input_count must be >= 1, got {spec.input_count}"))

    indices = [s.stage_index for s in spec.stages]
    seen: set[int] = set()
    for idx in indices:
        if idx in seen:
            violations.append(("DuplicateStageIndex", f"stage index {idx} appears more than once"))
        seen.add(idx)
    if seen != set(range(stage_count)) and not any(c == "DuplicateStageIndex" for c, _ in violations):
        violations.append(
            ("StageIndexGap", f"stage indices must be exactly 0..{stage_count - 1}, got {sorted(seen)}")
        )
    if indices != sorted(indices):
        violations.append(("StageIndexOrder", "stages must be listed in ascending stage_index order"))

    by_index = {s.stage_index: s for s in spec.stages}
    for s in spec.stages:
        if s.eager_broadcast != (s.stage_index == 0):
            violations.append(
                ("EagerFlagViolation", f"eager_broadcast must be true iff stage_index == 0 (stage {s.stage_index})")
            )

    for k in range(stage_count - 1):
        left = by_index.get(k)
        right = by_index.get(k + 1)
        if left is None or right is None:
            continue
        if left.output_shape != right.input_shape:
            violations.append(
                (
                    "ShapeMismatch",
                    f"stage {k} output_shape {list(left.output_shape)} != "
                    f"stage {k + 1} input_shape {list(right.input_shape)}",
                )
            )

    if spec.explicit_edges is not None:
        if _chain_is_cyclic(spec.explicit_edges, stage_count):
            violations.append(("CyclicTopology", "explicit graph contains a cycle"))
        else:
            expected = {(k, k + 1) for k in range(stage_count - 1)}
            if set(spec.explicit_edges) != expected:
                violations.append(
                    ("NonLinearTopology", "explicit graph must be the linear chain over the stage order")
                )

    if violations:
        raise PipelineValidationError(violations)

    if stage_count == 1:
        roles: tuple[str, ...] = (ROLE_SOURCE_SINK,)
    else:
        roles = tuple(
            ROLE_SOURCE if k == 0 else ROLE_SINK if k == stage_count - 1 else ROLE_INTERMEDIATE
            for k in range(stage_count)
        )
    return ValidatedPipeline(spec=spec, stage_roles=roles)


@dataclass(frozen=True, slots=True)
class TelemetrySnapshot:
    """One heartbeat's worth of device telemetry."""

    cpu_load: float
    ram_free_bytes: int
    battery_fraction: float
    rtt_ms: float
    temperature_c: float
    timestamp: int

    def __post_init__(self) -> None:
        for name in ("cpu_load", "battery_fraction", "rtt_ms", "temperature_c"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value}")
        if not 0.0 <= self.cpu_load <= 1.0:
            raise ValueError("cpu_load must be within [0, 1]")
        if not 0.0 <= self.battery_fraction <= 1.0:
            raise ValueError("battery_fraction must be within [0, 1]")
        if self.rtt_ms < 0:
            raise ValueError("rtt_ms must be >= 0")
        if self.ram_free_bytes < 0:
            raise ValueError("ram_free_bytes must be >= 0")

    def to_wire(self) -> dict:
        return {
            "cpu_load": self.cpu_load,
            "ram_free_bytes": self.ram_free_bytes,
            "battery_fraction": self.battery_fraction,
            "rtt_ms": self.rtt_ms,
            "temperature_c": self.temperature_c,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_wire(cls, obj: dict) -> "TelemetrySnapshot":
        return cls(
            cpu_load=float(obj["cpu_load"]),
            ram_free_bytes=int(obj["ram_free_bytes"]),
            battery_fraction=float(obj["battery_fraction"]),
            rtt_ms=float(obj["rtt_ms"]),
            temperature_c=float(obj["temperature_c"]),
            timestamp=int(obj["timestamp"]),
        )


@dataclass(frozen=True, slots=True)
class WorkerDescriptor:
    """Registry entry for one worker; the single `resident_partition` field
    makes a multi-resident state unrepresentable."""

    worker_id: str
    resident_partition: str | None
    disk_cache: frozenset[str]
    last_heartbeat: TelemetrySnapshot | None
    connected: bool
    success_count: int = 0
    failure_count: int = 0
    gpu_available: bool = False
    registration_order: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "disk_cache", frozenset(self.disk_cache))
        if self.resident_partition is not None and self.resident_partition not in self.disk_cache:
            raise ValueError("resident_partition must be present in disk_cache")
        if self.success_count < 0 or self.failure_count < 0:
            raise ValueError("success/failure counts must be >= 0")

    def with_updates(self, **changes) -> "WorkerDescriptor":
        return replace(self, **changes)

    @property
    def success_rate(self) -> float:
        total = self.success_count + self.failure_count
        return self.success_count / total if total else 1.0


@dataclass(slots=True)
class TaskRecord:
    """One (input, stage) unit of work; mutated only by its owning TaskGraph."""

    task_id: int
    stage_index: int
    input_index: int
    state: TaskState
    deps_remaining: int
    dependency_ids: tuple[int, ...]
    input_payload: object | None = None
    assigned_worker: str | None = None
    attempt_count: int = 0

    def __post_init__(self) -> None:
        if self.deps_remaining < 0:
            raise ValueError("deps_remaining must be >= 0")
        if self.deps_remaining > len(self.dependency_ids):
            raise ValueError("deps_remaining cannot exceed |dependency_ids|")
        if (self.state is TaskState.BLOCKED) != (self.deps_remaining > 0):
            raise ValueError("state is blocked iff deps_remaining > 0")


def task_id_for(stage_index: int, input_index: int, input_count: int) -> int:
    """Global task id layout: stage-major, input-minor."""
    return stage_index * input_count + input_index
