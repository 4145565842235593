"""Task graph materialization and dependency progression.

Streaming wires each stage-k task to its same-input stage-(k-1) predecessor
(1:1); barrier wires it to all N predecessors (1:N). In both modes a task
unblocking consumes the output of its same-input predecessor, so the two
modes compute identical results and differ only in unlock timing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import InvalidState, ShapeMismatch, UnknownTask
from .model import (
    ExecutionMode,
    PipelineSpec,
    TaskRecord,
    TaskState,
    task_id_for,
)
from .transport import PayloadRouting

_FAILABLE_STATES = (TaskState.DISPATCHED, TaskState.RUNNING)
_COMPLETABLE_STATES = (TaskState.DISPATCHED, TaskState.RUNNING)


@dataclass(slots=True)
class TaskGraph:
    """N*S task records plus the transposed dependency index."""

    spec: PipelineSpec
    mode: ExecutionMode
    tasks: dict[int, TaskRecord]
    reverse_deps: dict[int, list[int]]
    completed_count: list[int]
    outputs: dict[int, PayloadRouting] = field(default_factory=dict)

    @property
    def input_count(self) -> int:
        return self.spec.input_count

    @property
    def stage_count(self) -> int:
        return self.spec.stage_count

    def task(self, task_id: int) -> TaskRecord:
        try:
            return self.tasks[task_id]
        except KeyError:
            raise UnknownTask(f"task {task_id} does not exist") from None

    def is_complete(self) -> bool:
        return all(t.state is TaskState.COMPLETE for t in self.tasks.values())

    def sink_outputs(self) -> list[PayloadRouting]:
        """Outputs of the sink stage in ascending input order."""
        sink = self.stage_count - 1
        n = self.input_count
        return [self.outputs[task_id_for(sink, i, n)] for i in range(n)]


def materialize_tasks(spec: PipelineSpec) -> TaskGraph:
    """Build the N*S graph: stage-0 tasks pending, the rest blocked."""
    n = spec.input_count
    s = spec.stage_count
    mode = spec.execution_mode
    tasks: dict[int, TaskRecord] = {}
    reverse: dict[int, list[int]] = {task_id_for(k, i, n): [] for k in range(s) for i in range(n)}

    for stage in range(s):
        for inp in range(n):
            tid = task_id_for(stage, inp, n)
            if stage == 0:
                deps: tuple[int, ...] = ()
            elif mode is ExecutionMode.STREAMING:
                deps = (task_id_for(stage - 1, inp, n),)
            else:
                deps = tuple(task_id_for(stage - 1, j, n) for j in range(n))
            state = TaskState.PENDING if not deps else TaskState.BLOCKED
            tasks[tid] = TaskRecord(
                task_id=tid,
                stage_index=stage,
                input_index=inp,
                state=state,
                deps_remaining=len(deps),
                dependency_ids=deps,
            )
            for dep in deps:
                reverse[dep].append(tid)

    for dependents in reverse.values():
        dependents.sort()

    return TaskGraph(
        spec=spec,
        mode=mode,
        tasks=tasks,
        reverse_deps=reverse,
        completed_count=[0] * s,
    )


def pending_tasks(graph: TaskGraph) -> list[TaskRecord]:
    """All pending tasks in ascending task_id order."""
    return [graph.tasks[tid] for tid in sorted(graph.tasks) if graph.tasks[tid].state is TaskState.PENDING]


def _check_output_shape(graph: TaskGraph, record: TaskRecord, output: PayloadRouting) -> None:
    if output.inline is None:
        return  # store refs are verified at resolve/decode time
    expected = graph.spec.stage(record.stage_index).output_shape
    if tuple(output.inline.shape) != expected:
        raise ShapeMismatch(
            f"task {record.task_id} output shape {list(output.inline.shape)} != "
            f"stage {record.stage_index} manifest output shape {list(expected)}"
        )


def complete_task(graph: TaskGraph, task_id: int, output: PayloadRouting) -> list[int]:
    """Mark a task complete, decrement dependents, return newly-pending ids.

    A dependent reaching zero remaining dependencies turns pending and gets
    its same-input predecessor's output injected as input_payload.
    """
    record = graph.task(task_id)
    if record.state not in _COMPLETABLE_STATES:
        raise InvalidState(
            f"task {task_id} cannot complete from state {record.state.value}"
        )
    _check_output_shape(graph, record, output)

    record.state = TaskState.COMPLETE
    graph.outputs[task_id] = output
    graph.completed_count[record.stage_index] += 1

    newly_pending: list[int] = []
    n = graph.input_count
    for dep_id in graph.reverse_deps[task_id]:
        dependent = graph.tasks[dep_id]
        dependent.deps_remaining -= 1
        if dependent.deps_remaining == 0 and dependent.state is TaskState.BLOCKED:
            dependent.state = TaskState.PENDING
            upstream = task_id_for(dependent.stage_index - 1, dependent.input_index, n)
            dependent.input_payload = graph.outputs[upstream]
            newly_pending.append(dep_id)
    newly_pending.sort()
    return newly_pending


def fail_task(graph: TaskGraph, task_id: int) -> TaskRecord:
    """Reset a dispatched/running task to pending for re-dispatch.

    The input payload is retained so recovery does not re-run upstream
    stages.
    """
    record = graph.task(task_id)
    if record.state not in _FAILABLE_STATES:
        raise InvalidState(f"task {task_id} cannot fail from state {record.state.value}")
    record.state = TaskState.PENDING
    record.assigned_worker = None
    record.attempt_count += 1
    return record


def mark_dispatched(graph: TaskGraph, task_id: int, worker_id: str) -> TaskRecord:
    record = graph.task(task_id)
    if record.state is not TaskState.PENDING:
        raise InvalidState(f"task {task_id} cannot dispatch from state {record.state.value}")
    record.state = TaskState.DISPATCHED
    record.assigned_worker = worker_id
    return record
