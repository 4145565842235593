"""Foreman: job creation, eager/JIT load sequencing, dispatch, recovery.

The foreman is a pure protocol state machine: handlers take (sender, message,
now_ms) and return the messages to send as (destination, message) pairs. A
single logical event loop (the harness queue or the asyncio reader) applies
events in arrival order, so no internal locking exists.

Residency bookkeeping is strictly ACK-driven: a worker counts as holding a
partition only after its MODEL_LOADED arrives, which is what closes the race
between a JIT load and the inference dispatched against it.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, field, replace

import numpy as np

from .canonical import sha256_hex
from .errors import (
    InvalidState,
    ShapeMismatch,
    UnknownTask,
    UnknownWorker,
    WrongWorker,
)
from .executor import parse_artefact_blob
from .model import (
    ExecutionMode,
    PipelineSpec,
    TaskState,
    TelemetrySnapshot,
    ValidatedPipeline,
    WorkerDescriptor,
    task_id_for,
    validate_pipeline_spec,
)
from . import protocol
from .errors import PipelineValidationError
from .scheduling import (
    CriteriaMatrix,
    ResidencyTier,
    STRATEGY_ENTROPY,
    compute_tier,
    entropy_weights,
    gate_workers,
    select_load_target,
    two_phase_assign,
)
from .taskgraph import (
    TaskGraph,
    complete_task,
    fail_task,
    mark_dispatched,
    materialize_tasks,
    pending_tasks,
)
from .transport import (
    PayloadEnvelope,
    PayloadRouting,
    PayloadStore,
    decode_payload,
    envelope_compression_stats,
    compression_ratio,
    resolve_payload,
    route_payload,
)

Outbound = tuple[str, dict]

JOB_RUNNING = "running"
JOB_COMPLETE = "complete"
JOB_FAILED = "failed"


@dataclass(frozen=True, slots=True)
class Prediction:
    """Averaged sink logits and the winning class (lowest index on ties)."""

    mean_logits: tuple[float, ...]
    predicted_class: int


def aggregate_results(per_input_logits: list[list[float]]) -> Prediction:
    """Elementwise mean across inputs, argmax with lowest-index tie-break."""
    if not per_input_logits:
        raise ShapeMismatch("no logit vectors to aggregate")
    width = len(per_input_logits[0])
    if width < 1:
        raise ShapeMismatch("logit vectors must have length >= 1")
    for vec in per_input_logits:
        if len(vec) != width:
            raise ShapeMismatch(f"logit vector length {len(vec)} != {width}")
    n = len(per_input_logits)
    mean = tuple(sum(vec[j] for vec in per_input_logits) / n for j in range(width))
    best = 0
    for j in range(1, width):
        if mean[j] > mean[best]:
            best = j
    return Prediction(mean_logits=mean, predicted_class=best)


def recovery_scores(
    survivors: list[WorkerDescriptor], target: str
) -> dict[str, float]:
    """Score surviving workers for re-dispatch after a disconnect.

    Entropy-weighted sum over (success_rate, ram_free, battery, gpu) plus a
    residency-tier bonus of (5 - tier) * 0.25.
    """
    if not survivors:
        return {}
    rows = []
    for w in survivors:
        telemetry = w.last_heartbeat
        ram = float(telemetry.ram_free_bytes) if telemetry else 0.0
        battery = telemetry.battery_fraction if telemetry else 0.0
        rows.append((w.success_rate, ram, battery, 1.0 if w.gpu_available else 0.0))
    if len(survivors) >= 2:
        matrix = CriteriaMatrix(
            worker_ids=tuple(w.worker_id for w in survivors),
            values=tuple(rows),
            is_benefit=(True, True, True, True),
        )
        weights = entropy_weights(matrix)
        raw = np.asarray(rows, dtype=np.float64)
        normalized = np.empty_like(raw)
        for j in range(raw.shape[1]):
            span = raw[:, j].max() - raw[:, j].min()
            normalized[:, j] = 0.5 if span == 0.0 else (raw[:, j] - raw[:, j].min()) / span
        base = normalized @ weights
    else:
        base = np.array([0.5])
    scores: dict[str, float] = {}
    for w, s in zip(survivors, base):
        tier = compute_tier(target, w)
        scores[w.worker_id] = float(s) + (5 - int(tier)) * 0.25
    return scores


@dataclass(slots=True)
class _RegistryEntry:
    descriptor: WorkerDescriptor
    last_seen_ms: int
    busy: tuple | None = None  # ("load", job_id, stage) | ("task", job_id, task_id)
    pending_load_tier: int | None = None
    current_rss: int = 0
    peak_rss: int = 0


@dataclass(slots=True)
class JobRecord:
    """Per-job state: validated spec, graph, stored JIT instructions."""

    job_id: str
    validated: ValidatedPipeline
    graph: TaskGraph
    blobs: dict[str, str]
    submitter: str
    submitted_ms: int
    pending_load_instructions: dict[int, dict] = field(default_factory=dict)
    jit_dispatched: set[int] = field(default_factory=set)
    outstanding_stage_loads: dict[int, set[str]] = field(default_factory=dict)
    status: str = JOB_RUNNING
    result: Prediction | None = None
    completed_ms: int | None = None
    dispatch_times: dict[int, int] = field(default_factory=dict)
    latencies_by_stage: dict[int, list[int]] = field(default_factory=dict)
    compression_samples: list[float] = field(default_factory=list)
    tier_hits: dict[int, int] = field(default_factory=lambda: {1: 0, 2: 0, 3: 0, 4: 0})
    recovery_events: list[dict] = field(default_factory=list)
    load_failures: dict[tuple[int, str], int] = field(default_factory=dict)

    @property
    def spec(self) -> PipelineSpec:
        return self.validated.spec

    def artefact_for_stage(self, stage: int) -> str:
        return self.spec.artefact_for_stage(stage)


class Foreman:
    """Central orchestrator state machine."""

    def __init__(
        self,
        store: PayloadStore,
        tau_ws: int = 1 << 20,
        strategy: str = STRATEGY_ENTROPY,
        heartbeat_interval_ms: int = 30_000,
        staleness_multiplier: int = 3,
    ):
        self.store = store
        self.tau_ws = tau_ws
        self.strategy = strategy
        self.heartbeat_interval_ms = heartbeat_interval_ms
        self.staleness_multiplier = staleness_multiplier
        self.registry: dict[str, _RegistryEntry] = {}
        self.jobs: dict[str, JobRecord] = {}
        self._job_counter = 0
        self._registration_counter = 0
        self.instruction_log: list[dict] = []
        self.round_counter = 0

    # -- logging ---------------------------------------------------------------

    def _log(self, now_ms: int, kind: str, **detail) -> None:
        entry = {"t": now_ms, "kind": kind}
        entry.update(detail)
        self.instruction_log.append(entry)

    # -- registry helpers --------------------------------------------------------

    def _connected_descriptors(self) -> list[WorkerDescriptor]:
        ordered = sorted(self.registry.values(), key=lambda e: e.descriptor.registration_order)
        return [e.descriptor for e in ordered if e.descriptor.connected]

    def _free_entries(self) -> list[_RegistryEntry]:
        ordered = sorted(self.registry.values(), key=lambda e: e.descriptor.registration_order)
        return [
            e
            for e in ordered
            if e.descriptor.connected and e.busy is None and e.descriptor.last_heartbeat is not None
        ]

    def _entry_for(self, worker_id: str) -> _RegistryEntry:
        try:
            return self.registry[worker_id]
        except KeyError:
            raise UnknownWorker(f"worker {worker_id} is not registered") from None

    # -- message entrypoint -------------------------------------------------------

    def handle_message(self, sender: str, message: dict, now_ms: int) -> list[Outbound]:
        kind = message["type"]
        try:
            if kind == protocol.MSG_WORKER_REGISTER:
                return self.register_worker(message, now_ms)
            if kind == protocol.MSG_HEARTBEAT:
                return self.on_heartbeat(message["worker_id"], message, now_ms)
            if kind == protocol.MSG_SUBMIT_PIPELINE_JOB:
                return self.create_job(sender, message, now_ms)
            if kind == protocol.MSG_MODEL_LOADED:
                return self.on_model_loaded(message["worker_id"], message, now_ms)
            if kind == protocol.MSG_MODEL_UNLOADED:
                return self.on_model_unloaded(message["worker_id"], message, now_ms)
            if kind == protocol.MSG_MODEL_LOAD_FAILED:
                return self.on_model_load_failed(message["worker_id"], message, now_ms)
            if kind == protocol.MSG_TASK_RESULT:
                return self.on_task_complete(
                    message["worker_id"],
                    message["job_id"],
                    message["task_id"],
                    PayloadRouting.from_wire(message["output"]),
                    now_ms,
                )
            if kind == protocol.MSG_TASK_FAILED:
                return self.on_task_failed(
                    message["worker_id"], message["job_id"], message["task_id"],
                    message.get("reason", ""), now_ms,
                )
        except (UnknownWorker, UnknownTask, WrongWorker, InvalidState) as exc:
            self._log(now_ms, "dropped_message", message_type=kind, reason=str(exc))
            return []
        raise ValueError(f"foreman cannot handle message type {kind!r}")

    # -- registration & heartbeats -------------------------------------------------

    def register_worker(self, message: dict, now_ms: int) -> list[Outbound]:
        worker_id = message["worker_id"]
        capabilities = message.get("capabilities", {})
        if worker_id in self.registry:
            entry = self.registry[worker_id]
            entry.descriptor = entry.descriptor.with_updates(connected=True)
            entry.last_seen_ms = now_ms
            return []
        descriptor = WorkerDescriptor(
            worker_id=worker_id,
            resident_partition=None,
            disk_cache=frozenset(),
            last_heartbeat=None,
            connected=True,
            gpu_available=bool(capabilities.get("gpu", False)),
            registration_order=self._registration_counter,
        )
        self._registration_counter += 1
        self.registry[worker_id] = _RegistryEntry(descriptor=descriptor, last_seen_ms=now_ms)
        self._log(now_ms, "worker_registered", worker=worker_id)
        return []

    def on_heartbeat(self, worker_id: str, message: dict, now_ms: int) -> list[Outbound]:
        entry = self._entry_for(worker_id)
        snapshot = TelemetrySnapshot.from_wire(message["telemetry"])
        was_connected = entry.descriptor.connected
        entry.last_seen_ms = now_ms
        updates: dict = {"last_heartbeat": snapshot, "connected": True}
        # Residency follows ACKs while an instruction is outstanding; otherwise
        # the heartbeat is the source of truth (initial sync and rejoin).
        if entry.busy is None or entry.busy[0] == "task":
            resident = message.get("resident")
            cached = frozenset(message.get("cached", ()))
            if resident is not None:
                cached = cached | {resident}
            updates["resident_partition"] = resident
            updates["disk_cache"] = cached
        entry.descriptor = entry.descriptor.with_updates(**updates)
        if not was_connected:
            entry.busy = None
            self._log(now_ms, "worker_rejoined", worker=worker_id)
            return self._run_rounds(now_ms)
        return []

    def check_staleness(self, now_ms: int) -> list[Outbound]:
        """Periodic sweep: disconnect workers silent for too many intervals."""
        threshold = self.staleness_multiplier * self.heartbeat_interval_ms
        sends: list[Outbound] = []
        for worker_id in sorted(
            self.registry, key=lambda w: self.registry[w].descriptor.registration_order
        ):
            entry = self.registry[worker_id]
            if entry.descriptor.connected and now_ms - entry.last_seen_ms >= threshold:
                sends.extend(self.on_worker_disconnect(worker_id, now_ms))
        return sends

    # -- job creation ------------------------------------------------------------

    def create_job(self, sender: str, message: dict, now_ms: int) -> list[Outbound]:
        try:
            spec = PipelineSpec.from_wire(message["pipeline"])
            validated = validate_pipeline_spec(spec)
        except PipelineValidationError as exc:
            return [(sender, protocol.make_job_rejected([f"{c}: {m}" for c, m in exc.violations]))]
        except (KeyError, ValueError, TypeError) as exc:
            return [(sender, protocol.make_job_rejected([f"MalformedSubmission: {exc}"]))]

        blobs: dict[str, str] = message["blobs"]
        reasons: list[str] = []
        for manifest in spec.stages:
            blob_b64 = blobs.get(manifest.artefact_id)
            if blob_b64 is None:
                reasons.append(f"MissingBlob: {manifest.artefact_id}")
                continue
            blob = base64.b64decode(blob_b64)
            digest = sha256_hex(blob)
            if digest != manifest.blob_checksum:
                reasons.append(
                    f"ChecksumMismatch: {manifest.artefact_id} blob hashes to {digest}"
                )
                continue
            try:
                parse_artefact_blob(blob)
            except (ValueError, KeyError) as exc:
                reasons.append(f"MalformedArtefact: {manifest.artefact_id}: {exc}")
        inputs = [PayloadEnvelope.from_wire(e) for e in message["inputs"]]
        if len(inputs) != spec.input_count:
            reasons.append(
                f"InputCountMismatch: {len(inputs)} inputs for input_count {spec.input_count}"
            )
        stage0_shape = spec.stages[0].input_shape
        for i, envelope in enumerate(inputs):
            if tuple(envelope.shape) != stage0_shape:
                reasons.append(
                    f"InputShapeMismatch: input {i} shape {list(envelope.shape)} != "
                    f"stage 0 input shape {list(stage0_shape)}"
                )
        if reasons:
            return [(sender, protocol.make_job_rejected(reasons))]

        self._job_counter += 1
        job_id = f"job-{self._job_counter:04d}"
        graph = materialize_tasks(spec)
        job = JobRecord(
            job_id=job_id,
            validated=validated,
            graph=graph,
            blobs=dict(blobs),
            submitter=sender,
            submitted_ms=now_ms,
        )
        for stage in range(1, spec.stage_count):
            manifest = spec.stages[stage]
            job.pending_load_instructions[stage] = {
                "artefact_id": manifest.artefact_id,
                "checksum": manifest.blob_checksum,
            }
        for i, envelope in enumerate(inputs):
            routing = route_payload(envelope, self.tau_ws, self.store)
            graph.tasks[task_id_for(0, i, spec.input_count)].input_payload = routing
            raw, encoded = envelope_compression_stats(envelope)
            if envelope.compression == "zlib":
                job.compression_samples.append(compression_ratio(raw, encoded))
        self.jobs[job_id] = job
        self._log(now_ms, "job_created", job=job_id, stages=spec.stage_count, inputs=spec.input_count)

        sends: list[Outbound] = [(sender, protocol.make_job_accepted(job_id))]
        # Eager broadcast of stage 0 to every connected worker.
        for entry in sorted(self.registry.values(), key=lambda e: e.descriptor.registration_order):
            if not entry.descriptor.connected or entry.busy is not None:
                continue
            sends.extend(self._load_burst_for_worker(job, 0, entry, now_ms, reason="eager"))
        sends.extend(self._run_rounds(now_ms))
        return sends

    # -- load dispatch -------------------------------------------------------------

    def _load_burst_for_worker(
        self, job: JobRecord, stage: int, entry: _RegistryEntry, now_ms: int, reason: str
    ) -> list[Outbound]:
        """UNLOAD (when evicting) + LOAD for one stage on one worker."""
        descriptor = entry.descriptor
        target = job.artefact_for_stage(stage)
        manifest = job.spec.stages[stage]
        tier = compute_tier(target, descriptor)
        if tier == ResidencyTier.RESIDENT:
            return []
        sends: list[Outbound] = []
        if descriptor.resident_partition is not None:
            sends.append((descriptor.worker_id, protocol.make_unload_model(job.job_id, descriptor.resident_partition)))
            self._log(
                now_ms, "unload_dispatch",
                job=job.job_id, worker=descriptor.worker_id, artefact=descriptor.resident_partition,
            )
        blob_b64 = None if target in descriptor.disk_cache else job.blobs[target]
        sends.append(
            (
                descriptor.worker_id,
                protocol.make_load_model(job.job_id, target, manifest.blob_checksum, blob_b64),
            )
        )
        entry.busy = ("load", job.job_id, stage)
        entry.pending_load_tier = int(tier)
        job.outstanding_stage_loads.setdefault(stage, set()).add(descriptor.worker_id)
        self._log(
            now_ms, "load_dispatch",
            job=job.job_id, stage=stage, worker=descriptor.worker_id,
            artefact=target, tier=int(tier), reason=reason,
            cached=target in descriptor.disk_cache,
        )
        return sends

    def _dispatch_stage_load(
        self, job: JobRecord, stage: int, now_ms: int, reason: str,
        candidates: list[_RegistryEntry] | None = None,
    ) -> list[Outbound]:
        free = candidates if candidates is not None else self._free_entries()
        # A worker that failed this stage's load twice is out of the running
        # for it; breaks failure/retry cycles without stranding other stages.
        free = [e for e in free if job.load_failures.get((stage, e.descriptor.worker_id), 0) < 2]
        if not free:
            return []
        plan = select_load_target(
            job.artefact_for_stage(stage), [e.descriptor for e in free], strategy=self.strategy
        )
        if plan.tier == ResidencyTier.RESIDENT:
            return []
        entry = self.registry[plan.worker_id]
        return self._load_burst_for_worker(job, stage, entry, now_ms, reason=reason)

    # -- load acknowledgments ---------------------------------------------------------

    def on_model_loaded(self, worker_id: str, message: dict, now_ms: int) -> list[Outbound]:
        entry = self._entry_for(worker_id)
        artefact = message["artefact_id"]
        entry.descriptor = entry.descriptor.with_updates(
            resident_partition=artefact,
            disk_cache=entry.descriptor.disk_cache | {artefact},
        )
        entry.current_rss = int(message.get("tracked_rss_bytes", 0))
        entry.peak_rss = max(entry.peak_rss, entry.current_rss)
        entry.last_seen_ms = now_ms
        job = self.jobs.get(message["job_id"])
        if job is not None:
            for stage, workers in job.outstanding_stage_loads.items():
                workers.discard(worker_id)
            if entry.pending_load_tier is not None:
                job.tier_hits[entry.pending_load_tier] += 1
        entry.busy = None
        entry.pending_load_tier = None
        self._log(
            now_ms, "model_loaded",
            worker=worker_id, artefact=artefact, source=message.get("source"),
        )
        return self._run_rounds(now_ms)

    def on_model_unloaded(self, worker_id: str, message: dict, now_ms: int) -> list[Outbound]:
        entry = self._entry_for(worker_id)
        entry.descriptor = entry.descriptor.with_updates(resident_partition=None)
        entry.current_rss = int(message.get("tracked_rss_bytes", 0))
        entry.last_seen_ms = now_ms
        # Still busy: the paired LOAD of the burst is in flight.
        return []

    def on_model_load_failed(self, worker_id: str, message: dict, now_ms: int) -> list[Outbound]:
        entry = self._entry_for(worker_id)
        entry.descriptor = entry.descriptor.with_updates(
            failure_count=entry.descriptor.failure_count + 1
        )
        entry.last_seen_ms = now_ms
        entry.busy = None
        entry.pending_load_tier = None
        job = self.jobs.get(message["job_id"])
        if job is not None:
            for workers in job.outstanding_stage_loads.values():
                workers.discard(worker_id)
            artefact = message["artefact_id"]
            for stage in range(job.spec.stage_count):
                if job.artefact_for_stage(stage) == artefact:
                    key = (stage, worker_id)
                    job.load_failures[key] = job.load_failures.get(key, 0) + 1
        self._log(
            now_ms, "model_load_failed",
            worker=worker_id, artefact=message["artefact_id"], reason=message.get("reason"),
        )
        return self._run_rounds(now_ms)

    # -- task lifecycle ------------------------------------------------------------

    def on_task_complete(
        self, worker_id: str, job_id: str, task_id: int, output: PayloadRouting, now_ms: int
    ) -> list[Outbound]:
        entry = self._entry_for(worker_id)
        job = self.jobs.get(job_id)
        if job is None:
            raise UnknownTask(f"job {job_id} does not exist")
        record = job.graph.task(task_id)
        if record.assigned_worker != worker_id:
            raise WrongWorker(
                f"task {task_id} is assigned to {record.assigned_worker}, not {worker_id}"
            )
        newly_pending = complete_task(job.graph, task_id, output)
        entry.descriptor = entry.descriptor.with_updates(
            success_count=entry.descriptor.success_count + 1
        )
        entry.busy = None
        entry.last_seen_ms = now_ms
        stage = record.stage_index
        dispatched_at = job.dispatch_times.get(task_id)
        if dispatched_at is not None:
            job.latencies_by_stage.setdefault(stage, []).append(now_ms - dispatched_at)
        if output.inline is not None and output.inline.compression == "zlib":
            raw, encoded = envelope_compression_stats(output.inline)
            job.compression_samples.append(compression_ratio(raw, encoded))
        elif output.store_ref is not None:
            envelope = resolve_payload(output, self.store)
            if envelope.compression == "zlib":
                raw, encoded = envelope_compression_stats(envelope)
                job.compression_samples.append(compression_ratio(raw, encoded))
        self._log(
            now_ms, "task_result",
            job=job_id, task=task_id, stage=stage, worker=worker_id,
            newly_pending=list(newly_pending),
        )

        sends: list[Outbound] = []
        next_stage = stage + 1
        if (
            job.graph.completed_count[stage] == 1
            and next_stage < job.spec.stage_count
            and next_stage not in job.jit_dispatched
        ):
            job.jit_dispatched.add(next_stage)
            sends.extend(self._dispatch_stage_load(job, next_stage, now_ms, reason="jit"))

        if job.graph.is_complete():
            sends.extend(self._finalize_job(job, now_ms))
        else:
            sends.extend(self._run_rounds(now_ms))
        return sends

    def on_task_failed(
        self, worker_id: str, job_id: str, task_id: int, reason: str, now_ms: int
    ) -> list[Outbound]:
        entry = self._entry_for(worker_id)
        job = self.jobs.get(job_id)
        if job is None:
            raise UnknownTask(f"job {job_id} does not exist")
        record = job.graph.task(task_id)
        if record.assigned_worker != worker_id:
            raise WrongWorker(
                f"task {task_id} is assigned to {record.assigned_worker}, not {worker_id}"
            )
        fail_task(job.graph, task_id)
        entry.descriptor = entry.descriptor.with_updates(
            failure_count=entry.descriptor.failure_count + 1
        )
        entry.busy = None
        entry.last_seen_ms = now_ms
        self._log(now_ms, "task_failed", job=job_id, task=task_id, worker=worker_id, reason=reason)
        return self._run_rounds(now_ms)

    # -- disconnect & recovery --------------------------------------------------------

    def on_worker_disconnect(self, worker_id: str, now_ms: int) -> list[Outbound]:
        entry = self._entry_for(worker_id)
        if not entry.descriptor.connected:
            return []
        entry.descriptor = entry.descriptor.with_updates(connected=False)
        affected: list[tuple[JobRecord, int]] = []  # (job, stage) needing recovery
        failed_tasks: list[tuple[str, int]] = []
        if entry.busy is not None:
            tag = entry.busy
            if tag[0] == "task":
                _, job_id, task_id = tag
                job = self.jobs[job_id]
                record = job.graph.task(task_id)
                fail_task(job.graph, task_id)
                failed_tasks.append((job_id, task_id))
                affected.append((job, record.stage_index))
            elif tag[0] == "load":
                _, job_id, stage = tag
                job = self.jobs.get(job_id)
                if job is not None:
                    job.outstanding_stage_loads.get(stage, set()).discard(worker_id)
        entry.busy = None
        entry.pending_load_tier = None
        self._log(now_ms, "disconnect", worker=worker_id, failed_tasks=[t for _, t in failed_tasks])

        survivors = self._connected_descriptors()
        if not survivors:
            sends: list[Outbound] = []
            for job in self._running_jobs():
                job.status = JOB_FAILED
                job.completed_ms = now_ms
                sends.append(
                    (
                        job.submitter,
                        protocol.make_job_result(
                            job.job_id, protocol.JOB_STATUS_FAILED, None, None, None,
                            error=f"no surviving workers after {worker_id} disconnected",
                        ),
                    )
                )
            return sends

        sends = []
        for job, stage in affected:
            target = job.artefact_for_stage(stage)
            job.recovery_events.append(
                {"t": now_ms, "worker": worker_id, "job": job.job_id, "stage": stage}
            )
            if gate_workers(target, survivors):
                continue  # a resident worker remains; rounds will re-dispatch
            if job.outstanding_stage_loads.get(stage):
                continue
            free = self._free_entries()
            if not free:
                continue
            scores = recovery_scores([e.descriptor for e in free], target)
            best = max(free, key=lambda e: (scores[e.descriptor.worker_id], e.descriptor.worker_id))
            sends.extend(self._load_burst_for_worker(job, stage, best, now_ms, reason="recovery"))
        sends.extend(self._run_rounds(now_ms))
        return sends

    # -- assignment rounds ---------------------------------------------------------

    def _running_jobs(self) -> list[JobRecord]:
        return [self.jobs[j] for j in sorted(self.jobs) if self.jobs[j].status == JOB_RUNNING]

    def _run_rounds(self, now_ms: int) -> list[Outbound]:
        sends: list[Outbound] = []
        for job in self._running_jobs():
            sends.extend(self._run_round(job, now_ms))
        return sends

    def _run_round(self, job: JobRecord, now_ms: int) -> list[Outbound]:
        pending = pending_tasks(job.graph)
        if not pending:
            return []
        self.round_counter += 1
        round_id = self.round_counter
        free = self._free_entries()
        plan = two_phase_assign(
            pending,
            [e.descriptor for e in free],
            job.artefact_for_stage,
            strategy=self.strategy,
        )
        sends: list[Outbound] = []
        for task_id, worker_id in plan.assignments.items():
            record = mark_dispatched(job.graph, task_id, worker_id)
            entry = self.registry[worker_id]
            entry.busy = ("task", job.job_id, task_id)
            job.dispatch_times[task_id] = now_ms
            sends.append(
                (
                    worker_id,
                    protocol.make_task_assign(
                        job.job_id,
                        task_id,
                        record.stage_index,
                        job.artefact_for_stage(record.stage_index),
                        record.input_payload,
                    ),
                )
            )
            self._log(
                now_ms, "task_assign",
                job=job.job_id, task=task_id, stage=record.stage_index,
                worker=worker_id, phase=plan.phases[task_id], round=round_id,
            )
        self._log(now_ms, "round", job=job.job_id, assigned=len(plan.assignments), round=round_id)

        # Deferred tasks: stages with pending work and no resident worker at all.
        connected = self._connected_descriptors()
        unassigned_stages = sorted(
            {t.stage_index for t in pending if t.task_id not in plan.assignments}
        )
        for stage in unassigned_stages:
            target = job.artefact_for_stage(stage)
            if gate_workers(target, connected):
                continue
            if job.outstanding_stage_loads.get(stage):
                continue
            free_now = self._free_entries()
            if not free_now:
                continue
            sends.extend(
                self._dispatch_stage_load(job, stage, now_ms, reason="deferred", candidates=free_now)
            )
        return sends

    # -- completion ---------------------------------------------------------------

    def _finalize_job(self, job: JobRecord, now_ms: int) -> list[Outbound]:
        logits: list[list[float]] = []
        for routing in job.graph.sink_outputs():
            envelope = resolve_payload(routing, self.store)
            tensor = decode_payload(envelope)
            logits.append([float(x) for x in tensor.to_numpy().reshape(-1)])
        prediction = aggregate_results(logits)
        job.result = prediction
        job.status = JOB_COMPLETE
        job.completed_ms = now_ms
        self._log(now_ms, "job_complete", job=job.job_id, predicted_class=prediction.predicted_class)
        metrics = self.job_metrics(job)
        message = protocol.make_job_result(
            job.job_id,
            protocol.JOB_STATUS_COMPLETE,
            [float(x) for x in prediction.mean_logits],
            prediction.predicted_class,
            metrics,
        )
        return [(job.submitter, message)]

    def job_metrics(self, job: JobRecord) -> dict:
        latency_summary = {}
        for stage in sorted(job.latencies_by_stage):
            values = job.latencies_by_stage[stage]
            latency_summary[str(stage)] = {
                "count": len(values),
                "min_ms": min(values),
                "max_ms": max(values),
                "mean_ms": sum(values) / len(values),
            }
        mean_compression = (
            sum(job.compression_samples) / len(job.compression_samples)
            if job.compression_samples
            else None
        )
        makespan = (job.completed_ms - job.submitted_ms) if job.completed_ms is not None else None
        return {
            "makespan_ms": makespan,
            "per_worker_peak_rss_bytes": {
                wid: self.registry[wid].peak_rss for wid in sorted(self.registry)
            },
            "tier_hits": {str(t): job.tier_hits[t] for t in sorted(job.tier_hits)},
            "mean_compression_pct": mean_compression,
            "task_latency_by_stage": latency_summary,
            "recovery_events": len(job.recovery_events),
        }
