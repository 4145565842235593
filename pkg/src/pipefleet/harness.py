"""Deterministic experiment driver: virtual clock, in-process fleet, metrics.

A single event queue ordered by (virtual ms, push sequence) drives the
foreman and worker agents; all simulated durations (stage compute, cold/warm
loads) become event delays, so a run is a pure function of its FleetConfig.
Failure injection kills a worker at a virtual instant: its queued messages
are dropped and staleness detection takes over.
"""

from __future__ import annotations

import base64
import heapq
import json
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .canonical import canonical_dumps, sha256_hex
from .errors import ConfigError
from .executor import AffineStageArtefact, splitmix64_unit_floats
from .foreman import Foreman, JOB_COMPLETE, JobRecord
from .model import ExecutionMode, PartitionManifest, PipelineSpec
from . import protocol
from .transport import PayloadStore, Tensor, decode_payload, encode_payload, resolve_payload
from .worker import WorkerAgent, WorkerDelays

CLIENT_ID = "sdk-client"

DEFAULT_FOOTPRINT = 40 * 1024 * 1024


@dataclass(frozen=True, slots=True)
class StageConfig:
    """One affine stage of the synthetic pipeline."""

    seed: int
    input_shape: tuple[int, ...]
    output_shape: tuple[int, ...]
    memory_footprint_bytes: int = DEFAULT_FOOTPRINT

    def artefact_id(self, stage_index: int) -> str:
        return f"cell-{stage_index}"


@dataclass(frozen=True, slots=True)
class WorkerConfig:
    worker_id: str
    compute_ms: dict[int, int] = field(default_factory=dict)
    cold_load_ms: int = 0
    warm_load_ms: int = 0
    telemetry: dict | None = None
    precached: tuple[str, ...] = ()
    gpu: bool = False


@dataclass(frozen=True, slots=True)
class FailureInjection:
    worker_id: str
    at_ms: int


@dataclass(frozen=True, slots=True)
class FleetConfig:
    """Everything that determines a virtual-time run."""

    n_inputs: int
    stages: tuple[StageConfig, ...]
    workers: tuple[WorkerConfig, ...]
    tau_ws: int = 1 << 20
    strategy: str = "entropy_weighted_sum"
    seed: int = 0
    heartbeat_interval_ms: int = 100
    staleness_multiplier: int = 3
    failures: tuple[FailureInjection, ...] = ()

    def __post_init__(self) -> None:
        if self.n_inputs < 1 or not self.stages or not self.workers:
            raise ConfigError("config needs n_inputs >= 1, >= 1 stage and >= 1 worker")
        for w in self.workers:
            if w.cold_load_ms < 0 or w.warm_load_ms < 0:
                raise ConfigError(f"worker {w.worker_id} has negative load delays")
            if any(v < 0 for v in w.compute_ms.values()):
                raise ConfigError(f"worker {w.worker_id} has negative compute delays")
        for k in range(len(self.stages) - 1):
            if self.stages[k].output_shape != self.stages[k + 1].input_shape:
                raise ConfigError(f"stage {k} output shape != stage {k + 1} input shape")

    # -- JSON round trip (the sim CLI config file format) ----------------------

    @classmethod
    def from_json_dict(cls, obj: dict) -> "FleetConfig":
        try:
            stages = tuple(
                StageConfig(
                    seed=int(s["seed"]),
                    input_shape=tuple(s["input_shape"]),
                    output_shape=tuple(s["output_shape"]),
                    memory_footprint_bytes=int(s.get("memory_footprint_bytes", DEFAULT_FOOTPRINT)),
                )
                for s in obj["stages"]
            )
            workers = tuple(
                WorkerConfig(
                    worker_id=str(w["worker_id"]),
                    compute_ms={int(k): int(v) for k, v in w.get("compute_ms", {}).items()},
                    cold_load_ms=int(w.get("cold_load_ms", 0)),
                    warm_load_ms=int(w.get("warm_load_ms", 0)),
                    telemetry=w.get("telemetry"),
                    precached=tuple(w.get("precached", ())),
                    gpu=bool(w.get("gpu", False)),
                )
                for w in obj["workers"]
            )
            failures = tuple(
                FailureInjection(worker_id=str(f["worker_id"]), at_ms=int(f["at_ms"]))
                for f in obj.get("failures", ())
            )
            return cls(
                n_inputs=int(obj["n_inputs"]),
                stages=stages,
                workers=workers,
                tau_ws=int(obj.get("tau_ws", 1 << 20)),
                strategy=str(obj.get("strategy", "entropy_weighted_sum")),
                seed=int(obj.get("seed", 0)),
                heartbeat_interval_ms=int(obj.get("heartbeat_interval_ms", 100)),
                staleness_multiplier=int(obj.get("staleness_multiplier", 3)),
                failures=failures,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed fleet config: {exc}") from exc

    def to_json_dict(self) -> dict:
        return {
            "n_inputs": self.n_inputs,
            "stages": [
                {
                    "seed": s.seed,
                    "input_shape": list(s.input_shape),
                    "output_shape": list(s.output_shape),
                    "memory_footprint_bytes": s.memory_footprint_bytes,
                }
                for s in self.stages
            ],
            "workers": [
                {
                    "worker_id": w.worker_id,
                    "compute_ms": {str(k): v for k, v in sorted(w.compute_ms.items())},
                    "cold_load_ms": w.cold_load_ms,
                    "warm_load_ms": w.warm_load_ms,
                    "telemetry": w.telemetry,
                    "precached": list(w.precached),
                    "gpu": w.gpu,
                }
                for w in self.workers
            ],
            "tau_ws": self.tau_ws,
            "strategy": self.strategy,
            "seed": self.seed,
            "heartbeat_interval_ms": self.heartbeat_interval_ms,
            "staleness_multiplier": self.staleness_multiplier,
            "failures": [{"worker_id": f.worker_id, "at_ms": f.at_ms} for f in self.failures],
        }

    # -- derived artefacts -----------------------------------------------------

    def artefacts(self) -> list[tuple[str, bytes]]:
        """(artefact_id, blob) per stage; sink stage omits the nonlinearity."""
        out = []
        sink = len(self.stages) - 1
        for k, stage in enumerate(self.stages):
            artefact = AffineStageArtefact(
                seed=stage.seed,
                input_shape=stage.input_shape,
                output_shape=stage.output_shape,
                activation="none" if k == sink else "tanh",
                memory_footprint_bytes=stage.memory_footprint_bytes,
            )
            out.append((stage.artefact_id(k), artefact.to_blob()))
        return out

    def input_tensors(self) -> list[Tensor]:
        """Deterministic float32 inputs in [-1, 1) derived from the seed."""
        shape = self.stages[0].input_shape
        count = 1
        for d in shape:
            count *= d
        tensors = []
        for i in range(self.n_inputs):
            u = splitmix64_unit_floats(self.seed * 1_000_003 + i, count)
            arr = (u * 2.0 - 1.0).astype(np.float32).reshape(shape)
            tensors.append(Tensor.from_numpy(arr))
        return tensors


def build_spec(config: FleetConfig, mode: ExecutionMode) -> tuple[PipelineSpec, dict[str, bytes]]:
    artefacts = config.artefacts()
    manifests = []
    blobs: dict[str, bytes] = {}
    for k, (artefact_id, blob) in enumerate(artefacts):
        stage = config.stages[k]
        manifests.append(
            PartitionManifest(
                stage_index=k,
                artefact_id=artefact_id,
                blob_checksum=sha256_hex(blob),
                blob_size_bytes=len(blob),
                memory_footprint_bytes=stage.memory_footprint_bytes,
                input_shape=stage.input_shape,
                output_shape=stage.output_shape,
                eager_broadcast=(k == 0),
            )
        )
        blobs[artefact_id] = blob
    spec = PipelineSpec(
        pipeline_id=f"pipeline-{config.seed}",
        stages=tuple(manifests),
        execution_mode=mode,
        input_count=config.n_inputs,
    )
    return spec, blobs


@dataclass(slots=True)
class RunOutcome:
    """Everything a test needs to interrogate one virtual-time run."""

    mode: str
    job_result: dict
    job: JobRecord
    foreman: Foreman
    workers: dict[str, WorkerAgent]
    final_logits: list[bytes]  # per-input sink tensor bytes, input order
    finished_ms: int
    events_processed: int

    @property
    def makespan_ms(self) -> int:
        return self.job_result["metrics"]["makespan_ms"]


class VirtualHarness:
    """One deterministic run of one mode over one fleet."""

    MAX_EVENTS = 2_000_000

    def __init__(self, config: FleetConfig, mode: ExecutionMode, workdir: Path):
        self.config = config
        self.mode = mode
        self.workdir = workdir
        self.now_ms = 0
        self._queue: list[tuple[int, int, Callable[[], None]]] = []
        self._seq = 0
        self._dead: set[str] = set()
        self._result_message: dict | None = None
        self._events_processed = 0

        store_dir = workdir / "store"
        self.store = PayloadStore(store_dir)
        self.foreman = Foreman(
            store=self.store,
            tau_ws=config.tau_ws,
            strategy=config.strategy,
            heartbeat_interval_ms=config.heartbeat_interval_ms,
            staleness_multiplier=config.staleness_multiplier,
        )
        blob_by_artefact = dict(config.artefacts())
        self.workers: dict[str, WorkerAgent] = {}
        for wc in config.workers:
            cache_dir = workdir / f"cache-{wc.worker_id}"
            cache_dir.mkdir(parents=True, exist_ok=True)
            for artefact_id in wc.precached:
                if artefact_id not in blob_by_artefact:
                    raise ConfigError(f"precached artefact {artefact_id} is not a pipeline stage")
                (cache_dir / f"{artefact_id}.blob").write_bytes(blob_by_artefact[artefact_id])
            telemetry_rows = [wc.telemetry] if wc.telemetry else None
            self.workers[wc.worker_id] = WorkerAgent(
                worker_id=wc.worker_id,
                cache_dir=cache_dir,
                store=self.store,
                tau_ws=config.tau_ws,
                telemetry_rows=telemetry_rows,
                capabilities={"gpu": wc.gpu},
                delays=WorkerDelays(
                    compute_ms=dict(wc.compute_ms),
                    cold_load_ms=wc.cold_load_ms,
                    warm_load_ms=wc.warm_load_ms,
                ),
                heartbeat_interval_ms=config.heartbeat_interval_ms,
            )

    # -- event machinery -------------------------------------------------------

    def _push(self, at_ms: int, fn: Callable[[], None]) -> None:
        self._seq += 1
        heapq.heappush(self._queue, (at_ms, self._seq, fn))

    def _dispatch_outbound(self, sends: list[tuple[str, dict]]) -> None:
        for dst, message in sends:
            if dst == CLIENT_ID:
                self._result_message = message if message["type"] == protocol.MSG_JOB_RESULT else self._result_message
            else:
                self._push(self.now_ms, self._make_worker_delivery(dst, message))

    def _make_worker_delivery(self, worker_id: str, message: dict) -> Callable[[], None]:
        def deliver() -> None:
            if worker_id in self._dead:
                return
            replies = self.workers[worker_id].handle_message(message, self.now_ms)
            for delay_ms, reply in replies:
                self._push(self.now_ms + delay_ms, self._make_foreman_delivery(worker_id, reply))

        return deliver

    def _make_foreman_delivery(self, sender: str, message: dict) -> Callable[[], None]:
        def deliver() -> None:
            if sender in self._dead:
                return
            self._dispatch_outbound(self.foreman.handle_message(sender, message, self.now_ms))

        return deliver

    def _heartbeat(self, worker_id: str) -> None:
        if worker_id in self._dead or self._result_message is not None:
            return
        agent = self.workers[worker_id]
        message = agent.heartbeat_message(self.now_ms)
        self._dispatch_outbound(self.foreman.handle_message(worker_id, message, self.now_ms))
        self._push(self.now_ms + self.config.heartbeat_interval_ms, lambda: self._heartbeat(worker_id))

    def _staleness_sweep(self) -> None:
        if self._result_message is not None:
            return
        self._dispatch_outbound(self.foreman.check_staleness(self.now_ms))
        self._push(self.now_ms + self.config.heartbeat_interval_ms, self._staleness_sweep)

    def _kill(self, worker_id: str) -> None:
        self._dead.add(worker_id)

    # -- run --------------------------------------------------------------------

    def run(self) -> RunOutcome:
        spec, blobs = build_spec(self.config, self.mode)
        inputs = [encode_payload(t) for t in self.config.input_tensors()]
        submit = protocol.make_submit_pipeline_job(
            spec, {aid: base64.b64encode(b).decode("ascii") for aid, b in blobs.items()}, inputs
        )

        # Registration and the first heartbeat happen synchronously before the
        # clock starts; they establish telemetry and pre-seeded cache state.
        for wc in self.config.workers:
            agent = self.workers[wc.worker_id]
            self.foreman.handle_message(wc.worker_id, agent.registration_message(), 0)
            self.foreman.handle_message(wc.worker_id, agent.heartbeat_message(0), 0)

        self._push(0, lambda: self._dispatch_outbound(
            self.foreman.handle_message(CLIENT_ID, submit, self.now_ms)
        ))
        for failure in self.config.failures:
            self._push(failure.at_ms, (lambda wid: lambda: self._kill(wid))(failure.worker_id))
        for wc in self.config.workers:
            self._push(
                self.config.heartbeat_interval_ms,
                (lambda wid: lambda: self._heartbeat(wid))(wc.worker_id),
            )
        self._push(self.config.heartbeat_interval_ms, self._staleness_sweep)

        while self._queue and self._result_message is None:
            at_ms, _, fn = heapq.heappop(self._queue)
            if at_ms < self.now_ms:
                raise RuntimeError("virtual clock moved backwards")
            self.now_ms = at_ms
            fn()
            self._events_processed += 1
            if self._events_processed > self.MAX_EVENTS:
                raise RuntimeError("event budget exhausted; scheduling livelock?")

        if self._result_message is None:
            raise RuntimeError(
                f"harness deadlock: queue drained at t={self.now_ms} without a job result"
            )

        job = self.foreman.jobs[self._result_message["job_id"]]
        final_logits: list[bytes] = []
        if job.status == JOB_COMPLETE:
            for routing in job.graph.sink_outputs():
                final_logits.append(decode_payload(resolve_payload(routing, self.store)).data)
        return RunOutcome(
            mode=self.mode.value,
            job_result=self._result_message,
            job=job,
            foreman=self.foreman,
            workers=self.workers,
            final_logits=final_logits,
            finished_ms=self.now_ms,
            events_processed=self._events_processed,
        )


def run_single(config: FleetConfig, mode: str | ExecutionMode) -> RunOutcome:
    """Run one mode in a throwaway working directory."""
    mode = ExecutionMode(mode)
    workdir = Path(tempfile.mkdtemp(prefix="pipefleet-run-"))
    try:
        return VirtualHarness(config, mode, workdir).run()
    finally:
        shutil.rmtree(workdir, ignore_errors=True)


# -- metrics report -------------------------------------------------------------


@dataclass(slots=True)
class ModeMetrics:
    mode: str
    status: str
    makespan_ms: int
    predicted_class: int | None
    mean_logits: list[float] | None
    per_worker: dict[str, dict]
    tier_hits: dict[str, int]
    mean_compression_pct: float | None
    task_latency_by_stage: dict[str, dict]
    recovery_events: int

    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode,
            "status": self.status,
            "makespan_ms": self.makespan_ms,
            "predicted_class": self.predicted_class,
            "mean_logits": self.mean_logits,
            "per_worker": self.per_worker,
            "tier_hits": self.tier_hits,
            "mean_compression_pct": self.mean_compression_pct,
            "task_latency_by_stage": self.task_latency_by_stage,
            "recovery_events": self.recovery_events,
        }


@dataclass(slots=True)
class MetricsReport:
    seed: int
    modes: dict[str, ModeMetrics]

    def speedup_pct(self) -> float | None:
        """100 * (1 - streaming/barrier), when both modes were run."""
        if "streaming" not in self.modes or "barrier" not in self.modes:
            return None
        stream = self.modes["streaming"].makespan_ms
        barrier = self.modes["barrier"].makespan_ms
        if barrier == 0:
            return 0.0
        return 100.0 * (1.0 - stream / barrier)

    def to_json_dict(self) -> dict:
        out = {
            "seed": self.seed,
            "modes": {m: self.modes[m].to_json_dict() for m in sorted(self.modes)},
        }
        speedup = self.speedup_pct()
        if speedup is not None:
            out["speedup_pct"] = speedup
        return out


def _mode_metrics(outcome: RunOutcome) -> ModeMetrics:
    job = outcome.job
    result = outcome.job_result
    metrics = result.get("metrics") or {}
    per_worker: dict[str, dict] = {}
    for worker_id in sorted(outcome.workers):
        agent = outcome.workers[worker_id]
        per_worker[worker_id] = {
            "peak_rss_bytes": agent.cache.peak_rss_bytes,
            "tasks_executed": agent.tasks_executed,
        }
    finished = result["metrics"]["makespan_ms"] if result.get("metrics") else outcome.finished_ms
    return ModeMetrics(
        mode=outcome.mode,
        status=result["status"],
        makespan_ms=finished,
        predicted_class=result.get("predicted_class"),
        mean_logits=result.get("mean_logits"),
        per_worker=per_worker,
        tier_hits=metrics.get("tier_hits", {}),
        mean_compression_pct=metrics.get("mean_compression_pct"),
        task_latency_by_stage=metrics.get("task_latency_by_stage", {}),
        recovery_events=metrics.get("recovery_events", 0),
    )


def run_experiment(config: FleetConfig, modes: list[str] | None = None) -> MetricsReport:
    """Run the configured fleet under one or both modes and report metrics."""
    selected = modes or ["streaming", "barrier"]
    report = MetricsReport(seed=config.seed, modes={})
    for mode in selected:
        outcome = run_single(config, mode)
        report.modes[mode] = _mode_metrics(outcome)
    return report


def render_report(report: MetricsReport, format: str = "text") -> str:
    """Serialize a report with stable field ordering."""
    if format == "json":
        return canonical_dumps(report.to_json_dict())
    if format == "csv":
        lines = [
            "mode,worker_id,makespan_ms,peak_rss_bytes,tasks_executed,"
            "tier1,tier2,tier3,tier4,mean_compression_pct,recovery_events"
        ]
        for mode in sorted(report.modes):
            metrics = report.modes[mode]
            hits = metrics.tier_hits
            compression = (
                f"{metrics.mean_compression_pct:.4f}"
                if metrics.mean_compression_pct is not None
                else ""
            )
            for worker_id in sorted(metrics.per_worker):
                info = metrics.per_worker[worker_id]
                lines.append(
                    f"{mode},{worker_id},{metrics.makespan_ms},{info['peak_rss_bytes']},"
                    f"{info['tasks_executed']},{hits.get('1', 0)},{hits.get('2', 0)},"
                    f"{hits.get('3', 0)},{hits.get('4', 0)},{compression},{metrics.recovery_events}"
                )
        return "\n".join(lines) + "\n"
    if format != "text":
        raise ValueError(f"unknown report format {format!r}")

    lines = [f"seed: {report.seed}"]
    for mode in sorted(report.modes):
        metrics = report.modes[mode]
        lines.append(f"[{mode}]")
        lines.append(f"  status: {metrics.status}")
        lines.append(f"  makespan_ms: {metrics.makespan_ms}")
        if metrics.predicted_class is not None:
            lines.append(f"  predicted_class: {metrics.predicted_class}")
        if metrics.mean_compression_pct is not None:
            lines.append(f"  mean_compression_pct: {metrics.mean_compression_pct:.2f}")
        hits = ", ".join(f"tier{t}={metrics.tier_hits.get(str(t), 0)}" for t in (1, 2, 3, 4))
        lines.append(f"  load_tier_hits: {hits}")
        for worker_id in sorted(metrics.per_worker):
            info = metrics.per_worker[worker_id]
            lines.append(
                f"  worker {worker_id}: peak_rss={info['peak_rss_bytes']} "
                f"tasks={info['tasks_executed']}"
            )
        lines.append(f"  recovery_events: {metrics.recovery_events}")
    speedup = report.speedup_pct()
    if speedup is not None:
        lines.append(f"streaming/barrier speedup: {speedup:.1f}%")
    return "\n".join(lines) + "\n"


def load_config_file(path: str | Path) -> FleetConfig:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return FleetConfig.from_json_dict(obj)
