"""Worker agent: single-resident session cache, task execution, telemetry.

The agent is transport-agnostic: every handler returns ``(delay_ms, message)``
replies. The virtual-time harness schedules them on its event queue; the
socket runner sleeps the simulated delays (zero unless injected) before
sending. One serial lane executes loads and tasks, which is what makes the
single-partition-resident bound hold at every observable instant.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, field
from pathlib import Path

from .canonical import sha256_hex
from .errors import NotResident, PartitionNotResident, ResidencyViolation
from .executor import StageExecutor, blob_footprint_bytes, executor_from_blob
from .model import TelemetrySnapshot
from . import protocol
from .transport import (
    PayloadRouting,
    PayloadStore,
    decode_payload,
    encode_payload,
    resolve_payload,
    route_payload,
)

DEFAULT_TELEMETRY = {
    "cpu_load": 0.2,
    "ram_free_bytes": 2_000_000_000,
    "battery_fraction": 0.8,
    "rtt_ms": 20.0,
    "temperature_c": 30.0,
}

TimedReply = tuple[int, dict]


@dataclass(slots=True)
class _CacheEntry:
    path: Path
    size_bytes: int
    last_used_seq: int
    last_job_id: str


class SessionCache:
    """At most one active executor session plus an on-disk artefact cache.

    Unload releases session memory only; disk files are retained (that is
    what makes a later warm load possible). Files are never evicted while
    the active job still references them; beyond `budget_bytes` the least
    recently used entries from other jobs go first.
    """

    def __init__(self, cache_dir: str | Path, budget_bytes: int | None = None):
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.budget_bytes = budget_bytes
        self.active_session: tuple[str, StageExecutor] | None = None
        self.tracked_rss_bytes = 0
        self.peak_rss_bytes = 0
        self._entries: dict[str, _CacheEntry] = {}
        self._use_seq = 0
        self._scan_existing()

    def _scan_existing(self) -> None:
        for path in sorted(self.cache_dir.glob("*.blob")):
            artefact_id = path.stem
            self._entries[artefact_id] = _CacheEntry(
                path=path,
                size_bytes=path.stat().st_size,
                last_used_seq=self._next_seq(),
                last_job_id="",
            )

    def _next_seq(self) -> int:
        self._use_seq += 1
        return self._use_seq

    @property
    def resident_artefact(self) -> str | None:
        return self.active_session[0] if self.active_session else None

    def cached_artefacts(self) -> list[str]:
        return sorted(self._entries)

    def has_cached(self, artefact_id: str) -> bool:
        return artefact_id in self._entries

    def read_cached(self, artefact_id: str, job_id: str) -> bytes:
        entry = self._entries[artefact_id]
        entry.last_used_seq = self._next_seq()
        entry.last_job_id = job_id
        return entry.path.read_bytes()

    def persist(self, artefact_id: str, blob: bytes, job_id: str) -> None:
        path = self.cache_dir / f"{artefact_id}.blob"
        path.write_bytes(blob)
        self._entries[artefact_id] = _CacheEntry(
            path=path,
            size_bytes=len(blob),
            last_used_seq=self._next_seq(),
            last_job_id=job_id,
        )
        self._enforce_budget(job_id)

    def _enforce_budget(self, current_job_id: str) -> None:
        if self.budget_bytes is None:
            return
        total = sum(e.size_bytes for e in self._entries.values())
        if total <= self.budget_bytes:
            return
        evictable = sorted(
            (
                (aid, e)
                for aid, e in self._entries.items()
                if e.last_job_id != current_job_id and aid != self.resident_artefact
            ),
            key=lambda item: item[1].last_used_seq,
        )
        for artefact_id, entry in evictable:
            if total <= self.budget_bytes:
                break
            entry.path.unlink(missing_ok=True)
            del self._entries[artefact_id]
            total -= entry.size_bytes

    def drop_cached(self, artefact_id: str) -> None:
        entry = self._entries.pop(artefact_id, None)
        if entry is not None:
            entry.path.unlink(missing_ok=True)

    def activate(self, artefact_id: str, executor: StageExecutor, footprint: int) -> None:
        if self.active_session is not None and self.active_session[0] != artefact_id:
            raise ResidencyViolation(
                f"session {self.active_session[0]} is active; unload it before loading {artefact_id}"
            )
        self.active_session = (artefact_id, executor)
        self.tracked_rss_bytes = footprint
        self.peak_rss_bytes = max(self.peak_rss_bytes, footprint)

    def release(self, artefact_id: str) -> None:
        if self.active_session is None or self.active_session[0] != artefact_id:
            raise NotResident(f"{artefact_id} is not the active session")
        self.active_session = None
        self.tracked_rss_bytes = 0


@dataclass(slots=True)
class WorkerDelays:
    """Simulated durations; all zero means 'as fast as the host allows'."""

    compute_ms: dict[int, int] = field(default_factory=dict)
    cold_load_ms: int = 0
    warm_load_ms: int = 0

    def compute_for_stage(self, stage_index: int) -> int:
        return int(self.compute_ms.get(stage_index, 0))


class WorkerAgent:
    """One worker's protocol state machine."""

    def __init__(
        self,
        worker_id: str,
        cache_dir: str | Path,
        store: PayloadStore,
        tau_ws: int,
        telemetry_rows: list[dict] | None = None,
        capabilities: dict | None = None,
        delays: WorkerDelays | None = None,
        heartbeat_interval_ms: int = 30_000,
        cache_budget_bytes: int | None = None,
    ):
        self.worker_id = worker_id
        self.store = store
        self.tau_ws = tau_ws
        self.cache = SessionCache(cache_dir, budget_bytes=cache_budget_bytes)
        self.telemetry_rows = telemetry_rows or [dict(DEFAULT_TELEMETRY)]
        self.capabilities = capabilities or {"gpu": False}
        self.delays = delays or WorkerDelays()
        self.heartbeat_interval_ms = heartbeat_interval_ms
        self._beat_index = 0
        self._busy_until_ms = 0
        self.tasks_executed = 0

    # -- session bookkeeping -------------------------------------------------

    def registration_message(self) -> dict:
        return protocol.make_worker_register(self.worker_id, self.capabilities)

    def heartbeat_message(self, now_ms: int) -> dict:
        row = self.telemetry_rows[self._beat_index % len(self.telemetry_rows)]
        self._beat_index += 1
        snapshot = TelemetrySnapshot(
            cpu_load=float(row["cpu_load"]),
            ram_free_bytes=int(row["ram_free_bytes"]),
            battery_fraction=float(row["battery_fraction"]),
            rtt_ms=float(row["rtt_ms"]),
            temperature_c=float(row["temperature_c"]),
            timestamp=now_ms,
        )
        return protocol.make_heartbeat(
            self.worker_id,
            snapshot,
            resident=self.cache.resident_artefact,
            cached=self.cache.cached_artefacts(),
        )

    # -- message handling ----------------------------------------------------

    def handle_message(self, message: dict, now_ms: int = 0) -> list[TimedReply]:
        kind = message["type"]
        if kind == protocol.MSG_LOAD_MODEL:
            return self.handle_load_model(message, now_ms)
        if kind == protocol.MSG_UNLOAD_MODEL:
            return self.handle_unload_model(message, now_ms)
        if kind == protocol.MSG_TASK_ASSIGN:
            return self.execute_task(message, now_ms)
        raise ValueError(f"worker cannot handle message type {kind!r}")

    def handle_load_model(self, message: dict, now_ms: int = 0) -> list[TimedReply]:
        job_id = message["job_id"]
        artefact_id = message["artefact_id"]
        checksum = message["checksum"]
        blob_b64 = message.get("blob")

        if self.cache.resident_artefact == artefact_id:
            # Idempotent re-load of the resident partition.
            ack = protocol.make_model_loaded(
                self.worker_id, job_id, artefact_id, protocol.LOAD_SOURCE_DISK, 0,
                self.cache.tracked_rss_bytes,
            )
            return [(0, ack)]
        if self.cache.resident_artefact is not None:
            reason = (
                f"ResidencyViolation: {self.cache.resident_artefact} is active; "
                f"refusing to load {artefact_id} without UNLOAD_MODEL"
            )
            return [(0, protocol.make_model_load_failed(self.worker_id, job_id, artefact_id, reason))]

        if blob_b64 is not None:
            blob = base64.b64decode(blob_b64)
            source = protocol.LOAD_SOURCE_NETWORK
            duration = self.delays.cold_load_ms
            if sha256_hex(blob) != checksum:
                reason = f"ChecksumMismatch: blob for {artefact_id} does not match manifest"
                return [(0, protocol.make_model_load_failed(self.worker_id, job_id, artefact_id, reason))]
            self.cache.persist(artefact_id, blob, job_id)
        else:
            if not self.cache.has_cached(artefact_id):
                reason = f"CacheMiss: {artefact_id} not in disk cache and no blob supplied"
                return [(0, protocol.make_model_load_failed(self.worker_id, job_id, artefact_id, reason))]
            blob = self.cache.read_cached(artefact_id, job_id)
            source = protocol.LOAD_SOURCE_DISK
            duration = self.delays.warm_load_ms
            if sha256_hex(blob) != checksum:
                self.cache.drop_cached(artefact_id)
                reason = f"ChecksumMismatch: cached blob for {artefact_id} is corrupt; dropped"
                return [(0, protocol.make_model_load_failed(self.worker_id, job_id, artefact_id, reason))]

        try:
            executor = executor_from_blob(blob)
        except (ValueError, KeyError) as exc:
            reason = f"ArtefactError: {exc}"
            return [(0, protocol.make_model_load_failed(self.worker_id, job_id, artefact_id, reason))]
        footprint = blob_footprint_bytes(blob)
        self.cache.activate(artefact_id, executor, footprint)
        self._busy_until_ms = max(self._busy_until_ms, now_ms + duration)
        ack = protocol.make_model_loaded(
            self.worker_id, job_id, artefact_id, source, duration, self.cache.tracked_rss_bytes
        )
        return [(duration, ack)]

    def handle_unload_model(self, message: dict, now_ms: int = 0) -> list[TimedReply]:
        job_id = message["job_id"]
        artefact_id = message["artefact_id"]
        try:
            self.cache.release(artefact_id)
        except NotResident as exc:
            return [(0, protocol.make_model_load_failed(self.worker_id, job_id, artefact_id, str(exc)))]
        ack = protocol.make_model_unloaded(
            self.worker_id, job_id, artefact_id, self.cache.tracked_rss_bytes
        )
        return [(0, ack)]

    def execute_task(self, message: dict, now_ms: int = 0) -> list[TimedReply]:
        job_id = message["job_id"]
        task_id = message["task_id"]
        stage_index = message["stage_index"]
        artefact_id = message["artefact_id"]

        if self.cache.resident_artefact != artefact_id:
            reason = (
                f"PartitionNotResident: task {task_id} needs {artefact_id}, "
                f"resident={self.cache.resident_artefact}"
            )
            return [(0, protocol.make_task_failed(self.worker_id, job_id, task_id, reason))]
        if now_ms < self._busy_until_ms:
            reason = f"SerialLaneViolation: busy until {self._busy_until_ms}, assign at {now_ms}"
            return [(0, protocol.make_task_failed(self.worker_id, job_id, task_id, reason))]

        try:
            routing = PayloadRouting.from_wire(message["input"])
            envelope = resolve_payload(routing, self.store)
            tensor = decode_payload(envelope)
            _, executor = self.cache.active_session
            output = executor.run(tensor)
            out_envelope = encode_payload(output)
            out_routing = route_payload(out_envelope, self.tau_ws, self.store)
        except Exception as exc:  # executor/transport failures travel back as TASK_FAILED
            return [(0, protocol.make_task_failed(self.worker_id, job_id, task_id, f"{type(exc).__name__}: {exc}"))]

        duration = self.delays.compute_for_stage(stage_index)
        self._busy_until_ms = max(self._busy_until_ms, now_ms + duration)
        self.tasks_executed += 1
        return [(duration, protocol.make_task_result(self.worker_id, job_id, task_id, out_routing))]

    # -- direct (non-wire) helpers for tests & invariants ---------------------

    def assert_single_residency(self) -> None:
        if self.cache.active_session is not None and self.cache.resident_artefact is None:
            raise PartitionNotResident("inconsistent session cache state")
