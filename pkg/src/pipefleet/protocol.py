"""Wire protocol: one canonical-JSON text frame per message.

Every message is a flat object with a ``type`` field. Frames are canonical
bytes (sorted keys, no insignificant whitespace); the socket transport adds
a trailing newline as the frame delimiter.
"""

from __future__ import annotations

import json
from typing import Any

from .canonical import canonical_bytes
from .model import PipelineSpec, TelemetrySnapshot
from .transport import PayloadEnvelope, PayloadRouting

MSG_WORKER_REGISTER = "WORKER_REGISTER"
MSG_HEARTBEAT = "HEARTBEAT"
MSG_SUBMIT_PIPELINE_JOB = "SUBMIT_PIPELINE_JOB"
MSG_JOB_ACCEPTED = "JOB_ACCEPTED"
MSG_JOB_REJECTED = "JOB_REJECTED"
MSG_LOAD_MODEL = "LOAD_MODEL"
MSG_MODEL_LOADED = "MODEL_LOADED"
MSG_MODEL_LOAD_FAILED = "MODEL_LOAD_FAILED"
MSG_UNLOAD_MODEL = "UNLOAD_MODEL"
MSG_MODEL_UNLOADED = "MODEL_UNLOADED"
MSG_TASK_ASSIGN = "TASK_ASSIGN"
MSG_TASK_RESULT = "TASK_RESULT"
MSG_TASK_FAILED = "TASK_FAILED"
MSG_JOB_RESULT = "JOB_RESULT"

LOAD_SOURCE_NETWORK = "network"
LOAD_SOURCE_DISK = "disk_cache"

JOB_STATUS_COMPLETE = "complete"
JOB_STATUS_FAILED = "failed"


def encode_frame(message: dict[str, Any]) -> bytes:
    return canonical_bytes(message)


def decode_frame(frame: bytes | str) -> dict[str, Any]:
    if isinstance(frame, bytes):
        frame = frame.decode("utf-8")
    message = json.loads(frame)
    if not isinstance(message, dict) or "type" not in message:
        raise ValueError("frame is not a message object with a 'type' field")
    return message


def make_worker_register(worker_id: str, capabilities: dict[str, Any]) -> dict:
    return {"type": MSG_WORKER_REGISTER, "worker_id": worker_id, "capabilities": capabilities}


def make_heartbeat(
    worker_id: str,
    telemetry: TelemetrySnapshot,
    resident: str | None,
    cached: list[str],
) -> dict:
    return {
        "type": MSG_HEARTBEAT,
        "worker_id": worker_id,
        "telemetry": telemetry.to_wire(),
        "resident": resident,
        "cached": sorted(cached),
    }


def make_submit_pipeline_job(
    pipeline: PipelineSpec,
    blobs: dict[str, str],
    inputs: list[PayloadEnvelope],
) -> dict:
    return {
        "type": MSG_SUBMIT_PIPELINE_JOB,
        "pipeline": pipeline.to_wire(),
        "blobs": dict(sorted(blobs.items())),
        "inputs": [e.to_wire() for e in inputs],
    }


def make_job_accepted(job_id: str) -> dict:
    return {"type": MSG_JOB_ACCEPTED, "job_id": job_id}


def make_job_rejected(reasons: list[str]) -> dict:
    return {"type": MSG_JOB_REJECTED, "reasons": list(reasons)}


def make_load_model(job_id: str, artefact_id: str, checksum: str, blob_b64: str | None) -> dict:
    """blob_b64 is None when the worker should load from its disk cache."""
    return {
        "type": MSG_LOAD_MODEL,
        "job_id": job_id,
        "artefact_id": artefact_id,
        "checksum": checksum,
        "blob": blob_b64,
    }


def make_model_loaded(
    worker_id: str,
    job_id: str,
    artefact_id: str,
    source: str,
    load_ms: int,
    tracked_rss_bytes: int,
) -> dict:
    return {
        "type": MSG_MODEL_LOADED,
        "worker_id": worker_id,
        "job_id": job_id,
        "artefact_id": artefact_id,
        "source": source,
        "load_ms": load_ms,
        "tracked_rss_bytes": tracked_rss_bytes,
    }


def make_model_load_failed(worker_id: str, job_id: str, artefact_id: str, reason: str) -> dict:
    return {
        "type": MSG_MODEL_LOAD_FAILED,
        "worker_id": worker_id,
        "job_id": job_id,
        "artefact_id": artefact_id,
        "reason": reason,
    }


def make_unload_model(job_id: str, artefact_id: str) -> dict:
    return {"type": MSG_UNLOAD_MODEL, "job_id": job_id, "artefact_id": artefact_id}


def make_model_unloaded(worker_id: str, job_id: str, artefact_id: str, tracked_rss_bytes: int) -> dict:
    return {
        "type": MSG_MODEL_UNLOADED,
        "worker_id": worker_id,
        "job_id": job_id,
        "artefact_id": artefact_id,
        "tracked_rss_bytes": tracked_rss_bytes,
    }


def make_task_assign(
    job_id: str,
    task_id: int,
    stage_index: int,
    artefact_id: str,
    input_routing: PayloadRouting,
) -> dict:
    return {
        "type": MSG_TASK_ASSIGN,
        "job_id": job_id,
        "task_id": task_id,
        "stage_index": stage_index,
        "artefact_id": artefact_id,
        "input": input_routing.to_wire(),
    }


def make_task_result(worker_id: str, job_id: str, task_id: int, output: PayloadRouting) -> dict:
    return {
        "type": MSG_TASK_RESULT,
        "worker_id": worker_id,
        "job_id": job_id,
        "task_id": task_id,
        "output": output.to_wire(),
    }


def make_task_failed(worker_id: str, job_id: str, task_id: int, reason: str) -> dict:
    return {
        "type": MSG_TASK_FAILED,
        "worker_id": worker_id,
        "job_id": job_id,
        "task_id": task_id,
        "reason": reason,
    }


def make_job_result(
    job_id: str,
    status: str,
    mean_logits: list[float] | None,
    predicted_class: int | None,
    metrics: dict[str, Any] | None,
    error: str | None = None,
) -> dict:
    return {
        "type": MSG_JOB_RESULT,
        "job_id": job_id,
        "status": status,
        "mean_logits": mean_logits,
        "predicted_class": predicted_class,
        "metrics": metrics,
        "error": error,
    }


ALL_MESSAGE_TYPES = (
    MSG_WORKER_REGISTER,
    MSG_HEARTBEAT,
    MSG_SUBMIT_PIPELINE_JOB,
    MSG_JOB_ACCEPTED,
    MSG_JOB_REJECTED,
    MSG_LOAD_MODEL,
    MSG_MODEL_LOADED,
    MSG_MODEL_LOAD_FAILED,
    MSG_UNLOAD_MODEL,
    MSG_MODEL_UNLOADED,
    MSG_TASK_ASSIGN,
    MSG_TASK_RESULT,
    MSG_TASK_FAILED,
    MSG_JOB_RESULT,
)
