"""Worker selection: model gating, residency tiers, entropy-weighted ranking,
deferred-load targeting and two-phase batch assignment.

Everything here is a pure function over immutable fleet snapshots; the
foreman serializes scheduling rounds and passes in only the workers that are
actually eligible (connected, and free when an instruction would occupy the
worker).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import DegenerateMatrix, EmptyEligibleSet, NoWorkersAvailable
from .model import TaskRecord, WorkerDescriptor

STRATEGY_FIFO = "fifo"
STRATEGY_ENTROPY = "entropy_weighted_sum"
STRATEGIES = (STRATEGY_FIFO, STRATEGY_ENTROPY)

CRITERIA = ("cpu_load", "ram_free", "battery", "rtt", "temperature")
# True marks a benefit criterion; costs are inverted before weighting.
CRITERIA_IS_BENEFIT = (False, True, True, False, False)


class ResidencyTier(IntEnum):
    RESIDENT = 1
    CACHED = 2
    IDLE = 3
    EVICT = 4


@dataclass(frozen=True, slots=True)
class CriteriaMatrix:
    """Workers x criteria telemetry values plus per-column orientation."""

    worker_ids: tuple[str, ...]
    values: tuple[tuple[float, ...], ...]
    is_benefit: tuple[bool, ...] = CRITERIA_IS_BENEFIT

    @classmethod
    def from_fleet(cls, fleet: list[WorkerDescriptor]) -> "CriteriaMatrix":
        rows = []
        for w in fleet:
            t = w.last_heartbeat
            if t is None:
                raise ValueError(f"worker {w.worker_id} has no telemetry")
            rows.append((t.cpu_load, float(t.ram_free_bytes), t.battery_fraction, t.rtt_ms, t.temperature_c))
        return cls(worker_ids=tuple(w.worker_id for w in fleet), values=tuple(rows))

    def oriented(self) -> np.ndarray:
        """Matrix with cost columns inverted to benefits via (col max - x)."""
        m = np.asarray(self.values, dtype=np.float64)
        out = m.copy()
        for j, benefit in enumerate(self.is_benefit):
            if not benefit:
                out[:, j] = m[:, j].max() - m[:, j]
        return out


@dataclass(frozen=True, slots=True)
class LoadPlan:
    """Instruction to make `load` resident on `worker_id`."""

    worker_id: str
    tier: ResidencyTier
    load: str
    unload_first: str | None = None

    def __post_init__(self) -> None:
        if (self.unload_first is not None) != (self.tier == ResidencyTier.EVICT):
            raise ValueError("unload_first is set iff tier is EVICT")


PHASE_CLAIMED = "claimed"
PHASE_MCDM = "mcdm"


@dataclass(frozen=True, slots=True)
class AssignmentPlan:
    """task_id -> worker_id map with the phase each assignment came from."""

    assignments: dict[int, str]
    phases: dict[int, str]

    def __len__(self) -> int:
        return len(self.assignments)


def compute_tier(target: str, worker: WorkerDescriptor) -> ResidencyTier:
    """Tier of a worker for loading `target`, per the 4-level preference.

    A worker resident on a different partition is an eviction case even when
    the target sits in its disk cache; the load itself may still be served
    warm from disk.
    """
    if worker.resident_partition == target:
        return ResidencyTier.RESIDENT
    if worker.resident_partition is None:
        if target in worker.disk_cache:
            return ResidencyTier.CACHED
        return ResidencyTier.IDLE
    return ResidencyTier.EVICT


def gate_workers(target: str, fleet: list[WorkerDescriptor]) -> list[WorkerDescriptor]:
    """Connected workers with the target partition in session memory.

    An empty result is a signal, not an error: the caller must schedule a
    deferred load before any dispatch can happen.
    """
    return [w for w in fleet if w.connected and w.resident_partition == target]


def entropy_weights(matrix: CriteriaMatrix) -> np.ndarray:
    """Shannon entropy criterion weights over the oriented matrix.

    Columns uniform across workers carry no discriminating information and
    get zero weight; if every column is uniform the weights fall back to
    uniform.
    """
    rows = len(matrix.worker_ids)
    if rows < 2:
        raise DegenerateMatrix("entropy weighting needs at least 2 workers")
    oriented = matrix.oriented()
    cols = oriented.shape[1]
    col_sums = oriented.sum(axis=0)
    p = np.empty_like(oriented)
    for j in range(cols):
        if col_sums[j] == 0.0:
            p[:, j] = 1.0 / rows
        else:
            p[:, j] = oriented[:, j] / col_sums[j]
    plogp = np.where(p > 0.0, p * np.log(np.maximum(p, 1e-300)), 0.0)
    entropy = -plogp.sum(axis=0) / np.log(rows)
    divergence = 1.0 - entropy
    divergence = np.where(np.abs(divergence) < 1e-15, 0.0, divergence)
    divergence = np.maximum(divergence, 0.0)
    total = divergence.sum()
    if total == 0.0:
        return np.full(cols, 1.0 / cols)
    return divergence / total


def _minmax_normalized(matrix: CriteriaMatrix) -> np.ndarray:
    oriented = matrix.oriented()
    out = np.empty_like(oriented)
    for j in range(oriented.shape[1]):
        col = oriented[:, j]
        span = col.max() - col.min()
        if span == 0.0:
            out[:, j] = 0.5
        else:
            out[:, j] = (col - col.min()) / span
    return out


def rank_workers(
    eligible: list[WorkerDescriptor],
    matrix: CriteriaMatrix | None = None,
    strategy: str = STRATEGY_ENTROPY,
) -> list[WorkerDescriptor]:
    """Order eligible workers for dispatch.

    fifo ranks by registration order and ignores telemetry entirely;
    entropy_weighted_sum scores each worker as the weighted sum of min-max
    normalized benefit values, descending. Ties break by worker_id.
    """
    if not eligible:
        raise EmptyEligibleSet("no eligible workers to rank")
    if strategy == STRATEGY_FIFO:
        return sorted(eligible, key=lambda w: (w.registration_order, w.worker_id))
    if strategy != STRATEGY_ENTROPY:
        raise ValueError(f"unknown ranking strategy {strategy!r}")
    if len(eligible) == 1:
        return list(eligible)
    if matrix is None:
        matrix = CriteriaMatrix.from_fleet(eligible)
    weights = entropy_weights(matrix)
    normalized = _minmax_normalized(matrix)
    # Sequential left-to-right accumulation; keeps scores bit-reproducible
    # against independent non-numpy reimplementations of the same formula.
    scores = [float(sum(normalized[i, j] * weights[j] for j in range(normalized.shape[1])))
              for i in range(normalized.shape[0])]
    by_id = {wid: s for wid, s in zip(matrix.worker_ids, scores)}
    return sorted(eligible, key=lambda w: (-by_id[w.worker_id], w.worker_id))


def select_load_target(
    target: str,
    fleet: list[WorkerDescriptor],
    strategy: str = STRATEGY_ENTROPY,
) -> LoadPlan:
    """Pick the load destination: minimum tier first, telemetry rank within.

    Tier-4 plans carry the explicit unload of the currently resident shard.
    """
    candidates = [w for w in fleet if w.connected]
    if not candidates:
        raise NoWorkersAvailable(f"no connected workers to load {target}")
    best_tier = min(compute_tier(target, w) for w in candidates)
    within = [w for w in candidates if compute_tier(target, w) == best_tier]
    ranked = rank_workers(within, strategy=strategy)
    chosen = ranked[0]
    unload = chosen.resident_partition if best_tier == ResidencyTier.EVICT else None
    return LoadPlan(worker_id=chosen.worker_id, tier=best_tier, load=target, unload_first=unload)


def two_phase_assign(
    pending: list[TaskRecord],
    fleet: list[WorkerDescriptor],
    artefact_for_stage,
    strategy: str = STRATEGY_ENTROPY,
) -> AssignmentPlan:
    """Resolve batch contention: worker-driven claiming, then ranked fill.

    Phase 1 orders Tier-1 workers rarest-resident-partition-first (ties by
    worker_id) and lets each claim its lowest-id gated pending task. Phase 2
    walks remaining tasks in id order and assigns ranked still-unassigned
    gated workers. Tasks left over await a deferred load; a worker is never
    assigned twice in one round.
    """
    assignments: dict[int, str] = {}
    phases: dict[int, str] = {}
    connected = [w for w in fleet if w.connected]
    unclaimed_tasks = sorted(pending, key=lambda t: t.task_id)
    used_workers: set[str] = set()

    replica_count: dict[str, int] = {}
    for w in connected:
        if w.resident_partition is not None:
            replica_count[w.resident_partition] = replica_count.get(w.resident_partition, 0) + 1

    tier1 = [w for w in connected if w.resident_partition is not None]
    tier1.sort(key=lambda w: (replica_count[w.resident_partition], w.worker_id))
    for worker in tier1:
        for task in unclaimed_tasks:
            if task.task_id in assignments:
                continue
            if artefact_for_stage(task.stage_index) == worker.resident_partition:
                assignments[task.task_id] = worker.worker_id
                phases[task.task_id] = PHASE_CLAIMED
                used_workers.add(worker.worker_id)
                break

    for task in unclaimed_tasks:
        if task.task_id in assignments:
            continue
        target = artefact_for_stage(task.stage_index)
        gated = [w for w in gate_workers(target, connected) if w.worker_id not in used_workers]
        if not gated:
            continue
        ranked = rank_workers(gated, strategy=strategy)
        chosen = ranked[0]
        assignments[task.task_id] = chosen.worker_id
        phases[task.task_id] = PHASE_MCDM
        used_workers.add(chosen.worker_id)

    return AssignmentPlan(assignments=assignments, phases=phases)
