"""Independent makespan oracle for failure-free deterministic fleets.

This is a from-scratch event simulation over the dependency graph and the
load/tier/claiming rules. It deliberately does not import the foreman,
scheduler or worker modules: tiering, entropy weighting, ranking and
two-phase claiming are reimplemented here in plain Python so that a defect
in either side shows up as a makespan mismatch rather than being shared.

Events mirror the real system's message hops (instruction delivery, load
acknowledgment, task result) with (time, push-order) heap ordering, because
exact makespan equality requires agreeing on how simultaneous events
interleave.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

from .errors import UnsupportedConfig

# (cpu_load, ram_free, battery, rtt, temperature); True marks a benefit column.
_BENEFIT = (False, True, True, False, False)
_DEFAULT_TELEMETRY = (0.2, 2_000_000_000.0, 0.8, 20.0, 30.0)

_FIFO = "fifo"
_ENTROPY = "entropy_weighted_sum"


@dataclass(slots=True)
class _Worker:
    worker_id: str
    order: int
    telemetry: tuple[float, float, float, float, float]
    cold_ms: int
    warm_ms: int
    compute_ms: dict[int, int]
    resident: int | None = None  # foreman's ACKed view; stages double as artefact ids
    cache: set[int] = field(default_factory=set)
    busy: bool = False

    def compute_for(self, stage: int) -> int:
        return int(self.compute_ms.get(stage, 0))


def _telemetry_tuple(row: dict | None) -> tuple[float, float, float, float, float]:
    if row is None:
        return _DEFAULT_TELEMETRY
    return (
        float(row["cpu_load"]),
        float(row["ram_free_bytes"]),
        float(row["battery_fraction"]),
        float(row["rtt_ms"]),
        float(row["temperature_c"]),
    )


def _entropy_rank(workers: list[_Worker]) -> list[_Worker]:
    """Descending entropy-weighted score, ties by worker_id. Pure python."""
    if len(workers) == 1:
        return list(workers)
    m = len(workers)
    cols = 5
    oriented = [[0.0] * cols for _ in range(m)]
    for j in range(cols):
        column = [w.telemetry[j] for w in workers]
        if _BENEFIT[j]:
            for i in range(m):
                oriented[i][j] = column[i]
        else:
            top = max(column)
            for i in range(m):
                oriented[i][j] = top - column[i]

    weights = [0.0] * cols
    divergence = [0.0] * cols
    for j in range(cols):
        total = sum(oriented[i][j] for i in range(m))
        if total == 0.0:
            p = [1.0 / m] * m
        else:
            p = [oriented[i][j] / total for i in range(m)]
        plogp = sum(v * math.log(v) if v > 0.0 else 0.0 for v in p)
        entropy = -plogp / math.log(m)
        d = 1.0 - entropy
        if abs(d) < 1e-15:
            d = 0.0
        divergence[j] = max(d, 0.0)
    dsum = sum(divergence)
    if dsum == 0.0:
        weights = [1.0 / cols] * cols
    else:
        weights = [d / dsum for d in divergence]

    normalized = [[0.0] * cols for _ in range(m)]
    for j in range(cols):
        column = [oriented[i][j] for i in range(m)]
        low, high = min(column), max(column)
        span = high - low
        for i in range(m):
            normalized[i][j] = 0.5 if span == 0.0 else (column[i] - low) / span

    scored = []
    for i, w in enumerate(workers):
        score = float(sum(normalized[i][j] * weights[j] for j in range(cols)))
        scored.append((-score, w.worker_id, w))
    scored.sort(key=lambda item: (item[0], item[1]))
    return [w for _, _, w in scored]


def _rank(workers: list[_Worker], strategy: str) -> list[_Worker]:
    if strategy == _FIFO:
        return sorted(workers, key=lambda w: (w.order, w.worker_id))
    return _entropy_rank(workers)


def _tier(target: int, worker: _Worker) -> int:
    if worker.resident == target:
        return 1
    if worker.resident is None:
        return 2 if target in worker.cache else 3
    return 4


class _Sim:
    def __init__(self, config, mode: str):
        if config.failures:
            raise UnsupportedConfig("oracle covers failure-free deterministic configs only")
        self.mode = mode
        self.n = config.n_inputs
        self.s = len(config.stages)
        self.strategy = config.strategy
        name_to_stage = {stage.artefact_id(k): k for k, stage in enumerate(config.stages)}
        self.workers: list[_Worker] = []
        for order, wc in enumerate(config.workers):
            cache = set()
            for artefact in wc.precached:
                if artefact not in name_to_stage:
                    raise UnsupportedConfig(f"unknown precached artefact {artefact}")
                cache.add(name_to_stage[artefact])
            self.workers.append(
                _Worker(
                    worker_id=wc.worker_id,
                    order=order,
                    telemetry=_telemetry_tuple(wc.telemetry),
                    cold_ms=wc.cold_load_ms,
                    warm_ms=wc.warm_load_ms,
                    compute_ms=dict(wc.compute_ms),
                    cache=cache,
                )
            )
        self.by_id = {w.worker_id: w for w in self.workers}

        # Dependency counters; a task is (stage, input) with id stage*n + input.
        self.deps = {}
        self.pending: set[int] = set()
        self.state: dict[int, str] = {}
        for stage in range(self.s):
            for inp in range(self.n):
                tid = stage * self.n + inp
                if stage == 0:
                    count = 0
                elif mode == "streaming":
                    count = 1
                else:
                    count = self.n
                self.deps[tid] = count
                self.state[tid] = "pending" if count == 0 else "blocked"
                if count == 0:
                    self.pending.add(tid)
        self.completed_per_stage = [0] * self.s
        self.completed_total = 0
        self.jit_dispatched: set[int] = set()
        self.outstanding: dict[int, set[str]] = {}

        self.now = 0
        self._heap: list[tuple[int, int, tuple]] = []
        self._seq = 0
        self.makespan: int | None = None

    # -- queue ----------------------------------------------------------------

    def _push(self, at: int, event: tuple) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (at, self._seq, event))

    # -- scheduling rules (mirrors of the contract, not of the code) ------------

    def _free(self) -> list[_Worker]:
        return [w for w in self.workers if not w.busy]

    def _burst(self, stage: int, worker: _Worker) -> None:
        if worker.resident == stage:
            return
        if worker.resident is not None:
            self._push(self.now, ("w_unload", worker.worker_id))
        duration = worker.warm_ms if stage in worker.cache else worker.cold_ms
        self._push(self.now, ("w_load", worker.worker_id, stage, duration))
        worker.busy = True
        self.outstanding.setdefault(stage, set()).add(worker.worker_id)

    def _dispatch_stage_load(self, stage: int) -> None:
        free = self._free()
        if not free:
            return
        best = min(_tier(stage, w) for w in free)
        if best == 1:
            return
        within = [w for w in free if _tier(stage, w) == best]
        chosen = _rank(within, self.strategy)[0]
        self._burst(stage, chosen)

    def _two_phase(self, pending_ids: list[int]) -> list[tuple[int, str]]:
        free = self._free()
        assignments: list[tuple[int, str]] = []
        assigned: set[int] = set()
        used: set[str] = set()

        replicas: dict[int, int] = {}
        for w in free:
            if w.resident is not None:
                replicas[w.resident] = replicas.get(w.resident, 0) + 1
        tier1 = sorted(
            (w for w in free if w.resident is not None),
            key=lambda w: (replicas[w.resident], w.worker_id),
        )
        for w in tier1:
            for tid in pending_ids:
                if tid in assigned:
                    continue
                if tid // self.n == w.resident:
                    assignments.append((tid, w.worker_id))
                    assigned.add(tid)
                    used.add(w.worker_id)
                    break
        for tid in pending_ids:
            if tid in assigned:
                continue
            stage = tid // self.n
            gated = [w for w in free if w.resident == stage and w.worker_id not in used]
            if not gated:
                continue
            chosen = _rank(gated, self.strategy)[0]
            assignments.append((tid, chosen.worker_id))
            assigned.add(tid)
            used.add(chosen.worker_id)
        return assignments

    def _run_round(self) -> None:
        if not self.pending:
            return
        pending_ids = sorted(self.pending)
        assignments = self._two_phase(pending_ids)
        for tid, worker_id in assignments:
            worker = self.by_id[worker_id]
            worker.busy = True
            self.state[tid] = "dispatched"
            self.pending.discard(tid)
            self._push(self.now, ("w_assign", worker_id, tid))

        leftover_stages = sorted({tid // self.n for tid in self.pending})
        for stage in leftover_stages:
            if any(w.resident == stage for w in self.workers):
                continue
            if self.outstanding.get(stage):
                continue
            if not self._free():
                continue
            self._dispatch_stage_load(stage)

    # -- event handlers ----------------------------------------------------------

    def _on_submit(self) -> None:
        for worker in self.workers:
            if worker.busy:
                continue
            self._burst(0, worker)
        self._run_round()

    def _on_w_load(self, worker_id: str, stage: int, duration: int) -> None:
        self._push(self.now + duration, ("f_loaded", worker_id, stage))

    def _on_w_unload(self, worker_id: str) -> None:
        self._push(self.now, ("f_unloaded", worker_id))

    def _on_f_unloaded(self, worker_id: str) -> None:
        self.by_id[worker_id].resident = None

    def _on_f_loaded(self, worker_id: str, stage: int) -> None:
        worker = self.by_id[worker_id]
        worker.resident = stage
        worker.cache.add(stage)
        worker.busy = False
        self.outstanding.get(stage, set()).discard(worker_id)
        self._run_round()

    def _on_w_assign(self, worker_id: str, tid: int) -> None:
        stage = tid // self.n
        duration = self.by_id[worker_id].compute_for(stage)
        self._push(self.now + duration, ("f_result", worker_id, tid))

    def _on_f_result(self, worker_id: str, tid: int) -> None:
        worker = self.by_id[worker_id]
        worker.busy = False
        self.state[tid] = "complete"
        stage = tid // self.n
        inp = tid % self.n
        self.completed_per_stage[stage] += 1
        self.completed_total += 1

        if stage + 1 < self.s:
            if self.mode == "streaming":
                child = (stage + 1) * self.n + inp
                self.deps[child] -= 1
                if self.deps[child] == 0:
                    self.state[child] = "pending"
                    self.pending.add(child)
            else:
                for j in range(self.n):
                    child = (stage + 1) * self.n + j
                    self.deps[child] -= 1
                    if self.deps[child] == 0:
                        self.state[child] = "pending"
                        self.pending.add(child)

        next_stage = stage + 1
        if (
            self.completed_per_stage[stage] == 1
            and next_stage < self.s
            and next_stage not in self.jit_dispatched
        ):
            self.jit_dispatched.add(next_stage)
            self._dispatch_stage_load(next_stage)

        if self.completed_total == self.n * self.s:
            self.makespan = self.now
            return
        self._run_round()

    # -- loop ----------------------------------------------------------------------

    def run(self) -> int:
        self._push(0, ("submit",))
        guard = 0
        while self._heap and self.makespan is None:
            at, _, event = heapq.heappop(self._heap)
            self.now = at
            kind = event[0]
            if kind == "submit":
                self._on_submit()
            elif kind == "w_load":
                self._on_w_load(event[1], event[2], event[3])
            elif kind == "w_unload":
                self._on_w_unload(event[1])
            elif kind == "f_unloaded":
                self._on_f_unloaded(event[1])
            elif kind == "f_loaded":
                self._on_f_loaded(event[1], event[2])
            elif kind == "w_assign":
                self._on_w_assign(event[1], event[2])
            elif kind == "f_result":
                self._on_f_result(event[1], event[2])
            guard += 1
            if guard > 2_000_000:
                raise RuntimeError("oracle event budget exhausted")
        if self.makespan is None:
            raise RuntimeError("oracle deadlock: tasks remain but no events pending")
        return self.makespan


def makespan_oracle(config, mode: str) -> int:
    """Exact virtual-time makespan the real system must match.

    Supports deterministic failure-free configs; anything with failure
    injection raises UnsupportedConfig.
    """
    mode_value = getattr(mode, "value", mode)
    if mode_value not in ("streaming", "barrier"):
        raise ValueError(f"unknown mode {mode!r}")
    return _Sim(config, mode_value).run()
