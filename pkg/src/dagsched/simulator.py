"""Deterministic discrete-event simulation of DAG jobs on identical executors.

Events at equal timestamps are processed in a fixed order: job arrivals
before task finishes, then by job_id, node_id and exec_id. After all events
at a timestamp are applied the simulator fires scheduling stages back to back
until no executor is idle, no candidate node remains, or the policy declines.
"""
from __future__ import annotations

import heapq
import io
import logging
from dataclasses import dataclass, field

from . import features as F
from .features import FeatureVector, NormalizationConfig
from .schedulers import SchedulingDecision, equal_share_caps

log = logging.getLogger(__name__)

ARRIVAL, FINISH = 0, 1


class ContractViolation(RuntimeError):
    """A policy asked for something the cluster cannot do."""

    def __init__(self, stage_idx: int, message: str):
        super().__init__(f"stage {stage_idx}: {message}")
        self.stage_idx = stage_idx


@dataclass
class ExecutorState:
    exec_id: int
    job_id: int | None = None
    node_id: int | None = None
    finish_time_s: float | None = None
    assigned_job: int | None = None

    @property
    def busy(self) -> bool:
        return self.job_id is not None

    @property
    def status(self) -> str:
        return "busy" if self.busy else "idle"


@dataclass
class NodeRuntime:
    task_count: int
    duration_s: float
    remaining_tasks: int
    dispatched_tasks: int = 0
    finished_tasks: int = 0
    ready: bool = False
    unfinished_parents: int = 0

    @property
    def finished(self) -> bool:
        return self.finished_tasks == self.task_count


class JobRuntime:
    """Mutable per-job bookkeeping owned by one simulation."""

    def __init__(self, job):
        self.job = job
        self.job_id = job.job_id
        self.arrival_time_s = job.arrival_time_s
        self.order = job.topological_order()
        self.children = {n.node_id: tuple(sorted(n.children)) for n in job.nodes}
        self.nodes = {}
        for n in job.nodes:
            self.nodes[n.node_id] = NodeRuntime(n.task_count, n.task.duration_s, n.task_count,
                                                unfinished_parents=len(n.parents))
        self.schedulable: set[int] = set()
        for v, nrt in self.nodes.items():
            if nrt.unfinished_parents == 0:
                nrt.ready = True
                self.schedulable.add(v)
        self.held = 0
        self.remaining_tasks = job.total_tasks
        self.unfinished_tasks = job.total_tasks
        self.version = 0
        self.feature_cache = None
        self.completed = False
        self.completion_time_s: float | None = None

    @property
    def remaining_work_s(self) -> float:
        return sum(n.remaining_tasks * n.duration_s for n in self.nodes.values())


@dataclass
class ClusterState:
    executor_count: int
    clock_s: float = 0.0
    executors: list = field(default_factory=list)
    jobs_in_system: list = field(default_factory=list)
    runtimes: dict = field(default_factory=dict)
    event_queue: list = field(default_factory=list)
    prev_scheduled_job: int | None = None
    job_exec_cap: dict = field(default_factory=dict)
    cap_rule: str = "none"
    just_freed: set = field(default_factory=set)
    stage_idx: int = 0
    migration_delay_s: float = 0.0
    task_log: list | None = None
    busy_count: int = 0
    _seq: int = 0

    @property
    def idle_count(self) -> int:
        return self.executor_count - self.busy_count

    def held(self, job_id: int) -> int:
        return self.runtimes[job_id].held

    def push(self, time_s: float, kind: int, job_id: int, node_id: int = -1, exec_id: int = -1) -> None:
        if time_s < self.clock_s:
            raise RuntimeError("event scheduled in the past")
        self._seq += 1
        heapq.heappush(self.event_queue, (time_s, kind, job_id, node_id, exec_id, self._seq))

    def refresh_caps(self) -> dict:
        self.job_exec_cap = equal_share_caps(self.jobs_in_system, self.executor_count, self.cap_rule)
        return self.job_exec_cap

    def candidates(self) -> list:
        """Ready nodes with undispatched tasks whose job is below its cap."""
        out = []
        caps = self.job_exec_cap
        for job_id in self.jobs_in_system:
            jrt = self.runtimes[job_id]
            if jrt.schedulable and jrt.held < caps.get(job_id, 0):
                out.extend((job_id, v) for v in sorted(jrt.schedulable))
        return out


class StageView:
    """What a policy sees at one scheduling stage."""

    def __init__(self, state: ClusterState, candidates: list, cp_metric: str = "hops"):
        self.state = state
        self.candidates = candidates
        self.cp_metric = cp_metric
        self.stage_idx = state.stage_idx
        self.idle_count = state.idle_count
        self._features: dict = {}

    def features(self, job_id: int, node_id: int, norm: NormalizationConfig | None = None) -> FeatureVector:
        key = (job_id, node_id)
        fv = self._features.get(key)
        if fv is None:
            fv = F.extract(node_id, self.state.runtimes[job_id], self.state, None, self.cp_metric)
            self._features[key] = fv
        return fv if norm is None else fv.normalized(norm)

    def arrival(self, job_id: int) -> float:
        return self.state.runtimes[job_id].arrival_time_s

    def held(self, job_id: int) -> int:
        return self.state.runtimes[job_id].held

    def cap(self, job_id: int) -> int:
        return self.state.job_exec_cap.get(job_id, 0)

    def remaining_tasks(self, job_id: int, node_id: int) -> int:
        return self.state.runtimes[job_id].nodes[node_id].remaining_tasks

    def budget(self, job_id: int, node_id: int | None = None) -> int:
        """Executors the job may still take: cap minus held, clipped to idle (and the node's tasks)."""
        b = min(self.cap(job_id) - self.held(job_id), self.idle_count)
        if node_id is not None:
            b = min(b, self.remaining_tasks(job_id, node_id))
        return max(0, b)


@dataclass
class SimResult:
    scheduler: str
    executor_count: int
    arrival_s: dict
    completion_time_s: dict
    jct_s: dict
    size_class: dict
    timeline: list
    stages: int
    declined_stages: int
    total_tasks: int
    finished_tasks: int
    task_log: list | None = None

    @property
    def avg_jct_s(self) -> float:
        return sum(self.jct_s.values()) / len(self.jct_s)

    @property
    def makespan_s(self) -> float:
        return max(self.completion_time_s.values())

    def mean_concurrency(self) -> float:
        """Time-weighted mean number of jobs in the system while any job is present."""
        pts = self.timeline
        area = 0.0
        span = 0.0
        for (t0, c0, _), (t1, _, _) in zip(pts, pts[1:]):
            if c0 > 0:
                area += c0 * (t1 - t0)
                span += t1 - t0
        return area / span if span > 0 else 0.0

    def mean_busy(self) -> float:
        pts = self.timeline
        area = sum(b0 * (t1 - t0) for (t0, _, b0), (t1, _, _) in zip(pts, pts[1:]))
        total = pts[-1][0] - pts[0][0] if len(pts) > 1 else 0.0
        return area / total if total > 0 else 0.0

    def timeline_csv(self, header_comment: str | None = None) -> str:
        buf = io.StringIO()
        if header_comment:
            buf.write(f"# {header_comment}\n")
        buf.write("t_s,concurrent_jobs,busy_executors\n")
        for t, c, b in self.timeline:
            buf.write(f"{t!r},{c},{b}\n")
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "scheduler": self.scheduler,
            "executor_count": self.executor_count,
            "avg_jct_s": self.avg_jct_s,
            "mean_concurrency": self.mean_concurrency(),
            "stages": self.stages,
            "declined_stages": self.declined_stages,
            "jobs": [
                {"job_id": j, "arrival_s": self.arrival_s[j], "completion_s": self.completion_time_s[j],
                 "jct_s": self.jct_s[j], "size_class": self.size_class[j]}
                for j in sorted(self.jct_s)
            ],
            "timeline": [list(p) for p in self.timeline],
        }


def init_state(spec, cap_rule: str = "none", migration_delay_s: float = 0.0,
               record_tasks: bool = False) -> ClusterState:
    state = ClusterState(
        executor_count=spec.executor_count,
        executors=[ExecutorState(i) for i in range(spec.executor_count)],
        cap_rule=cap_rule,
        migration_delay_s=float(migration_delay_s),
        task_log=[] if record_tasks else None,
    )
    for job in spec.jobs:
        state.runtimes[job.job_id] = JobRuntime(job)
        state.push(job.arrival_time_s, ARRIVAL, job.job_id)
    return state


def step_stage(state: ClusterState, decision: SchedulingDecision) -> ClusterState:
    """Dispatch up to ``min(budget, remaining_tasks)`` tasks of the chosen node."""
    stage = state.stage_idx
    jrt = state.runtimes.get(decision.job_id)
    if jrt is None or decision.job_id not in state.jobs_in_system:
        raise ContractViolation(stage, f"job {decision.job_id} is not in the system")
    nrt = jrt.nodes.get(decision.node_id)
    if nrt is None:
        raise ContractViolation(stage, f"job {decision.job_id} has no node {decision.node_id}")
    if not nrt.ready:
        raise ContractViolation(stage, f"node {decision.node_id} of job {decision.job_id} is not ready")
    if nrt.remaining_tasks <= 0:
        raise ContractViolation(stage, f"node {decision.node_id} of job {decision.job_id} has nothing left")
    idle = [e for e in state.executors if not e.busy]
    budget = decision.executor_budget
    if budget > len(idle):
        raise ContractViolation(stage, f"budget {budget} exceeds {len(idle)} idle executors")
    cap = state.job_exec_cap.get(decision.job_id, state.executor_count)
    if jrt.held + budget > cap:
        raise ContractViolation(stage, f"job {decision.job_id} would hold {jrt.held + budget} > cap {cap}")

    n = min(budget, nrt.remaining_tasks)
    # executors already on this job first, then lowest id
    idle.sort(key=lambda e: (e.assigned_job != decision.job_id, e.exec_id))
    for ex in idle[:n]:
        start = state.clock_s
        if state.migration_delay_s and ex.assigned_job is not None and ex.assigned_job != decision.job_id:
            start += state.migration_delay_s
        finish = start + nrt.duration_s
        ex.job_id, ex.node_id, ex.finish_time_s = decision.job_id, decision.node_id, finish
        ex.assigned_job = decision.job_id
        state.push(finish, FINISH, decision.job_id, decision.node_id, ex.exec_id)
        if state.task_log is not None:
            state.task_log.append((decision.job_id, decision.node_id, ex.exec_id, start, finish))
    nrt.remaining_tasks -= n
    nrt.dispatched_tasks += n
    jrt.remaining_tasks -= n
    jrt.held += n
    state.busy_count += n
    jrt.version += 1
    if nrt.remaining_tasks == 0:
        jrt.schedulable.discard(decision.node_id)
    state.prev_scheduled_job = decision.job_id
    return state


def idle_decision(state: ClusterState) -> None:
    """The explicit "schedule nothing" decision; the run loop then advances time."""
    return None


class Simulator:
    """Runs one workload under one policy.

    ``trace_sink`` (anything with ``record(StageRecord)`` and a ``norm``
    attribute) receives one record per scheduling stage.
    """

    def __init__(self, spec, scheduler, trace_sink=None, migration_delay_s: float = 0.0,
                 record_tasks: bool = False, cp_metric: str | None = None):
        self.spec = spec
        self.scheduler = scheduler
        self.trace_sink = trace_sink
        self.migration_delay_s = migration_delay_s
        self.record_tasks = record_tasks
        self.cp_metric = cp_metric or getattr(scheduler, "cp_metric", "hops")
        self.state: ClusterState | None = None

    def run(self) -> SimResult:
        spec = self.spec
        cap_rule = getattr(self.scheduler, "cap_rule", "none")
        state = self.state = init_state(spec, cap_rule, self.migration_delay_s, self.record_tasks)
        if hasattr(self.scheduler, "reset"):
            self.scheduler.reset(spec)
        timeline = []
        declined = 0
        finished_tasks = 0
        queue = state.event_queue
        while queue:
            t = queue[0][0]
            state.clock_s = t
            state.just_freed = set()
            membership_changed = False
            while queue and queue[0][0] == t:
                _, kind, job_id, node_id, exec_id, _ = heapq.heappop(queue)
                if kind == ARRIVAL:
                    state.jobs_in_system.append(job_id)
                    membership_changed = True
                else:
                    finished_tasks += 1
                    if self._finish_task(state, job_id, node_id, exec_id):
                        membership_changed = True
            if membership_changed:
                state.refresh_caps()
            declined += self._run_stages(state)
            timeline.append((t, len(state.jobs_in_system), state.busy_count))

        rts = state.runtimes
        unfinished = [j for j, r in rts.items() if not r.completed]
        if unfinished:
            raise ContractViolation(state.stage_idx, f"simulation stalled with unfinished jobs {unfinished[:5]}")
        completion = {j: r.completion_time_s for j, r in rts.items()}
        arrival = {j: r.arrival_time_s for j, r in rts.items()}
        return SimResult(
            scheduler=getattr(self.scheduler, "name", type(self.scheduler).__name__),
            executor_count=spec.executor_count,
            arrival_s=arrival,
            completion_time_s=completion,
            jct_s={j: completion[j] - arrival[j] for j in rts},
            size_class={j.job_id: j.size_class for j in spec.jobs},
            timeline=timeline,
            stages=state.stage_idx,
            declined_stages=declined,
            total_tasks=sum(j.total_tasks for j in spec.jobs),
            finished_tasks=finished_tasks,
            task_log=state.task_log,
        )

    def _finish_task(self, state, job_id, node_id, exec_id) -> bool:
        ex = state.executors[exec_id]
        ex.job_id = ex.node_id = ex.finish_time_s = None
        jrt = state.runtimes[job_id]
        jrt.held -= 1
        state.busy_count -= 1
        jrt.unfinished_tasks -= 1
        jrt.version += 1
        state.just_freed.add(job_id)
        nrt = jrt.nodes[node_id]
        nrt.finished_tasks += 1
        if nrt.finished:
            for c in jrt.children[node_id]:
                child = jrt.nodes[c]
                child.unfinished_parents -= 1
                if child.unfinished_parents == 0:
                    child.ready = True
                    jrt.schedulable.add(c)
        if jrt.unfinished_tasks == 0:
            jrt.completed = True
            jrt.completion_time_s = state.clock_s
            state.jobs_in_system.remove(job_id)
            return True
        return False

    def _run_stages(self, state) -> int:
        while True:
            if state.idle_count == 0:
                return 0
            cands = state.candidates()
            if not cands:
                return 0
            view = StageView(state, cands, self.cp_metric)
            decision = self.scheduler.decide(view)
            if decision is None:
                log.debug("stage %d: policy declined with %d candidates and %d idle executors",
                          state.stage_idx, len(cands), view.idle_count)
                return 1
            if (decision.job_id, decision.node_id) not in set(cands):
                raise ContractViolation(state.stage_idx,
                                        f"({decision.job_id}, {decision.node_id}) is not a candidate")
            if self.trace_sink is not None:
                self._record(view, decision)
            step_stage(state, decision)
            state.stage_idx += 1

    def _record(self, view, decision) -> None:
        from .trace import StageRecord

        norm = getattr(self.trace_sink, "norm", None)
        cands = tuple((j, v, view.features(j, v, norm)) for j, v in view.candidates)
        self.trace_sink.record(StageRecord(
            stage_idx=view.stage_idx,
            clock_s=view.state.clock_s,
            chosen_job=decision.job_id,
            chosen_node=decision.node_id,
            executor_budget=decision.executor_budget,
            candidates=cands,
            prev_job=view.state.prev_scheduled_job,
        ))


def run(spec, scheduler, hooks=None, **kwargs) -> SimResult:
    return Simulator(spec, scheduler, trace_sink=hooks, **kwargs).run()
