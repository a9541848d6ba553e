"""Job DAGs, synthetic workload generators and the JSONL workload format."""
from __future__ import annotations

import heapq
import json
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from ._validation import check_positive, check_positive_int

# Bump when template construction changes; seeds are only stable within a version.
TEMPLATE_VERSION = 1
_TEMPLATE_SEED = 7919
MAX_SHAPES = 32

TPCH_SIZE_CLASSES = (2.0, 5.0, 10.0, 20.0, 50.0, 80.0, 100.0)


class WorkloadError(ValueError):
    """Invalid workload contents or generator arguments."""


class WorkloadParseError(WorkloadError):
    def __init__(self, message: str, line: int | None = None, job_id: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if job_id is not None:
            where.append(f"job {job_id}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)
        self.line = line
        self.job_id = job_id


@dataclass(frozen=True)
class TaskTemplate:
    duration_s: float

    def __post_init__(self):
        if not (self.duration_s > 0 and math.isfinite(self.duration_s)):
            raise WorkloadError(f"task duration must be positive, got {self.duration_s}")


@dataclass(frozen=True)
class DagNode:
    node_id: int
    task_count: int
    task: TaskTemplate
    parents: frozenset = frozenset()
    children: frozenset = frozenset()

    @property
    def work_s(self) -> float:
        return self.task_count * self.task.duration_s


@dataclass(frozen=True)
class JobDag:
    job_id: int
    nodes: tuple
    arrival_time_s: float = 0.0
    size_class: float | None = None
    shape: int | None = None

    def __post_init__(self):
        validate_job(self)

    @property
    def node_map(self) -> dict:
        return {n.node_id: n for n in self.nodes}

    @property
    def total_tasks(self) -> int:
        return sum(n.task_count for n in self.nodes)

    @property
    def total_work_s(self) -> float:
        return sum(n.work_s for n in self.nodes)

    def topological_order(self) -> list[int]:
        return topological_sort({n.node_id: sorted(n.children) for n in self.nodes})


@dataclass(frozen=True)
class WorkloadSpec:
    jobs: tuple
    executor_count: int
    seed: int = 0

    def __post_init__(self):
        check_positive_int(self.executor_count, "executor_count", WorkloadError)
        ids = [j.job_id for j in self.jobs]
        if len(set(ids)) != len(ids):
            raise WorkloadError("duplicate job_id in workload")
        object.__setattr__(self, "jobs", tuple(sorted(self.jobs, key=lambda j: (j.arrival_time_s, j.job_id))))

    @property
    def job_map(self) -> dict:
        return {j.job_id: j for j in self.jobs}

    def with_executors(self, executor_count: int) -> "WorkloadSpec":
        return WorkloadSpec(self.jobs, executor_count, self.seed)

    def subset(self, job_ids: Iterable[int]) -> "WorkloadSpec":
        keep = set(job_ids)
        return WorkloadSpec(tuple(j for j in self.jobs if j.job_id in keep), self.executor_count, self.seed)


def topological_sort(graph: dict) -> list[int]:
    """Kahn's algorithm over ``{node: children}``; smallest ready id first.

    Raises ValueError on a cycle.
    """
    indegree = {v: 0 for v in graph}
    for v, kids in graph.items():
        for k in kids:
            if k not in indegree:
                raise KeyError(k)
            indegree[k] += 1
    ready = [v for v, d in indegree.items() if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        v = heapq.heappop(ready)
        order.append(v)
        for k in graph[v]:
            indegree[k] -= 1
            if indegree[k] == 0:
                heapq.heappush(ready, k)
    if len(order) != len(graph):
        stuck = sorted(v for v, d in indegree.items() if d > 0)
        raise ValueError(f"cycle through nodes {stuck}")
    return order


def validate_job(job: JobDag) -> None:
    if not job.nodes:
        raise WorkloadParseError("job has no nodes", job_id=job.job_id)
    if not (job.arrival_time_s >= 0 and math.isfinite(job.arrival_time_s)):
        raise WorkloadParseError(f"bad arrival time {job.arrival_time_s}", job_id=job.job_id)
    ids = [n.node_id for n in job.nodes]
    if len(set(ids)) != len(ids):
        raise WorkloadParseError("duplicate node id", job_id=job.job_id)
    known = set(ids)
    for n in job.nodes:
        if n.task_count < 1:
            raise WorkloadParseError(f"node {n.node_id} has no tasks", job_id=job.job_id)
        if n.node_id in n.parents or n.node_id in n.children:
            raise WorkloadParseError(f"self-edge on node {n.node_id}", job_id=job.job_id)
        for ref in n.parents | n.children:
            if ref not in known:
                raise WorkloadParseError(f"node {n.node_id} references missing node {ref}", job_id=job.job_id)
    by_id = {n.node_id: n for n in job.nodes}
    for n in job.nodes:
        for c in n.children:
            if n.node_id not in by_id[c].parents:
                raise WorkloadParseError(f"edge {n.node_id}->{c} not mirrored in parents", job_id=job.job_id)
        for p in n.parents:
            if n.node_id not in by_id[p].children:
                raise WorkloadParseError(f"edge {p}->{n.node_id} not mirrored in children", job_id=job.job_id)
    try:
        topological_sort({n.node_id: sorted(n.children) for n in job.nodes})
    except ValueError as exc:
        raise WorkloadParseError(str(exc), job_id=job.job_id) from None


def make_job(job_id: int, nodes: Sequence[tuple], arrival_time_s: float = 0.0,
             size_class: float | None = None, shape: int | None = None) -> JobDag:
    """Build a job from ``(node_id, task_count, duration_s, parents)`` tuples."""
    children: dict[int, set] = {spec[0]: set() for spec in nodes}
    for node_id, _, _, parents in nodes:
        for p in parents:
            if p not in children:
                raise WorkloadParseError(f"node {node_id} references missing node {p}", job_id=job_id)
            children[p].add(node_id)
    built = tuple(
        DagNode(node_id, int(tasks), TaskTemplate(float(dur)), frozenset(parents), frozenset(children[node_id]))
        for node_id, tasks, dur, parents in nodes
    )
    return JobDag(job_id, built, float(arrival_time_s), size_class, shape)


# ---------------------------------------------------------------------------
# DAG shape templates
#
# A template is a list of (base_tasks, base_duration_s, parents) in topological
# order; node ids are list positions. Templates are built from a fixed seed so
# that workloads generated under one TEMPLATE_VERSION never change.

def _chain(rng: random.Random) -> list:
    k = rng.randint(3, 6)
    return [(rng.randint(1, 6), rng.uniform(0.5, 2.0), [i - 1] if i else []) for i in range(k)]


def _fork_join(rng: random.Random) -> list:
    width = rng.randint(2, 5)
    nodes = [(rng.randint(2, 8), rng.uniform(0.5, 2.0), [])]
    for _ in range(width):
        nodes.append((rng.randint(1, 8), rng.uniform(0.5, 2.5), [0]))
    nodes.append((rng.randint(1, 3), rng.uniform(0.5, 2.0), list(range(1, width + 1))))
    return nodes


def _diamond(rng: random.Random) -> list:
    nodes = [(rng.randint(2, 6), rng.uniform(0.5, 2.0), [])]
    nodes.append((rng.randint(2, 8), rng.uniform(0.5, 2.5), [0]))
    nodes.append((rng.randint(1, 4), rng.uniform(0.5, 1.5), [0]))
    nodes.append((rng.randint(1, 4), rng.uniform(0.5, 2.0), [1, 2]))
    if rng.random() < 0.5:
        nodes.append((rng.randint(1, 3), rng.uniform(0.5, 1.5), [3]))
    return nodes


def _in_tree(rng: random.Random) -> list:
    # scan leaves merged pairwise up to a single root, like a join tree
    leaves = rng.randint(3, 6)
    nodes = [(rng.randint(2, 8), rng.uniform(0.5, 2.5), []) for _ in range(leaves)]
    frontier = list(range(leaves))
    rng.shuffle(frontier)
    while len(frontier) > 1:
        a, b = frontier.pop(), frontier.pop()
        nodes.append((rng.randint(1, 5), rng.uniform(0.5, 2.0), sorted([a, b])))
        frontier.insert(0, len(nodes) - 1)
    return nodes


def _layered(rng: random.Random) -> list:
    layers = rng.randint(3, 4)
    nodes: list = []
    prev: list[int] = []
    for layer in range(layers):
        width = 1 if layer == layers - 1 else rng.randint(1, 3)
        current = []
        for _ in range(width):
            if prev:
                parents = sorted(rng.sample(prev, rng.randint(1, len(prev))))
            else:
                parents = []
            nodes.append((rng.randint(1, 8), rng.uniform(0.5, 2.5), parents))
            current.append(len(nodes) - 1)
        prev = current
    return nodes


SHAPE_FAMILIES = (("chain", _chain), ("fork_join", _fork_join), ("diamond", _diamond),
                  ("tree", _in_tree), ("layered", _layered))


def _build_templates() -> tuple:
    out = []
    for i in range(MAX_SHAPES):
        _, builder = SHAPE_FAMILIES[i % len(SHAPE_FAMILIES)]
        rng = random.Random(_TEMPLATE_SEED * 1000 + i)
        out.append(tuple((t, round(d, 3), tuple(p)) for t, d, p in builder(rng)))
    return tuple(out)


SHAPE_TEMPLATES = _build_templates()


def shape_family(shape: int) -> str:
    return SHAPE_FAMILIES[shape % len(SHAPE_FAMILIES)][0]


def instantiate(job_id: int, shape: int, size_class: float, rng: random.Random,
                arrival_time_s: float = 0.0, duration_cv: float = 0.1,
                duration_scale: float = 1.0) -> JobDag:
    """Scale a template by ``size_class``.

    Task counts grow with sqrt(size) and durations pick up the rest, so total
    work is linear in the size class (before the per-node jitter).
    """
    template = SHAPE_TEMPLATES[shape]
    root = math.sqrt(size_class)
    nodes = []
    for node_id, (base_tasks, base_dur, parents) in enumerate(template):
        tasks = max(1, round(base_tasks * root))
        dur = base_dur * duration_scale * size_class * base_tasks / tasks
        if duration_cv > 0:
            sigma = math.sqrt(math.log1p(duration_cv ** 2))
            dur *= rng.lognormvariate(-0.5 * sigma * sigma, sigma)
        nodes.append((node_id, tasks, round(dur, 6), parents))
    return make_job(job_id, nodes, arrival_time_s, size_class, shape)


def _check_generator_args(n_jobs, size_classes, n_shapes):
    check_positive_int(n_jobs, "n_jobs", WorkloadError)
    if not size_classes:
        raise WorkloadError("size_classes must be non-empty")
    for s in size_classes:
        check_positive(s, "size class", WorkloadError)
    check_positive_int(n_shapes, "n_shapes", WorkloadError)
    if n_shapes > MAX_SHAPES:
        raise WorkloadError(f"at most {MAX_SHAPES} shape templates are available")


def generate_batched(n_jobs: int, size_classes: Sequence[float] = TPCH_SIZE_CLASSES, n_shapes: int = 22,
                     seed: int = 0, executor_count: int = 20, duration_cv: float = 0.1,
                     duration_scale: float = 1.0, first_job_id: int = 0) -> WorkloadSpec:
    """All jobs arrive at t=0.

    Size classes are dealt round-robin over a shuffled order so every class is
    represented whenever ``n_jobs >= len(size_classes)``.
    """
    _check_generator_args(n_jobs, size_classes, n_shapes)
    rng = random.Random(f"batched:{seed}")
    sizes = _dealt_sizes(rng, n_jobs, size_classes)
    jobs = []
    for k in range(n_jobs):
        shape = rng.randrange(n_shapes)
        jobs.append(instantiate(first_job_id + k, shape, float(sizes[k]), rng, 0.0, duration_cv, duration_scale))
    return WorkloadSpec(tuple(jobs), executor_count, seed)


def generate_poisson(n_jobs: int, mean_interarrival_s: float, size_classes: Sequence[float] = TPCH_SIZE_CLASSES,
                     n_shapes: int = 22, seed: int = 0, executor_count: int = 50, duration_cv: float = 0.1,
                     duration_scale: float = 1.0, first_job_id: int = 0) -> WorkloadSpec:
    """Continuous arrivals with i.i.d. exponential gaps; the first job arrives at t=0."""
    _check_generator_args(n_jobs, size_classes, n_shapes)
    check_positive(mean_interarrival_s, "mean_interarrival_s", WorkloadError)
    rng = random.Random(f"poisson:{seed}")
    arrivals_rng = random.Random(f"poisson-gaps:{seed}")
    sizes = _dealt_sizes(rng, n_jobs, size_classes)
    t = 0.0
    jobs = []
    for k in range(n_jobs):
        if k:
            t += arrivals_rng.expovariate(1.0 / mean_interarrival_s)
        shape = rng.randrange(n_shapes)
        jobs.append(instantiate(first_job_id + k, shape, float(sizes[k]), rng, round(t, 6),
                                duration_cv, duration_scale))
    return WorkloadSpec(tuple(jobs), executor_count, seed)


def _dealt_sizes(rng, n_jobs, size_classes):
    sizes = []
    while len(sizes) < n_jobs:
        block = list(size_classes)
        rng.shuffle(block)
        sizes.extend(block)
    return sizes[:n_jobs]


def interarrival_gaps(spec: WorkloadSpec) -> list[float]:
    times = [j.arrival_time_s for j in spec.jobs]
    return [b - a for a, b in zip(times, times[1:])]


# ---------------------------------------------------------------------------
# JSONL I/O

def job_to_dict(job: JobDag) -> dict:
    out = {
        "job_id": job.job_id,
        "arrival_s": job.arrival_time_s,
        "nodes": [
            {"id": n.node_id, "tasks": n.task_count, "dur_s": n.task.duration_s, "parents": sorted(n.parents)}
            for n in sorted(job.nodes, key=lambda n: n.node_id)
        ],
    }
    if job.size_class is not None:
        out["size_class"] = job.size_class
    if job.shape is not None:
        out["shape"] = job.shape
    return out


def dumps_workload(spec: WorkloadSpec, extra_meta: dict | None = None) -> str:
    meta = dict(extra_meta or {})
    meta.update(executors=spec.executor_count, seed=spec.seed)
    lines = [json.dumps({"meta": meta}, sort_keys=True)]
    lines.extend(json.dumps(job_to_dict(j), sort_keys=True) for j in spec.jobs)
    return "\n".join(lines) + "\n"


def save_workload(spec: WorkloadSpec, path, extra_meta: dict | None = None) -> None:
    Path(path).write_text(dumps_workload(spec, extra_meta))


def _job_from_dict(obj: dict, line: int) -> JobDag:
    try:
        job_id = obj["job_id"]
        arrival = obj["arrival_s"]
        raw_nodes = obj["nodes"]
    except (KeyError, TypeError) as exc:
        raise WorkloadParseError(f"missing field {exc}", line=line) from None
    if not isinstance(job_id, int) or isinstance(job_id, bool):
        raise WorkloadParseError("job_id must be an integer", line=line)
    specs = []
    try:
        for n in raw_nodes:
            specs.append((int(n["id"]), int(n["tasks"]), float(n["dur_s"]), [int(p) for p in n.get("parents", [])]))
    except (KeyError, TypeError, ValueError) as exc:
        raise WorkloadParseError(f"bad node entry ({exc})", line=line, job_id=job_id) from None
    try:
        return make_job(job_id, specs, float(arrival), obj.get("size_class"), obj.get("shape"))
    except WorkloadParseError as exc:
        raise WorkloadParseError(str(exc).split("] ", 1)[-1], line=line, job_id=job_id) from None
    except WorkloadError as exc:
        raise WorkloadParseError(str(exc), line=line, job_id=job_id) from None


def loads_workload(text: str) -> WorkloadSpec:
    return loads_workload_meta(text)[0]


def loads_workload_meta(text: str) -> tuple:
    """(WorkloadSpec, meta dict); unknown meta keys are passed through."""
    lines = [(i + 1, ln) for i, ln in enumerate(text.splitlines()) if ln.strip()]
    if not lines:
        raise WorkloadParseError("empty workload file")
    first_no, first = lines[0]
    try:
        meta = json.loads(first)["meta"]
        executors, seed = int(meta["executors"]), int(meta["seed"])
    except (ValueError, KeyError, TypeError):
        raise WorkloadParseError("first line must be the meta header", line=first_no) from None
    jobs = []
    seen: dict[int, int] = {}
    for no, ln in lines[1:]:
        try:
            obj = json.loads(ln)
        except json.JSONDecodeError as exc:
            raise WorkloadParseError(f"invalid JSON ({exc.msg})", line=no) from None
        job = _job_from_dict(obj, no)
        if job.job_id in seen:
            raise WorkloadParseError(f"duplicate job_id (first on line {seen[job.job_id]})", line=no,
                                     job_id=job.job_id)
        seen[job.job_id] = no
        jobs.append(job)
    return WorkloadSpec(tuple(jobs), executors, seed), meta


def load_workload(path) -> WorkloadSpec:
    return loads_workload(Path(path).read_text())


def perturb_durations(spec: WorkloadSpec, rep: int, jitter_cv: float = 0.02) -> WorkloadSpec:
    """Same DAGs with task durations scaled by seeded mean-one lognormal noise."""
    if jitter_cv <= 0:
        return spec
    rng = random.Random(f"perturb:{spec.seed}:{rep}")
    sigma = math.sqrt(math.log1p(jitter_cv ** 2))
    jobs = []
    for j in spec.jobs:
        nodes = []
        for n in sorted(j.nodes, key=lambda n: n.node_id):
            dur = round(n.task.duration_s * rng.lognormvariate(-0.5 * sigma * sigma, sigma), 6)
            nodes.append((n.node_id, n.task_count, dur, sorted(n.parents)))
        jobs.append(make_job(j.job_id, nodes, j.arrival_time_s, j.size_class, j.shape))
    return WorkloadSpec(tuple(jobs), spec.executor_count, spec.seed)
