"""Per-node scheduling features F1..F10 and their normalization.

Feature order (also the CSV column order ``f1..f10``):

    f1  executors currently held by the node's job
    f2  1 if an executor just finished a task of this job at the triggering event
    f3  idle executors in the cluster
    f4  remaining (undispatched) work of the node, seconds
    f5  remaining tasks of the node
    f6  remaining tasks summed along the longest path from the node
    f7  remaining work summed along the longest path from the node
    f8  remaining tasks of the job
    f9  remaining work of the job
    f10 1 if the previous stage scheduled this job
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

from ._validation import check_positive

N_FEATURES = 10
FEATURE_NAMES = tuple(f"f{i}" for i in range(1, N_FEATURES + 1))
WORK_FEATURES = (3, 6, 8)          # f4, f7, f9 (0-based)
COUNT_FEATURES = (0, 2, 4, 5, 7)   # f1, f3, f5, f6, f8
CP_METRICS = ("hops", "tasks", "work")


class FeatureVector(NamedTuple):
    f1_exec_assigned: float
    f2_just_freed: float
    f3_idle_executors: float
    f4_node_remaining_work_s: float
    f5_node_remaining_tasks: float
    f6_cp_task_count: float
    f7_cp_remaining_work_s: float
    f8_job_remaining_tasks: float
    f9_job_remaining_work_s: float
    f10_locality: float

    def normalized(self, norm: "NormalizationConfig") -> "FeatureVector":
        if norm.work_scale_s == 1.0 and norm.count_scale == 1.0:
            return self
        w, c = norm.work_scale_s, norm.count_scale
        v = self
        return FeatureVector(v[0] / c, v[1], v[2] / c, v[3] / w, v[4] / c, v[5] / c, v[6] / w, v[7] / c,
                             v[8] / w, v[9])


@dataclass(frozen=True)
class NormalizationConfig:
    work_scale_s: float = 1.0
    count_scale: float = 1.0

    def __post_init__(self):
        check_positive(self.work_scale_s, "work_scale_s")
        check_positive(self.count_scale, "count_scale")

    @classmethod
    def identity(cls) -> "NormalizationConfig":
        return cls(1.0, 1.0)

    @classmethod
    def from_workload(cls, spec) -> "NormalizationConfig":
        """Default training normalization: 100x mean task duration, counts / 100."""
        total_tasks = sum(j.total_tasks for j in spec.jobs)
        total_work = sum(j.total_work_s for j in spec.jobs)
        return cls(round(100.0 * total_work / total_tasks, 6), 100.0)

    def to_dict(self) -> dict:
        return {"work_scale_s": self.work_scale_s, "count_scale": self.count_scale}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationConfig":
        return cls(float(d["work_scale_s"]), float(d["count_scale"]))


class FeatureError(ValueError):
    pass


def _path_key(metric: str, hops: int, tasks: int, work: float) -> tuple:
    if metric == "hops":
        return (hops, work)
    if metric == "tasks":
        return (tasks, work)
    return (work, hops)


def longest_paths(job_rt, cp_metric: str = "hops") -> dict:
    """Longest path from every unfinished node, by reverse topological DP.

    Returns ``{node_id: (path, tasks_on_path, work_on_path)}``. Paths are
    compared by hop count (or ``cp_metric``), then summed remaining work, and
    finally the lexicographically smallest node-id sequence wins.
    """
    if cp_metric not in CP_METRICS:
        raise FeatureError(f"cp_metric must be one of {CP_METRICS}")
    out: dict = {}
    for v in reversed(job_rt.order):
        nrt = job_rt.nodes[v]
        if nrt.finished:
            continue
        best = None
        for c in job_rt.children[v]:
            cand = out.get(c)
            if cand is None:
                continue
            if best is None:
                best = cand
                continue
            ka = _path_key(cp_metric, len(cand[0]), cand[1], cand[2])
            kb = _path_key(cp_metric, len(best[0]), best[1], best[2])
            if ka > kb or (ka == kb and cand[0] < best[0]):
                best = cand
        rem = nrt.remaining_tasks
        work = rem * nrt.duration_s
        if best is None:
            out[v] = ((v,), rem, work)
        else:
            out[v] = ((v,) + best[0], rem + best[1], work + best[2])
    return out


def longest_path_from(node_id: int, job_rt, cp_metric: str = "hops") -> list[int]:
    paths = longest_paths(job_rt, cp_metric)
    if node_id not in paths:
        if node_id in job_rt.nodes:
            return []
        raise FeatureError(f"node {node_id} not in job {job_rt.job_id}")
    return list(paths[node_id][0])


def job_aggregates(job_rt, cp_metric: str = "hops"):
    """Cached per-job aggregates; recomputed only when the job's runtime changes."""
    cache = job_rt.feature_cache
    if cache is not None and cache[0] == job_rt.version and cache[1] == cp_metric:
        return cache[2]
    paths = longest_paths(job_rt, cp_metric)
    per_node = {v: (tasks, work) for v, (_, tasks, work) in paths.items()}
    job_tasks = 0
    job_work = 0.0
    for v in job_rt.order:
        nrt = job_rt.nodes[v]
        job_tasks += nrt.remaining_tasks
        job_work += nrt.remaining_tasks * nrt.duration_s
    agg = (per_node, job_tasks, job_work)
    job_rt.feature_cache = (job_rt.version, cp_metric, agg)
    return agg


def extract(node_id: int, job_rt, state, norm: NormalizationConfig | None = None,
            cp_metric: str = "hops") -> FeatureVector:
    """Feature vector of one node given the current cluster state."""
    if job_rt.completed:
        raise FeatureError(f"job {job_rt.job_id} already completed")
    nrt = job_rt.nodes.get(node_id)
    if nrt is None:
        raise FeatureError(f"node {node_id} not in job {job_rt.job_id}")
    per_node, job_tasks, job_work = job_aggregates(job_rt, cp_metric)
    cp_tasks, cp_work = per_node.get(node_id, (0, 0.0))
    fv = FeatureVector(
        float(job_rt.held),
        1.0 if job_rt.job_id in state.just_freed else 0.0,
        float(state.idle_count),
        nrt.remaining_tasks * nrt.duration_s,
        float(nrt.remaining_tasks),
        float(cp_tasks),
        cp_work,
        float(job_tasks),
        job_work,
        1.0 if state.prev_scheduled_job == job_rt.job_id else 0.0,
    )
    return fv if norm is None else fv.normalized(norm)
