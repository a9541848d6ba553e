"""Baseline and teacher scheduling policies.

Every policy exposes ``name``, ``cap_rule`` (how the simulator caps each
job's executors: ``"none"``, ``"fair"`` or ``"fair_ceil"``) and
``decide(view) -> SchedulingDecision | None``. ``view`` is a
:class:`dagsched.simulator.StageView`; its ``candidates`` are the ready nodes
of jobs below their cap, in job arrival order.
"""
from __future__ import annotations

import random
from dataclasses import dataclass

CAP_RULES = ("none", "fair", "fair_ceil")


@dataclass(frozen=True)
class SchedulingDecision:
    job_id: int
    node_id: int
    executor_budget: int

    def __post_init__(self):
        if self.executor_budget < 1:
            raise ValueError(f"executor budget must be >= 1, got {self.executor_budget}")


def equal_share_caps(jobs_in_order, executor_count: int, rule: str = "fair") -> dict:
    """Per-job executor caps for the jobs currently in the system.

    ``fair``: floor(N / n) each, the N mod n leftover executors go one each
    to the earliest arrivals, so caps sum to N. ``fair_ceil``: ceil(N / n)
    each (oversubscribed; who fills first is up to the policy). ``none``: N.
    """
    jobs = list(jobs_in_order)
    if not jobs:
        return {}
    if rule == "none":
        return dict.fromkeys(jobs, executor_count)
    n = len(jobs)
    if rule == "fair_ceil":
        return dict.fromkeys(jobs, -(-executor_count // n))
    if rule != "fair":
        raise ValueError(f"unknown cap rule {rule!r}")
    base, extra = divmod(executor_count, n)
    return {j: base + (1 if k < extra else 0) for k, j in enumerate(jobs)}


class SchedulerPolicy:
    name = "policy"
    cap_rule = "none"

    def reset(self, spec) -> None:
        """Called by the simulator before a run."""

    def decide(self, view):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}(name={self.name!r}, cap_rule={self.cap_rule!r})"


class FIFOScheduler(SchedulerPolicy):
    """Earliest-arrived job with a ready node gets every idle executor."""

    name = "fifo"

    def decide(self, view):
        if not view.candidates or view.idle_count == 0:
            return None
        # candidates are in arrival order, node ids ascending within a job
        job_id, node_id = view.candidates[0]
        return SchedulingDecision(job_id, node_id, view.idle_count)


class FairScheduler(SchedulerPolicy):
    """Equal executor shares; the most under-served job is topped up first."""

    name = "fair"
    cap_rule = "fair"

    def decide(self, view):
        best = None
        for rank, (job_id, node_id) in enumerate(view.candidates):
            deficit = view.cap(job_id) - view.held(job_id)
            if deficit <= 0:
                continue
            if best is None or deficit > best[0]:
                best = (deficit, job_id, node_id)
        if best is None or view.idle_count == 0:
            return None
        _, job_id, node_id = best
        return SchedulingDecision(job_id, node_id, view.budget(job_id))


class SJFScheduler(SchedulerPolicy):
    """Job with the least remaining work first, with every idle executor."""

    name = "sjf"

    def decide(self, view):
        if not view.candidates or view.idle_count == 0:
            return None
        job_id, node_id = min(view.candidates, key=lambda c: (view.features(*c)[8], c[0], c[1]))
        return SchedulingDecision(job_id, node_id, view.idle_count)


def crp_key(fv, job_id: int, node_id: int) -> tuple:
    """Teacher ordering: shortest remaining critical path, then least job work, locality first."""
    return (fv[6], fv[8], -fv[9], node_id, job_id)


class TeacherCRPScheduler(SchedulerPolicy):
    """Scripted stand-in teacher ranking ready nodes by :func:`crp_key`.

    With probability ``epsilon`` the second-ranked node is picked instead,
    which injects the kind of selection noise a sampling policy produces.
    """

    name = "teacher-crp"

    def __init__(self, epsilon: float = 0.0, seed: int = 0, cap_rule: str = "fair_ceil"):
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if cap_rule not in CAP_RULES:
            raise ValueError(f"unknown cap rule {cap_rule!r}")
        self.epsilon = epsilon
        self.seed = seed
        self.cap_rule = cap_rule
        self._rng = random.Random(seed)

    def reset(self, spec) -> None:
        self._rng = random.Random(f"teacher:{self.seed}:{spec.seed}")

    def rank(self, view) -> list:
        return sorted(view.candidates, key=lambda c: crp_key(view.features(*c), *c))

    def decide(self, view):
        if not view.candidates or view.idle_count == 0:
            return None
        ranked = self.rank(view)
        pick = ranked[0]
        if self.epsilon and len(ranked) > 1 and self._rng.random() < self.epsilon:
            pick = ranked[1]
        budget = view.budget(*pick) if self.cap_rule != "none" else view.idle_count
        if budget < 1:
            return None
        return SchedulingDecision(pick[0], pick[1], budget)


def make_scheduler(spec: str, seed: int = 0, **kwargs) -> SchedulerPolicy:
    """Policy from a CLI-style name: fifo, fair, sjf, teacher-crp or tree:<path>."""
    if spec == "fifo":
        return FIFOScheduler()
    if spec == "fair":
        return FairScheduler()
    if spec == "sjf":
        return SJFScheduler()
    if spec == "teacher-crp":
        return TeacherCRPScheduler(seed=seed, **kwargs)
    if spec.startswith("tree:"):
        from .treesched import TreeScheduler

        return TreeScheduler.from_file(spec[len("tree:"):], seed=seed, **kwargs)
    raise ValueError(f"unknown scheduler {spec!r}")
