"""Reusable experiment setups: the teacher corpus, episodes and the base tree.

The corpus is a fixed pool of batched jobs. Jobs are split into disjoint
train and test halves; training traces come from many random 20-job
episodes drawn from the train half so the teacher is observed under varied
contention, and test traces from disjoint batches of the test half.
"""
from __future__ import annotations

import random

from .distill import build_groups, fit_tree
from .features import NormalizationConfig
from .schedulers import TeacherCRPScheduler
from .simulator import Simulator
from .trace import TraceRecorder, merge_traces
from .workload import WorkloadSpec, generate_batched


def job_corpus(n_jobs: int = 200, batch: int = 20, seed: int = 100) -> list:
    """``n_jobs`` batched jobs with distinct ids, generated ``batch`` at a time."""
    jobs = []
    for k in range(-(-n_jobs // batch)):
        spec = generate_batched(min(batch, n_jobs - k * batch), seed=seed + k, first_job_id=batch * k)
        jobs.extend(spec.jobs)
    return jobs


def split_jobs(jobs, fraction: float = 0.5, seed: int = 0) -> tuple:
    """Disjoint (train, test) job lists; ``fraction`` of the jobs go to train."""
    ids = [j.job_id for j in jobs]
    random.Random(seed).shuffle(ids)
    cut = round(len(ids) * fraction)
    train = set(ids[:cut])
    return [j for j in jobs if j.job_id in train], [j for j in jobs if j.job_id not in train]


def episodes(jobs, k: int, size: int = 20, executor_count: int = 20, seed: int = 0) -> list:
    """``k`` workloads of ``size`` jobs sampled without replacement from ``jobs``."""
    return [WorkloadSpec(tuple(random.Random(f"{seed}:{e}").sample(list(jobs), size)), executor_count,
                         seed * 100000 + e) for e in range(k)]


def batches(jobs, size: int = 20, executor_count: int = 20, seed: int = 1000) -> list:
    """Disjoint consecutive batches of ``size`` jobs."""
    return [WorkloadSpec(tuple(jobs[i:i + size]), executor_count, seed + i // size)
            for i in range(0, len(jobs) - size + 1, size)]


def record_teacher(specs, norm: NormalizationConfig, epsilon: float = 0.0):
    """Merged teacher-crp trace over ``specs``."""
    out = []
    for spec in specs:
        rec = TraceRecorder(norm, {"scheduler": "teacher-crp", "seed": spec.seed, "epsilon": epsilon})
        Simulator(spec, TeacherCRPScheduler(epsilon=epsilon, seed=spec.seed), trace_sink=rec).run()
        out.append(rec.trace)
    return merge_traces(out)


def teacher_setup(n_episodes: int = 60, epsilon: float = 0.0, seed: int = 0) -> dict:
    """Train/test traces over the default corpus plus the normalization used."""
    train_jobs, test_jobs = split_jobs(job_corpus(), 0.5, seed)
    norm = NormalizationConfig.from_workload(WorkloadSpec(tuple(train_jobs), 20, 0))
    return {
        "norm": norm,
        "train_jobs": train_jobs,
        "test_jobs": test_jobs,
        "train": record_teacher(episodes(train_jobs, n_episodes, seed=seed), norm, epsilon),
        "test": record_teacher(batches(test_jobs), norm, epsilon),
    }


def base_tree(setup: dict, g: int = 2, d: int = 30, l: int = 4096, max_groups_per_stage: int = 200,
              seed: int = 0) -> tuple:
    """(model, training groups) for one tree fitted on ``setup['train']``."""
    groups = build_groups(setup["train"], g, max_groups_per_stage, "permute", seed)
    meta = {"normalization": setup["norm"].to_dict(), "cp_metric": "hops",
            "max_groups_per_stage": max_groups_per_stage, "winner_slot_policy": "permute",
            "training_trace_hash": setup["train"].content_hash()}
    return fit_tree(groups, d, l, 1, seed, meta=meta), groups
