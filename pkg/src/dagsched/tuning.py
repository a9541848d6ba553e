"""Edge cases: find workloads where a tree loses to a heuristic, then refit and pick.

A case is a workload plus one target job; its score is the target job's mean
JCT over seeded repetitions, each repetition jittering task durations
slightly so the mean and spread are meaningful for deterministic policies.
"""
from __future__ import annotations

import json
import logging
import random
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .distill import GroupSet, GroupTreeClassifier, build_groups, within_group_accuracy
from .features import NormalizationConfig
from .schedulers import FairScheduler, SchedulerPolicy
from .simulator import Simulator
from .trace import StageRecord, TraceRecorder, merge_traces
from .treesched import TreeScheduler
from .workload import WorkloadSpec, generate_batched, loads_workload_meta, perturb_durations, save_workload
from ._validation import check_fraction, check_positive, check_positive_int

log = logging.getLogger(__name__)


class TuningError(ValueError):
    pass


@dataclass
class EdgeCase:
    case_id: str
    workload: WorkloadSpec
    target_job: int
    baseline_jct_s: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.target_job not in self.workload.job_map:
            raise TuningError(f"target job {self.target_job} is not in case {self.case_id}")

    def save(self, path) -> None:
        meta = {"case_id": self.case_id, "target_job": self.target_job, "baseline_jct_s": self.baseline_jct_s}
        save_workload(self.workload, path, meta)

    @classmethod
    def load(cls, path) -> "EdgeCase":
        spec, meta = loads_workload_meta(Path(path).read_text())
        if "target_job" not in meta:
            raise TuningError(f"{path}: case files need 'target_job' in the meta line")
        return cls(str(meta.get("case_id", Path(path).stem)), spec, int(meta["target_job"]),
                   dict(meta.get("baseline_jct_s", {})))


def detect_suboptimal(pool_best_jct: float, reference_jct: float, threshold_ratio: float = 1.05) -> bool:
    """True iff the pool's best JCT exceeds the reference by more than the ratio (strict)."""
    check_positive(pool_best_jct, "pool_best_jct", TuningError)
    check_positive(reference_jct, "reference_jct", TuningError)
    return pool_best_jct > reference_jct * threshold_ratio


def case_jcts(case: EdgeCase, make_policy, reps: int = 50, jitter_cv: float = 0.02, **sim_kw) -> list:
    """Target-job JCT for each repetition; ``make_policy(rep)`` builds a fresh policy."""
    check_positive_int(reps, "reps", TuningError)
    out = []
    for r in range(reps):
        spec = perturb_durations(case.workload, r, jitter_cv)
        res = Simulator(spec, make_policy(r), **sim_kw).run()
        out.append(res.jct_s[case.target_job])
    return out


def _tree_factory(model, m=2, seed=0):
    return lambda r: TreeScheduler(model, m=m, seed=seed * 1000 + r)


def _heuristic_factory(heuristic):
    if heuristic is None:
        return lambda r: FairScheduler()
    if isinstance(heuristic, type):
        return lambda r: heuristic()
    if callable(heuristic) and not hasattr(heuristic, "decide"):
        return heuristic
    return lambda r: heuristic


class ExpertLabeler(SchedulerPolicy):
    """Drives a run with one policy while recording another policy's choice at every stage.

    With probability ``beta`` the expert's own decision is executed instead.
    Used to label states the student actually visits.
    """

    name = "labeler"

    def __init__(self, driver, expert, norm=None, beta: float = 0.0, seed=0, header=None):
        self.driver = driver
        self.expert = expert
        self.cap_rule = driver.cap_rule
        self.cp_metric = getattr(driver, "cp_metric", "hops")
        self.beta = beta
        self.rng = random.Random(seed)
        self.recorder = TraceRecorder(norm, header)

    def reset(self, spec) -> None:
        self.driver.reset(spec)
        self.expert.reset(spec)

    def decide(self, view):
        e = self.expert.decide(view)
        if e is not None:
            norm = self.recorder.norm
            cands = tuple((j, v, view.features(j, v, norm)) for j, v in view.candidates)
            self.recorder.record(StageRecord(len(self.recorder), view.state.clock_s, e.job_id, e.node_id,
                                             e.executor_budget, cands, view.state.prev_scheduled_job))
            if self.beta and self.rng.random() < self.beta:
                return e
        return self.driver.decide(view)


def make_reference_trace(case: EdgeCase, heuristic=None, norm: NormalizationConfig | None = None,
                         reps: int = 1, jitter_cv: float = 0.02, pool_best_jct: float | None = None,
                         rollout=None, beta: float = 0.0):
    """Record the heuristic's decisions on the case workload, one run per repetition.

    By default the heuristic itself drives the runs. With ``rollout`` (a
    ``rep -> policy`` factory) that policy drives and the heuristic only
    labels the visited stages.
    """
    factory = _heuristic_factory(heuristic)
    traces, jcts = [], []
    for r in range(reps):
        spec = perturb_durations(case.workload, r, jitter_cv)
        header = {"case_id": case.case_id, "rep": r}
        expert = factory(r)
        if rollout is None:
            rec = TraceRecorder(norm, header)
            res = Simulator(spec, expert, trace_sink=rec).run()
            trace = rec.trace
        else:
            pol = ExpertLabeler(rollout(r), expert, norm, beta, f"label:{r}", header)
            res = Simulator(spec, pol).run()
            trace = pol.recorder.trace
            trace.header["driver"] = getattr(pol.driver, "name", "policy")
        trace.header["scheduler"] = getattr(expert, "name", "heuristic")
        traces.append(trace)
        jcts.append(res.jct_s[case.target_job])
    if pool_best_jct is not None and rollout is None and statistics.mean(jcts) >= pool_best_jct:
        log.warning("case %s: heuristic (%.2f s) does not improve on the pool best (%.2f s)", case.case_id,
                    statistics.mean(jcts), pool_best_jct)
    return merge_traces(traces)


def reservoir_indices(n: int, k: int, rng: random.Random) -> list:
    """Algorithm R: a uniform k-subset of range(n) in one pass."""
    k = min(k, n)
    res = list(range(k))
    for i in range(k, n):
        j = rng.randint(0, i)
        if j < k:
            res[j] = i
    return sorted(res)


def finetune_tree(tree: GroupTreeClassifier, reference_trace, mix_ratio: float = 0.2, g: int | None = None,
                  seed: int = 0, original_samples: GroupSet | None = None,
                  max_groups_per_stage: int = 200) -> GroupTreeClassifier:
    """Refit under the tree's own budget on kept originals plus reference groups.

    A reservoir sample of ``1 - mix_ratio`` of the original groups is kept and
    the reference groups are weighted to carry ``mix_ratio`` of the total
    weight. ``mix_ratio = 1`` fits the reference behaviour alone.
    """
    check_fraction(mix_ratio, "mix_ratio", TuningError, closed_right=True)
    g = g or tree.g
    if g != tree.g:
        raise TuningError(f"tree compares groups of {tree.g}, asked to tune with g={g}")
    ref = build_groups(reference_trace, g, max_groups_per_stage, "permute", seed)
    if len(ref) == 0:
        raise TuningError(f"reference trace has no stage with at least {g} candidates")
    if mix_ratio < 1.0:
        if original_samples is None or len(original_samples) == 0:
            raise TuningError("mix_ratio < 1 needs the tree's original training samples")
        if original_samples.g != g:
            raise TuningError("original samples use a different group size")
        rng = random.Random(f"finetune:{seed}")
        keep = reservoir_indices(len(original_samples), round((1.0 - mix_ratio) * len(original_samples)), rng)
        orig = original_samples.subset(keep)
        n_o, n_r = len(orig), len(ref)
        X = np.vstack([orig.X, ref.X])
        y = np.concatenate([orig.y, ref.y])
        total = n_o + n_r
        w = np.concatenate([np.full(n_o, (1.0 - mix_ratio) * total / n_o), np.full(n_r, mix_ratio * total / n_r)])
    else:
        X, y, w = ref.X, ref.y, None
    meta = tree.meta_
    out = GroupTreeClassifier(g, int(meta["max_depth"]), int(meta["max_leaves"]), int(meta.get("min_leaf", 1)),
                              seed).fit(X, y, sample_weight=w)
    out.meta_.update({k: v for k, v in meta.items() if k not in out.meta_})
    out.meta_.update(tuned={"mix_ratio": mix_ratio, "reference_stages": len(reference_trace.records),
                            "reference_groups": len(ref), "case": reference_trace.header.get("case_id")},
                     fidelity_reference=within_group_accuracy(out, ref))
    return out


def regression_avg_jct(model, suite, m: int = 2, seed: int = 0) -> float:
    """Mean over the suite of each workload's average JCT under the tree."""
    if not suite:
        raise TuningError("empty regression suite")
    vals = [Simulator(spec, TreeScheduler(model, m=m, seed=seed + k)).run().avg_jct_s
            for k, spec in enumerate(suite)]
    return statistics.fmean(vals)


@dataclass
class TuningReport:
    case_id: str
    heuristic: str
    heuristic_case_jct_s: float
    heuristic_case_std_s: float
    trees: list            # per-tree dicts
    selected_tree: int
    selected_variant: str  # "tuned" or "base"
    selected_case_jct_s: float
    regression_pre_s: float | None
    regression_post_s: float | None
    config: dict = field(default_factory=dict)
    selected_model: GroupTreeClassifier | None = field(default=None, repr=False)

    @property
    def regression_delta(self) -> float | None:
        if self.regression_pre_s is None:
            return None
        return (self.regression_post_s - self.regression_pre_s) / self.regression_pre_s

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("case_id", "heuristic", "heuristic_case_jct_s", "heuristic_case_std_s",
                                           "trees", "selected_tree", "selected_variant", "selected_case_jct_s",
                                           "regression_pre_s", "regression_post_s", "config")}
        d["regression_delta"] = self.regression_delta
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"


def _summ(xs):
    return statistics.fmean(xs), (statistics.stdev(xs) if len(xs) > 1 else 0.0)


def tune_and_select(pool, case: EdgeCase, heuristic=None, regression_suite=(), original_samples=None,
                    mix_ratio: float = 0.2, reps: int = 50, jitter_cv: float = 0.02, reference_reps: int = 5,
                    dagger_iters: int = 3, m: int = 2, seed: int = 0) -> TuningReport:
    """Fine-tune every pool tree on heuristic traces of the case and keep the best one.

    The first refit uses heuristic-driven traces. Each of the ``dagger_iters``
    further rounds rolls out the latest refit on the case, labels the stages
    it visits with the heuristic's choice, adds them to the reference set and
    refits from the original tree again. Each tree's untuned version stays
    eligible, so the selected case JCT never exceeds the best pre-tuning JCT.
    ``original_samples`` may be one GroupSet shared by all trees or a list
    aligned with the pool.
    """
    trees = list(pool)
    if not trees:
        raise TuningError("empty pool")
    if isinstance(original_samples, (list, tuple)):
        if len(original_samples) != len(trees):
            raise TuningError("original_samples list must align with the pool")
        origs = list(original_samples)
    else:
        origs = [original_samples] * len(trees)
    hfac = _heuristic_factory(heuristic)
    h_name = getattr(hfac(0), "name", "heuristic")
    h_mean, h_std = _summ(case_jcts(case, hfac, reps, jitter_cv))
    rows = []
    variants = []   # (case_jct, tree_idx, variant, model)
    for i, tree in enumerate(trees):
        norm_d = tree.meta_.get("normalization")
        norm = NormalizationConfig.from_dict(norm_d) if norm_d else None
        refs = [make_reference_trace(case, hfac, norm, reference_reps, jitter_cv)]
        tuned = finetune_tree(tree, refs[0], mix_ratio, tree.g, seed, origs[i])
        for _ in range(dagger_iters):
            refs.append(make_reference_trace(case, hfac, norm, reference_reps, jitter_cv,
                                             rollout=_tree_factory(tuned, m, seed)))
            tuned = finetune_tree(tree, merge_traces(refs), mix_ratio, tree.g, seed, origs[i])
        pre = _summ(case_jcts(case, _tree_factory(tree, m, seed), reps, jitter_cv))
        post = _summ(case_jcts(case, _tree_factory(tuned, m, seed), reps, jitter_cv))
        row = {"tree_id": i, "pre_case_jct_s": pre[0], "pre_case_std_s": pre[1], "post_case_jct_s": post[0],
               "post_case_std_s": post[1], "leaves_pre": tree.get_n_leaves(), "leaves_post": tuned.get_n_leaves(),
               "depth_post": tuned.get_depth()}
        rows.append(row)
        variants.append((post[0], i, "tuned", tuned))
        variants.append((pre[0], i, "base", tree))
    # lowest case JCT; on ties prefer the tuned variant, then the earlier tree
    best = min(variants, key=lambda v: (v[0], v[2] != "tuned", v[1]))
    case_jct, idx, variant, model = best
    reg_pre = reg_post = None
    if regression_suite:
        reg_pre = regression_avg_jct(trees[0], regression_suite, m, seed)
        reg_post = regression_avg_jct(model, regression_suite, m, seed)
    return TuningReport(case.case_id, h_name, h_mean, h_std, rows, idx, variant, case_jct, reg_pre, reg_post,
                        {"mix_ratio": mix_ratio, "reps": reps, "jitter_cv": jitter_cv,
                         "reference_reps": reference_reps, "dagger_iters": dagger_iters, "m": m,
                         "seed": seed}, model)


def find_edge_cases(model, n_cases: int = 3, heuristic=None, threshold_ratio: float = 1.05, n_jobs: int = 8,
                    executor_count: int = 10, trials: int = 200, screen_reps: int = 5, reps: int = 50,
                    jitter_cv: float = 0.02, m: int = 2, seed: int = 0, first_job_id: int = 100000) -> list:
    """Search small batched workloads for jobs the tree serves worse than the heuristic.

    Every trial scores all jobs with a few repetitions; the worst job of a
    promising trial is confirmed with the full repetition count.
    """
    hfac = _heuristic_factory(heuristic)
    found = []
    for t in range(trials):
        if len(found) >= n_cases:
            break
        spec = generate_batched(n_jobs, seed=seed * 100000 + t, executor_count=executor_count,
                                first_job_id=first_job_id)
        tree_j = {j.job_id: [] for j in spec.jobs}
        heur_j = {j.job_id: [] for j in spec.jobs}
        for r in range(screen_reps):
            s = perturb_durations(spec, r, jitter_cv)
            for acc, pol in ((tree_j, TreeScheduler(model, m=m, seed=seed * 1000 + r)), (heur_j, hfac(r))):
                res = Simulator(s, pol).run()
                for j, v in res.jct_s.items():
                    acc[j].append(v)
        ratio = {j: statistics.fmean(tree_j[j]) / statistics.fmean(heur_j[j]) for j in tree_j}
        target = max(ratio, key=lambda j: (ratio[j], -j))
        if ratio[target] <= threshold_ratio * 1.02:
            continue
        case = EdgeCase(f"case_{len(found) + 1:02d}", spec, target)
        tree_m = statistics.fmean(case_jcts(case, _tree_factory(model, m, seed), reps, jitter_cv))
        heur_m = statistics.fmean(case_jcts(case, hfac, reps, jitter_cv))
        if detect_suboptimal(tree_m, heur_m, threshold_ratio):
            case.baseline_jct_s = {"tree": tree_m, getattr(hfac(0), "name", "heuristic"): heur_m}
            found.append(case)
            log.info("%s: trial %d, job %d, tree %.2f s vs heuristic %.2f s", case.case_id, t, target,
                     tree_m, heur_m)
    return found
