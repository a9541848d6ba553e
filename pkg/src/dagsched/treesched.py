"""Decision-tree scheduler: a tournament over ready nodes plus fair allocation.

Each stage the tree is used as a group comparator. For pairs (``g = 2``) the
candidates meet in a seeded circle-method round robin; a node is dropped
after ``m`` losses and its remaining pairings are skipped. For triplets the
alive nodes are dealt into seeded groups of three, round after round, until
every node has appeared in ``ceil((n - 1) / 2)`` groups.

Picking the final winner by raw win count alone can crown a node that lost
to another survivor, so survivors are ranked by wins against each other
first (a complete round robin for pairs; a sudden-death playoff for
triplets), then by total wins, then by the configured tiebreak. A leaf whose
class counts are all equal is a draw and credits nobody.
"""
from __future__ import annotations

import logging
import math
import random
from collections import Counter
from dataclasses import dataclass, field

from .distill import GroupTreeClassifier, TreePool
from .features import N_FEATURES, NormalizationConfig
from .schedulers import SchedulerPolicy, SchedulingDecision, equal_share_caps
from ._validation import check_positive_int

log = logging.getLogger(__name__)

TIEBREAKS = ("least_work", "lowest_id")
ALLOCATIONS = ("fair", "all_idle")


class TreeSchedError(ValueError):
    pass


def compare_group(model, group_slots) -> int:
    """Winning slot predicted by the tree for ``g`` feature vectors."""
    if len(group_slots) != model.g:
        raise TreeSchedError(f"model compares groups of {model.g}, got {len(group_slots)}")
    x = []
    for s in group_slots:
        if len(s) != N_FEATURES:
            raise TreeSchedError(f"each slot needs {N_FEATURES} features, got {len(s)}")
        x.extend(s)
    return model.predict_one(x)


@dataclass
class TournamentState:
    alive: set
    win_counter: dict
    loss_counter: dict
    m: int
    comparisons: int = 0
    leaves: list = field(default_factory=list)
    head_to_head: Counter = field(default_factory=Counter)
    winner: tuple | None = None


def _tie_key(tiebreak, cand):
    j, v, fv = cand
    return (fv[8], j, v) if tiebreak == "least_work" else (j, v)


class _Tournament:
    def __init__(self, model, candidates, m, tiebreak, seed):
        self.model = model
        self.cands = list(candidates)
        self.keys = [(c[0], c[1]) for c in self.cands]
        self.m = m
        self.tiebreak = tiebreak
        self.rng = random.Random(seed if isinstance(seed, (int, str)) else str(seed))
        n = len(self.cands)
        self.state = TournamentState(set(range(n)), dict.fromkeys(range(n), 0), dict.fromkeys(range(n), 0), m)
        self._draw = model.draw_leaf_

    def play(self, members):
        """Run one group; returns the winning member index, or None on a draw."""
        st = self.state
        x = []
        for i in members:
            x.extend(self.cands[i][2])
        leaf = self.model.leaf_of(x)
        st.comparisons += 1
        st.leaves.append(leaf)
        if self._draw[leaf]:
            return None
        w = members[self.model._py[4][leaf]]
        st.win_counter[w] += 1
        for i in set(members):
            if i != w:
                st.head_to_head[(w, i)] += 1
                st.loss_counter[i] += 1
                if st.loss_counter[i] >= self.m:
                    st.alive.discard(i)
        return w

    def run_pairs(self):
        st = self.state
        arr = list(range(len(self.cands)))
        self.rng.shuffle(arr)
        if len(arr) % 2:
            arr.append(None)
        k = len(arr)
        for _ in range(k - 1):
            for i in range(k // 2):
                a, b = arr[i], arr[k - 1 - i]
                swap = self.rng.random() < 0.5
                if a is None or b is None or a not in st.alive or b not in st.alive:
                    continue
                self.play((b, a) if swap else (a, b))
            arr = [arr[0], arr[-1]] + arr[1:-1]

    def run_triplets(self):
        st = self.state
        need = math.ceil((len(self.cands) - 1) / 2)
        seen = Counter()
        while len(st.alive) > 1 and min(seen[i] for i in st.alive) < need:
            order = sorted(st.alive)
            self.rng.shuffle(order)
            groups = [order[i:i + 3] for i in range(0, len(order), 3)]
            last = groups[-1]
            if len(last) < 3:
                # fill from the other alive nodes by cycling, else duplicate
                others = [i for i in order if i not in last]
                fill = (others * 2)[:3 - len(last)] if others else []
                while len(last) + len(fill) < 3:
                    fill.append(last[len(fill) % len(last)])
                groups[-1] = last + fill
            for grp in groups:
                for i in set(grp):
                    seen[i] += 1
                if all(i in st.alive for i in grp):
                    self.play(tuple(grp))

    def playoff(self, survivors):
        """Sudden death among survivors in groups of three (byes for singletons)."""
        pool = list(survivors)
        while len(pool) > 1:
            self.rng.shuffle(pool)
            nxt = []
            for i in range(0, len(pool), 3):
                grp = pool[i:i + 3]
                if len(grp) == 1:
                    nxt.append(grp[0])
                    continue
                if len(grp) == 2:
                    grp = grp + [grp[0]]
                w = self.play(tuple(grp))
                if w is None:
                    w = min(set(grp), key=lambda k: _tie_key(self.tiebreak, self.cands[k]))
                nxt.append(w)
            pool = nxt
        return pool[0]

    def finish(self):
        st = self.state
        alive = sorted(st.alive)
        if len(alive) == 1:
            return alive[0]
        if self.model.g == 3:
            return self.playoff(alive)
        h2h = {i: sum(st.head_to_head[(i, j)] for j in alive if j != i) for i in alive}
        return min(alive, key=lambda i: (-h2h[i], -st.win_counter[i], _tie_key(self.tiebreak, self.cands[i])))


def run_tournament(model, candidates, m: int = 2, tiebreak: str = "least_work", seed=0) -> TournamentState:
    """Full tournament; the returned state carries the winner and every leaf visited."""
    if not candidates:
        raise TreeSchedError("tournament needs at least one candidate")
    check_positive_int(m, "m", TreeSchedError)
    if tiebreak not in TIEBREAKS:
        raise TreeSchedError(f"tiebreak must be one of {TIEBREAKS}")
    if model.g not in (2, 3):
        raise TreeSchedError(f"tournaments support g in (2, 3), model has g={model.g}")
    t = _Tournament(model, candidates, m, tiebreak, seed)
    if len(t.cands) > 1:
        t.run_pairs() if model.g == 2 else t.run_triplets()
    w = t.finish() if len(t.cands) > 1 else 0
    st = t.state
    st.winner = t.keys[w]
    st.alive = {t.keys[i] for i in st.alive}
    st.win_counter = {t.keys[i]: c for i, c in st.win_counter.items()}
    st.loss_counter = {t.keys[i]: c for i, c in st.loss_counter.items()}
    st.head_to_head = Counter({(t.keys[a], t.keys[b]): c for (a, b), c in st.head_to_head.items()})
    return st


def tournament_select(model, candidates, m: int = 2, tiebreak: str = "least_work", seed=0) -> tuple:
    """(job_id, node_id) of the tournament winner among ``(job, node, features)`` candidates."""
    return run_tournament(model, candidates, m, tiebreak, seed).winner


def fair_allocate(state, chosen_job: int, node_id: int | None = None, rule: str = "fair_ceil") -> int:
    """Equal-share cap minus what the job holds, clipped to idle executors and the node's tasks.

    ``state`` may be a ClusterState or a StageView. The default rule gives
    every job ``ceil(N / n)``; ``"fair"`` uses the floor-plus-remainder split.
    """
    st = getattr(state, "state", state)
    if chosen_job not in st.jobs_in_system:
        raise TreeSchedError(f"job {chosen_job} is not in the system")
    cap = equal_share_caps(st.jobs_in_system, st.executor_count, rule)[chosen_job]
    held = st.runtimes[chosen_job].held
    budget = min(max(0, cap - held), st.idle_count)
    if node_id is not None:
        budget = min(budget, st.runtimes[chosen_job].nodes[node_id].remaining_tasks)
    return budget


@dataclass
class TreeSchedulerConfig:
    model: GroupTreeClassifier
    m: int = 2
    tiebreak: str = "least_work"
    allocation: str = "fair"

    def __post_init__(self):
        if self.model.g not in (2, 3):
            raise TreeSchedError(f"model.g must be 2 or 3, got {self.model.g}")
        check_positive_int(self.m, "m", TreeSchedError)
        if self.tiebreak not in TIEBREAKS:
            raise TreeSchedError(f"tiebreak must be one of {TIEBREAKS}")
        if self.allocation not in ALLOCATIONS:
            raise TreeSchedError(f"allocation must be one of {ALLOCATIONS}")


def tree_decide(view, config: TreeSchedulerConfig, seed=0, norm: NormalizationConfig | None = None,
                path_counts: Counter | None = None):
    """Features, tournament, allocation; None when nothing can be scheduled."""
    if not view.candidates or view.idle_count == 0:
        return None
    if norm is None:
        n = config.model.meta_.get("normalization")
        norm = NormalizationConfig.from_dict(n) if n else NormalizationConfig.identity()
    cands = [(j, v, view.features(j, v, norm)) for j, v in view.candidates]
    while cands:
        st = run_tournament(config.model, cands, config.m, config.tiebreak, seed)
        if path_counts is not None:
            path_counts.update(st.leaves)
        job_id, node_id = st.winner
        if config.allocation == "all_idle":
            budget = view.idle_count
        else:
            budget = fair_allocate(view, job_id, node_id)
        if budget >= 1:
            return SchedulingDecision(job_id, node_id, budget)
        # job at cap: let the next job compete
        cands = [c for c in cands if c[0] != job_id]
    return None


class TreeScheduler(SchedulerPolicy):
    name = "tree"

    def __init__(self, model, m: int = 2, tiebreak: str = "least_work", allocation: str = "fair",
                 seed: int = 0, log_paths: bool = False):
        self.config = TreeSchedulerConfig(model, m, tiebreak, allocation)
        self.seed = seed
        self.cap_rule = "fair_ceil" if allocation == "fair" else "none"
        n = model.meta_.get("normalization")
        self.norm = NormalizationConfig.from_dict(n) if n else NormalizationConfig.identity()
        self.cp_metric = model.meta_.get("cp_metric", "hops")
        self.path_counts = Counter() if log_paths else None
        self._run_seed = 0

    @property
    def model(self):
        return self.config.model

    def reset(self, spec) -> None:
        self._run_seed = spec.seed

    def decide(self, view):
        return tree_decide(view, self.config, f"{self.seed}:{self._run_seed}:{view.stage_idx}", self.norm,
                           self.path_counts)

    @classmethod
    def from_file(cls, path, seed: int = 0, **kwargs) -> "TreeScheduler":
        """Load a tree JSON or a pool JSON (its best tree)."""
        pool = TreePool.load(path)
        return cls(pool.best(), seed=seed, **kwargs)
