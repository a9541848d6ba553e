"""Group samples, a weighted CART classifier, fidelity and the tree pool.

A group is ``g`` candidate feature vectors from one stage (the winner plus
``g - 1`` losers) concatenated in slot order; the label is the winner's slot.
The classifier follows the scikit-learn estimator protocol but is grown here:
Gini impurity, best-first growth under a depth and a leaf budget, and split
ties resolved to the lowest feature index and then the lowest threshold.
"""
from __future__ import annotations

import hashlib
import heapq
import itertools
import json
import logging
import math
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .features import N_FEATURES, FeatureVector
from ._validation import check_positive_int

log = logging.getLogger(__name__)

SLOT_POLICIES = ("permute", "last")


class DistillError(ValueError):
    pass


class TreeFormatError(DistillError):
    pass


@dataclass(frozen=True)
class GroupSample:
    slots: tuple            # g FeatureVectors
    winner_slot: int
    provenance: tuple       # (stage_idx, ((job_id, node_id), ...) in slot order)

    def __post_init__(self):
        if not 0 <= self.winner_slot < len(self.slots):
            raise DistillError(f"winner_slot {self.winner_slot} outside [0, {len(self.slots)})")

    @property
    def g(self) -> int:
        return len(self.slots)

    def vector(self) -> tuple:
        return tuple(itertools.chain.from_iterable(self.slots))


class GroupSet:
    """Array-backed collection of group samples.

    ``X`` has one row per group (``10 * g`` columns), ``y`` the winner slot,
    ``stage`` the source stage and ``members`` the (job, node) of every slot.
    """

    def __init__(self, g, X, y, stage, members, policy="permute", skipped_stages=0, weight=None):
        self.g = g
        self.X = np.asarray(X, dtype=float).reshape(-1, N_FEATURES * g)
        self.y = np.asarray(y, dtype=np.int64)
        self.stage = np.asarray(stage, dtype=np.int64)
        self.members = list(members)
        self.policy = policy
        self.skipped_stages = skipped_stages
        self.weight = None if weight is None else np.asarray(weight, dtype=float)

    def __len__(self):
        return len(self.y)

    def __getitem__(self, k) -> GroupSample:
        row = self.X[k]
        slots = tuple(FeatureVector(*row[s * N_FEATURES:(s + 1) * N_FEATURES].tolist()) for s in range(self.g))
        return GroupSample(slots, int(self.y[k]), (int(self.stage[k]), tuple(self.members[k])))

    def __iter__(self):
        for k in range(len(self)):
            yield self[k]

    @classmethod
    def from_samples(cls, samples, policy="permute") -> "GroupSet":
        samples = list(samples)
        if not samples:
            raise DistillError("no samples")
        g = samples[0].g
        if any(s.g != g for s in samples):
            raise DistillError("samples mix group sizes")
        return cls(g, [s.vector() for s in samples], [s.winner_slot for s in samples],
                   [s.provenance[0] for s in samples], [s.provenance[1] for s in samples], policy)

    def subset(self, idx) -> "GroupSet":
        idx = np.asarray(idx, dtype=np.int64)
        return GroupSet(self.g, self.X[idx], self.y[idx], self.stage[idx], [self.members[i] for i in idx],
                        self.policy, 0, None if self.weight is None else self.weight[idx])


def _as_groupset(samples) -> GroupSet:
    return samples if isinstance(samples, GroupSet) else GroupSet.from_samples(samples)


def _loser_combos(n_losers: int, k: int, cap: int, rng: random.Random) -> list:
    total = math.comb(n_losers, k)
    if total <= cap:
        return list(itertools.combinations(range(n_losers), k))
    if k == 1:
        return [(i,) for i in sorted(rng.sample(range(n_losers), cap))]
    seen = set()
    out = []
    while len(out) < cap:
        c = tuple(sorted(rng.sample(range(n_losers), k)))
        if c not in seen:
            seen.add(c)
            out.append(c)
    return out


def build_groups(trace, g: int = 2, max_groups_per_stage: int = 200, winner_slot_policy: str = "permute",
                 seed: int = 0) -> GroupSet:
    """One group per combination of ``g - 1`` losers, joined by the stage winner.

    Stages with fewer than ``g`` candidates are skipped and counted in
    ``skipped_stages``. Above ``max_groups_per_stage`` combinations a seeded
    uniform sample is kept. ``permute`` puts the winner in a random slot;
    ``last`` always uses the final slot.
    """
    if not isinstance(g, int) or g < 2:
        raise DistillError(f"g must be an integer >= 2, got {g!r}")
    check_positive_int(max_groups_per_stage, "max_groups_per_stage", DistillError)
    if winner_slot_policy not in SLOT_POLICIES:
        raise DistillError(f"winner_slot_policy must be one of {SLOT_POLICIES}")
    X, y, stage, members = [], [], [], []
    skipped = 0
    for rec in trace.records:
        cands = rec.candidates
        if len(cands) < g:
            skipped += 1
            continue
        w = rec.winner_index
        losers = [c for k, c in enumerate(cands) if k != w]
        rng = random.Random(f"groups:{seed}:{rec.stage_idx}")
        for combo in _loser_combos(len(losers), g - 1, max_groups_per_stage, rng):
            slots = [losers[i] for i in combo]
            slot = rng.randrange(g) if winner_slot_policy == "permute" else g - 1
            slots.insert(slot, cands[w])
            X.append(tuple(itertools.chain.from_iterable(c[2] for c in slots)))
            y.append(slot)
            stage.append(rec.stage_idx)
            members.append(tuple((c[0], c[1]) for c in slots))
    if skipped:
        log.warning("build_groups: skipped %d stage(s) with fewer than %d candidates", skipped, g)
    return GroupSet(g, np.array(X, dtype=float).reshape(-1, N_FEATURES * g), y, stage, members,
                    winner_slot_policy, skipped)


# ---------------------------------------------------------------------------
# CART


def _weighted_gini_sum(counts):
    """sum over rows of w * gini = w - sum(c^2) / w, with 0 for empty rows."""
    w = counts.sum(axis=-1)
    sq = (counts * counts).sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(w > 0, w - sq / np.where(w > 0, w, 1.0), 0.0)
    return out


class GroupTreeClassifier(ClassifierMixin, BaseEstimator):
    """Predicts the winning slot of a group from its concatenated features.

    Parameters
    ----------
    group_size : int
        Slots per group; inputs must have ``10 * group_size`` columns.
    max_depth : int
        Depth budget (a single leaf has depth 0).
    max_leaf_nodes : int
        Leaf budget; growth is best-first by weighted impurity decrease.
    min_samples_leaf : int
        Minimum number of (unweighted) samples in each child of a split.
    random_state : int
        Recorded in the metadata; the fit itself is deterministic.
    """

    def __init__(self, group_size=2, max_depth=10, max_leaf_nodes=128, min_samples_leaf=1, random_state=0):
        self.group_size = group_size
        self.max_depth = max_depth
        self.max_leaf_nodes = max_leaf_nodes
        self.min_samples_leaf = min_samples_leaf
        self.random_state = random_state

    def _check_params(self):
        if not isinstance(self.group_size, (int, np.integer)) or self.group_size < 2:
            raise DistillError(f"group_size must be an integer >= 2, got {self.group_size!r}")
        if not isinstance(self.max_depth, (int, np.integer)) or self.max_depth < 0:
            raise DistillError(f"max_depth must be a non-negative integer, got {self.max_depth!r}")
        check_positive_int(self.max_leaf_nodes, "max_leaf_nodes", DistillError)
        check_positive_int(self.min_samples_leaf, "min_samples_leaf", DistillError)

    def fit(self, X, y, sample_weight=None):
        self._check_params()
        X, y = check_X_y(X, y, dtype=np.float64)
        g = int(self.group_size)
        if X.shape[1] != N_FEATURES * g:
            raise DistillError(f"expected {N_FEATURES * g} features for g={g}, got {X.shape[1]}")
        y = y.astype(np.int64)
        if y.min() < 0 or y.max() >= g:
            raise DistillError(f"labels must be slot indices in [0, {g})")
        if sample_weight is None:
            w = np.ones(len(y))
        else:
            w = check_array(sample_weight, ensure_2d=False, dtype=np.float64)
            if w.shape != y.shape or (w < 0).any() or w.sum() <= 0:
                raise DistillError("sample_weight must be non-negative, one per sample, with positive sum")
        self.classes_ = np.arange(g)
        self.n_features_in_ = X.shape[1]
        self._grow(X, y, w)
        self.meta_ = {"g": g, "max_depth": int(self.max_depth), "max_leaves": int(self.max_leaf_nodes),
                      "min_leaf": int(self.min_samples_leaf), "seed": int(self.random_state)}
        return self

    def _grow(self, X, y, w):
        g = int(self.group_size)
        onehot = np.zeros((len(y), g))
        onehot[np.arange(len(y)), y] = w
        self._feat, self._thr, self._lo, self._hi, self._counts, self._depth = [], [], [], [], [], []
        samples_of = {}

        def new_node(idx, depth):
            k = len(self._feat)
            self._feat.append(-1)
            self._thr.append(0.0)
            self._lo.append(-1)
            self._hi.append(-1)
            self._counts.append(onehot[idx].sum(axis=0))
            self._depth.append(depth)
            samples_of[k] = idx
            return k

        heap = []

        def consider(k):
            split = self._best_split(X, onehot, samples_of[k], self._depth[k])
            if split is not None:
                heapq.heappush(heap, (-split[0], k, split))

        consider(new_node(np.arange(len(y)), 0))
        leaves = 1
        while heap and leaves < self.max_leaf_nodes:
            _, k, (_, f, thr, left, right) = heapq.heappop(heap)
            idx = samples_of.pop(k)
            self._feat[k], self._thr[k] = f, thr
            lo = new_node(idx[left], self._depth[k] + 1)
            hi = new_node(idx[right], self._depth[k] + 1)
            self._lo[k], self._hi[k] = lo, hi
            leaves += 1
            consider(lo)
            consider(hi)
        self._counts = [np.asarray(c, dtype=float) for c in self._counts]
        self._finalize()

    def _best_split(self, X, onehot, idx, depth):
        ml = int(self.min_samples_leaf)
        n = len(idx)
        if depth >= self.max_depth or n < 2 * ml:
            return None
        counts = onehot[idx]
        total = counts.sum(axis=0)
        if np.count_nonzero(total) <= 1:
            return None
        parent = float(_weighted_gini_sum(total))
        eps = 1e-12 * max(1.0, float(total.sum()))
        best = None
        Xn = X[idx]
        for f in range(X.shape[1]):
            order = np.argsort(Xn[:, f], kind="stable")
            xs = Xn[order, f]
            # split after position i: left = order[:i+1]
            valid = np.flatnonzero(xs[:-1] < xs[1:])
            valid = valid[(valid >= ml - 1) & (valid <= n - ml - 1)]
            if valid.size == 0:
                continue
            cum = np.cumsum(counts[order], axis=0)[valid]
            score = _weighted_gini_sum(cum) + _weighted_gini_sum(total - cum)
            j = int(np.argmin(score))
            if best is None or score[j] < best[0] - eps:
                i = int(valid[j])
                a, b = float(xs[i]), float(xs[i + 1])
                thr = a + (b - a) / 2.0
                if not a <= thr < b:
                    thr = a
                best = (float(score[j]), f, thr, order[:i + 1], order[i + 1:])
        if best is None:
            return None
        gain = parent - best[0]
        if gain <= eps:
            return None
        return (gain, best[1], best[2], np.sort(best[3]), np.sort(best[4]))

    def _finalize(self):
        self.feature_ = np.array(self._feat, dtype=np.int64)
        self.threshold_ = np.array(self._thr, dtype=float)
        self.children_left_ = np.array(self._lo, dtype=np.int64)
        self.children_right_ = np.array(self._hi, dtype=np.int64)
        self.value_ = np.vstack(self._counts) if self._counts else np.zeros((0, self.group_size))
        # argmax picks the lowest slot on count ties
        self.leaf_slot_ = np.argmax(self.value_, axis=1)
        # leaves with all-equal counts carry no preference
        self.draw_leaf_ = [bool(f < 0 and np.all(c == c[0])) for f, c in zip(self.feature_, self.value_)]
        self._py = (self.feature_.tolist(), self.threshold_.tolist(), self.children_left_.tolist(),
                    self.children_right_.tolist(), self.leaf_slot_.tolist())
        for name in ("_feat", "_thr", "_lo", "_hi", "_counts", "_depth"):
            self.__dict__.pop(name, None)

    # -- inference -------------------------------------------------------

    def _check_X(self, X):
        check_is_fitted(self, "feature_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise DistillError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X

    def apply(self, X):
        """Leaf index reached by every row."""
        X = self._check_X(X)
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            f = self.feature_[node]
            inner = f >= 0
            if not inner.any():
                return node
            r = rows[inner]
            n = node[inner]
            go_lo = X[r, f[inner]] <= self.threshold_[n]
            node[inner] = np.where(go_lo, self.children_left_[n], self.children_right_[n])

    def predict(self, X):
        leaf = self.apply(X)
        return self.leaf_slot_[leaf]

    def predict_proba(self, X):
        v = self.value_[self.apply(X)]
        s = v.sum(axis=1, keepdims=True)
        return np.divide(v, s, out=np.full_like(v, 1.0 / v.shape[1]), where=s > 0)

    def leaf_of(self, x) -> int:
        """Leaf index for one concatenated feature sequence (no validation)."""
        feat, thr, lo, hi, _ = self._py
        k = 0
        while feat[k] >= 0:
            k = lo[k] if x[feat[k]] <= thr[k] else hi[k]
        return k

    def predict_one(self, x) -> int:
        return self._py[4][self.leaf_of(x)]

    def decision_path_nodes(self, x) -> list:
        feat, thr, lo, hi, _ = self._py
        k = 0
        path = [0]
        while feat[k] >= 0:
            k = lo[k] if x[feat[k]] <= thr[k] else hi[k]
            path.append(k)
        return path

    # -- structure -------------------------------------------------------

    @property
    def g(self) -> int:
        return int(self.meta_["g"])

    @property
    def node_count(self) -> int:
        return len(self.feature_)

    def get_n_leaves(self) -> int:
        check_is_fitted(self, "feature_")
        return int((self.feature_ < 0).sum())

    def get_depth(self) -> int:
        check_is_fitted(self, "feature_")
        depth = {0: 0}
        for k in range(self.node_count):
            if self.feature_[k] >= 0:
                depth[self.children_left_[k]] = depth[k] + 1
                depth[self.children_right_[k]] = depth[k] + 1
        return max(depth.values())

    def leaves(self) -> list:
        return [k for k in range(self.node_count) if self.feature_[k] < 0]

    def path_to(self, leaf: int) -> list:
        """(node, went_low) pairs from the root down to ``leaf``."""
        parent = {}
        for k in range(self.node_count):
            if self.feature_[k] >= 0:
                parent[int(self.children_left_[k])] = (k, True)
                parent[int(self.children_right_[k])] = (k, False)
        if leaf != 0 and leaf not in parent:
            raise DistillError(f"{leaf} is not a node of this tree")
        out = []
        while leaf != 0:
            k, low = parent[leaf]
            out.append((k, low))
            leaf = k
        return out[::-1]

    def predicate_chain(self, leaf: int) -> str:
        parts = []
        for k, low in self.path_to(leaf):
            f = int(self.feature_[k])
            op = "<=" if low else ">"
            parts.append(f"s{f // N_FEATURES}.f{f % N_FEATURES + 1} {op} {float(self.threshold_[k])!r}")
        return " AND ".join(parts) if parts else "TRUE"

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        check_is_fitted(self, "feature_")
        nodes = []
        for k in range(self.node_count):
            if self.feature_[k] >= 0:
                nodes.append({"feat": int(self.feature_[k]), "thr": float(self.threshold_[k]),
                              "lo": int(self.children_left_[k]), "hi": int(self.children_right_[k])})
            else:
                nodes.append({"leaf": int(self.leaf_slot_[k]), "counts": [float(c) for c in self.value_[k]]})
        return {"meta": dict(self.meta_), "nodes": nodes}

    @classmethod
    def from_dict(cls, d: dict) -> "GroupTreeClassifier":
        try:
            meta = dict(d["meta"])
            nodes = d["nodes"]
            g = int(meta["g"])
        except (KeyError, TypeError, ValueError) as exc:
            raise TreeFormatError(f"tree JSON needs 'meta' (with 'g') and 'nodes': {exc}") from None
        if not nodes:
            raise TreeFormatError("tree has no nodes")
        m = cls(group_size=g, max_depth=int(meta.get("max_depth", 64)),
                max_leaf_nodes=int(meta.get("max_leaves", max(1, len(nodes)))),
                min_samples_leaf=int(meta.get("min_leaf", 1)), random_state=int(meta.get("seed", 0)))
        feat, thr, lo, hi, counts, slots = [], [], [], [], [], []
        for k, nd in enumerate(nodes):
            if "leaf" in nd:
                c = [float(x) for x in nd.get("counts", [0.0] * g)]
                if len(c) != g or not 0 <= int(nd["leaf"]) < g:
                    raise TreeFormatError(f"node {k}: bad leaf for g={g}")
                feat.append(-1), thr.append(0.0), lo.append(-1), hi.append(-1)
                counts.append(c), slots.append(int(nd["leaf"]))
            else:
                try:
                    f, t, a, b = int(nd["feat"]), float(nd["thr"]), int(nd["lo"]), int(nd["hi"])
                except (KeyError, TypeError, ValueError):
                    raise TreeFormatError(f"node {k}: internal nodes need feat/thr/lo/hi") from None
                if not 0 <= f < N_FEATURES * g or not math.isfinite(t):
                    raise TreeFormatError(f"node {k}: feature index {f} out of range for g={g}")
                if not (k < a < len(nodes) and k < b < len(nodes)) or a == b:
                    raise TreeFormatError(f"node {k}: children must be later, distinct node indices")
                feat.append(f), thr.append(t), lo.append(a), hi.append(b)
                counts.append([0.0] * g), slots.append(0)
        seen = [0] * len(nodes)
        for k in range(len(nodes)):
            if feat[k] >= 0:
                seen[lo[k]] += 1
                seen[hi[k]] += 1
        if seen[0] or any(s != 1 for s in seen[1:]):
            raise TreeFormatError("nodes do not form a single binary tree rooted at index 0")
        m.classes_ = np.arange(g)
        m.n_features_in_ = N_FEATURES * g
        m.meta_ = meta
        m._feat, m._thr, m._lo, m._hi = feat, thr, lo, hi
        m._counts = [np.asarray(c, dtype=float) for c in counts]
        m._finalize()
        m.leaf_slot_ = np.array(slots, dtype=np.int64)
        m._py = m._py[:4] + (slots,)
        return m

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "GroupTreeClassifier":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise TreeFormatError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        return cls.from_dict(d)


DecisionTreeModel = GroupTreeClassifier


def fit_tree(samples, d: int = 10, l: int = 128, min_leaf: int = 1, seed: int = 0, *,
             sample_weight=None, meta: dict | None = None) -> GroupTreeClassifier:
    """Fit a slot classifier on group samples (a GroupSet or GroupSample list)."""
    gs = _as_groupset(samples)
    if len(gs) < 2 * min_leaf and len(gs) > 1:
        raise DistillError(f"need at least {2 * min_leaf} samples for min_leaf={min_leaf}, got {len(gs)}")
    if len(gs) == 0:
        raise DistillError("no samples to fit")
    if gs.policy == "last" and len(set(gs.y.tolist())) == 1:
        raise DistillError("every label is the last slot (winner_slot_policy='last'): the position leaks "
                           "the label and the tree would be a constant; rebuild groups with 'permute'")
    w = sample_weight if sample_weight is not None else gs.weight
    model = GroupTreeClassifier(gs.g, d, l, min_leaf, seed).fit(gs.X, gs.y, sample_weight=w)
    model.meta_.update(meta or {})
    return model


def save_tree(model, path) -> None:
    model.save(path)


def load_tree(path) -> GroupTreeClassifier:
    return GroupTreeClassifier.load(path)


# ---------------------------------------------------------------------------
# fidelity and pool


def within_group_accuracy(model, samples) -> float:
    gs = _as_groupset(samples)
    if len(gs) == 0:
        raise DistillError("empty test set")
    return float((model.predict(gs.X) == gs.y).mean())


def across_trace_accuracy(model, trace, m: int = 2, tiebreak: str = "least_work", seed: int = 0) -> float:
    """Share of multi-candidate stages where the tournament picks the recorded winner."""
    from .treesched import tournament_select

    hits = total = 0
    for rec in trace.records:
        if len(rec.candidates) < 2:
            continue
        total += 1
        won = tournament_select(model, rec.candidates, m=m, tiebreak=tiebreak, seed=f"{seed}:{rec.stage_idx}")
        hits += won == (rec.chosen_job, rec.chosen_node)
    if total == 0:
        raise DistillError("trace has no stage with two or more candidates")
    return hits / total


def fidelity(model, test_samples, test_trace=None, m: int = 2, tiebreak: str = "least_work",
             seed: int = 0) -> tuple:
    """(within-group accuracy, across-trace accuracy); the latter is NaN without a trace."""
    within = within_group_accuracy(model, test_samples)
    across = float("nan") if test_trace is None else across_trace_accuracy(model, test_trace, m, tiebreak, seed)
    return within, across


def trace_hash(trace) -> str:
    return trace.content_hash()


class TreePool:
    """Trees ranked by held-out within-group fidelity, best first."""

    def __init__(self, capacity: int = 5):
        self.capacity = check_positive_int(capacity, "capacity", DistillError)
        self.entries: list = []   # [(fidelity, model)]

    def add(self, model, score: float) -> None:
        self.entries.append((float(score), model))
        # stable: earlier insertions win ties
        self.entries.sort(key=lambda e: -e[0])
        del self.entries[self.capacity:]

    @property
    def trees(self) -> list:
        return [m for _, m in self.entries]

    @property
    def fidelities(self) -> list:
        return [s for s, _ in self.entries]

    def best(self):
        if not self.entries:
            raise DistillError("empty pool")
        return self.entries[0][1]

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.trees)

    def to_dict(self) -> dict:
        return {"capacity": self.capacity,
                "trees": [dict(m.to_dict(), fidelity=s) for s, m in self.entries]}

    @classmethod
    def from_dict(cls, d: dict) -> "TreePool":
        try:
            pool = cls(int(d["capacity"]))
            for t in d["trees"]:
                pool.add(GroupTreeClassifier.from_dict(t), float(t.get("fidelity", 0.0)))
        except (KeyError, TypeError) as exc:
            raise TreeFormatError(f"pool JSON needs 'capacity' and 'trees': {exc}") from None
        return pool

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "TreePool":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise TreeFormatError(f"{path}: invalid JSON ({exc.msg})") from None
        if "nodes" in d:   # a single tree file
            pool = cls(1)
            pool.add(GroupTreeClassifier.from_dict(d), float(d["meta"].get("fidelity", 0.0)))
            return pool
        return cls.from_dict(d)


def distill_pool(train_trace, test_trace, configs, capacity: int = 5, *, min_leaf: int = 1, seed: int = 0,
                 max_groups_per_stage: int = 200, winner_slot_policy: str = "permute",
                 across: bool = False, m: int = 2) -> TreePool:
    """Fit one tree per (g, d, l) config and keep the ``capacity`` best on held-out groups."""
    configs = [tuple(c) for c in configs]
    if not configs:
        raise DistillError("need at least one (g, d, l) config")
    pool = TreePool(capacity)
    groups = {}
    base_meta = {"normalization": train_trace.header.get("normalization"),
                 "cp_metric": train_trace.header.get("cp_metric", "hops"),
                 "training_trace_hash": train_trace.content_hash(),
                 "max_groups_per_stage": max_groups_per_stage, "winner_slot_policy": winner_slot_policy}
    for idx, (g, d, l) in enumerate(configs):
        if g not in groups:
            groups[g] = (build_groups(train_trace, g, max_groups_per_stage, winner_slot_policy, seed),
                         build_groups(test_trace, g, max_groups_per_stage, "permute", seed + 1))
        train, test = groups[g]
        model = fit_tree(train, d, l, min_leaf, seed, meta=dict(base_meta, config_index=idx))
        within, acr = fidelity(model, test, test_trace if across else None, m=m, seed=seed)
        model.meta_["fidelity_within"] = within
        if across:
            model.meta_["fidelity_across"] = acr
        log.info("config g=%d d=%d l=%d: within=%.4f leaves=%d depth=%d", g, d, l, within,
                 model.get_n_leaves(), model.get_depth())
        pool.add(model, within)
    return pool


def path_histogram_csv(model, leaf_counts, header_comment: str | None = None) -> str:
    """``path_id,count,predicate_chain`` for every leaf, most visited first."""
    leaves = model.leaves()
    unknown = set(leaf_counts) - set(leaves)
    if unknown:
        raise DistillError(f"counts for non-leaf nodes {sorted(unknown)[:5]}")
    rows = sorted(leaves, key=lambda k: (-leaf_counts.get(k, 0), k))
    out = [f"# {header_comment}"] if header_comment else []
    out.append("path_id,count,predicate_chain")
    for k in rows:
        chain = model.predicate_chain(k).replace('"', "'")
        out.append(f'{k},{leaf_counts.get(k, 0)},"{chain}"')
    return "\n".join(out) + "\n"


def config_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:12]
