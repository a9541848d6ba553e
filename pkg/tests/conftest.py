import random
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dagsched.distill import GroupTreeClassifier  # noqa: E402
from dagsched.workload import WorkloadSpec, make_job  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]


def fv(f7=1.0, f9=1.0, f10=0.0, **kw):
    """A 10-feature row with the interesting coordinates set by name."""
    v = [1.0] * 10
    v[6], v[8], v[9] = float(f7), float(f9), float(f10)
    for k, val in kw.items():
        v[int(k[1:]) - 1] = float(val)
    return v


def toy_f7_tree() -> GroupTreeClassifier:
    """Two-slot tree: slot 0 if s0.f7 <= 7, else slot 1 if s1.f7 <= 7, else slot 0."""
    return GroupTreeClassifier.from_dict({
        "meta": {"g": 2, "max_depth": 2, "max_leaves": 3, "min_leaf": 1, "seed": 0},
        "nodes": [
            {"feat": 6, "thr": 7.0, "lo": 1, "hi": 2},
            {"leaf": 0, "counts": [3.0, 1.0]},
            {"feat": 16, "thr": 7.0, "lo": 3, "hi": 4},
            {"leaf": 1, "counts": [1.0, 3.0]},
            {"leaf": 0, "counts": [2.0, 1.0]},
        ],
    })


def exact_f7_tree(k: int = 12) -> GroupTreeClassifier:
    """Pairwise tree that is exact on integer f7 values 0..k: the smaller f7
    wins and equal values land on a draw leaf."""
    nodes = []

    def leaf(slot, draw=False):
        nodes.append({"leaf": slot, "counts": [1.0, 1.0] if draw else ([1.0, 0.0] if slot == 0 else [0.0, 1.0])})
        return len(nodes) - 1

    def split(feat, thr):
        nodes.append({"feat": feat, "thr": thr, "lo": None, "hi": None})
        return len(nodes) - 1

    def inner(a):
        # s0.f7 == a: compare s1.f7 with a
        r = split(16, a - 0.5)
        nodes[r]["lo"] = leaf(1)
        m = split(16, a + 0.5)
        nodes[r]["hi"] = m
        nodes[m]["lo"] = leaf(0, draw=True)
        nodes[m]["hi"] = leaf(0)
        return r

    def outer(lo, hi):
        if lo == hi:
            return inner(lo)
        mid = (lo + hi) // 2
        r = split(6, mid + 0.5)
        nodes[r]["lo"] = outer(lo, mid)
        nodes[r]["hi"] = outer(mid + 1, hi)
        return r

    outer(0, k)
    return GroupTreeClassifier.from_dict({"meta": {"g": 2, "max_depth": 64, "max_leaves": 100000, "min_leaf": 1,
                                                   "seed": 0}, "nodes": nodes})


def fit_rule_tree(rule, g=2, n=2000, seed=0, d=30, leaves=4096):
    """Tree fitted on random integer-valued groups labelled by ``rule(slots)``."""
    rng = random.Random(seed)
    X, y = [], []
    for _ in range(n):
        slots = [[float(rng.randint(0, 20)) for _ in range(10)] for _ in range(g)]
        X.append([v for s in slots for v in s])
        y.append(rule(slots))
    return GroupTreeClassifier(g, d, leaves).fit(np.array(X), np.array(y))


def tiny_spec(jobs, executors=2, seed=0):
    """``jobs`` is a list of (arrival, [(node, tasks, dur, parents), ...])."""
    return WorkloadSpec(tuple(make_job(k, nodes, arr) for k, (arr, nodes) in enumerate(jobs)), executors, seed)


@pytest.fixture(scope="session")
def small_setup():
    from dagsched.experiments import teacher_setup

    return teacher_setup(8)


@pytest.fixture(scope="session")
def small_tree(small_setup):
    from dagsched.experiments import base_tree

    return base_tree(small_setup, 2, 20, 512)[0]
