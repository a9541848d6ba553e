import random
from collections import Counter

import pytest

from dagsched.distill import GroupTreeClassifier, TreePool, build_groups, within_group_accuracy
from dagsched.schedulers import FairScheduler
from dagsched.tuning import (EdgeCase, TuningError, TuningReport, case_jcts, detect_suboptimal, finetune_tree,
                             make_reference_trace, regression_avg_jct, reservoir_indices, tune_and_select)
from dagsched.workload import generate_batched
from conftest import ROOT


@pytest.fixture(scope="module")
def case():
    return EdgeCase.load(ROOT / "cases" / "case_01.jsonl")


def test_detect_examples():
    assert detect_suboptimal(20.59, 17.66) is True
    assert detect_suboptimal(17.66, 17.66) is False
    assert detect_suboptimal(17.66 * 1.05, 17.66) is False
    with pytest.raises(TuningError):
        detect_suboptimal(0.0, 1.0)


def test_reservoir_uniform():
    hits = Counter()
    for s in range(4000):
        hits.update(reservoir_indices(10, 3, random.Random(s)))
    assert all(abs(hits[i] / 4000 - 0.3) < 0.03 for i in range(10))
    assert reservoir_indices(3, 5, random.Random(0)) == [0, 1, 2]


def test_case_round_trip(tmp_path, case):
    case.save(tmp_path / "c.jsonl")
    back = EdgeCase.load(tmp_path / "c.jsonl")
    assert back.target_job == case.target_job and back.workload == case.workload


def test_case_needs_target(tmp_path):
    from dagsched.workload import save_workload

    save_workload(generate_batched(2, seed=0), tmp_path / "w.jsonl")
    with pytest.raises(TuningError):
        EdgeCase.load(tmp_path / "w.jsonl")
    with pytest.raises(TuningError):
        EdgeCase("x", generate_batched(2, seed=0), 99)


def test_case_jct_reps_vary_and_repeat(case):
    a = case_jcts(case, lambda r: FairScheduler(), reps=4)
    assert len(a) == 4 and len(set(a)) > 1
    assert a == case_jcts(case, lambda r: FairScheduler(), reps=4)


def test_reference_trace_is_heuristic(case):
    t = make_reference_trace(case, FairScheduler, reps=2)
    assert len(t) > 0 and t.header["scheduler"] == "fair"


def test_finetune_budget_and_reference_fit(case, small_tree, small_setup):
    ref = make_reference_trace(case, FairScheduler, reps=3)
    alone = finetune_tree(small_tree, ref, mix_ratio=1.0)
    assert alone.get_depth() <= small_tree.meta_["max_depth"]
    assert alone.get_n_leaves() <= small_tree.meta_["max_leaves"]
    assert within_group_accuracy(alone, build_groups(ref, 2)) >= 0.95
    orig = build_groups(small_setup["train"], 2, 200, seed=0)
    mixed = finetune_tree(small_tree, ref, mix_ratio=0.2, original_samples=orig)
    assert mixed.meta_["tuned"]["mix_ratio"] == 0.2
    assert mixed.meta_["normalization"] == small_tree.meta_["normalization"]
    assert mixed.get_n_leaves() <= small_tree.meta_["max_leaves"]
    with pytest.raises(TuningError):
        finetune_tree(small_tree, ref, mix_ratio=0.2)
    with pytest.raises(TuningError):
        finetune_tree(small_tree, ref, mix_ratio=-0.1)


def test_tune_pool_of_one(case, small_tree, small_setup):
    orig = build_groups(small_setup["train"], 2, 200, seed=0)
    suite = [generate_batched(8, seed=7000, executor_count=10)]
    kw = dict(heuristic=FairScheduler, regression_suite=suite, original_samples=orig, reps=3, reference_reps=2,
              dagger_iters=1)
    rep = tune_and_select([small_tree], case, **kw)
    assert isinstance(rep, TuningReport) and rep.selected_tree == 0
    row = rep.trees[0]
    assert rep.selected_case_jct_s == min(row["pre_case_jct_s"], row["post_case_jct_s"])
    assert rep.regression_delta == pytest.approx((rep.regression_post_s - rep.regression_pre_s)
                                                 / rep.regression_pre_s)
    again = tune_and_select([small_tree], case, **kw)
    assert again.to_json() == rep.to_json()
    assert again.selected_model.to_dict() == rep.selected_model.to_dict()


def test_tune_empty_pool(case):
    with pytest.raises(TuningError):
        tune_and_select(TreePool(2), case)


def test_regression_avg(small_tree):
    suite = [generate_batched(6, seed=s, executor_count=10) for s in (1, 2)]
    v = regression_avg_jct(small_tree, suite)
    assert v > 0
    with pytest.raises(TuningError):
        regression_avg_jct(small_tree, [])


def test_tuned_tree_is_a_normal_tree(tmp_path, case, small_tree):
    ref = make_reference_trace(case, FairScheduler, reps=2)
    t = finetune_tree(small_tree, ref, mix_ratio=1.0)
    t.save(tmp_path / "t.json")
    assert GroupTreeClassifier.load(tmp_path / "t.json").to_dict() == t.to_dict()
