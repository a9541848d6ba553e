"""Regenerate cases/: the base tree and the edge cases it handles poorly.

Usage: python3 scripts/make_cases.py [OUT_DIR]
"""
import logging
import sys
import time
from pathlib import Path

from dagsched.experiments import base_tree, teacher_setup
from dagsched.tuning import find_edge_cases


def main(out="cases"):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    model, _ = base_tree(teacher_setup(60))
    model.save(out / "base_tree.json")
    print(f"base tree: {model.get_n_leaves()} leaves, depth {model.get_depth()} ({time.time() - t0:.0f} s)")
    for case in find_edge_cases(model, 3, trials=200):
        case.save(out / f"{case.case_id}.jsonl")
        print(case.case_id, case.target_job, {k: round(v, 2) for k, v in case.baseline_jct_s.items()})
    print(f"done in {time.time() - t0:.0f} s")


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    main(*sys.argv[1:])
