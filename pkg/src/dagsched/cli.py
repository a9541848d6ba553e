"""Command-line entry point: ``dagsched <command> ...``.

Exit codes: 0 ok, 2 bad usage, 3 missing input, 4 malformed input,
5 scheduler contract violation, 1 anything else.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import report as R
from .distill import DistillError, TreePool, build_groups, distill_pool, fidelity, path_histogram_csv
from .features import NormalizationConfig
from .schedulers import make_scheduler
from .simulator import ContractViolation, Simulator
from .trace import TraceError, TraceRecorder, load_trace, merge_traces, save_trace
from .treesched import TreeScheduler
from .tuning import EdgeCase, TuningError, tune_and_select
from .workload import (TPCH_SIZE_CLASSES, WorkloadError, dumps_workload, generate_batched, generate_poisson,
                       load_workload, save_workload)

log = logging.getLogger("dagsched")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_MISSING, EXIT_SCHEMA, EXIT_CONTRACT = 0, 1, 2, 3, 4, 5


class MissingInput(Exception):
    pass


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("DAGSCHED_THREADS", "1")))
    except ValueError:
        return 1


def _need(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"input not found: {p}")
    return p


def _cfg(args, *drop) -> dict:
    # output locations do not change results, so they stay out of the hash
    skip = {"func", "out", "trace", "timeline", "log_paths", "tuned_out", "verbose"} | set(drop)
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _write(path, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


def _workload_hash(spec) -> str:
    return hashlib.sha256(dumps_workload(spec).encode()).hexdigest()[:16]


def _norm(args, spec) -> NormalizationConfig:
    if args.work_scale or args.count_scale:
        return NormalizationConfig(args.work_scale or 1.0, args.count_scale or 1.0)
    if args.norm_from:
        return NormalizationConfig.from_workload(load_workload(_need(args.norm_from)))
    return NormalizationConfig.from_workload(spec)


# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    sizes = tuple(args.size_classes) if args.size_classes else TPCH_SIZE_CLASSES
    if args.poisson:
        spec = generate_poisson(args.jobs, args.mean_interarrival, sizes, args.shapes, args.seed,
                                args.executors or 50, first_job_id=args.first_job_id)
    else:
        spec = generate_batched(args.jobs, sizes, args.shapes, args.seed, args.executors or 20,
                                first_job_id=args.first_job_id)
    if args.out in (None, "-"):
        sys.stdout.write(dumps_workload(spec, {"config_hash": R.config_hash(_cfg(args))}))
    else:
        save_workload(spec, args.out, {"config_hash": R.config_hash(_cfg(args))})
    return EXIT_OK


def _sched_kwargs(args, name: str) -> dict:
    if name == "teacher-crp":
        return {"epsilon": args.epsilon}
    if name.startswith("tree:"):
        return {"m": args.m, "allocation": args.allocation, "tiebreak": args.tiebreak}
    return {}


def _simulate_one(job):
    wpath, sched, seed, opts = job
    spec = load_workload(wpath)
    pol = make_scheduler(sched, seed, **opts["sched_kwargs"])
    res = Simulator(spec, pol, migration_delay_s=opts["migration_delay"], cp_metric=opts["cp_metric"]).run()
    d = res.to_dict()
    d.update(seed=seed, workload=str(wpath), workload_hash=_workload_hash(spec))
    return d


def cmd_simulate(args) -> int:
    for w in args.workload:
        _need(w)
    for s in args.scheduler:
        if s.startswith("tree:"):
            _need(s[5:])
    runs = [(w, s, seed) for w in args.workload for s in args.scheduler for seed in args.seed]
    cfg = _cfg(args)
    chash = R.config_hash(cfg)
    if args.trace or args.log_paths:
        if len(runs) != 1:
            raise SystemExit("--trace/--log-paths need exactly one workload, scheduler and seed")
        w, s, seed = runs[0]
        spec = load_workload(w)
        pol = make_scheduler(s, seed, **_sched_kwargs(args, s))
        if args.log_paths and not isinstance(pol, TreeScheduler):
            raise SystemExit("--log-paths needs a tree:<path> scheduler")
        if args.log_paths:
            pol.path_counts = __import__("collections").Counter()
        sink = None
        if args.trace:
            norm = _norm(args, spec)
            sink = TraceRecorder(norm, {"workload_hash": _workload_hash(spec), "scheduler": pol.name, "seed": seed,
                                        "config_hash": chash, "cp_metric": args.cp_metric or "hops"})
        res = Simulator(spec, pol, trace_sink=sink, migration_delay_s=args.migration_delay,
                        cp_metric=args.cp_metric).run()
        if sink is not None:
            save_trace(sink.trace, args.trace)
        if args.log_paths:
            _write(args.log_paths, path_histogram_csv(pol.model, dict(pol.path_counts), f"config_hash={chash}"))
        d = res.to_dict()
        d.update(seed=seed, workload=str(w), workload_hash=_workload_hash(spec))
        results = [d]
    else:
        opts = [{"sched_kwargs": _sched_kwargs(args, s), "migration_delay": args.migration_delay,
                 "cp_metric": args.cp_metric} for _, s, _ in runs]
        jobs = [(w, s, seed, o) for (w, s, seed), o in zip(runs, opts)]
        n = min(_threads(), len(jobs))
        if n > 1:
            with ProcessPoolExecutor(max_workers=n) as ex:
                results = list(ex.map(_simulate_one, jobs))
        else:
            results = [_simulate_one(j) for j in jobs]
    out = {"config_hash": chash, "config": cfg, "runs": results}
    if args.timeline:
        _write(args.timeline, R.concurrency_timeline(results, f"config_hash={chash}"))
    _write(args.out, json.dumps(out, sort_keys=True) + "\n")
    for r in results:
        log.info("%s seed=%s avg_jct=%.3f", r["scheduler"], r["seed"], r["avg_jct_s"])
    return EXIT_OK


def _traces(paths):
    return merge_traces([load_trace(_need(p)) for p in paths])


def cmd_distill(args) -> int:
    train, test = _traces(args.train), _traces(args.test)
    configs = [(g, d, l) for g in args.g for d in args.depth for l in args.leaves]
    pool = distill_pool(train, test, configs, args.pool, min_leaf=args.min_leaf, seed=args.seed,
                        max_groups_per_stage=args.max_groups, winner_slot_policy=args.slot_policy,
                        across=args.across, m=args.m)
    chash = R.config_hash(_cfg(args))
    for t in pool.trees:
        t.meta_["config_hash"] = chash
    d = pool.to_dict()
    d["config_hash"] = chash
    _write(args.out, json.dumps(d, sort_keys=True) + "\n")
    for s, t in pool.entries:
        log.info("g=%d d=%d l=%d fidelity=%.4f", t.g, t.meta_["max_depth"], t.meta_["max_leaves"], s)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    chash = R.config_hash(_cfg(args))
    if args.fidelity:
        if not args.model or not args.test:
            raise SystemExit("evaluate --fidelity needs --model and --test")
        pool = TreePool.load(_need(args.model))
        test = _traces(args.test)
        rows = []
        for k, (score, model) in enumerate(pool.entries):
            groups = build_groups(test, model.g, args.max_groups, "permute", args.seed)
            within, across = fidelity(model, groups, test, m=args.m, seed=args.seed)
            rows.append({"tree": k, "g": model.g, "depth": model.get_depth(), "leaves": model.get_n_leaves(),
                         "within_group": within, "across_trace": across, "config_hash": chash})
        _write(args.out, R.rows_to_csv(rows, f"config_hash={chash}"))
        return EXIT_OK
    if not args.workload or not args.scheduler:
        raise SystemExit("evaluate --jct needs --workload and --scheduler")
    for w in args.workload:
        _need(w)
    jobs = [(w, s, seed, {"sched_kwargs": _sched_kwargs(args, s), "migration_delay": args.migration_delay,
                          "cp_metric": None})
            for w in args.workload for s in args.scheduler for seed in args.seed]
    n = min(_threads(), len(jobs))
    if n > 1:
        with ProcessPoolExecutor(max_workers=n) as ex:
            results = list(ex.map(_simulate_one, jobs))
    else:
        results = [_simulate_one(j) for j in jobs]
    rows = R.jct_breakdown(results, None, chash) if args.by_size else R.jct_table(results, chash)
    _write(args.out, R.rows_to_csv(rows, f"config_hash={chash}"))
    return EXIT_OK


def cmd_tune(args) -> int:
    cases = [EdgeCase.load(_need(p)) for p in args.case]
    pool = TreePool.load(_need(args.pool))
    train = _traces(args.train) if args.train else None
    samples = []
    for t in pool.trees:
        if train is None:
            samples.append(None)
            continue
        samples.append(build_groups(train, t.g, int(t.meta_.get("max_groups_per_stage", 200)),
                                    t.meta_.get("winner_slot_policy", "permute"), int(t.meta_.get("seed", 0))))
    suite = [load_workload(_need(p)) for p in args.regression]
    heuristic = make_scheduler(args.heuristic, args.seed)
    chash = R.config_hash(_cfg(args))
    reports = []
    for case in cases:
        rep = tune_and_select(pool, case, type(heuristic), suite, samples, args.mix, args.reps,
                              dagger_iters=args.dagger_iters, m=args.m, seed=args.seed)
        d = rep.to_dict()
        d["config_hash"] = chash
        reports.append(d)
        if args.tuned_out:
            stem = Path(args.tuned_out)
            path = stem if len(cases) == 1 else stem.with_name(f"{stem.stem}_{case.case_id}{stem.suffix}")
            rep.selected_model.meta_["config_hash"] = chash
            rep.selected_model.save(path)
        log.info("%s: selected tree %d (%s) case JCT %.2f s vs %s %.2f s", case.case_id, rep.selected_tree,
                 rep.selected_variant, rep.selected_case_jct_s, rep.heuristic, rep.heuristic_case_jct_s)
    _write(args.out, json.dumps({"config_hash": chash, "reports": reports}, sort_keys=True, indent=1) + "\n")
    return EXIT_OK


def _load_results(paths):
    runs = []
    for p in paths:
        try:
            runs.extend(json.loads(_need(p).read_text())["runs"])
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise TraceError(f"{p}: not a simulate results file ({exc})") from None
    return runs


def cmd_report(args) -> int:
    chash = R.config_hash(_cfg(args))
    if args.paths:
        if not args.model or not args.workload:
            raise SystemExit("report --paths needs --model and --workload")
        if args.seed is None:
            raise SystemExit("report --paths needs --seed")
        pool = TreePool.load(_need(args.model))
        pol = TreeScheduler(pool.best(), m=args.m, seed=args.seed[0], log_paths=True)
        spec = load_workload(_need(args.workload[0]))
        Simulator(spec, pol).run()
        counts = dict(pol.path_counts)
        csv_text = path_histogram_csv(pol.model, counts, f"config_hash={chash}")
        _write(args.out, csv_text)
        if counts:
            top = max(counts, key=lambda k: (counts[k], -k))
            sys.stderr.write(f"top-1 path {top} ({counts[top]} of {sum(counts.values())} comparisons): "
                             f"{pol.model.predicate_chain(top)}\n")
        return EXIT_OK
    if not args.results:
        raise SystemExit("report --timeline/--jct needs --results")
    runs = _load_results(args.results)
    if args.timeline:
        _write(args.out, R.concurrency_timeline(runs, f"config_hash={chash}"))
    else:
        rows = R.jct_breakdown(runs, None, chash) if args.by_size else R.jct_table(runs, chash)
        _write(args.out, R.rows_to_csv(rows, f"config_hash={chash}"))
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dagsched", description="DAG scheduling simulator and tree distillation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic workload (JSONL)")
    kind = g.add_mutually_exclusive_group(required=True)
    kind.add_argument("--batched", action="store_true")
    kind.add_argument("--poisson", action="store_true")
    g.add_argument("--jobs", type=int, required=True)
    g.add_argument("--mean-interarrival", type=float, default=25.0)
    g.add_argument("--executors", type=int)
    g.add_argument("--shapes", type=int, default=22)
    g.add_argument("--size-classes", type=float, nargs="+")
    g.add_argument("--first-job-id", type=int, default=0)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate)

    def sim_opts(sp):
        sp.add_argument("--migration-delay", type=float, default=0.0)
        sp.add_argument("--epsilon", type=float, default=0.0, help="teacher-crp selection noise")
        sp.add_argument("--m", type=int, default=2, help="tree tournament loss threshold")
        sp.add_argument("--allocation", choices=("fair", "all_idle"), default="fair")
        sp.add_argument("--tiebreak", choices=("least_work", "lowest_id"), default="least_work")

    s = sub.add_parser("simulate", help="run schedulers on workloads")
    s.add_argument("--workload", nargs="+", required=True)
    s.add_argument("--scheduler", nargs="+", required=True)
    s.add_argument("--seed", type=int, nargs="+", required=True)
    s.add_argument("--trace")
    s.add_argument("--timeline")
    s.add_argument("--log-paths")
    s.add_argument("--out")
    s.add_argument("--cp-metric", choices=("hops", "tasks", "work"))
    s.add_argument("--norm-from", help="workload whose statistics set the trace normalization")
    s.add_argument("--work-scale", type=float)
    s.add_argument("--count-scale", type=float)
    sim_opts(s)
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("distill", help="fit a tree pool from teacher traces")
    d.add_argument("--train", nargs="+", required=True)
    d.add_argument("--test", nargs="+", required=True)
    d.add_argument("--g", type=int, nargs="+", choices=(2, 3), default=[2])
    d.add_argument("--depth", type=int, nargs="+", default=[30])
    d.add_argument("--leaves", type=int, nargs="+", default=[4096])
    d.add_argument("--pool", type=int, default=5)
    d.add_argument("--min-leaf", type=int, default=1)
    d.add_argument("--max-groups", type=int, default=200)
    d.add_argument("--slot-policy", choices=("permute", "last"), default="permute")
    d.add_argument("--across", action="store_true", help="also measure across-trace fidelity")
    d.add_argument("--m", type=int, default=2)
    d.add_argument("--seed", type=int, required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_distill)

    e = sub.add_parser("evaluate", help="fidelity of a pool or a JCT table")
    mode = e.add_mutually_exclusive_group(required=True)
    mode.add_argument("--fidelity", action="store_true")
    mode.add_argument("--jct", action="store_true")
    e.add_argument("--model")
    e.add_argument("--test", nargs="+")
    e.add_argument("--max-groups", type=int, default=200)
    e.add_argument("--workload", nargs="+")
    e.add_argument("--scheduler", nargs="+")
    e.add_argument("--by-size", action="store_true")
    e.add_argument("--seed", type=int, nargs="+", required=True)
    e.add_argument("--out")
    sim_opts(e)
    e.set_defaults(func=lambda a: cmd_evaluate(_first_seed(a) if a.fidelity else a))

    t = sub.add_parser("tune", help="fine-tune a pool on edge cases")
    t.add_argument("--case", nargs="+", required=True)
    t.add_argument("--pool", required=True)
    t.add_argument("--heuristic", default="fair", choices=("fair", "fifo", "sjf"))
    t.add_argument("--train", nargs="+", help="traces the pool was distilled from")
    t.add_argument("--regression", nargs="*", default=[])
    t.add_argument("--mix", type=float, default=0.2)
    t.add_argument("--reps", type=int, default=50)
    t.add_argument("--dagger-iters", type=int, default=3)
    t.add_argument("--m", type=int, default=2)
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--out")
    t.add_argument("--tuned-out")
    t.set_defaults(func=cmd_tune)

    r = sub.add_parser("report", help="path histogram, concurrency timeline or JCT tables")
    what = r.add_mutually_exclusive_group(required=True)
    what.add_argument("--paths", action="store_true")
    what.add_argument("--timeline", action="store_true")
    what.add_argument("--jct", action="store_true")
    r.add_argument("--model")
    r.add_argument("--workload", nargs="+")
    r.add_argument("--results", nargs="+")
    r.add_argument("--by-size", action="store_true")
    r.add_argument("--m", type=int, default=2)
    r.add_argument("--seed", type=int, nargs="+")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def _first_seed(args):
    args.seed = args.seed[0]
    return args


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MissingInput as exc:
        print(f"dagsched: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except FileNotFoundError as exc:
        print(f"dagsched: input not found: {exc.filename}", file=sys.stderr)
        return EXIT_MISSING
    except ContractViolation as exc:
        print(f"dagsched: contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (WorkloadError, TraceError, DistillError, TuningError, json.JSONDecodeError) as exc:
        print(f"dagsched: invalid input: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except SystemExit as exc:
        if isinstance(exc.code, str):
            print(f"dagsched: {exc.code}", file=sys.stderr)
            return EXIT_USAGE
        raise


if __name__ == "__main__":
    sys.exit(main())
