"""Result tables: JCT summary, size-class breakdown, concurrency timeline."""
from __future__ import annotations

import hashlib
import io
import json
import statistics
from collections import defaultdict


def config_hash(config: dict) -> str:
    """Short digest of a canonical JSON rendering of ``config``."""
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:12]


def _runs(results):
    """Normalize SimResult objects or their dicts to dicts."""
    out = []
    for r in results:
        out.append(r if isinstance(r, dict) else dict(r.to_dict(), seed=getattr(r, "seed", None)))
    return out


def _mean_std(xs):
    return statistics.fmean(xs), (statistics.stdev(xs) if len(xs) > 1 else 0.0)


def jct_table(results, cfg_hash: str = "") -> list:
    """One row per scheduler: mean and std over runs of each run's average JCT."""
    by = defaultdict(list)
    for r in _runs(results):
        by[r["scheduler"]].append(r["avg_jct_s"])
    rows = []
    for name in sorted(by):
        mean, std = _mean_std(by[name])
        rows.append({"scheduler": name, "seeds": len(by[name]), "mean_jct_s": mean, "std_jct_s": std,
                     "config_hash": cfg_hash})
    return rows


def jct_breakdown(results, size_classes=None, cfg_hash: str = "") -> list:
    """Per-scheduler, per-size-class mean and std of job JCT (pooled over runs)."""
    by = defaultdict(list)
    known = set()
    for r in _runs(results):
        for j in r["jobs"]:
            if j["size_class"] is None:
                raise ValueError(f"job {j['job_id']} has no size class")
            known.add(j["size_class"])
            by[(r["scheduler"], j["size_class"])].append(j["jct_s"])
    classes = sorted(known) if size_classes is None else list(size_classes)
    unknown = [c for c in classes if c not in known]
    if unknown:
        raise ValueError(f"unknown size class(es) {unknown}; results have {sorted(known)}")
    rows = []
    for name in sorted({k[0] for k in by}):
        for c in classes:
            xs = by.get((name, c))
            if not xs:
                continue
            mean, std = _mean_std(xs)
            rows.append({"scheduler": name, "size_class": c, "jobs": len(xs), "mean_jct_s": mean,
                         "std_jct_s": std, "config_hash": cfg_hash})
    return rows


def rows_to_csv(rows, header_comment: str | None = None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    if not rows:
        return buf.getvalue()
    cols = list(rows[0])
    buf.write(",".join(cols) + "\n")
    for r in rows:
        buf.write(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols) + "\n")
    return buf.getvalue()


def concurrency_timeline(sim_results, header_comment: str | None = None) -> str:
    """``scheduler,seed,t_s,concurrent_jobs,busy_executors`` in time order per run."""
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    buf.write("scheduler,seed,t_s,concurrent_jobs,busy_executors\n")
    for r in _runs(sim_results):
        for t, c, b in r["timeline"]:
            buf.write(f"{r['scheduler']},{r.get('seed')},{t!r},{c},{b}\n")
    return buf.getvalue()
