"""Scheduling-stage records and the trace CSV format.

A trace file starts with one ``#META {json}`` line, followed by a CSV header
and one row per (stage, candidate)::

    stage_idx,clock_s,job_id,node_id,winner,l_i,prev_same_job,f1,...,f10

``l_i`` is the executor budget of the stage's decision and is repeated on
every row of the stage. ``prev_job`` of a loaded record is recovered from the
``prev_same_job`` flags, so it is only known when the previously scheduled job
still has a candidate at that stage; the recorder stores it the same way.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

from .features import N_FEATURES, FeatureVector, NormalizationConfig
from ._validation import check_fraction

COLUMNS = ("stage_idx", "clock_s", "job_id", "node_id", "winner", "l_i", "prev_same_job") + tuple(
    f"f{i}" for i in range(1, N_FEATURES + 1))
META_PREFIX = "#META "


class TraceError(ValueError):
    def __init__(self, message: str, line: int | None = None, stage_idx: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if stage_idx is not None:
            where.append(f"stage {stage_idx}")
        super().__init__((f"[{', '.join(where)}] " if where else "") + message)
        self.line = line
        self.stage_idx = stage_idx


@dataclass(frozen=True)
class StageRecord:
    stage_idx: int
    clock_s: float
    chosen_job: int
    chosen_node: int
    executor_budget: int
    candidates: tuple   # ((job_id, node_id, FeatureVector), ...)
    prev_job: int | None = None

    def __post_init__(self):
        if not self.candidates:
            raise TraceError("stage has no candidates", stage_idx=self.stage_idx)
        keys = [(j, v) for j, v, _ in self.candidates]
        if (self.chosen_job, self.chosen_node) not in keys:
            raise TraceError(f"winner ({self.chosen_job}, {self.chosen_node}) is not among the candidates",
                             stage_idx=self.stage_idx)
        if len(set(keys)) != len(keys):
            raise TraceError("duplicate candidate", stage_idx=self.stage_idx)
        for _, _, fv in self.candidates:
            if len(fv) != N_FEATURES or not all(math.isfinite(x) for x in fv):
                raise TraceError("candidate features must be 10 finite numbers", stage_idx=self.stage_idx)
        if self.prev_job is not None and self.prev_job not in {j for j, _ in keys}:
            object.__setattr__(self, "prev_job", None)

    @property
    def winner_index(self) -> int:
        for k, (j, v, _) in enumerate(self.candidates):
            if j == self.chosen_job and v == self.chosen_node:
                return k
        raise AssertionError("unreachable")

    @property
    def job_ids(self) -> set:
        return {j for j, _, _ in self.candidates}


@dataclass
class TraceFile:
    header: dict = field(default_factory=dict)
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def norm(self) -> NormalizationConfig:
        n = self.header.get("normalization")
        return NormalizationConfig.from_dict(n) if n else NormalizationConfig.identity()

    def job_ids(self) -> set:
        out = set()
        for r in self.records:
            out |= r.job_ids
        return out

    def content_hash(self) -> str:
        return hashlib.sha256(dumps_trace(self).encode()).hexdigest()[:16]


class TraceRecorder:
    """In-memory sink handed to the simulator as ``trace_sink``."""

    def __init__(self, norm: NormalizationConfig | None = None, header: dict | None = None):
        self.norm = norm or NormalizationConfig.identity()
        self.trace = TraceFile(dict(header or {}), [])
        self.trace.header["normalization"] = self.norm.to_dict()

    def record(self, rec: StageRecord) -> None:
        if not isinstance(rec, StageRecord):
            raise TraceError("expected a StageRecord")
        recs = self.trace.records
        if recs and rec.stage_idx <= recs[-1].stage_idx:
            raise TraceError("stage_idx must be strictly increasing", stage_idx=rec.stage_idx)
        recs.append(rec)

    def __len__(self):
        return len(self.trace.records)


def _fmt(x: float) -> str:
    return repr(float(x))


def dumps_trace(trace: TraceFile) -> str:
    buf = io.StringIO()
    buf.write(META_PREFIX + json.dumps(trace.header, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in trace.records:
        for j, v, fv in r.candidates:
            w.writerow([r.stage_idx, _fmt(r.clock_s), j, v, int(j == r.chosen_job and v == r.chosen_node),
                        r.executor_budget, int(r.prev_job is not None and r.prev_job == j)]
                       + [_fmt(x) for x in fv])
    return buf.getvalue()


def save_trace(trace: TraceFile, path) -> None:
    try:
        Path(path).write_text(dumps_trace(trace))
    except OSError as exc:
        last = trace.records[-1].stage_idx if trace.records else None
        raise TraceError(f"could not write trace: {exc}", stage_idx=last) from exc


def loads_trace(text: str) -> TraceFile:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(META_PREFIX):
        raise TraceError("first line must start with '#META '", line=1)
    try:
        header = json.loads(lines[0][len(META_PREFIX):])
    except json.JSONDecodeError as exc:
        raise TraceError(f"bad META JSON ({exc.msg})", line=1) from None
    reader = csv.reader(lines[1:])
    try:
        cols = next(reader)
    except StopIteration:
        raise TraceError("missing CSV header", line=2) from None
    if tuple(cols) != COLUMNS:
        raise TraceError(f"unexpected columns {cols}", line=2)

    records = []
    current: list = []
    cur_key = None

    def flush():
        if not current:
            return
        winners = [row for row in current if row["winner"]]
        st = current[0]
        if len(winners) != 1:
            raise TraceError(f"expected exactly one winner, found {len(winners)}", line=st["line"],
                             stage_idx=st["stage_idx"])
        prev = [row["job_id"] for row in current if row["prev_same_job"]]
        if len(set(prev)) > 1:
            raise TraceError("prev_same_job set on several jobs", line=st["line"], stage_idx=st["stage_idx"])
        try:
            records.append(StageRecord(
                st["stage_idx"], st["clock_s"], winners[0]["job_id"], winners[0]["node_id"], st["l_i"],
                tuple((row["job_id"], row["node_id"], row["fv"]) for row in current),
                prev[0] if prev else None,
            ))
        except TraceError as exc:
            raise TraceError(str(exc).split("] ", 1)[-1], line=st["line"], stage_idx=st["stage_idx"]) from None

    for offset, row in enumerate(reader):
        line_no = offset + 3
        if not row:
            continue
        if len(row) != len(COLUMNS):
            raise TraceError(f"expected {len(COLUMNS)} fields (10 features), got {len(row)}", line=line_no)
        try:
            parsed = {
                "line": line_no,
                "stage_idx": int(row[0]), "clock_s": float(row[1]), "job_id": int(row[2]), "node_id": int(row[3]),
                "winner": int(row[4]), "l_i": int(row[5]), "prev_same_job": int(row[6]),
                "fv": FeatureVector(*(float(x) for x in row[7:])),
            }
        except ValueError as exc:
            raise TraceError(f"bad field ({exc})", line=line_no) from None
        if parsed["winner"] not in (0, 1) or parsed["prev_same_job"] not in (0, 1):
            raise TraceError("winner/prev_same_job must be 0 or 1", line=line_no)
        if not all(math.isfinite(x) for x in parsed["fv"]):
            raise TraceError("non-finite feature", line=line_no)
        key = parsed["stage_idx"]
        if key != cur_key:
            flush()
            if records and key <= records[-1].stage_idx:
                raise TraceError("stage_idx must be strictly increasing", line=line_no, stage_idx=key)
            current = []
            cur_key = key
        elif (parsed["clock_s"], parsed["l_i"]) != (current[0]["clock_s"], current[0]["l_i"]):
            raise TraceError("clock_s/l_i differ within a stage", line=line_no, stage_idx=key)
        current.append(parsed)
    flush()
    return TraceFile(header, records)


def load_trace(path) -> TraceFile:
    return loads_trace(Path(path).read_text())


def merge_traces(traces) -> TraceFile:
    """Concatenate traces (stage indices renumbered). Normalizations must agree."""
    traces = [traces] if isinstance(traces, TraceFile) else list(traces)
    if not traces:
        raise TraceError("no traces given")
    norms = {json.dumps(t.header.get("normalization"), sort_keys=True) for t in traces}
    if len(norms) > 1:
        raise TraceError("traces were recorded under different normalizations")
    if len(traces) == 1:
        return traces[0]
    out = []
    for t in traces:
        for r in t.records:
            out.append(StageRecord(len(out), r.clock_s, r.chosen_job, r.chosen_node, r.executor_budget,
                                   r.candidates, r.prev_job))
    header = dict(traces[0].header)
    header["sources"] = [t.header.get("config_hash") or t.content_hash() for t in traces]
    return TraceFile(header, out)


def _restrict(trace: TraceFile, jobs: set, part: str) -> TraceFile:
    recs = []
    for r in trace.records:
        if r.chosen_job not in jobs:
            continue
        cands = tuple(c for c in r.candidates if c[0] in jobs)
        recs.append(StageRecord(r.stage_idx, r.clock_s, r.chosen_job, r.chosen_node, r.executor_budget, cands,
                                r.prev_job))
    header = dict(trace.header)
    header["partition"] = part
    header["jobs"] = sorted(jobs)
    return TraceFile(header, recs)


def split_train_test(traces, fraction: float = 0.5, seed: int = 0) -> tuple:
    """Partition by job, not by record: ``fraction`` of the jobs go to train.

    A stage goes to the side that owns its winner, with candidates from the
    other side's jobs removed, so no test job is ever seen during training.
    """
    check_fraction(fraction, "fraction", TraceError)
    trace = merge_traces(traces)
    jobs = sorted(trace.job_ids())
    if len(jobs) < 2:
        raise TraceError("need at least two jobs to split")
    rng = random.Random(f"split:{seed}")
    rng.shuffle(jobs)
    n_train = min(max(1, round(fraction * len(jobs))), len(jobs) - 1)
    train_jobs, test_jobs = set(jobs[:n_train]), set(jobs[n_train:])
    return _restrict(trace, train_jobs, "train"), _restrict(trace, test_jobs, "test")
