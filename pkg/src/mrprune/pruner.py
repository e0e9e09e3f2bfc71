"""Retrospective replay of iterative minority-report pruning.

The simulator walks a fully executed annotation log in schedule order, split
into a warm-up span and fixed-length recalibration intervals. After warm-up
every assignment is either retained (its recorded response is revealed and
joins the observed set) or pruned (its response is masked). The minority
model is refit on observed data only, once per interval.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import NamedTuple, Sequence

import numpy as np

from mrprune.annotation import (
    MajorityOutcome,
    RepeatRecord,
    Response,
    TaskKey,
    Winner,
    activity_hours,
    majority_outcomes,
    sessionize,
)
from mrprune.glm import DesignSpec, FittedModel, fit_logistic, make_design, predict, predict_many
from mrprune.io import dump_json, fmt_float

DECISION_COLUMNS = ("crop_id", "question_id", "worker_id", "scheduled_s", "decision", "rule", "predicted_p")
SWEEP_COLUMNS = ("theta", "delta_hours", "mode", "prune_rate", "accuracy", "f1")
TRACE_COLUMNS = ("interval", "start_hours", "n_observed", "n_positive", "status", "iterations", "converged")


class Mode(str, Enum):
    PREDICTIVE = "predictive"
    NP = "np"
    AW = "aw"


class Decision(str, Enum):
    RETAINED = "retained"
    PRUNED = "pruned"


class Rule(str, Enum):
    WARM_UP = "warm_up"
    UNSEEN_WORKER = "unseen_worker"
    UNSEEN_TASK = "unseen_task"
    MIN_RETAINED_FLOOR = "min_retained_floor"
    BELOW_THRESHOLD = "below_threshold"
    ABOVE_THRESHOLD = "above_threshold"
    UNCALIBRATED = "uncalibrated"


class ModelNotCalibrated(RuntimeError):
    pass


# worker + crop + question, class-balanced; no activity or day terms
PRUNING_DESIGN = DesignSpec(include_worker=True, include_crop=True, include_question=True, include_day=False, class_balanced=True)


@dataclass(frozen=True)
class PrunePolicy:
    theta: float = 0.5
    delta_hours: float = 1.0
    tau_hours: float = 36.0
    mode: Mode = Mode.PREDICTIVE
    min_retained_per_task: int = 1
    design: DesignSpec = PRUNING_DESIGN
    gap_minutes: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if not 0.0 <= self.theta < 1.0:
            raise ValueError("theta must lie in [0, 1)")
        if not self.delta_hours > 0:
            raise ValueError("delta_hours must be positive (math.inf disables recalibration)")
        if not self.tau_hours >= 0:
            raise ValueError("tau_hours must be >= 0")
        if self.min_retained_per_task < 1:
            raise ValueError("min_retained_per_task must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["delta_hours"] = "inf" if math.isinf(self.delta_hours) else self.delta_hours
        return d


@dataclass(frozen=True)
class Interval:
    index: int
    start_hours: float
    end_hours: float
    warmup: bool
    members: tuple[int, ...]


class Verdict(NamedTuple):
    decision: Decision
    rule: Rule
    predicted_p: float | None = None


@dataclass(frozen=True)
class DecisionEntry:
    crop_id: str
    question_id: str
    worker_id: str
    scheduled_s: int
    decision: Decision
    rule: Rule
    predicted_p: float | None


@dataclass(frozen=True)
class RefitTrace:
    interval: int
    start_hours: float
    n_observed: int
    n_positive: int
    status: str
    iterations: int
    converged: bool


@dataclass
class SimState:
    observed: list[int] = field(default_factory=list)
    seen_workers: set = field(default_factory=set)
    seen_tasks: set = field(default_factory=set)
    retained_per_task: Counter = field(default_factory=Counter)
    model: FittedModel | None = None
    interval: int = 0

    def observe(self, indices: Sequence[int], records: Sequence[RepeatRecord]) -> None:
        self.observed.extend(indices)
        for i in indices:
            self.seen_workers.add(records[i].worker_id)
            self.seen_tasks.add(records[i].task)


@dataclass
class SimulationResult:
    policy: PrunePolicy
    records: list[RepeatRecord]  # schedule order
    decisions: list[DecisionEntry]
    intervals: list[Interval]
    trace: list[RefitTrace]
    refit_seconds: list[float] = field(default_factory=list)

    @property
    def retained(self) -> list[RepeatRecord]:
        return [r for r, d in zip(self.records, self.decisions) if d.decision is Decision.RETAINED]


# ---------------------------------------------------------------- intervals


def horizon_hours(times_s: Sequence[int]) -> float:
    """Span from the first scheduled second to the end of the last one."""
    if not len(times_s):
        return 0.0
    return (max(times_s) - min(times_s) + 1) / 3600.0


def partition_intervals(times_s: Sequence[int], delta_hours: float, tau_hours: float = 0.0, origin: int | None = None) -> list[Interval]:
    """Bucket scheduled times into one warm-up span then intervals of ``delta_hours``.

    Post-warm-up bucket b covers [tau + b*delta, tau + (b+1)*delta) hours from
    the origin. Empty buckets are dropped; ``math.inf`` yields a single
    post-warm-up bucket.
    """
    if not delta_hours > 0:
        raise ValueError("delta_hours must be positive")
    if not len(times_s):
        return []
    origin = min(times_s) if origin is None else origin
    offsets = (np.asarray(times_s, dtype=np.int64) - origin) / 3600.0
    warm = offsets < tau_hours
    buckets: dict[int, list[int]] = {}
    for i in np.flatnonzero(~warm):
        b = 0 if math.isinf(delta_hours) else int((offsets[i] - tau_hours) // delta_hours)
        buckets.setdefault(b, []).append(int(i))
    out = []
    if warm.any():
        out.append(Interval(0, 0.0, tau_hours, True, tuple(int(i) for i in np.flatnonzero(warm))))
    for b in sorted(buckets):
        start = tau_hours + (0.0 if math.isinf(delta_hours) else b * delta_hours)
        end = math.inf if math.isinf(delta_hours) else start + delta_hours
        out.append(Interval(len(out), start, end, False, tuple(buckets[b])))
    return out


# ---------------------------------------------------------------- decisions


def decide(record: RepeatRecord, state: SimState, policy: PrunePolicy, p: float | None = None, t: float = 0.0) -> Verdict:
    """Apply the prune rules in order: unseen worker, unseen task, floor, score."""
    if policy.mode is not Mode.AW and record.worker_id not in state.seen_workers:
        return Verdict(Decision.RETAINED, Rule.UNSEEN_WORKER)
    if record.task not in state.seen_tasks:
        return Verdict(Decision.RETAINED, Rule.UNSEEN_TASK)
    if state.retained_per_task[record.task] < policy.min_retained_per_task:
        return Verdict(Decision.RETAINED, Rule.MIN_RETAINED_FLOOR)
    if policy.mode is Mode.NP:
        return Verdict(Decision.PRUNED, Rule.ABOVE_THRESHOLD)
    if p is None:
        if state.model is None:
            raise ModelNotCalibrated("model not calibrated")
        p = predict(state.model, record.crop_id, record.worker_id, record.question_id, record.day_label, t)
    p = float(p)
    if p > policy.theta:
        return Verdict(Decision.PRUNED, Rule.ABOVE_THRESHOLD, p)
    return Verdict(Decision.RETAINED, Rule.BELOW_THRESHOLD, p)


def _observed_flags(task_code: np.ndarray, resp: np.ndarray, obs: np.ndarray, n_tasks: int) -> np.ndarray:
    tc = task_code[obs]
    r = resp[obs]
    yes = np.bincount(tc, weights=(r == 0), minlength=n_tasks)
    no = np.bincount(tc, weights=(r == 1), minlength=n_tasks)
    winner = np.where(yes > no, 0, np.where(no > yes, 1, 2))[tc]
    return (r == 2) | (winner == 2) | (r != winner)


def run_pruning_simulation(
    records: Sequence[RepeatRecord],
    policy: PrunePolicy,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> SimulationResult:
    order = sorted(range(len(records)), key=lambda i: (records[i].start_time, records[i].worker_id, records[i].task))
    recs = [records[i] for i in order]
    times = [r.start_time for r in recs]
    horizon = horizon_hours(times)
    if policy.tau_hours > horizon:
        raise ValueError(f"warm-up {policy.tau_hours} h exceeds the log horizon {horizon:.6g} h")
    intervals = partition_intervals(times, policy.delta_hours, policy.tau_hours)

    task_index: dict[TaskKey, int] = {}
    task_code = np.array([task_index.setdefault(r.task, len(task_index)) for r in recs], dtype=np.int64)
    resp_code = {Response.YES: 0, Response.NO: 1, Response.CANT_SOLVE: 2}
    resp = np.array([resp_code[r.response] for r in recs], dtype=np.int64)
    workers = np.array([r.worker_id for r in recs], dtype=str)
    crops = np.array([r.crop_id for r in recs], dtype=str)
    questions = np.array([r.question_id for r in recs], dtype=str)
    days = np.array([r.day_label for r in recs], dtype=str)
    spec = policy.design
    uses_activity = spec.include_activity or spec.include_activity_squared
    # the schedule is known ex ante, so sessions come from all planned times
    act = activity_hours(sessionize(recs, policy.gap_minutes), len(recs)) if uses_activity else None

    state = SimState()
    decisions: list[DecisionEntry | None] = [None] * len(recs)
    trace: list[RefitTrace] = []
    seconds: list[float] = []

    def entry(i: int, v: Verdict) -> DecisionEntry:
        r = recs[i]
        return DecisionEntry(r.crop_id, r.question_id, r.worker_id, r.start_time, v.decision, v.rule, v.predicted_p)

    def refit(iv: Interval) -> None:
        obs = np.asarray(state.observed, dtype=np.int64)
        flags = _observed_flags(task_code, resp, obs, len(task_index))
        n_pos = int(flags.sum())
        tick = time.perf_counter()
        if n_pos == 0 or n_pos == len(obs):
            trace.append(RefitTrace(iv.index, iv.start_hours, len(obs), n_pos, "degenerate refit", 0, False))
            return
        design = make_design(
            flags.astype(float),
            spec,
            activity=None if act is None else act[obs],
            worker=workers[obs],
            crop=crops[obs],
            question=questions[obs],
            day=days[obs],
        )
        state.model = fit_logistic(design, tol=tol, max_iter=max_iter, init=state.model)
        seconds.append(time.perf_counter() - tick)
        trace.append(RefitTrace(iv.index, iv.start_hours, len(obs), n_pos, "ok", state.model.iterations, state.model.converged))

    for pos, iv in enumerate(intervals):
        state.interval = iv.index
        members = list(iv.members)
        if iv.warmup:
            for i in members:
                decisions[i] = entry(i, Verdict(Decision.RETAINED, Rule.WARM_UP))
                state.retained_per_task[recs[i].task] += 1
            kept = members
        else:
            probs = None
            if policy.mode is not Mode.NP and state.model is not None:
                m = np.asarray(members)
                probs = predict_many(
                    state.model,
                    crop_ids=crops[m],
                    worker_ids=workers[m],
                    question_ids=questions[m],
                    days=days[m],
                    t=None if act is None else act[m],
                )
            kept = []
            for k, i in enumerate(members):
                try:
                    v = decide(recs[i], state, policy, p=None if probs is None else probs[k])
                except ModelNotCalibrated:
                    v = Verdict(Decision.RETAINED, Rule.UNCALIBRATED)
                decisions[i] = entry(i, v)
                if v.decision is Decision.RETAINED:
                    kept.append(i)
                    state.retained_per_task[recs[i].task] += 1
        state.observe(kept, recs)
        if policy.mode is not Mode.NP and pos + 1 < len(intervals):
            refit(iv)

    return SimulationResult(policy, recs, decisions, intervals, trace, seconds)


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    prune_rate: float
    accuracy: float
    f1: float
    flipped_tasks: int
    n_tasks: int
    tied_counterfactual_tasks: int
    retained: int
    total_planned: int
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return dump_json(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def evaluate(
    retained: Sequence[RepeatRecord],
    counterfactual: dict[TaskKey, MajorityOutcome],
    total_planned: int,
) -> EvalReport:
    """Task-level agreement of retained-vote majorities with the unpruned majorities.

    Tasks whose unpruned vote is tied have no reference label and are left
    out of accuracy and F1. A retained tie or an emptied task counts as the
    opposite of the reference label.
    """
    kept = majority_outcomes(retained)
    tp = fp = fn = matches = n_tasks = ties = 0
    for task, ref in counterfactual.items():
        if ref.winner is Winner.TIE:
            ties += 1
            continue
        n_tasks += 1
        got = kept[task].winner if task in kept else Winner.TIE
        if got is Winner.TIE:
            got = Winner.NO if ref.winner is Winner.YES else Winner.YES
        matches += got is ref.winner
        if ref.winner is Winner.YES:
            tp += got is Winner.YES
            fn += got is not Winner.YES
        else:
            fp += got is Winner.YES
    denom = 2 * tp + fp + fn
    return EvalReport(
        prune_rate=1.0 - len(retained) / total_planned if total_planned else 0.0,
        accuracy=matches / n_tasks if n_tasks else 1.0,
        f1=2 * tp / denom if denom else 1.0,
        flipped_tasks=n_tasks - matches,
        n_tasks=n_tasks,
        tied_counterfactual_tasks=ties,
        retained=len(retained),
        total_planned=total_planned,
    )


def evaluate_simulation(result: SimulationResult, seed: int | None = None) -> EvalReport:
    report = evaluate(result.retained, majority_outcomes(result.records), len(result.records))
    report.metadata = {"policy": result.policy.to_dict(), "seed": seed}
    return report


# ---------------------------------------------------------------- sweeps


@dataclass(frozen=True)
class SweepRow:
    theta: float
    delta_hours: float
    mode: Mode
    prune_rate: float
    accuracy: float
    f1: float


def sweep_grid(thetas, deltas, modes) -> list[tuple[float, float, Mode]]:
    grid = []
    for mode in map(Mode, modes):
        for delta in deltas:
            for theta in ([0.0] if mode is Mode.NP else thetas):
                grid.append((float(theta), float(delta), mode))
    return grid


def _sweep_point(args) -> SweepRow:
    records, theta, delta, mode, base = args
    policy = PrunePolicy(
        theta=theta,
        delta_hours=delta,
        tau_hours=base.tau_hours,
        mode=mode,
        min_retained_per_task=base.min_retained_per_task,
        design=base.design,
        gap_minutes=base.gap_minutes,
    )
    rep = evaluate_simulation(run_pruning_simulation(records, policy))
    return SweepRow(theta, delta, mode, rep.prune_rate, rep.accuracy, rep.f1)


def run_sweep(records, thetas, deltas, modes, base: PrunePolicy | None = None, jobs: int | None = None) -> list[SweepRow]:
    """Evaluate a theta x delta x mode grid; rows follow grid order regardless of ``jobs``."""
    base = base or PrunePolicy()
    jobs = jobs or int(os.environ.get("MRPRUNE_JOBS", "1"))
    tasks = [(records, th, de, mo, base) for th, de, mo in sweep_grid(thetas, deltas, modes)]
    if jobs <= 1 or len(tasks) <= 1:
        return [_sweep_point(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
        return list(pool.map(_sweep_point, tasks))


# ---------------------------------------------------------------- CSV i/o


def _fmt_delta(x: float) -> str:
    return "inf" if math.isinf(x) else fmt_float(x)


def format_decisions(entries: Sequence[DecisionEntry]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DECISION_COLUMNS)
    for e in entries:
        w.writerow([e.crop_id, e.question_id, e.worker_id, e.scheduled_s, e.decision.value, e.rule.value, fmt_float(e.predicted_p)])
    return buf.getvalue()


def parse_decisions(text: str) -> list[DecisionEntry]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != DECISION_COLUMNS:
        raise ValueError(f"line 1: expected header {','.join(DECISION_COLUMNS)}")
    out = []
    for lineno, row in enumerate(reader, start=2):
        try:
            out.append(
                DecisionEntry(
                    row["crop_id"],
                    row["question_id"],
                    row["worker_id"],
                    int(row["scheduled_s"]),
                    Decision(row["decision"]),
                    Rule(row["rule"]),
                    float(row["predicted_p"]) if row["predicted_p"] else None,
                )
            )
        except (TypeError, ValueError) as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return out


def format_sweep(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([fmt_float(r.theta), _fmt_delta(r.delta_hours), r.mode.value, fmt_float(r.prune_rate), fmt_float(r.accuracy), fmt_float(r.f1)])
    return buf.getvalue()


def parse_sweep(text: str) -> list[SweepRow]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != SWEEP_COLUMNS:
        raise ValueError(f"line 1: expected header {','.join(SWEEP_COLUMNS)}")
    out = []
    for lineno, row in enumerate(reader, start=2):
        try:
            out.append(
                SweepRow(
                    float(row["theta"]),
                    float(row["delta_hours"]),
                    Mode(row["mode"]),
                    float(row["prune_rate"]),
                    float(row["accuracy"]),
                    float(row["f1"]),
                )
            )
        except (TypeError, ValueError) as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return out


def format_trace(trace: Sequence[RefitTrace]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for t in trace:
        w.writerow([t.interval, fmt_float(t.start_hours), t.n_observed, t.n_positive, t.status, t.iterations, int(t.converged)])
    return buf.getvalue()
