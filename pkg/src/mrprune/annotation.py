"""Annotation logs, majority votes, minority reports and residual diagnostics."""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from enum import Enum
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

LOG_COLUMNS = (
    "task_id",
    "crop_id",
    "question_id",
    "worker_id",
    "start_time_s",
    "duration_s",
    "response",
    "day",
)


class LogFormatError(ValueError):
    """Malformed annotation-log input; the message carries the line number."""


class Response(str, Enum):
    YES = "yes"
    NO = "no"
    CANT_SOLVE = "cant_solve"


class Winner(str, Enum):
    YES = "yes"
    NO = "no"
    TIE = "tie"


class TaskKey(NamedTuple):
    crop_id: str
    question_id: str

    @property
    def task_id(self) -> str:
        return f"{self.crop_id}:{self.question_id}"


@dataclass(frozen=True)
class RepeatRecord:
    task: TaskKey
    worker_id: str
    start_time: int
    duration: float
    response: Response
    day_label: str

    def __post_init__(self):
        if not self.duration >= 0:
            raise ValueError(f"duration must be >= 0, got {self.duration}")
        if not math.isfinite(self.start_time):
            raise ValueError("start_time must be finite")

    @property
    def crop_id(self) -> str:
        return self.task.crop_id

    @property
    def question_id(self) -> str:
        return self.task.question_id


@dataclass(frozen=True)
class MajorityOutcome:
    task: TaskKey
    yes_count: int
    no_count: int
    cant_solve_count: int

    @property
    def winner(self) -> Winner:
        if self.yes_count > self.no_count:
            return Winner.YES
        if self.no_count > self.yes_count:
            return Winner.NO
        return Winner.TIE

    @property
    def total(self) -> int:
        return self.yes_count + self.no_count + self.cant_solve_count


@dataclass(frozen=True)
class ActivitySession:
    worker_id: str
    session_start: int
    record_indices: tuple[int, ...]
    activity_hours: tuple[float, ...]


def day_label(start_time: int, tz_offset_hours: float = 0.0) -> str:
    tz = timezone(timedelta(hours=tz_offset_hours))
    return datetime.fromtimestamp(start_time, tz).date().isoformat()


def majority_vote(records: Sequence[RepeatRecord]) -> MajorityOutcome:
    """Tally one task's votes. ``CantSolve`` is counted but never wins."""
    if not records:
        raise ValueError("no votes")
    task = records[0].task
    counts = {r: 0 for r in Response}
    for rec in records:
        if rec.task != task:
            raise ValueError("heterogeneous task")
        counts[rec.response] += 1
    return MajorityOutcome(task, counts[Response.YES], counts[Response.NO], counts[Response.CANT_SOLVE])


def group_by_task(records: Iterable[RepeatRecord]) -> dict[TaskKey, list[RepeatRecord]]:
    groups: dict[TaskKey, list[RepeatRecord]] = defaultdict(list)
    for rec in records:
        groups[rec.task].append(rec)
    return dict(groups)


def majority_outcomes(records: Iterable[RepeatRecord]) -> dict[TaskKey, MajorityOutcome]:
    return {task: majority_vote(recs) for task, recs in group_by_task(records).items()}


def is_minority(response: Response, winner: Winner) -> bool:
    # a tie has no majority, so every yes/no vote counts against it
    if response is Response.CANT_SOLVE or winner is Winner.TIE:
        return True
    return response.value != winner.value


def flag_minorities(
    records: Sequence[RepeatRecord], outcomes: dict[TaskKey, MajorityOutcome]
) -> np.ndarray:
    """Boolean mask aligned with ``records``: True marks a minority report."""
    flags = np.zeros(len(records), dtype=bool)
    for idx, rec in enumerate(records):
        try:
            outcome = outcomes[rec.task]
        except KeyError:
            raise KeyError(f"no majority outcome for task {rec.task.task_id}") from None
        flags[idx] = is_minority(rec.response, outcome.winner)
    return flags


def sessionize(records: Sequence[RepeatRecord], gap_threshold: float = 10.0) -> list[ActivitySession]:
    """Split each worker's records into continuous-activity sessions.

    A new session starts when the gap between consecutive start times exceeds
    ``gap_threshold`` minutes. Activity time is reported in hours since the
    session's first record.
    """
    if not gap_threshold > 0:
        raise ValueError("gap_threshold must be positive")
    gap_s = gap_threshold * 60.0
    by_worker: dict[str, list[int]] = defaultdict(list)
    for idx, rec in enumerate(records):
        by_worker[rec.worker_id].append(idx)

    sessions = []
    for worker in sorted(by_worker):
        order = sorted(by_worker[worker], key=lambda i: (records[i].start_time, i))
        current: list[int] = []
        for idx in order:
            if current and records[idx].start_time - records[current[-1]].start_time > gap_s:
                sessions.append(_close_session(worker, current, records))
                current = []
            current.append(idx)
        if current:
            sessions.append(_close_session(worker, current, records))
    return sessions


def _close_session(worker: str, members: list[int], records: Sequence[RepeatRecord]) -> ActivitySession:
    start = records[members[0]].start_time
    hours = tuple((records[i].start_time - start) / 3600.0 for i in members)
    return ActivitySession(worker, start, tuple(members), hours)


def activity_hours(sessions: Sequence[ActivitySession], n_records: int) -> np.ndarray:
    """Per-record activity time (hours), aligned with the sessionized records."""
    out = np.full(n_records, np.nan)
    for s in sessions:
        out[list(s.record_indices)] = s.activity_hours
    if np.isnan(out).any():
        raise ValueError("sessions do not cover every record")
    return out


def disagreement_rates(
    records: Sequence[RepeatRecord], flags: Sequence[bool], group_by: str = "worker"
) -> dict:
    """Minority-report rate per worker, crop, or hour of day (UTC)."""
    if len(flags) != len(records):
        raise ValueError("flags must align with records")
    keyfuncs = {
        "worker": lambda r: r.worker_id,
        "crop": lambda r: r.crop_id,
        "hour": lambda r: (r.start_time // 3600) % 24,
    }
    try:
        key = keyfuncs[group_by]
    except KeyError:
        raise ValueError(f"group_by must be one of {sorted(keyfuncs)}") from None
    minority: dict = defaultdict(int)
    total: dict = defaultdict(int)
    for rec, flag in zip(records, flags):
        k = key(rec)
        total[k] += 1
        minority[k] += bool(flag)
    return {k: minority[k] / total[k] for k in sorted(total)}


def durbin_watson(residuals: Sequence[float]) -> float:
    e = np.asarray(residuals, dtype=float)
    if e.size < 2:
        raise ValueError("need at least 2 residuals")
    denom = float(np.dot(e, e))
    if denom == 0.0:
        raise ValueError("degenerate residuals")
    return float(np.sum(np.diff(e) ** 2) / denom)


def dispersion_ratio(residuals: Sequence[float], residual_dof: int) -> float:
    if residual_dof < 1:
        raise ValueError("residual_dof must be >= 1")
    e = np.asarray(residuals, dtype=float)
    return float(np.dot(e, e) / residual_dof)


def deviance_residuals(y, mu) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    mu = np.clip(np.asarray(mu, dtype=float), 1e-300, 1 - 1e-16)
    ll = np.where(y > 0, np.log(mu), np.log1p(-mu))
    return np.sign(y - mu) * np.sqrt(-2.0 * ll)


def pearson_residuals(y, mu) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    return (y - mu) / np.sqrt(mu * (1.0 - mu))


# ---------------------------------------------------------------- CSV i/o


def _sort_key(rec: RepeatRecord):
    return (rec.crop_id, rec.question_id, rec.start_time, rec.worker_id)


def format_log(records: Iterable[RepeatRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_COLUMNS)
    for rec in sorted(records, key=_sort_key):
        writer.writerow(
            [
                rec.task.task_id,
                rec.crop_id,
                rec.question_id,
                rec.worker_id,
                rec.start_time,
                repr(float(rec.duration)),
                rec.response.value,
                rec.day_label,
            ]
        )
    return buf.getvalue()


def write_log(records: Iterable[RepeatRecord], path) -> None:
    from mrprune.io import atomic_write_text

    atomic_write_text(path, format_log(records))


def parse_log(text: str) -> list[RepeatRecord]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise LogFormatError("line 1: empty file, expected header") from None
    missing = [c for c in LOG_COLUMNS if c not in header]
    if missing:
        raise LogFormatError(f"line 1: header missing columns {missing}")
    col = {name: header.index(name) for name in LOG_COLUMNS}
    records = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise LogFormatError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            start = int(row[col["start_time_s"]])
            duration = float(row[col["duration_s"]])
            response = Response(row[col["response"]].strip().lower())
            rec = RepeatRecord(
                task=TaskKey(row[col["crop_id"]], row[col["question_id"]]),
                worker_id=row[col["worker_id"]],
                start_time=start,
                duration=duration,
                response=response,
                day_label=row[col["day"]],
            )
        except ValueError as exc:
            raise LogFormatError(f"line {lineno}: {exc}") from None
        if row[col["task_id"]] != rec.task.task_id:
            raise LogFormatError(f"line {lineno}: task_id {row[col['task_id']]!r} does not match {rec.task.task_id!r}")
        records.append(rec)
    return records


def read_log(path) -> list[RepeatRecord]:
    return parse_log(Path(path).read_text(encoding="utf-8"))
