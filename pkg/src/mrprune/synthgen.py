"""Synthetic annotation logs with crop ambiguity, worker skill and shift fatigue.

Errors are drawn against a latent true label; whether a vote becomes a
minority report is decided later by the realized majority.
"""

from __future__ import annotations

import bisect
import csv
import io
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.special import expit

from mrprune.annotation import RepeatRecord, Response, TaskKey, day_label
from mrprune.io import atomic_write_text

DAY_S = 86_400
# 2023-01-18 00:00 UTC
DEFAULT_START_EPOCH = 1_674_000_000


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid config: " + "; ".join(problems))


class PlanningError(ValueError):
    def __init__(self, message: str, shortfall: int = 0):
        self.shortfall = shortfall
        super().__init__(message)


@dataclass(frozen=True)
class GenConfig:
    n_crops: int = 200
    n_workers: int = 20
    n_questions: int = 1
    repeats: tuple[int, int] = (5, 12)
    sigma_u: float = 1.26
    sigma_v: float = 1.20
    intercept: float = -3.135
    beta_t1: float = math.log(0.399)
    beta_t2: float = math.log(1.428)
    question_effects: tuple[float, ...] = ()
    day_effects: tuple[float, ...] = ()
    cant_solve_prob: float = 0.0
    base_yes_rate: float = 0.185
    seed: int = 20230118
    days: int = 5
    shift_hours: float = 8.0
    shift_start_hours: tuple[float, float] = (6.0, 14.0)
    attendance: tuple[float, float] = (0.5, 1.0)
    slot_seconds: float = 30.0
    mean_duration_s: float = 0.91
    queue_window: int = 64
    start_epoch: int = DEFAULT_START_EPOCH
    tz_offset_hours: float = 0.0
    theory_check: bool = False

    def __post_init__(self):
        problems = []
        for name in ("n_crops", "n_workers", "n_questions", "days", "queue_window"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        lo, hi = self.repeats
        if not 1 <= lo <= hi <= 25:
            problems.append("repeats must satisfy 1 <= min <= max <= 25")
        for name in ("sigma_u", "sigma_v"):
            if not getattr(self, name) >= 0:
                problems.append(f"{name} must be >= 0")
        for name in ("intercept", "beta_t1", "beta_t2"):
            if not math.isfinite(getattr(self, name)):
                problems.append(f"{name} must be finite")
        if not all(math.isfinite(x) for x in self.question_effects + self.day_effects):
            problems.append("question_effects and day_effects must be finite")
        if self.question_effects and len(self.question_effects) != self.n_questions:
            problems.append("question_effects needs one entry per question")
        if not 0.0 <= self.cant_solve_prob < 1.0:
            problems.append("cant_solve_prob must lie in [0, 1)")
        if not 0.0 <= self.base_yes_rate <= 1.0:
            problems.append("base_yes_rate must lie in [0, 1]")
        if not 0 < self.shift_hours <= 24:
            problems.append("shift_hours must lie in (0, 24]")
        a, b = self.shift_start_hours
        if not 0 <= a <= b or b + self.shift_hours > 24:
            problems.append("shift_start_hours must satisfy 0 <= lo <= hi and hi + shift_hours <= 24")
        a, b = self.attendance
        if not 0 <= a <= b <= 1:
            problems.append("attendance must satisfy 0 <= lo <= hi <= 1")
        if not self.slot_seconds > 0:
            problems.append("slot_seconds must be positive")
        if not self.mean_duration_s > 0:
            problems.append("mean_duration_s must be positive")
        if problems:
            raise ConfigError(problems)

    def question_effect(self, k: int) -> float:
        return self.question_effects[k] if self.question_effects else 0.0

    def day_effect(self, d: int) -> float:
        return self.day_effects[d] if 0 <= d < len(self.day_effects) else 0.0


@dataclass(frozen=True)
class WorkerProfile:
    worker_id: str
    skill: float
    shifts: tuple[tuple[int, float], ...]  # (start timestamp, length in hours)


@dataclass(frozen=True)
class CropProfile:
    crop_id: str
    ambiguity: float
    true_labels: tuple[Response, ...]


@dataclass(frozen=True)
class Assignment:
    task: TaskKey
    worker_id: str
    scheduled: int


@dataclass
class SyntheticLog:
    config: GenConfig
    workers: list[WorkerProfile]
    crops: list[CropProfile]
    plan: list[Assignment]
    records: list[RepeatRecord] = field(repr=False)


def question_id(k: int) -> str:
    return f"q{k + 1}"


def error_probability(config: GenConfig, ambiguity: float, skill: float, t: float = 0.0, question: int = 0, day: int = 0):
    """Probability that a single vote contradicts the true label."""
    eta = (
        config.intercept
        + ambiguity
        + skill
        + config.beta_t1 * t
        + config.beta_t2 * np.square(t)
        + config.question_effect(question)
        + config.day_effect(day)
    )
    return expit(eta)


# ---------------------------------------------------------------- population


def sample_population(config: GenConfig, seed=None) -> tuple[list[WorkerProfile], list[CropProfile]]:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    skills = rng.normal(0.0, config.sigma_v, config.n_workers) if config.sigma_v > 0 else np.zeros(config.n_workers)
    ambig = rng.normal(0.0, config.sigma_u, config.n_crops) if config.sigma_u > 0 else np.zeros(config.n_crops)
    labels = rng.random((config.n_crops, config.n_questions)) < config.base_yes_rate

    wdigits = len(str(config.n_workers))
    workers = []
    lo_att, hi_att = config.attendance
    lo_start, hi_start = config.shift_start_hours
    for j in range(config.n_workers):
        rate = rng.uniform(lo_att, hi_att)
        attend = rng.random(config.days) < rate
        starts = rng.uniform(lo_start, hi_start, config.days)
        shifts = tuple(
            (config.start_epoch + d * DAY_S + int(round(starts[d] * 3600)), config.shift_hours)
            for d in range(config.days)
            if attend[d]
        )
        workers.append(WorkerProfile(f"w{j + 1:0{wdigits}d}", float(skills[j]), shifts))

    cdigits = len(str(config.n_crops))
    crops = [
        CropProfile(
            f"c{i + 1:0{cdigits}d}",
            float(ambig[i]),
            tuple(Response.YES if y else Response.NO for y in labels[i]),
        )
        for i in range(config.n_crops)
    ]
    return workers, crops


# ---------------------------------------------------------------- planning


def _worker_slots(config: GenConfig, workers: list[WorkerProfile]) -> tuple[np.ndarray, np.ndarray]:
    times, owners = [], []
    for w_idx, w in enumerate(workers):
        for start, length in w.shifts:
            count = int(length * 3600 // config.slot_seconds)
            times.append(start + np.round(np.arange(count) * config.slot_seconds).astype(np.int64))
            owners.append(np.full(count, w_idx, dtype=np.int64))
    if not times:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    t = np.concatenate(times)
    o = np.concatenate(owners)
    order = np.lexsort((o, t))
    return t[order], o[order]


def plan_assignments(config: GenConfig, workers: list[WorkerProfile], crops: list[CropProfile], seed=None) -> list[Assignment]:
    """Randomly match task repeats to worker time slots.

    Tasks are served from a queue: each active slot takes a random open task
    from the head window that its worker has not yet answered. Slots are
    thinned at random so the work spreads over the whole horizon.
    """
    rng = np.random.default_rng(seed)
    tasks = [TaskKey(c.crop_id, question_id(k)) for c in crops for k in range(config.n_questions)]
    lo, hi = config.repeats
    counts = rng.integers(lo, hi + 1, len(tasks))
    queue = rng.permutation(len(tasks))

    n_workers = len(workers)
    if counts.size and counts.max() > n_workers:
        short = int(np.sum(np.maximum(counts - n_workers, 0)))
        raise PlanningError(
            f"cannot draw {int(counts.max())} distinct workers from a pool of {n_workers}", shortfall=short
        )
    slot_t, slot_w = _worker_slots(config, workers)
    demand = int(counts.sum())
    if len(slot_t) < demand:
        raise PlanningError(
            f"insufficient shift capacity: {len(slot_t)} slots for {demand} repeats",
            shortfall=demand - len(slot_t),
        )

    keep = min(1.0, 1.1 * demand / max(len(slot_t), 1))
    while True:
        result = _fill_slots(rng, keep, slot_t, slot_w, queue, counts, config.queue_window)
        if isinstance(result, list):
            break
        if keep >= 1.0:
            raise PlanningError(f"could not place {result} repeats on distinct workers", shortfall=result)
        keep = min(1.0, keep * 1.25)

    plan = [Assignment(tasks[t], workers[w].worker_id, int(s)) for t, w, s in result]
    plan.sort(key=lambda a: (a.scheduled, a.worker_id, a.task))
    return plan


def _fill_slots(rng, keep, slot_t, slot_w, queue, counts, window):
    active = rng.random(len(slot_t)) < keep
    offsets = rng.integers(0, 1 << 30, len(slot_t))
    remaining = {int(t): int(counts[t]) for t in queue}
    used: dict[int, set] = {int(t): set() for t in queue}
    pending = [int(t) for t in queue]
    head = min(window, len(pending))
    pool = pending[:head]
    out = []
    left = int(counts.sum())
    for s in np.flatnonzero(active):
        if not left:
            break
        w = int(slot_w[s])
        size = len(pool)
        start = int(offsets[s]) % size
        for step in range(size):
            pos = (start + step) % size
            task = pool[pos]
            if w in used[task]:
                continue
            used[task].add(w)
            remaining[task] -= 1
            left -= 1
            out.append((task, w, slot_t[s]))
            if remaining[task] == 0:
                if head < len(pending):
                    pool[pos] = pending[head]
                    head += 1
                else:
                    pool.pop(pos)
            break
    return out if left == 0 else left


# ---------------------------------------------------------------- simulation


def elapsed_shift_hours(plan: list[Assignment], workers: list[WorkerProfile]) -> np.ndarray:
    """Hours since the start of the shift that hosts each assignment."""
    starts = {w.worker_id: [s for s, _ in w.shifts] for w in workers}
    out = np.empty(len(plan))
    for idx, a in enumerate(plan):
        try:
            ws = starts[a.worker_id]
        except KeyError:
            raise ValueError(f"assignment references unknown worker {a.worker_id}") from None
        pos = bisect.bisect_right(ws, a.scheduled) - 1
        if pos < 0:
            raise ValueError(f"assignment at {a.scheduled} precedes every shift of {a.worker_id}")
        out[idx] = (a.scheduled - ws[pos]) / 3600.0
    return out


def simulate_annotations(
    plan: list[Assignment],
    workers: list[WorkerProfile],
    crops: list[CropProfile],
    config: GenConfig,
    seed=None,
) -> list[RepeatRecord]:
    rng = np.random.default_rng(seed)
    skill = {w.worker_id: w.skill for w in workers}
    crop_by_id = {c.crop_id: c for c in crops}
    qindex = {question_id(k): k for k in range(config.n_questions)}

    n = len(plan)
    t = elapsed_shift_hours(plan, workers)
    u = np.empty(n)
    v = np.empty(n)
    qeff = np.empty(n)
    deff = np.empty(n)
    truth = []
    for idx, a in enumerate(plan):
        crop = crop_by_id.get(a.task.crop_id)
        if crop is None or a.task.question_id not in qindex or a.worker_id not in skill:
            raise ValueError(f"assignment references unknown profile: {a}")
        k = qindex[a.task.question_id]
        u[idx] = crop.ambiguity
        v[idx] = skill[a.worker_id]
        qeff[idx] = config.question_effect(k)
        local = a.scheduled + int(config.tz_offset_hours * 3600)
        deff[idx] = config.day_effect((local - config.start_epoch) // DAY_S)
        truth.append(crop.true_labels[k])

    eta = config.intercept + u + v + config.beta_t1 * t + config.beta_t2 * t * t + qeff + deff
    wrong = rng.random(n) < expit(eta)
    cant = rng.random(n) < config.cant_solve_prob
    shape = 2.0
    durations = rng.gamma(shape, config.mean_duration_s / shape, n)

    records = []
    for idx, a in enumerate(plan):
        if cant[idx]:
            resp = Response.CANT_SOLVE
        elif wrong[idx]:
            resp = Response.NO if truth[idx] is Response.YES else Response.YES
        else:
            resp = truth[idx]
        records.append(
            RepeatRecord(
                task=a.task,
                worker_id=a.worker_id,
                start_time=a.scheduled,
                duration=round(float(durations[idx]), 3),
                response=resp,
                day_label=day_label(a.scheduled, config.tz_offset_hours),
            )
        )
    return records


def generate(config: GenConfig) -> SyntheticLog:
    pop_seed, plan_seed, sim_seed = np.random.SeedSequence(config.seed).spawn(3)
    workers, crops = sample_population(config, pop_seed)
    plan = plan_assignments(config, workers, crops, plan_seed)
    records = simulate_annotations(plan, workers, crops, config, sim_seed)
    return SyntheticLog(config, workers, crops, plan, records)


# ---------------------------------------------------------------- config & sidecars

_ALIASES = {"I": "n_crops", "J": "n_workers", "K": "n_questions", "n": "repeats"}


def _parse_value(name: str, raw: str, default):
    raw = raw.strip()
    if name == "repeats" or name in ("shift_start_hours", "attendance"):
        cast = int if name == "repeats" else float
        if "-" in raw.lstrip("-") and name == "repeats":
            a, b = raw.split("-", 1)
            return (cast(a), cast(b))
        parts = [p for p in raw.replace(",", " ").split() if p]
        if len(parts) == 1:
            return (cast(parts[0]), cast(parts[0]))
        if len(parts) == 2:
            return (cast(parts[0]), cast(parts[1]))
        raise ValueError("expected one value or a 'lo-hi' / 'lo,hi' pair")
    if isinstance(default, tuple):
        return tuple(float(p) for p in raw.split(",") if p.strip())
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError("expected a boolean")
    if isinstance(default, int):
        return int(raw)
    return float(raw)


def parse_config(text: str) -> GenConfig:
    """Parse ``key = value`` lines (``#`` starts a comment) into a GenConfig."""
    defaults = {f.name: f.default for f in fields(GenConfig)}
    values = {}
    problems = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"line {lineno}: expected 'key = value'")
            continue
        key, raw = (s.strip() for s in line.split("=", 1))
        name = _ALIASES.get(key, key)
        if name not in defaults:
            problems.append(f"line {lineno}: unknown key {key!r}")
            continue
        try:
            values[name] = _parse_value(name, raw, defaults[name])
        except ValueError as exc:
            problems.append(f"line {lineno}: {key}: {exc}")
    try:
        config = GenConfig(**values)
    except ConfigError as exc:
        problems.extend(exc.problems)
    if problems:
        raise ConfigError(problems)
    return config


def read_config(path) -> GenConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def format_config(config: GenConfig) -> str:
    lines = []
    for f in fields(GenConfig):
        v = getattr(config, f.name)
        if f.name == "repeats":
            v = f"{v[0]}-{v[1]}"
        elif isinstance(v, tuple):
            v = ",".join(repr(float(x)) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def format_crop_truth(log: SyntheticLog) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["crop_id", "question_id", "true_label", "u_i"])
    for c in log.crops:
        for k, label in enumerate(c.true_labels):
            w.writerow([c.crop_id, question_id(k), label.value, repr(c.ambiguity)])
    return buf.getvalue()


def format_worker_truth(log: SyntheticLog) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["worker_id", "v_j"])
    for wk in log.workers:
        w.writerow([wk.worker_id, repr(wk.skill)])
    return buf.getvalue()


def write_truth(log: SyntheticLog, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    crops_path = out_dir / "truth_crops.csv"
    workers_path = out_dir / "truth_workers.csv"
    atomic_write_text(crops_path, format_crop_truth(log))
    atomic_write_text(workers_path, format_worker_truth(log))
    return crops_path, workers_path
