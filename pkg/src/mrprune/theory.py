"""Exact flip probability of a pruned majority vote in the stylized i.i.d. model.

Every task has ``n`` (odd) yes/no votes; each vote independently disagrees
with the counterfactual majority with probability ``p``. A classifier with
true-positive rate ``q_t`` and false-positive rate ``q_f`` then prunes votes
it believes are minority reports. The aggregated label flips when the
surviving minority is at least as large as the surviving majority (ties count
as errors), or when every vote is pruned.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple, Sequence

import numpy as np

from mrprune.io import fmt_float

MAX_CLOSED_FORM_N = 101
MAX_ENUMERATE_N = 13
CURVE_COLUMNS = ("n", "p", "theta", "q_t", "q_f", "r", "p_err", "accuracy")


@dataclass(frozen=True)
class ClassifierRates:
    q_t: float
    q_f: float

    def __post_init__(self):
        for name in ("q_t", "q_f"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.q_f > self.q_t + 1e-12:
            raise ValueError(f"false-positive rate {self.q_f} exceeds true-positive rate {self.q_t}")


@dataclass(frozen=True)
class TheoryConfig:
    n: int
    p: float

    def __post_init__(self):
        if self.n < 1 or self.n % 2 == 0:
            raise ValueError(f"theory requires odd n >= 1 (got n={self.n})")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must lie in [0, 1], got {self.p}")

    @property
    def majority_min(self) -> int:
        return self.n // 2 + 1


@dataclass(frozen=True)
class GaussianScoreModel:
    """Linear scores are N(mu1, sigma^2) for minority reports, N(mu0, sigma^2) otherwise."""

    mu1: float
    mu0: float
    sigma: float

    def __post_init__(self):
        if not self.mu1 > self.mu0:
            raise ValueError("mu1 must exceed mu0")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")


class OracleResult(NamedTuple):
    value: float
    stderr: float = 0.0


# ---------------------------------------------------------------- helpers


def _log_comb(n: int, k: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def _xlog(k: int, x: float) -> float:
    """log(x**k) with 0**0 = 1."""
    if k == 0:
        return 0.0
    if x <= 0.0:
        return -math.inf
    return k * math.log(x)


def _exp_sum(log_terms) -> float:
    return math.fsum(math.exp(t) for t in log_terms if t > -math.inf)


def norm_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def logit(x: float) -> float:
    x = min(max(x, 1e-300), 1.0 - 1e-16)
    return math.log(x) - math.log1p(-x)


# ---------------------------------------------------------------- closed form


def majority_mass(n: int, p: float) -> float:
    """Probability that at least n//2+1 of n votes agree (each agrees w.p. 1-p)."""
    h = n // 2 + 1
    return _exp_sum(_log_comb(n, k) + _xlog(k, 1 - p) + _xlog(n - k, p) for k in range(h, n + 1))


def p_err(cfg: TheoryConfig, rates: ClassifierRates) -> float:
    n, p = cfg.n, cfg.p
    if n > MAX_CLOSED_FORM_N:
        raise ValueError(f"n={n} exceeds the supported maximum {MAX_CLOSED_FORM_N}")
    qt, qf = rates.q_t, rates.q_f
    h = cfg.majority_min

    c = majority_mass(n, p)
    if c == 0.0:
        raise ValueError("no task can have a majority when p = 1")

    # surviving minority >= surviving majority, at least one minority vote survives
    s_terms = []
    for k in range(h, n):
        base = _log_comb(n, k) + _xlog(k, 1 - p) + _xlog(n - k, p)
        for i in range(0, n - k):
            tp = _log_comb(n - k, i) + _xlog(i, qt) + _xlog(n - k - i, 1 - qt)
            for j in range(2 * k - n + i, k + 1):
                fp = _log_comb(k, j) + _xlog(j, qf) + _xlog(k - j, 1 - qf)
                s_terms.append(base + tp + fp)
    # every vote pruned
    t_terms = [
        _log_comb(n, k) + _xlog(k, 1 - p) + _xlog(n - k, p) + _xlog(n - k, qt) + _xlog(k, qf)
        for k in range(h, n + 1)
    ]
    return (_exp_sum(s_terms) + _exp_sum(t_terms)) / c


def prune_rate(p: float, rates: ClassifierRates) -> float:
    return p * rates.q_t + (1.0 - p) * rates.q_f


def beta_gamma(n: int, k: int, rates: ClassifierRates) -> tuple[float, float]:
    """Conditional flip probabilities given k majority votes.

    beta: some minority vote survives and the pruned majority no longer
    outnumbers it. gamma: every vote is pruned.
    """
    h = n // 2 + 1
    if not h <= k <= n:
        raise ValueError(f"k must lie in [{h}, {n}], got {k}")
    qt, qf = rates.q_t, rates.q_f
    m = n - k
    terms = []
    for i in range(0, m):
        tp = _log_comb(m, i) + _xlog(i, qt) + _xlog(m - i, 1 - qt)
        for j in range(max(0, 2 * k - n + i), k + 1):
            terms.append(tp + _log_comb(k, j) + _xlog(j, qf) + _xlog(k - j, 1 - qf))
    beta = _exp_sum(terms)
    gamma = math.exp(_xlog(m, qt) + _xlog(k, qf))
    return beta, gamma


# ---------------------------------------------------------------- oracles


@lru_cache(maxsize=None)
def _vote_states(m: int):
    # row r of ``digits`` holds the base-4 digits of r: every joint state of m votes
    states = np.arange(4**m, dtype=np.int64)
    digits = np.stack([(states >> (2 * c)) & 3 for c in range(m)], axis=1).astype(np.int8)
    minority = (digits >= 2).sum(axis=1)
    min_pruned = (digits == 3).sum(axis=1)
    maj_pruned = (digits == 1).sum(axis=1)
    return digits, minority, min_pruned, maj_pruned


def _enumerate(n: int, p: float, qt: float, qf: float) -> float:
    # vote states: 0 majority kept, 1 majority pruned, 2 minority kept, 3 minority pruned
    factor = np.array([(1 - p) * (1 - qf), (1 - p) * qf, p * (1 - qt), p * qt])
    suffix_len = min(n, 10)
    prefix_len = n - suffix_len
    digits, suf_minority, suf_min_pruned, suf_maj_pruned = _vote_states(suffix_len)
    suffix_prob = np.ones(len(digits))
    for c in range(suffix_len):
        suffix_prob *= factor[digits[:, c]]

    h = n // 2 + 1
    flip_mass, cond_mass = [], []
    for prefix in range(4**prefix_len):
        pdig = [(prefix >> (2 * c)) & 3 for c in range(prefix_len)]
        prob = suffix_prob * math.prod(factor[d] for d in pdig)
        minority = suf_minority + sum(d >= 2 for d in pdig)
        min_pruned = suf_min_pruned + sum(d == 3 for d in pdig)
        maj_pruned = suf_maj_pruned + sum(d == 1 for d in pdig)
        cond = (n - minority) >= h
        rem_min = minority - min_pruned
        rem_maj = (n - minority) - maj_pruned
        flip = ((rem_min >= 1) & (rem_min >= rem_maj)) | ((rem_min + rem_maj) == 0)
        cond_mass.append(float(prob[cond].sum()))
        flip_mass.append(float(prob[cond & flip].sum()))
    return math.fsum(flip_mass) / math.fsum(cond_mass)


def _monte_carlo(n: int, p: float, qt: float, qf: float, samples: int, seed: int) -> OracleResult:
    rng = np.random.default_rng(seed)
    h = n // 2 + 1
    flips = 0
    accepted = 0
    batch = 200_000
    while accepted < samples:
        minority = rng.random((batch, n)) < p
        minority = minority[(n - minority.sum(axis=1)) >= h][: samples - accepted]
        u = rng.random(minority.shape)
        pruned = np.where(minority, u < qt, u < qf)
        rem_min = (minority & ~pruned).sum(axis=1)
        rem_maj = (~minority & ~pruned).sum(axis=1)
        flip = ((rem_min >= 1) & (rem_min >= rem_maj)) | ((rem_min + rem_maj) == 0)
        flips += int(flip.sum())
        accepted += len(minority)
    est = flips / accepted
    return OracleResult(est, math.sqrt(est * (1 - est) / accepted))


def p_err_oracle(
    cfg: TheoryConfig,
    rates: ClassifierRates,
    method: str = "enumerate",
    samples: int = 1_000_000,
    seed: int = 0,
) -> OracleResult:
    """Independent check of :func:`p_err` by exhaustive enumeration or simulation."""
    if method == "enumerate":
        if cfg.n > MAX_ENUMERATE_N:
            raise ValueError(f"enumeration supports n <= {MAX_ENUMERATE_N}, got {cfg.n}")
        return OracleResult(_enumerate(cfg.n, cfg.p, rates.q_t, rates.q_f))
    if method == "montecarlo":
        return _monte_carlo(cfg.n, cfg.p, rates.q_t, rates.q_f, samples, seed)
    raise ValueError(f"unknown oracle method {method!r}")


# ---------------------------------------------------------------- Gaussian scores


def gaussian_rates(model: GaussianScoreModel, theta: float) -> ClassifierRates:
    """Rates of the rule ``sigmoid(score) > theta`` under Gaussian class scores."""
    if not 0.0 < theta < 1.0:
        raise ValueError("theta must lie strictly inside (0, 1)")
    z = logit(theta)
    scale = model.sigma * math.sqrt(2.0)
    q_t = 0.5 * math.erfc((z - model.mu1) / scale)
    q_f = 0.5 * math.erfc((z - model.mu0) / scale)
    return ClassifierRates(q_t, q_f)


def gaussian_auc(model: GaussianScoreModel) -> float:
    return norm_cdf((model.mu1 - model.mu0) / (model.sigma * math.sqrt(2.0)))


# ---------------------------------------------------------------- curves


@dataclass(frozen=True)
class CurveRow:
    n: int
    p: float
    theta: float | None
    q_t: float
    q_f: float
    r: float
    p_err: float

    @property
    def accuracy(self) -> float:
        return 1.0 - self.p_err


def default_theta_grid(points: int = 99) -> list[float]:
    return [(i + 1) / (points + 1) for i in range(points)]


def accuracy_curve(
    n: int,
    p_grid: Sequence[float],
    rates: ClassifierRates | None = None,
    model: GaussianScoreModel | None = None,
    thetas: Sequence[float] | None = None,
) -> list[CurveRow]:
    """Accuracy after pruning over a grid of p (and of theta for a Gaussian model).

    Gaussian rows are ordered by p, then by decreasing theta, so the prune
    rate increases down each block.
    """
    if (rates is None) == (model is None):
        raise ValueError("give exactly one of rates or model")
    if not p_grid:
        raise ValueError("p grid is empty")
    rows = []
    if rates is not None:
        for p in p_grid:
            pe = p_err(TheoryConfig(n, p), rates)
            rows.append(CurveRow(n, p, None, rates.q_t, rates.q_f, prune_rate(p, rates), pe))
        return rows
    thetas = sorted(thetas if thetas is not None else default_theta_grid(), reverse=True)
    if not thetas:
        raise ValueError("theta grid is empty")
    for p in p_grid:
        for theta in thetas:
            rt = gaussian_rates(model, theta)
            pe = p_err(TheoryConfig(n, p), rt)
            rows.append(CurveRow(n, p, theta, rt.q_t, rt.q_f, prune_rate(p, rt), pe))
    return rows


def format_curve(rows: Sequence[CurveRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for r in rows:
        w.writerow(
            [
                r.n,
                fmt_float(r.p),
                fmt_float(r.theta),
                fmt_float(r.q_t),
                fmt_float(r.q_f),
                fmt_float(r.r),
                fmt_float(r.p_err),
                fmt_float(r.accuracy),
            ]
        )
    return buf.getvalue()


def parse_curve(text: str) -> list[CurveRow]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CURVE_COLUMNS:
        raise ValueError(f"line 1: expected header {','.join(CURVE_COLUMNS)}")
    rows = []
    for lineno, rec in enumerate(reader, start=2):
        try:
            rows.append(
                CurveRow(
                    int(rec["n"]),
                    float(rec["p"]),
                    float(rec["theta"]) if rec["theta"] else None,
                    float(rec["q_t"]),
                    float(rec["q_f"]),
                    float(rec["r"]),
                    float(rec["p_err"]),
                )
            )
        except (TypeError, ValueError) as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return rows
