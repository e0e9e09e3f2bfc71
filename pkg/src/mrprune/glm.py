"""Penalized logistic regression for minority-report prediction.

Worker and crop "random effects" are per-level coefficients under a ridge
penalty, i.e. the posterior mode of a Gaussian random intercept. Question and
day are ordinary fixed effects with the first-seen level as reference.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.special import expit, gammaincc
from scipy.stats import rankdata

from mrprune.annotation import ActivitySession, RepeatRecord, activity_hours
from mrprune.io import atomic_write_text, dump_json

FACTORS = ("worker", "crop", "question", "day")


@dataclass(frozen=True)
class DesignSpec:
    include_activity: bool = False
    include_activity_squared: bool = False
    include_worker: bool = False
    include_crop: bool = False
    include_question: bool = True
    include_day: bool = True
    ridge_lambda_worker: float = 1.0
    ridge_lambda_crop: float = 1.0
    class_balanced: bool = False

    def __post_init__(self):
        if self.ridge_lambda_worker < 0 or self.ridge_lambda_crop < 0:
            raise ValueError("ridge penalties must be >= 0")

    @classmethod
    def ladder(cls, name: str, **overrides) -> "DesignSpec":
        """The five nested variants: base, a, aw, ac, awc."""
        try:
            flags = LADDER[name.lower()]
        except KeyError:
            raise ValueError(f"unknown model {name!r}; choose from {', '.join(LADDER)}") from None
        return cls(**{**flags, **overrides})

    def includes(self, factor: str) -> bool:
        return getattr(self, f"include_{factor}")

    def penalty(self, factor: str) -> float:
        return {"worker": self.ridge_lambda_worker, "crop": self.ridge_lambda_crop}.get(factor, 0.0)

    def nested_in(self, other: "DesignSpec") -> bool:
        flags = ("include_activity", "include_activity_squared") + tuple(f"include_{f}" for f in FACTORS)
        return all(getattr(other, f) or not getattr(self, f) for f in flags)


_ACT = {"include_activity": True, "include_activity_squared": True}
LADDER = {
    "base": {},
    "a": _ACT,
    "aw": {**_ACT, "include_worker": True},
    "ac": {**_ACT, "include_crop": True},
    "awc": {**_ACT, "include_worker": True, "include_crop": True},
}


@dataclass
class LabeledDesign:
    spec: DesignSpec
    y: np.ndarray
    weights: np.ndarray
    activity: np.ndarray | None = None
    factors: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.y)


def class_weights(y: np.ndarray) -> np.ndarray:
    """Inverse-frequency weights: each present class gets total weight N/2."""
    y = np.asarray(y)
    n = len(y)
    n_pos = int(y.sum())
    w = np.ones(n)
    if n_pos:
        w[y == 1] = n / (2.0 * n_pos)
    if n - n_pos:
        w[y == 0] = n / (2.0 * (n - n_pos))
    return w


def make_design(
    y,
    spec: DesignSpec,
    activity=None,
    worker=None,
    crop=None,
    question=None,
    day=None,
) -> LabeledDesign:
    y = np.asarray(y, dtype=float)
    if y.size and not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be binary")
    if spec.include_activity or spec.include_activity_squared:
        if activity is None:
            raise ValueError("design requests activity covariates but no sessions were given")
        activity = np.asarray(activity, dtype=float)
        if activity.shape != y.shape:
            raise ValueError("activity must align with labels")
    else:
        activity = None
    factors = {}
    for name, values in zip(FACTORS, (worker, crop, question, day)):
        if not spec.includes(name):
            continue
        if values is None:
            raise ValueError(f"design requests {name} effects but no {name} ids were given")
        arr = np.asarray(values, dtype=str)
        if arr.shape != y.shape:
            raise ValueError(f"{name} ids must align with labels")
        factors[name] = arr
    weights = class_weights(y) if spec.class_balanced else np.ones(len(y))
    return LabeledDesign(spec, y, weights, activity, factors)


def build_design(
    records: Sequence[RepeatRecord],
    flags,
    spec: DesignSpec,
    sessions: Sequence[ActivitySession] | None = None,
) -> LabeledDesign:
    flags = np.asarray(flags, dtype=bool)
    if len(flags) != len(records):
        raise ValueError("flags must align with records")
    activity = None
    if spec.include_activity or spec.include_activity_squared:
        if sessions is None:
            raise ValueError("design requests activity covariates but no sessions were given")
        activity = activity_hours(sessions, len(records))
    return make_design(
        flags.astype(float),
        spec,
        activity=activity,
        worker=[r.worker_id for r in records],
        crop=[r.crop_id for r in records],
        question=[r.question_id for r in records],
        day=[r.day_label for r in records],
    )


# ---------------------------------------------------------------- design matrix


@dataclass(frozen=True)
class Column:
    block: str
    level: str | None = None


def design_matrix(design: LabeledDesign) -> tuple[sp.csr_matrix, np.ndarray, list[Column]]:
    """Sparse model matrix, per-column ridge penalty and column labels."""
    n = len(design)
    spec = design.spec
    rows, cols, vals = [np.arange(n)], [np.zeros(n, dtype=np.int64)], [np.ones(n)]
    layout = [Column("intercept")]
    penalty = [0.0]
    for block, flag, power in (("t1", spec.include_activity, 1), ("t2", spec.include_activity_squared, 2)):
        if flag:
            rows.append(np.arange(n))
            cols.append(np.full(n, len(layout), dtype=np.int64))
            vals.append(design.activity**power)
            layout.append(Column(block))
            penalty.append(0.0)
    for name in FACTORS:
        if name not in design.factors or n == 0:
            continue
        values = design.factors[name]
        levels, inverse = np.unique(values, return_inverse=True)
        lam = spec.penalty(name)
        keep = np.ones(len(levels), dtype=bool)
        if lam == 0.0:
            keep[inverse[0]] = False  # first-seen level is the reference
        col_of = np.full(len(levels), -1, dtype=np.int64)
        col_of[keep] = len(layout) + np.arange(keep.sum())
        layout.extend(Column(name, str(lv)) for lv in levels[keep])
        penalty.extend([lam] * int(keep.sum()))
        c = col_of[inverse]
        mask = c >= 0
        rows.append(np.flatnonzero(mask))
        cols.append(c[mask])
        vals.append(np.ones(int(mask.sum())))
    X = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, len(layout))
    )
    return X, np.asarray(penalty), layout


def penalized_objective(coef, X, y, w, penalty) -> float:
    eta = X @ coef
    return float(np.dot(w, y * eta - np.logaddexp(0.0, eta)) - 0.5 * np.dot(penalty, coef * coef))


def penalized_gradient(coef, X, y, w, penalty) -> np.ndarray:
    mu = expit(X @ coef)
    return X.T @ (w * (y - mu)) - penalty * coef


def _log_likelihood(eta, y) -> float:
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def _newton_direction(H: sp.csr_matrix, g: np.ndarray, elim: np.ndarray | None) -> np.ndarray:
    # eliminating a one-hot block (diagonal sub-Hessian) leaves a small dense Schur system
    if elim is not None and elim.size:
        rest = np.setdiff1d(np.arange(H.shape[0]), elim)
        H = H.tocsc()
        d = H[elim][:, elim].diagonal()
        if np.all(d > 1e-12):
            H_re = H[rest][:, elim]
            H_rr = H[rest][:, rest].toarray()
            scaled = H_re.multiply(1.0 / d).tocsr()
            S = H_rr - (scaled @ H_re.T).toarray()
            rhs = g[rest] - scaled @ g[elim]
            x_rest = _dense_solve(S, rhs)
            x = np.empty_like(g)
            x[rest] = x_rest
            x[elim] = (g[elim] - H_re.T @ x_rest) / d
            return x
    return _dense_solve(H.toarray(), g)


def _dense_solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        return scipy.linalg.solve(A, b, assume_a="pos")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        return scipy.linalg.lstsq(A, b)[0]


# ---------------------------------------------------------------- fitted model


@dataclass(frozen=True)
class FittedModel:
    intercept: float
    beta_t1: float = 0.0
    beta_t2: float = 0.0
    worker_effects: dict = field(default_factory=dict)
    crop_effects: dict = field(default_factory=dict)
    question_effects: dict = field(default_factory=dict)
    day_effects: dict = field(default_factory=dict)
    spec: DesignSpec = field(default_factory=DesignSpec)
    log_likelihood: float = 0.0
    null_log_likelihood: float = 0.0
    converged: bool = True
    iterations: int = 0
    n_obs: int = 0
    n_params: int = 1
    objective_path: tuple = ()

    def effects(self, factor: str) -> dict:
        return getattr(self, f"{factor}_effects")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objective_path"] = list(self.objective_path)
        return {
            "coefficients": {k: d[k] for k in ("intercept", "beta_t1", "beta_t2")},
            "effects": {f: dict(sorted(d[f"{f}_effects"].items())) for f in FACTORS if self.spec.includes(f)},
            "metadata": {
                "spec": d["spec"],
                **{k: d[k] for k in ("log_likelihood", "null_log_likelihood", "converged", "iterations", "n_obs", "n_params", "objective_path")},
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedModel":
        meta = dict(d["metadata"])
        spec = DesignSpec(**meta.pop("spec"))
        meta["objective_path"] = tuple(meta.get("objective_path", ()))
        return cls(
            **d["coefficients"],
            **{f"{f}_effects": dict(d["effects"].get(f, {})) for f in FACTORS},
            spec=spec,
            **meta,
        )

    def to_json(self) -> str:
        return dump_json(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "FittedModel":
        return cls.from_dict(json.loads(text))


def write_model(model: FittedModel, path) -> None:
    atomic_write_text(path, model.to_json())


def read_model(path) -> FittedModel:
    return FittedModel.from_json(Path(path).read_text(encoding="utf-8"))


def _initial_coef(init: FittedModel | None, layout: list[Column]) -> np.ndarray:
    coef = np.zeros(len(layout))
    if init is None:
        return coef
    for idx, col in enumerate(layout):
        if col.block == "intercept":
            coef[idx] = init.intercept
        elif col.block == "t1":
            coef[idx] = init.beta_t1
        elif col.block == "t2":
            coef[idx] = init.beta_t2
        else:
            coef[idx] = init.effects(col.block).get(col.level, 0.0)
    return coef


def fit_logistic(design: LabeledDesign, tol: float = 1e-8, max_iter: int = 100, init: FittedModel | None = None) -> FittedModel:
    """Maximize the weighted, ridge-penalized log-likelihood by damped Newton (IRLS).

    Each step is halved up to 10 times until the penalized objective does not
    decrease beyond rounding noise. Non-convergence is reported on the model, not raised.
    """
    if len(design) == 0:
        raise ValueError("cannot fit a model to zero rows")
    if not tol > 0:
        raise ValueError("tol must be positive")
    X, penalty, layout = design_matrix(design)
    y, w = design.y, design.weights
    blocks = [np.array([i for i, c in enumerate(layout) if c.block == f]) for f in ("crop", "worker")]
    blocks = [b for b in blocks if b.size]
    elim = max(blocks, key=len) if blocks else None

    coef = _initial_coef(init, layout)
    obj = penalized_objective(coef, X, y, w, penalty)
    path = [obj]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = expit(X @ coef)
        g = X.T @ (w * (y - mu)) - penalty * coef
        H = (X.T @ sp.diags(w * mu * (1.0 - mu)) @ X + sp.diags(penalty)).tocsr()
        step = _newton_direction(H, g, elim)
        if not np.all(np.isfinite(step)):
            break
        if np.max(np.abs(step)) < tol:
            coef = coef + step
            obj = penalized_objective(coef, X, y, w, penalty)
            path.append(obj)
            converged = True
            break
        # near the optimum the objective change drops below rounding noise
        slack = 64 * np.finfo(float).eps * max(1.0, abs(obj))
        alpha = 1.0
        for _ in range(11):
            trial = coef + alpha * step
            trial_obj = penalized_objective(trial, X, y, w, penalty)
            if trial_obj >= obj - slack:
                break
            alpha *= 0.5
        else:
            break
        change = np.max(np.abs(trial - coef))
        coef, obj = trial, trial_obj
        path.append(obj)
        if alpha == 1.0 and change < tol:
            converged = True
            break

    eta = X @ coef
    ll = _log_likelihood(eta, y)
    ybar = float(y.mean())
    null_ll = 0.0 if ybar in (0.0, 1.0) else float(len(y) * (ybar * math.log(ybar) + (1 - ybar) * math.log1p(-ybar)))

    coefs = {"intercept": float(coef[0]), "beta_t1": 0.0, "beta_t2": 0.0}
    effects: dict[str, dict] = {f: {} for f in FACTORS}
    for name, values in design.factors.items():
        for lv in np.unique(values):
            effects[name][str(lv)] = 0.0
    for idx, col in enumerate(layout):
        if col.block in ("t1", "t2"):
            coefs[f"beta_{col.block}"] = float(coef[idx])
        elif col.block in effects:
            effects[col.block][col.level] = float(coef[idx])
    return FittedModel(
        **coefs,
        **{f"{f}_effects": effects[f] for f in FACTORS},
        spec=design.spec,
        log_likelihood=ll,
        null_log_likelihood=null_ll,
        converged=converged,
        iterations=it,
        n_obs=len(y),
        n_params=len(layout),
        objective_path=tuple(path),
    )


# ---------------------------------------------------------------- prediction & metrics


def predict(model: FittedModel, crop_id=None, worker_id=None, question_id=None, day=None, t: float = 0.0) -> float:
    """Probability of a minority report; unseen identifiers contribute 0."""
    eta = (
        model.intercept
        + model.beta_t1 * t
        + model.beta_t2 * t * t
        + model.crop_effects.get(crop_id, 0.0)
        + model.worker_effects.get(worker_id, 0.0)
        + model.question_effects.get(question_id, 0.0)
        + model.day_effects.get(day, 0.0)
    )
    return float(expit(eta))


def linear_predictor(model: FittedModel, crop_ids=None, worker_ids=None, question_ids=None, days=None, t=None) -> np.ndarray:
    n = len(next(x for x in (crop_ids, worker_ids, question_ids, days, t) if x is not None))
    eta = np.full(n, model.intercept)
    if t is not None:
        t = np.asarray(t, dtype=float)
        eta += model.beta_t1 * t + model.beta_t2 * t * t
    for ids, eff in (
        (crop_ids, model.crop_effects),
        (worker_ids, model.worker_effects),
        (question_ids, model.question_effects),
        (days, model.day_effects),
    ):
        if ids is not None and eff:
            eta += np.fromiter((eff.get(i, 0.0) for i in ids), float, count=n)
    return eta


def predict_many(model: FittedModel, crop_ids=None, worker_ids=None, question_ids=None, days=None, t=None) -> np.ndarray:
    return expit(linear_predictor(model, crop_ids, worker_ids, question_ids, days, t))


def predict_design(model: FittedModel, design: LabeledDesign) -> np.ndarray:
    f = design.factors
    return predict_many(
        model,
        crop_ids=f.get("crop"),
        worker_ids=f.get("worker"),
        question_ids=f.get("question"),
        days=f.get("day"),
        t=design.activity if design.activity is not None else np.zeros(len(design)),
    )


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores earn half credit."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def pseudo_r2(model: FittedModel) -> float:
    if model.null_log_likelihood == 0.0:
        raise ValueError("null log-likelihood is 0; pseudo-R2 undefined")
    return 1.0 - model.log_likelihood / model.null_log_likelihood


def likelihood_ratio_test(nested: FittedModel, full: FittedModel, dof_delta: int, tol: float = 1e-6) -> tuple[float, float]:
    if dof_delta < 1:
        raise ValueError("dof_delta must be >= 1")
    if not nested.spec.nested_in(full.spec):
        raise ValueError("nested model's design is not contained in the full model's")
    stat = 2.0 * (full.log_likelihood - nested.log_likelihood)
    if stat < -2.0 * tol:
        raise ValueError("non-nested fit: full model has lower likelihood")
    stat = max(stat, 0.0)
    return stat, float(gammaincc(dof_delta / 2.0, stat / 2.0))

