"""Evaluation measures: R², Spearman rank correlation, Matthews correlation per dichotomy.

Also the quintile confusion matrix, the across-period evaluation grid, human rating
aggregation and bootstrap error bars.

Degenerate MCC denominators (a class never predicted or never present) give 0.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pandas as pd
from scipy import stats
from sklearn.metrics import confusion_matrix as sk_confusion_matrix
from sklearn.metrics import r2_score
from sklearn.model_selection import KFold

from .errors import DataError, NumericError
from .head import DEFAULT_FOLDS, DEFAULT_LAMBDA_GRID, QUINTILES, fit_ridge, predict, quintile_assign

logger = logging.getLogger(__name__)

DICHOTOMIES = ("1|2-5", "1-2|3-5", "1-3|4-5", "1-4|5")


def _pair(y_true, y_pred, minimum: int = 2) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(y_true, dtype=np.float64).reshape(-1)
    b = np.asarray(y_pred, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise DataError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < minimum:
        raise DataError(f"need at least {minimum} values, got {a.size}")
    return a, b


def r2(y_true, y_pred) -> float:
    """1 - SS_res / SS_tot."""
    a, b = _pair(y_true, y_pred)
    if np.ptp(a) == 0.0:
        raise NumericError("R² is undefined for a constant target")
    return float(r2_score(a, b))


def spearman(y_true, y_pred) -> float:
    """Pearson correlation of mid-ranks."""
    a, b = _pair(y_true, y_pred)
    if np.ptp(a) == 0.0 or np.ptp(b) == 0.0:
        raise NumericError("rank correlation is undefined for a constant input")
    return float(stats.spearmanr(a, b).statistic)


def mcc(tp: int, fp: int, fn: int, tn: int) -> float:
    if tp + fp + fn + tn <= 0:
        raise DataError("MCC needs at least one observation")
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return float((tp * tn - fp * fn) / math.sqrt(denom))


def binary_counts(truth: np.ndarray, pred: np.ndarray) -> tuple[int, int, int, int]:
    truth = np.asarray(truth, dtype=bool)
    pred = np.asarray(pred, dtype=bool)
    tp = int(np.sum(truth & pred))
    fp = int(np.sum(~truth & pred))
    fn = int(np.sum(truth & ~pred))
    tn = int(np.sum(~truth & ~pred))
    return tp, fp, fn, tn


def dichotomy_mcc(true_groups, pred_groups) -> tuple[float, float, float, float]:
    """MCC of {1..t} versus {t+1..5} for t = 1..4; the positive class is the upper side."""
    t = np.asarray(true_groups).reshape(-1)
    p = np.asarray(pred_groups).reshape(-1)
    if t.shape != p.shape:
        raise DataError(f"length mismatch: {t.size} vs {p.size}")
    return tuple(mcc(*binary_counts(t > cut, p > cut)) for cut in range(1, QUINTILES))


def confusion(true_groups, pred_groups) -> np.ndarray:
    """5×5 counts; rows are true groups, columns predicted."""
    return sk_confusion_matrix(np.asarray(true_groups), np.asarray(pred_groups), labels=list(range(1, QUINTILES + 1)))


@dataclass
class EvalReport:
    r2: float
    spearman: float
    confusion: np.ndarray
    dichotomy_mcc: tuple[float, ...]
    n: int = 0

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "r2": self.r2,
            "spearman": self.spearman,
            "confusion": self.confusion.astype(int).tolist(),
            "dichotomy_mcc": dict(zip(DICHOTOMIES, self.dichotomy_mcc)),
        }

    @classmethod
    def from_json(cls, data: dict) -> "EvalReport":
        try:
            return cls(
                r2=float(data["r2"]),
                spearman=float(data["spearman"]),
                confusion=np.asarray(data["confusion"], dtype=np.int64),
                dichotomy_mcc=tuple(float(data["dichotomy_mcc"][k]) for k in DICHOTOMIES),
                n=int(data.get("n", 0)),
            )
        except (KeyError, TypeError) as e:
            raise DataError(f"malformed evaluation report: {e}") from e

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        return path

    def write_confusion(self, path: str | Path) -> Path:
        path = Path(path)
        labels = [f"q{g}" for g in range(1, QUINTILES + 1)]
        pd.DataFrame(self.confusion, index=pd.Index(labels, name="true"), columns=labels).to_csv(path)
        return path


def evaluate(y_true, y_pred) -> EvalReport:
    """Full report: R², Spearman, quintile confusion matrix and the four dichotomy MCCs."""
    a, b = _pair(y_true, y_pred, minimum=QUINTILES)
    tg, pg = quintile_assign(a), quintile_assign(b)
    return EvalReport(
        r2=r2(a, b),
        spearman=spearman(a, b),
        confusion=confusion(tg, pg),
        dichotomy_mcc=dichotomy_mcc(tg, pg),
        n=int(a.size),
    )


# --- across survey phases ---------------------------------------------------------


@dataclass
class CrossPeriodGrid:
    phases: tuple[str, ...]
    r2: dict[tuple[str, str], float] = field(default_factory=dict)
    spearman: dict[tuple[str, str], float] = field(default_factory=dict)

    def to_json(self) -> dict:
        cells = [
            {"train": tr, "test": te, "r2": self.r2[(tr, te)], "spearman": self.spearman[(tr, te)]}
            for tr in self.phases
            for te in self.phases
        ]
        return {"phases": list(self.phases), "cells": cells}

    def frame(self, metric: str) -> pd.DataFrame:
        values = self.r2 if metric == "r2" else self.spearman
        data = [[values[(tr, te)] for te in self.phases] for tr in self.phases]
        return pd.DataFrame(data, index=pd.Index(self.phases, name="train"), columns=list(self.phases))


def _out_of_fold(x: np.ndarray, y: np.ndarray, folds: int, lambda_grid, seed: int) -> np.ndarray:
    if x.shape[0] < folds:
        raise DataError(f"phase has {x.shape[0]} sites, fewer than {folds} folds")
    pred = np.empty_like(y)
    for i, (tr, va) in enumerate(KFold(n_splits=folds, shuffle=True, random_state=seed).split(x)):
        model = fit_ridge(x[tr], y[tr], lambda_grid, folds, seed=seed + i)
        pred[va] = predict(model, x[va])
    return pred


def cross_period_eval(
    features,
    wealth,
    phases: Sequence[str],
    phase_order: Sequence[str] | None = None,
    folds: int = DEFAULT_FOLDS,
    lambda_grid: Sequence[float] = DEFAULT_LAMBDA_GRID,
    seed: int = 0,
) -> CrossPeriodGrid:
    """Train-phase × test-phase grid of R² and rank correlation.

    Off-diagonal cells fit the head on every site of the training phase and score the
    test phase. Diagonal cells pool the out-of-fold predictions of a K-fold split inside
    the phase.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(wealth, dtype=np.float64)
    tags = np.asarray([str(p) for p in phases])
    if not (x.shape[0] == y.size == tags.size):
        raise DataError("features, wealth and phases must have one entry per site")
    present = list(dict.fromkeys(tags.tolist()))
    order = tuple(phase_order) if phase_order else tuple(sorted(present))
    missing = [p for p in order if p not in present]
    if missing:
        raise DataError(f"phase(s) absent from the data: {missing}; present: {sorted(present)}")

    grid = CrossPeriodGrid(order)
    for tr in order:
        mtr = tags == tr
        model = None
        for te in order:
            mte = tags == te
            if tr == te:
                pred = _out_of_fold(x[mtr], y[mtr], folds, lambda_grid, seed)
            else:
                if model is None:
                    model = fit_ridge(x[mtr], y[mtr], lambda_grid, folds, seed=seed)
                pred = predict(model, x[mte])
            grid.r2[(tr, te)] = r2(y[mte], pred)
            grid.spearman[(tr, te)] = spearman(y[mte], pred)
            logger.debug("cross-period %s -> %s: r2 %.4f", tr, te, grid.r2[(tr, te)])
    return grid


# --- human ratings ----------------------------------------------------------------


def aggregate_ratings(ratings: pd.DataFrame) -> pd.Series:
    """Lower median of the 1..5 ratings per site (integer, never a half value)."""
    for col in ("site_id", "rating"):
        if col not in ratings.columns:
            raise DataError(f"ratings table lacks column {col!r}")
    r = ratings.astype({"site_id": str})
    if not r["rating"].between(1, QUINTILES).all():
        raise DataError("ratings must lie in 1..5")

    def lower_median(values: pd.Series) -> int:
        v = np.sort(values.to_numpy(dtype=np.int64))
        return int(v[(v.size - 1) // 2])

    return r.groupby("site_id", sort=True)["rating"].agg(lower_median)


def read_ratings(path: str | Path) -> pd.DataFrame:
    try:
        return pd.read_csv(path, dtype={"site_id": str})
    except (OSError, pd.errors.ParserError) as e:
        raise DataError(f"cannot read ratings {path}: {e}") from e


def compare_groupings(true_groups, groupings: dict[str, Sequence[int]]) -> pd.DataFrame:
    """One row of dichotomy MCCs per named grouping, evaluated against the true quintiles."""
    rows = []
    for name, groups in groupings.items():
        rows.append([name, *dichotomy_mcc(true_groups, groups)])
    return pd.DataFrame(rows, columns=["grouping", *DICHOTOMIES]).set_index("grouping")


def bootstrap_std(
    y_true,
    y_pred,
    metric: Callable[[np.ndarray, np.ndarray], float] = r2,
    n_boot: int = 200,
    seed: int = 0,
) -> float:
    """Std of `metric` over resamples of the held-out sites with replacement.

    Resamples on which the metric is undefined (constant draw) are skipped.
    """
    a, b = _pair(y_true, y_pred)
    rng = np.random.default_rng(seed)
    values = []
    for _ in range(n_boot):
        idx = rng.integers(0, a.size, size=a.size)
        try:
            values.append(metric(a[idx], b[idx]))
        except NumericError:
            continue
    if len(values) < 2:
        raise NumericError("too few valid bootstrap resamples")
    return float(np.std(values, ddof=1))
