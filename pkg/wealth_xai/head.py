"""Ridge-regression wealth head on CNN features.

Features are standardised inside each training fold (StandardScaler fitted on the
training part only); the ridge parameter is picked by K-fold cross-validated R² and
the model is refit on all rows at that value. The stored weights are mapped back to
raw feature units, so `predict` is a plain affine map. The intercept is not penalised.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from sklearn.linear_model import LinearRegression, Ridge
from sklearn.metrics import r2_score
from sklearn.model_selection import KFold
from sklearn.preprocessing import StandardScaler

from .errors import DataError, NumericError

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA_GRID = tuple(float(v) for v in np.logspace(-4, 2, 13))
DEFAULT_FOLDS = 5
QUINTILES = 5


@dataclass(frozen=True)
class RidgeModel:
    weights: np.ndarray
    intercept: float
    lam: float
    lambda_grid: tuple[float, ...] = DEFAULT_LAMBDA_GRID
    cv_folds: int = DEFAULT_FOLDS
    cv_scores: tuple[float, ...] = ()

    @property
    def feature_dim(self) -> int:
        return int(self.weights.shape[0])

    def to_json(self) -> dict:
        return {
            "weights": [float(w) for w in self.weights],
            "intercept": float(self.intercept),
            "lambda": float(self.lam),
            "feature_dim": self.feature_dim,
            "lambda_grid": list(self.lambda_grid),
            "cv_folds": self.cv_folds,
            "cv_scores": list(self.cv_scores),
        }

    @classmethod
    def from_json(cls, data: dict) -> "RidgeModel":
        try:
            weights = np.asarray(data["weights"], dtype=np.float64)
            if weights.shape[0] != int(data["feature_dim"]):
                raise DataError("head file: feature_dim does not match weight count")
            return cls(
                weights=weights,
                intercept=float(data["intercept"]),
                lam=float(data["lambda"]),
                lambda_grid=tuple(data.get("lambda_grid", DEFAULT_LAMBDA_GRID)),
                cv_folds=int(data.get("cv_folds", DEFAULT_FOLDS)),
                cv_scores=tuple(data.get("cv_scores", ())),
            )
        except (KeyError, TypeError) as e:
            raise DataError(f"malformed head file: {e}") from e


def pool_features(per_tile: Sequence[np.ndarray]) -> np.ndarray:
    """Component-wise mean of the nine feature vectors of a 3×3 grid."""
    vecs = [np.asarray(v, dtype=np.float64).reshape(-1) for v in per_tile]
    if not vecs:
        raise DataError("pool_features needs at least one vector")
    if len({v.shape[0] for v in vecs}) != 1:
        raise DataError(f"feature vectors differ in length: {sorted({v.shape[0] for v in vecs})}")
    return np.mean(np.stack(vecs), axis=0)


def _solve(x: np.ndarray, y: np.ndarray, lam: float) -> tuple[np.ndarray, float]:
    """Fit on raw rows with in-fit standardisation; return raw-unit (weights, intercept)."""
    scaler = StandardScaler().fit(x)
    z = scaler.transform(x)
    reg = LinearRegression() if lam == 0.0 else Ridge(alpha=lam, solver="cholesky")
    reg.fit(z, y)
    w = reg.coef_ / scaler.scale_
    b = float(reg.intercept_ - np.dot(w, scaler.mean_))
    return w, b


def _check_xy(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise DataError(f"features {x.shape} do not match {y.shape[0]} targets")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise DataError("features and targets must be finite")
    return x, y


def fit_ridge(
    x,
    y,
    lambda_grid: Sequence[float] = DEFAULT_LAMBDA_GRID,
    folds: int = DEFAULT_FOLDS,
    seed: int = 0,
) -> RidgeModel:
    """Cross-validate λ over `lambda_grid` by mean fold R², then refit on all rows."""
    x, y = _check_xy(x, y)
    grid = tuple(float(v) for v in lambda_grid)
    if not grid or any(v < 0 for v in grid):
        raise DataError(f"lambda grid must be non-empty and non-negative: {grid}")
    if np.ptp(y) == 0.0:
        raise NumericError("cannot fit a ridge head to a constant target")

    scores: tuple[float, ...] = ()
    if len(grid) == 1:
        lam = grid[0]
    else:
        if folds < 2 or x.shape[0] < folds:
            raise DataError(f"need at least {max(folds, 2)} rows for {folds}-fold CV, got {x.shape[0]}")
        kf = KFold(n_splits=folds, shuffle=True, random_state=seed)
        splits = list(kf.split(x))
        per_lam = []
        for lam_c in grid:
            fold_r2 = []
            for tr, va in splits:
                w, b = _solve(x[tr], y[tr], lam_c)
                fold_r2.append(r2_score(y[va], x[va] @ w + b))
            per_lam.append(float(np.mean(fold_r2)))
        scores = tuple(per_lam)
        lam = grid[int(np.argmax(per_lam))]
        logger.debug("ridge CV scores %s -> lambda %g", scores, lam)

    w, b = _solve(x, y, lam)
    return RidgeModel(weights=w, intercept=b, lam=lam, lambda_grid=grid, cv_folds=folds, cv_scores=scores)


def predict(model: RidgeModel, features) -> float | np.ndarray:
    """Affine prediction; a single vector gives a float, a matrix gives one value per row."""
    f = np.asarray(features, dtype=np.float64)
    if f.shape[-1] != model.feature_dim:
        raise DataError(f"expected {model.feature_dim} features, got {f.shape[-1]}")
    out = f @ model.weights + model.intercept
    return float(out) if f.ndim == 1 else out


def quintile_assign(values: Sequence[float]) -> np.ndarray:
    """Rank-based groups 1..5 (poorest to wealthiest); ties keep input order."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    n = v.size
    if n < QUINTILES:
        raise DataError(f"quintile grouping needs at least {QUINTILES} values, got {n}")
    order = np.argsort(v, kind="stable")
    groups = np.empty(n, dtype=np.int64)
    positions = np.arange(1, n + 1)
    groups[order] = (QUINTILES * positions + n - 1) // n
    return groups


@dataclass
class RepeatedFit:
    """Held-out scores of several head fits that differ only in the fold seed."""

    r2: list[float] = field(default_factory=list)
    spearman: list[float] = field(default_factory=list)
    lambdas: list[float] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "repeats": len(self.r2),
            "r2_mean": float(np.mean(self.r2)),
            "r2_std": float(np.std(self.r2)),
            "spearman_mean": float(np.mean(self.spearman)),
            "spearman_std": float(np.std(self.spearman)),
        }


def repeated_fit(
    x_train,
    y_train,
    x_test,
    y_test,
    seeds: Sequence[int],
    lambda_grid: Sequence[float] = DEFAULT_LAMBDA_GRID,
    folds: int = DEFAULT_FOLDS,
) -> RepeatedFit:
    from .metrics import r2, spearman

    out = RepeatedFit()
    for s in seeds:
        model = fit_ridge(x_train, y_train, lambda_grid, folds, seed=int(s))
        pred = predict(model, np.asarray(x_test, dtype=np.float64))
        out.r2.append(r2(y_test, pred))
        out.spearman.append(spearman(y_test, pred))
        out.lambdas.append(model.lam)
    return out


def save_model(model: RidgeModel, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(model.to_json(), indent=2, sort_keys=True) + "\n")
    return path


def load_model(path: str | Path) -> RidgeModel:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read head model {path}: {e}") from e
    return RidgeModel.from_json(data)


# --- feature tables -------------------------------------------------------------


def feature_columns(dim: int) -> list[str]:
    return [f"f{i}" for i in range(dim)]


def feature_table(site_ids, features, wealth, phases) -> pd.DataFrame:
    features = np.asarray(features, dtype=np.float64)
    df = pd.DataFrame(features, columns=feature_columns(features.shape[1]))
    df.insert(0, "site_id", list(site_ids))
    df["wealth_index"] = np.asarray(wealth, dtype=np.float64)
    df["phase"] = list(phases)
    return df


def write_feature_table(df: pd.DataFrame, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format="%.9g")
    return path


def read_feature_table(path: str | Path) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise DataError(f"feature table not found: {path}")
    df = pd.read_csv(path, dtype={"site_id": str, "phase": str})
    for col in ("site_id", "wealth_index", "phase"):
        if col not in df.columns:
            raise DataError(f"feature table {path} lacks column {col!r}")
    return df


def split_feature_table(df: pd.DataFrame) -> tuple[np.ndarray, np.ndarray]:
    cols = [c for c in df.columns if c.startswith("f") and c[1:].isdigit()]
    cols.sort(key=lambda c: int(c[1:]))
    return df[cols].to_numpy(dtype=np.float64), df["wealth_index"].to_numpy(dtype=np.float64)
