"""Whitening, L2-regularised logistic regression with cross-validated C, and late fusion."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .weights import atomic_write_bytes


@dataclass
class WhiteningParams:
    mean: np.ndarray
    std: np.ndarray  # population convention (divide by n)

    @property
    def degenerate(self) -> np.ndarray:
        """True for columns with zero spread; these whiten to a constant 0."""
        return self.std == 0

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "WhiteningParams":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


def fit_whitening(X) -> WhiteningParams:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError(f"whitening needs a non-empty 2-d matrix, got shape {X.shape}")
    if X.shape[0] < 2:
        raise ValueError("whitening needs at least 2 rows")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    # spreads at rounding-noise level are treated as exactly constant
    std[std <= 1e-12 * np.maximum(1.0, np.abs(mean))] = 0.0
    return WhiteningParams(mean, std)


def apply_whitening(X, params: WhiteningParams) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != params.mean.size:
        raise ValueError(f"expected {params.mean.size} features, got {X.shape[-1]}")
    safe = np.where(params.std > 0, params.std, 1.0)
    Z = (X - params.mean) / safe
    return np.where(params.degenerate, 0.0, Z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _check_xy(X, y) -> Tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError(f"X must be (n, d) and y (n,), got {X.shape} and {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("y must be binary 0/1")
    if y.min() == y.max():
        raise ValueError("y has a single class; logistic regression needs both")
    return X, y.astype(np.float64)


def fit_logistic(X, y, C: float, tol: float = 1e-8, max_iter: int = 200) -> Tuple[np.ndarray, float]:
    """Minimise sum_i BCE(sigmoid(w.x_i + b), y_i) + ||w||^2 / (2C) by damped Newton steps.

    The bias is not penalised. Stops when the gradient norm is <= ``tol``.
    """
    if not C > 0:
        raise ValueError(f"C must be positive, got {C}")
    X, y = _check_xy(X, y)
    n, d = X.shape
    A = np.column_stack([X, np.ones(n)])
    penalty = np.full(d + 1, 1.0 / C)
    penalty[-1] = 0.0
    theta = np.zeros(d + 1)

    def objective(t):
        z = A @ t
        return float(np.sum(np.logaddexp(0.0, z) - y * z) + 0.5 * np.sum(penalty * t * t))

    f = objective(theta)
    for _ in range(max_iter):
        p = _sigmoid(A @ theta)
        grad = A.T @ (p - y) + penalty * theta
        if np.linalg.norm(grad) <= tol:
            break
        wts = p * (1 - p)
        hess = (A * wts[:, None]).T @ A + np.diag(penalty)
        # a tiny ridge keeps a separable, unpenalised bias direction solvable
        hess[np.diag_indices_from(hess)] += 1e-12
        step = np.linalg.solve(hess, grad)
        t = 1.0
        while True:
            cand = theta - t * step
            fc = objective(cand)
            if fc <= f - 1e-4 * t * float(grad @ step) or t < 1e-10:
                break
            t *= 0.5
        if fc > f:
            break  # no further decrease representable; at the floating-point optimum
        theta, f = cand, fc
    return theta[:-1].copy(), float(theta[-1])


@dataclass
class CVConfig:
    folds: int = 5
    C_grid: Tuple[float, ...] = tuple(np.logspace(-4, 4, 10))
    scoring: str = "accuracy"
    seed: int = 0

    def __post_init__(self):
        self.C_grid = tuple(float(c) for c in self.C_grid)
        if self.folds < 2:
            raise ValueError(f"folds must be >= 2, got {self.folds}")
        if not self.C_grid or any(c <= 0 for c in self.C_grid):
            raise ValueError("C_grid must be non-empty and positive")
        if any(b <= a for a, b in zip(self.C_grid, self.C_grid[1:])):
            raise ValueError("C_grid must be strictly increasing")
        if self.scoring != "accuracy":
            raise ValueError(f"only accuracy scoring is supported, got {self.scoring!r}")


def stratified_folds(y, folds: int, seed: int) -> List[np.ndarray]:
    """Shuffle each class with ``seed`` and deal its members round-robin into the folds."""
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    assignment = np.empty(y.size, dtype=int)
    offset = 0
    for cls in np.unique(y):
        members = np.flatnonzero(y == cls)
        members = members[rng.permutation(members.size)]
        assignment[members] = (offset + np.arange(members.size)) % folds
        # continue dealing where the previous class stopped so fold sizes stay balanced
        offset = (offset + members.size) % folds
    return [np.flatnonzero(assignment == k) for k in range(folds)]


@dataclass
class RegressionModel:
    weights: np.ndarray
    bias: float
    C: float
    feature_names: List[str]
    whitening: Optional[WhiteningParams] = None
    cv_scores: Optional[List[float]] = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (len(self.feature_names),):
            raise ValueError("one weight per feature name is required")
        if not self.C > 0:
            raise ValueError(f"C must be positive, got {self.C}")

    def to_dict(self) -> dict:
        return {
            "feature_names": list(self.feature_names),
            "weights": self.weights.tolist(),
            "bias": self.bias,
            "C": self.C,
            "whitening": self.whitening.to_dict() if self.whitening is not None else None,
            "cv_scores": self.cv_scores,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegressionModel":
        w = d.get("whitening")
        return cls(np.asarray(d["weights"]), float(d["bias"]), float(d["C"]), list(d["feature_names"]),
                   WhiteningParams.from_dict(w) if w else None, d.get("cv_scores"))

    def save(self, path: str) -> None:
        atomic_write_bytes(path, (json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n").encode())

    @classmethod
    def load(cls, path: str) -> "RegressionModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def cv_accuracy(X, y, C: float, folds: Sequence[np.ndarray]) -> float:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    correct = 0
    for k, test in enumerate(folds):
        train = np.concatenate([f for j, f in enumerate(folds) if j != k])
        w, b = fit_logistic(X[train], y[train], C)
        pred = (X[test] @ w + b) >= 0
        correct += int(np.sum(pred == (y[test] == 1)))
    return correct / len(y)


def fit_logistic_cv(X, y, cv: Optional[CVConfig] = None,
                    feature_names: Optional[Sequence[str]] = None,
                    whitening: Optional[WhiteningParams] = None) -> RegressionModel:
    """Pick C by stratified k-fold accuracy (ties go to the larger C), then refit on all rows."""
    cv = cv or CVConfig()
    X, yf = _check_xy(X, y)
    y = yf.astype(int)
    if min(np.sum(y == 0), np.sum(y == 1)) < cv.folds:
        raise ValueError(f"each class needs at least {cv.folds} members for {cv.folds}-fold CV")
    folds = stratified_folds(y, cv.folds, cv.seed)
    scores = [cv_accuracy(X, y, C, folds) for C in cv.C_grid]
    best = max(range(len(scores)), key=lambda i: (scores[i], i))
    C = cv.C_grid[best]
    w, b = fit_logistic(X, y, C)
    names = list(feature_names) if feature_names is not None else [f"x{i}" for i in range(X.shape[1])]
    return RegressionModel(w, b, C, names, whitening, scores)


def predict_proba(model: RegressionModel, x) -> np.ndarray:
    """sigmoid(w.x + b) for one row or a matrix of rows (already whitened)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.weights.size:
        raise ValueError(f"model has {model.weights.size} features, input has {x.shape[-1]}")
    return _sigmoid(x @ model.weights + model.bias)


def feature_importance(model: RegressionModel) -> np.ndarray:
    """Share of total absolute weight per feature, in percent."""
    a = np.abs(model.weights)
    total = a.sum()
    if total == 0:
        raise ValueError("all regression weights are zero; importance undefined")
    return 100.0 * a / total


def late_fusion_features(clinical, cnn_probability) -> np.ndarray:
    """Append the CNN patient probability as an extra column to whitened clinical features.

    The caller whitens the combined matrix with regression-set statistics, so
    the prediction column is put on the same footing as the clinical columns.
    """
    X = np.atleast_2d(np.asarray(clinical, dtype=np.float64))
    p = np.atleast_1d(np.asarray(cnn_probability, dtype=np.float64))
    if p.shape != (X.shape[0],):
        raise ValueError(f"need one probability per row: {p.shape} vs {X.shape[0]} rows")
    if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise ValueError("CNN probabilities must lie in [0, 1]")
    out = np.column_stack([X, p])
    return out[0] if np.ndim(clinical) == 1 else out


@dataclass
class FusionResult:
    model: RegressionModel
    whitening: WhiteningParams
    degenerate: List[str]


def fit_fusion(clinical_raw, cnn_probability, y, feature_names: Sequence[str],
               cv: Optional[CVConfig] = None) -> FusionResult:
    """Whiten clinical + CNN columns on the regression set and fit the cross-validated model."""
    X = late_fusion_features(np.asarray(clinical_raw, dtype=np.float64), cnn_probability)
    params = fit_whitening(X)
    Z = apply_whitening(X, params)
    names = list(feature_names) + ["cnn_prediction"]
    model = fit_logistic_cv(Z, y, cv, names, params)
    degenerate = [n for n, d in zip(names, params.degenerate) if d]
    return FusionResult(model, params, degenerate)


__all__ = [
    "CVConfig", "FusionResult", "RegressionModel", "WhiteningParams", "apply_whitening",
    "cv_accuracy", "feature_importance", "fit_fusion", "fit_logistic", "fit_logistic_cv",
    "fit_whitening", "late_fusion_features", "predict_proba", "stratified_folds",
]
