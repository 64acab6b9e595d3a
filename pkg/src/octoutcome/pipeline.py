"""Regression and late-fusion experiments on a dataset manifest.

The regression set is the union of the training and validation splits; the
test split is only used for the reported metrics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional

import numpy as np

from .dataset import CLINICAL_NAMES, DatasetManifest, PatientRecord, clinical_matrix, labels
from .imaging import AugmentationConfig
from .metrics import MetricSet, SingleClassError, evaluate_scores
from .models import build_model
from .tabular import (CVConfig, RegressionModel, apply_whitening, feature_importance, fit_fusion,
                      fit_logistic_cv, fit_whitening, late_fusion_features, predict_proba)
from .training import ImageStore, predict_patients
from .weights import ModelWeights


@dataclass
class TabularOutcome:
    model: RegressionModel
    importance: Dict[str, float]
    test_metrics: Optional[MetricSet]
    test_probabilities: Dict[str, float] = field(default_factory=dict)
    degenerate: List[str] = field(default_factory=list)

    def sidecar(self) -> dict:
        return {
            "regression": self.model.to_dict(),
            "importance": self.importance,
            "degenerate_features": self.degenerate,
            "test_metrics": self.test_metrics.as_dict() if self.test_metrics else None,
            "test_probabilities": self.test_probabilities,
        }


def regression_set(manifest: DatasetManifest) -> List[PatientRecord]:
    return manifest.split("train") + manifest.split("val")


def _test_outcome(model: RegressionModel, Z_test: np.ndarray, test: List[PatientRecord]):
    if not test:
        return None, {}
    p = predict_proba(model, Z_test)
    probs = {r.patient_id: float(v) for r, v in zip(test, p)}
    try:
        return evaluate_scores(p, labels(test)), probs
    except SingleClassError:
        return None, probs


def _importance(model: RegressionModel) -> Dict[str, float]:
    return {n: float(v) for n, v in zip(model.feature_names, feature_importance(model))}


def train_regression(manifest: DatasetManifest, cv: Optional[CVConfig] = None) -> TabularOutcome:
    """Clinical-only logistic regression: whiten on the regression set, cross-validate C, test."""
    reg = regression_set(manifest)
    if not reg:
        raise ValueError("regression set (train + val) is empty")
    X = clinical_matrix(reg)
    params = fit_whitening(X)
    model = fit_logistic_cv(apply_whitening(X, params), labels(reg), cv, CLINICAL_NAMES, params)
    test = manifest.split("test")
    metrics, probs = _test_outcome(model, apply_whitening(clinical_matrix(test), params), test)
    degenerate = [n for n, d in zip(CLINICAL_NAMES, params.degenerate) if d]
    return TabularOutcome(model, _importance(model), metrics, probs, degenerate)


def cnn_probabilities(weights: ModelWeights, manifest: DatasetManifest, input_size: int,
                      augmentation: Optional[AugmentationConfig] = None,
                      store: Optional[ImageStore] = None) -> Dict[str, float]:
    """Two-view averaged probability of a retained checkpoint for every patient."""
    model = build_model(weights.architecture, weights, 0, input_size)
    aug = augmentation or (AugmentationConfig() if input_size == 224 else AugmentationConfig.desk(input_size))
    store = store or ImageStore(manifest)
    probs = predict_patients(model, manifest.records, store, aug)
    return {r.patient_id: float(p) for r, p in zip(manifest.records, probs)}


def fuse(manifest: DatasetManifest, cnn_probability: Mapping[str, float],
         cv: Optional[CVConfig] = None) -> TabularOutcome:
    """Late fusion: clinical features plus the CNN patient probability, whitened together."""
    reg = regression_set(manifest)
    if not reg:
        raise ValueError("regression set (train + val) is empty")
    missing = [r.patient_id for r in manifest.records if r.patient_id not in cnn_probability]
    if missing:
        raise ValueError(f"no CNN probability for patients {missing[:5]}")
    p_reg = np.array([cnn_probability[r.patient_id] for r in reg])
    result = fit_fusion(clinical_matrix(reg), p_reg, labels(reg), CLINICAL_NAMES, cv)
    test = manifest.split("test")
    Z_test = None
    if test:
        p_test = np.array([cnn_probability[r.patient_id] for r in test])
        Z_test = apply_whitening(late_fusion_features(clinical_matrix(test), p_test), result.whitening)
    metrics, probs = _test_outcome(result.model, Z_test, test)
    return TabularOutcome(result.model, _importance(result.model), metrics, probs, result.degenerate)


__all__ = ["TabularOutcome", "cnn_probabilities", "fuse", "regression_set", "train_regression"]
