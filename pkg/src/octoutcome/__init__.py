"""Predicting post-surgery visual improvement from OCT scans and clinical features.

A small numpy autodiff engine, CBR and ResNet-50 vision models, BYOL
pretraining, logistic regression with late fusion, and the evaluation and
reporting needed to run the whole experiment on synthetic data.
"""

from .tensor import Tensor, no_grad
from .models import build_model, param_count
from .dataset import DatasetManifest, read_manifest, write_manifest
from .synthetic import SyntheticConfig, generate_synthetic
from .training import PRESETS, TrainConfig, get_preset, train_run
from .byol import BYOLConfig, pretrain
from .tabular import CVConfig, fit_logistic_cv, feature_importance
from .metrics import aggregate_runs, auroc, evaluate_scores

__version__ = "0.1.0"
