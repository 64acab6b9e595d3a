"""Supervised training protocol: batching, Adam, periodic validation, best checkpoint."""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import functional as F
from .dataset import (DatasetManifest, PatientRecord, derive_label, duplicate_per_oct, labels)
from .imaging import (AugmentationConfig, ImageBuffer, apply_augmentation, preprocess_eval,
                      read_image, sample_augmentation)
from .metrics import MetricSet, SingleClassError, auroc, evaluate_scores
from .models import (VisionModel, build_model, clone_state, freeze_backbone,
                     trainable_parameters)
from .optim import Adam
from .perf import keep_heap_memory
from .tensor import Tensor, no_grad
from .weights import ModelWeights, atomic_write_bytes, load_weights, save_weights

EVAL_CHUNK = 32


@dataclass(frozen=True)
class Preset:
    name: str
    label: str  # display name used in reports
    architecture: str
    init: str  # "random", "imagenet" or "byol"
    freeze: bool = False


PRESETS: Dict[str, Preset] = {p.name: p for p in [
    Preset("rn-rand", "RN-Rand", "ResNet-50", "random"),
    Preset("rn-in", "RN-IN", "ResNet-50", "imagenet"),
    Preset("rn-in-frozen", "RN-IN†", "ResNet-50", "imagenet", freeze=True),
    Preset("rn-by", "RN-BY", "ResNet-50", "byol"),
    Preset("rn-by-frozen", "RN-BY†", "ResNet-50", "byol", freeze=True),
    Preset("cbr-tiny", "CBR-Tiny", "CBR-Tiny", "random"),
    Preset("cbr-small", "CBR-Small", "CBR-Small", "random"),
    Preset("cbr-wide", "CBR-Wide", "CBR-Wide", "random"),
    Preset("cbr-tall", "CBR-Tall", "CBR-Tall", "random"),
]}


def get_preset(name: str) -> Preset:
    key = name.strip().lower().replace("†", "-frozen").replace("_", "-")
    key = {"cbr-largew": "cbr-wide", "cbr-larget": "cbr-tall"}.get(key, key)
    if key not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; known: {', '.join(PRESETS)}")
    return PRESETS[key]


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-4
    max_steps: int = 1000
    eval_every: int = 50
    seed: int = 0
    freeze: bool = False
    init: str = "random"  # "random" or a weight-file path
    input_size: int = 224
    augmentation: Optional[AugmentationConfig] = None

    def __post_init__(self):
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationConfig.from_dict(self.augmentation)
        if self.augmentation is None:
            self.augmentation = (AugmentationConfig() if self.input_size == 224
                                 else AugmentationConfig.desk(self.input_size))
        if self.augmentation.final_size != self.input_size:
            raise ValueError(f"augmentation final_size {self.augmentation.final_size} != "
                             f"input_size {self.input_size}")
        if self.batch_size < 1 or self.max_steps < 1 or self.eval_every < 1:
            raise ValueError("batch_size, max_steps and eval_every must be positive")
        if self.max_steps % self.eval_every:
            raise ValueError(f"eval_every ({self.eval_every}) must divide max_steps ({self.max_steps})")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augmentation"] = self.augmentation.to_dict()
        return d


@dataclass
class RunResult:
    best_weights: ModelWeights
    val_auroc_curve: List[Tuple[int, float]]
    best_step: int
    test_metrics: Optional[MetricSet]
    loss_curve: List[float] = field(default_factory=list)
    test_probabilities: Dict[str, float] = field(default_factory=dict)
    config: Optional[dict] = None

    def sidecar(self) -> dict:
        return {
            "architecture": self.best_weights.architecture,
            "provenance": self.best_weights.provenance,
            "best_step": self.best_step,
            "val_auroc_curve": [[s, a] for s, a in self.val_auroc_curve],
            "test_metrics": self.test_metrics.as_dict() if self.test_metrics else None,
            "test_probabilities": self.test_probabilities,
            "loss_curve": self.loss_curve,
            "config": self.config,
        }


def save_run(result: RunResult, directory: str, name: str) -> Tuple[str, str]:
    """Write ``name.weights`` and ``name.json`` under ``directory``."""
    os.makedirs(directory, exist_ok=True)
    wpath = os.path.join(directory, f"{name}.weights")
    jpath = os.path.join(directory, f"{name}.json")
    save_weights(result.best_weights, wpath)
    atomic_write_bytes(jpath, (json.dumps(result.sidecar(), indent=2, sort_keys=True) + "\n").encode())
    return wpath, jpath


def load_run(directory: str, name: str) -> RunResult:
    with open(os.path.join(directory, f"{name}.json"), encoding="utf-8") as fh:
        d = json.load(fh)
    weights = load_weights(os.path.join(directory, f"{name}.weights"))
    tm = MetricSet(**d["test_metrics"]) if d.get("test_metrics") else None
    return RunResult(weights, [(int(s), float(a)) for s, a in d["val_auroc_curve"]], int(d["best_step"]),
                     tm, list(d.get("loss_curve", [])), dict(d.get("test_probabilities", {})),
                     d.get("config"))


def select_best(curve: Sequence[Tuple[int, float]]) -> int:
    """Step with the highest AUROC; the earliest wins ties."""
    if not curve:
        raise ValueError("empty validation curve")
    best_step, best = curve[0]
    for step, value in curve[1:]:
        if value > best:
            best_step, best = step, value
    return best_step


class ImageStore:
    """Decoded images and their evaluation tensors, loaded once per path."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._images: Dict[str, ImageBuffer] = {}
        self._eval: Dict[tuple, np.ndarray] = {}

    def image(self, ref: str) -> ImageBuffer:
        if ref not in self._images:
            path = self.manifest.image_path(ref)
            if not os.path.exists(path):
                raise FileNotFoundError(f"missing image {path}")
            self._images[ref] = read_image(path)
        return self._images[ref]

    def eval_tensor(self, ref: str, config: AugmentationConfig) -> np.ndarray:
        # evaluation preprocessing depends only on the output size and normalisation
        key = (ref, config.final_size, config.channel_means, config.channel_stds)
        if key not in self._eval:
            self._eval[key] = preprocess_eval(self.image(ref), config)
        return self._eval[key]


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def view_probabilities(model: VisionModel, arrays: Sequence[np.ndarray]) -> np.ndarray:
    """Eval-mode sigmoid outputs for preprocessed (3, S, S) arrays, in fixed-size chunks."""
    was_training = model.training
    model.eval()
    out = []
    try:
        with no_grad():
            for start in range(0, len(arrays), EVAL_CHUNK):
                chunk = arrays[start:start + EVAL_CHUNK]
                buf = np.stack([a.transpose(1, 2, 0) for a in chunk]).astype(np.float32)
                logits = model(Tensor(buf.transpose(0, 3, 1, 2))).data
                out.append(_sigmoid(logits.astype(np.float64)))
    finally:
        model.train(was_training)
    return np.concatenate(out) if out else np.zeros(0)


def predict_patients(model: VisionModel, records: Sequence[PatientRecord], store: ImageStore,
                     config: AugmentationConfig) -> np.ndarray:
    """Mean of the two single-view probabilities for each patient."""
    arrays = []
    for r in records:
        arrays.append(store.eval_tensor(r.oct_h, config))
        arrays.append(store.eval_tensor(r.oct_v, config))
    p = view_probabilities(model, arrays)
    return (p[0::2] + p[1::2]) / 2.0


def predict_patient(model: VisionModel, record: PatientRecord, store: ImageStore,
                    config: AugmentationConfig) -> float:
    return float(predict_patients(model, [record], store, config)[0])


def resolve_init(preset: Preset, weights: Optional[Dict[str, str]] = None) -> str:
    """Weight-file path (or "random") for a preset's initialisation."""
    if preset.init == "random":
        return "random"
    path = (weights or {}).get(preset.init)
    if not path:
        raise ValueError(f"preset {preset.name} needs a {preset.init} weight file")
    if not os.path.exists(path):
        raise FileNotFoundError(f"{preset.init} weight file not found: {path}")
    return path


def train_run(architecture: str, manifest: DatasetManifest, config: TrainConfig,
              store: Optional[ImageStore] = None, log=None,
              stop_at: Optional[float] = None) -> RunResult:
    """Train one model and keep the checkpoint with the best patient-level validation AUROC.

    With ``stop_at`` the run ends at the first evaluation whose validation
    AUROC is at least that value, instead of continuing to ``max_steps``.
    """
    keep_heap_memory()
    train = manifest.split("train")
    val = manifest.split("val")
    test = manifest.split("test")
    if not train:
        raise ValueError("training split is empty")
    if not val:
        raise ValueError("validation split is empty")
    store = store or ImageStore(manifest)
    aug = config.augmentation
    samples = duplicate_per_oct(train)
    targets_all = np.array([s.label for s in samples], dtype=np.float32)
    val_y = labels(val)

    model = build_model(architecture, config.init, config.seed, config.input_size)
    if config.freeze:
        freeze_backbone(model)
    model.train()
    opt = Adam(trainable_parameters(model), lr=config.lr)

    S = config.input_size
    curve: List[Tuple[int, float]] = []
    losses: List[float] = []
    best_state, best_step, best_auc = None, None, -math.inf
    order = np.zeros(0, dtype=int)
    cursor, epoch = 0, 0
    t0 = time.time()
    for step in range(1, config.max_steps + 1):
        if cursor >= order.size:
            order = np.random.default_rng([config.seed, 1, epoch]).permutation(len(samples))
            cursor, epoch = 0, epoch + 1
        idx = order[cursor:cursor + config.batch_size]
        cursor += idx.size
        batch = np.empty((idx.size, S, S, 3), dtype=np.float32)
        for j, i in enumerate(idx):
            rng = np.random.default_rng([config.seed, 2, step, j])
            params = sample_augmentation(aug, rng)
            batch[j] = apply_augmentation(store.image(samples[i].image), params, aug).transpose(1, 2, 0)
        logits = model(Tensor(batch.transpose(0, 3, 1, 2)))
        loss = F.bce_with_logits(logits, targets_all[idx])
        loss.backward()
        opt.step()
        opt.zero_grad()
        losses.append(float(loss.data))

        if step % config.eval_every == 0:
            probs = predict_patients(model, val, store, aug)
            value = auroc(probs, val_y)
            curve.append((step, value))
            if value > best_auc:
                best_auc, best_step, best_state = value, step, clone_state(model)
            if log:
                log(f"step {step} loss {np.mean(losses[-config.eval_every:]):.4f} "
                    f"val_auroc {value:.4f} ({time.time() - t0:.0f}s)")
            if stop_at is not None and value >= stop_at:
                break

    model.load_state_dict(best_state)
    test_metrics, test_probs = None, {}
    if test:
        probs = predict_patients(model, test, store, aug)
        test_probs = {r.patient_id: float(p) for r, p in zip(test, probs)}
        try:
            test_metrics = evaluate_scores(probs, labels(test))
        except SingleClassError:
            test_metrics = None
    weights = model.weights(getattr(model, "provenance", "random"))
    return RunResult(weights, curve, best_step, test_metrics, losses, test_probs, config.to_dict())


def permute_outcomes(manifest: DatasetManifest, seed: int) -> DatasetManifest:
    """Null-signal control: shuffle (baseline VA, 6-month VA) pairs across patients.

    Images and splits stay in place, so any image-label association is broken.
    """
    records = manifest.records
    perm = np.random.default_rng([seed, 7]).permutation(len(records))
    out = []
    for r, j in zip(records, perm):
        src = records[j]
        clinical = replace(r.clinical, baseline_va=src.clinical.baseline_va)
        out.append(replace(r, clinical=clinical, va_6mo=src.va_6mo))
    return DatasetManifest(out, manifest.provenance + "+permuted", manifest.root)


__all__ = [
    "ImageStore", "PRESETS", "Preset", "RunResult", "TrainConfig", "get_preset", "load_run",
    "permute_outcomes", "predict_patient", "predict_patients", "resolve_init", "save_run",
    "select_best", "train_run", "view_probabilities",
]
