"""Synthetic stand-in for the clinical dataset.

Each patient gets five clinical features drawn to match the training-cohort
statistics, a latent hole aperture that is drawn into two OCT-like images, and
a 6-month visual acuity produced by a known logistic outcome model over the
standardised features. The ground truth is written next to the data so tests
can check that models recover it.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.optimize import brentq

from .dataset import (CLINICAL_NAMES, DEFAULT_FRACTIONS, ClinicalFeatures, DatasetManifest,
                      PatientRecord, split_dataset, write_manifest)
from .imaging import ImageBuffer, encode_png
from .weights import atomic_write_bytes

FEATURE_NAMES = CLINICAL_NAMES + ("aperture",)

# training-cohort statistics the clinical features are calibrated to
COHORT = {
    "age_mean": 66.57, "age_std": 7.60,
    "duration_mean": 11.48, "duration_std": 10.55,
    "elevated_edge_rate": 0.8915, "pseudophakic_rate": 0.1687,
    "baseline_mean": 50.43, "baseline_std": 15.51,
    "prevalence": 0.494,
}

DEFAULT_COEFFICIENTS = {
    "age": -0.8, "mh_duration": -0.8, "elevated_edge": 0.8,
    "pseudophakic": 0.8, "baseline_va": -1.2, "aperture": -1.2,
}

# image-dominated outcome: a wide hole means a poor prognosis almost surely
SEPARABLE_COEFFICIENTS = {
    "age": -0.1, "mh_duration": -0.1, "elevated_edge": 0.1,
    "pseudophakic": 0.1, "baseline_va": -0.1, "aperture": -8.0,
}


@dataclass
class SyntheticConfig:
    n: int = 121
    image_height: int = 64
    image_width: int = 96
    age_mean: float = COHORT["age_mean"]
    age_std: float = COHORT["age_std"]
    duration_mean: float = COHORT["duration_mean"]
    duration_std: float = COHORT["duration_std"]
    elevated_edge_rate: float = COHORT["elevated_edge_rate"]
    pseudophakic_rate: float = COHORT["pseudophakic_rate"]
    baseline_mean: float = COHORT["baseline_mean"]
    baseline_std: float = COHORT["baseline_std"]
    prevalence: float = COHORT["prevalence"]
    coefficients: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_COEFFICIENTS))
    # hole width as a fraction of image width: centre + spread * aperture
    hole_width: float = 0.18
    hole_width_spread: float = 0.06
    hole_darkness: float = 0.85  # 1 = fully black inside the hole
    noise_std: float = 8.0
    split_fractions: Tuple[float, float, float] = DEFAULT_FRACTIONS

    def __post_init__(self):
        self.split_fractions = tuple(float(f) for f in self.split_fractions)
        self.coefficients = {k: float(v) for k, v in self.coefficients.items()}
        unknown = set(self.coefficients) - set(FEATURE_NAMES)
        if unknown:
            raise ValueError(f"unknown coefficient names {sorted(unknown)}")
        for name in FEATURE_NAMES:
            self.coefficients.setdefault(name, 0.0)
        if self.n < 0:
            raise ValueError(f"n must be non-negative, got {self.n}")
        if self.image_height < 8 or self.image_width < 8:
            raise ValueError("images must be at least 8x8 pixels")
        if not 0 < self.prevalence < 1:
            raise ValueError(f"prevalence must be in (0, 1), got {self.prevalence}")

    @classmethod
    def separable(cls, n: int = 200, **overrides) -> "SyntheticConfig":
        """Strong, almost noise-free image signal for end-to-end learnability checks."""
        kw = dict(n=n, coefficients=dict(SEPARABLE_COEFFICIENTS), hole_darkness=0.95, noise_std=4.0)
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_fractions"] = list(self.split_fractions)
        d["coefficients"] = {k: self.coefficients[k] for k in FEATURE_NAMES}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()[:16]


def _gamma_shape_scale(mean: float, std: float) -> Tuple[float, float]:
    return (mean / std) ** 2, std ** 2 / mean


def draw_features(config: SyntheticConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    """Raw (n, 6) matrix: age, duration, edge, pseudophakic, baseline VA, aperture."""
    age = rng.normal(config.age_mean, config.age_std, n).clip(18.0, 100.0)
    k, theta = _gamma_shape_scale(config.duration_mean, config.duration_std)
    duration = rng.gamma(k, theta, n)
    edge = (rng.random(n) < config.elevated_edge_rate).astype(float)
    pseudo = (rng.random(n) < config.pseudophakic_rate).astype(float)
    baseline = np.rint(rng.normal(config.baseline_mean, config.baseline_std, n)).clip(0, 85)
    aperture = rng.standard_normal(n).clip(-2.5, 2.5)
    return np.column_stack([age, duration, edge, pseudo, baseline, aperture])


def standardize_truth(config: SyntheticConfig, raw: np.ndarray) -> np.ndarray:
    """Standardise with the generating distribution's own moments (not sample moments)."""
    p_e, p_p = config.elevated_edge_rate, config.pseudophakic_rate
    mu = np.array([config.age_mean, config.duration_mean, p_e, p_p, config.baseline_mean, 0.0])
    sd = np.array([config.age_std, config.duration_std, math.sqrt(p_e * (1 - p_e)),
                   math.sqrt(p_p * (1 - p_p)), config.baseline_std, 1.0])
    return (raw - mu) / sd


def coefficient_vector(config: SyntheticConfig) -> np.ndarray:
    return np.array([config.coefficients[k] for k in FEATURE_NAMES])


def solve_intercept(config: SyntheticConfig, n_mc: int = 20000) -> float:
    """Intercept making the population-average outcome probability equal the prevalence."""
    z = standardize_truth(config, draw_features(config, n_mc, np.random.default_rng(12345)))
    margin = z @ coefficient_vector(config)

    def excess(b):
        return float(np.mean(1.0 / (1.0 + np.exp(-(margin + b))))) - config.prevalence

    return float(brentq(excess, -60.0, 60.0, xtol=1e-12))


def draw_outcome(baseline: int, positive: bool, rng: np.random.Generator) -> int:
    """6-month acuity consistent with the label: gain >= 15 iff ``positive``."""
    if positive:
        top = min(25, 100 - baseline - 15)
        gain = 15 + int(rng.integers(0, top + 1))
    else:
        gain = int(rng.integers(max(-5, -baseline), 15))
    return baseline + gain


def render_oct(config: SyntheticConfig, aperture: float, rng: np.random.Generator) -> np.ndarray:
    """Grayscale OCT-like B-scan: layered retina band with an elliptical dark hole."""
    H, W = config.image_height, config.image_width
    yy, xx = np.mgrid[0:H, 0:W].astype(float)
    xn = xx / (W - 1) - 0.5
    centre = H * (0.5 + rng.uniform(-0.04, 0.04)) + H * 0.15 * xn ** 2
    thickness = H * rng.uniform(0.26, 0.32)
    depth = (yy - (centre - thickness / 2)) / thickness  # 0 at inner surface, 1 at outer
    img = np.full((H, W), 18.0)
    band = (depth >= 0) & (depth <= 1)
    layers = 110 + 50 * np.cos(depth * 3 * np.pi) + 60 * (depth > 0.8)
    img[band] = layers[band]
    # foveal hole, width set by the aperture
    width = np.clip(config.hole_width + config.hole_width_spread * aperture, 0.03, 0.45) * W
    cx = W / 2 + rng.uniform(-0.03, 0.03) * W
    cy = float(centre[0, min(W - 1, int(round(cx)))])
    ry = thickness * 0.55
    inside = ((xx - cx) / (width / 2)) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    img[inside] = img[inside] * (1 - config.hole_darkness) + 10 * config.hole_darkness
    img += rng.normal(0.0, config.noise_std, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


@dataclass
class SyntheticDataset:
    manifest: DatasetManifest
    intercept: float
    features: np.ndarray  # raw (n, 6) including aperture
    probabilities: np.ndarray


def generate_synthetic(config: SyntheticConfig, seed: int, out_dir: str) -> SyntheticDataset:
    """Write images, ``manifest.csv``, ``ground_truth.json`` and the config under ``out_dir``."""
    try:
        os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir!r}: {exc}") from exc
    if not os.access(out_dir, os.W_OK):
        raise OSError(f"output directory {out_dir!r} is not writable")

    n = config.n
    feat_rng = np.random.default_rng([seed, 0])
    raw = draw_features(config, n, feat_rng)
    intercept = solve_intercept(config)
    margin = standardize_truth(config, raw) @ coefficient_vector(config) + intercept
    prob = 1.0 / (1.0 + np.exp(-margin))
    positive = feat_rng.random(n) < prob

    records: List[PatientRecord] = []
    for i in range(n):
        rng = np.random.default_rng([seed, 1, i])
        pid = f"P{i:04d}"
        baseline = int(raw[i, 4])
        va6 = draw_outcome(baseline, bool(positive[i]), rng)
        paths = []
        for view in ("h", "v"):
            # the two cuts see slightly different apertures
            img = render_oct(config, raw[i, 5] + rng.normal(0, 0.05), rng)
            rel = f"images/{pid}_{view}.png"
            atomic_write_bytes(os.path.join(out_dir, rel), encode_png(ImageBuffer(img)))
            paths.append(rel)
        clinical = ClinicalFeatures(float(round(raw[i, 0], 2)), float(round(raw[i, 1], 2)),
                                    bool(raw[i, 2]), bool(raw[i, 3]), baseline)
        records.append(PatientRecord(pid, paths[0], paths[1], clinical, va6, "train"))
    if n >= 3:
        records = split_dataset(records, config.split_fractions, seed)

    provenance = f"synthetic:{config.digest()}"
    manifest = DatasetManifest(records, provenance, os.path.abspath(out_dir))
    write_manifest(manifest, os.path.join(out_dir, "manifest.csv"))
    atomic_write_bytes(os.path.join(out_dir, "provenance.txt"), (provenance + "\n").encode())
    atomic_write_bytes(os.path.join(out_dir, "synthetic_config.json"), config.to_json().encode())
    truth = {
        "seed": seed,
        "feature_names": list(FEATURE_NAMES),
        "coefficients": [float(c) for c in coefficient_vector(config)],
        "intercept": intercept,
        "apertures": {r.patient_id: float(raw[i, 5]) for i, r in enumerate(records)},
    }
    atomic_write_bytes(os.path.join(out_dir, "ground_truth.json"),
                       (json.dumps(truth, indent=2, sort_keys=True) + "\n").encode())
    return SyntheticDataset(manifest, intercept, raw, prob)


def load_ground_truth(out_dir: str) -> dict:
    with open(os.path.join(out_dir, "ground_truth.json"), encoding="utf-8") as fh:
        return json.load(fh)


__all__ = [
    "COHORT", "DEFAULT_COEFFICIENTS", "FEATURE_NAMES", "SEPARABLE_COEFFICIENTS", "SyntheticConfig",
    "SyntheticDataset", "draw_features", "generate_synthetic", "load_ground_truth",
    "render_oct", "solve_intercept", "standardize_truth",
]
