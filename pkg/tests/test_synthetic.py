import json
import os

import numpy as np
import pytest

from octoutcome.dataset import labels, read_manifest
from octoutcome.imaging import read_image
from octoutcome.synthetic import SyntheticConfig, draw_features, generate_synthetic, load_ground_truth


def test_cohort_statistics_match_configured_targets():
    cfg = SyntheticConfig(n=500)
    X = draw_features(cfg, 500, np.random.default_rng([0, 0]))
    assert abs(X[:, 0].mean() - 66.57) <= 1.0
    assert abs(X[:, 4].mean() - 50.43) <= 2.0


def test_generated_dataset_files_and_prevalence(tmp_path):
    ds = generate_synthetic(SyntheticConfig(n=500, image_height=16, image_width=24), seed=0, out_dir=str(tmp_path))
    m = read_manifest(str(tmp_path / "manifest.csv"))
    assert m.records == ds.manifest.records
    assert m.provenance.startswith("synthetic:")
    assert abs(100 * labels(m.records).mean() - 49.4) <= 5.0
    img = read_image(m.image_path(m.records[0].oct_h))
    assert (img.height, img.width, img.channels) == (16, 24, 1)
    truth = load_ground_truth(str(tmp_path))
    assert truth["feature_names"][-1] == "aperture" and len(truth["coefficients"]) == 6
    assert json.loads((tmp_path / "synthetic_config.json").read_text())["n"] == 500


def test_generation_is_deterministic(tmp_path):
    cfg = SyntheticConfig(n=12, image_height=16, image_width=16)
    generate_synthetic(cfg, 7, str(tmp_path / "a"))
    generate_synthetic(cfg, 7, str(tmp_path / "b"))
    for root, _, files in os.walk(tmp_path / "a"):
        for f in files:
            rel = os.path.relpath(os.path.join(root, f), tmp_path / "a")
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_empty_dataset(tmp_path):
    ds = generate_synthetic(SyntheticConfig(n=0), 0, str(tmp_path))
    assert ds.manifest.records == []
    assert os.listdir(tmp_path / "images") == []


def test_unwritable_output_is_reported(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        generate_synthetic(SyntheticConfig(n=3), 0, str(blocker / "sub"))


def test_separable_images_carry_the_label_signal(tmp_path):
    ds = generate_synthetic(SyntheticConfig.separable(n=60, image_height=32, image_width=48), 1, str(tmp_path))
    m = ds.manifest
    # darker (wider hole) images belong to the non-improving class
    mean_intensity = np.array([read_image(m.image_path(r.oct_h)).data.mean() for r in m.records])
    y = labels(m.records)
    assert mean_intensity[y == 1].mean() > mean_intensity[y == 0].mean()


def test_config_validation():
    with pytest.raises(ValueError):
        SyntheticConfig(prevalence=1.5)
    with pytest.raises(ValueError):
        SyntheticConfig(coefficients={"height": 1.0})
    cfg = SyntheticConfig(n=5)
    assert SyntheticConfig.from_dict(json.loads(cfg.to_json())).digest() == cfg.digest()
