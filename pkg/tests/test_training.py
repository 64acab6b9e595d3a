import os
import shutil

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from octoutcome.dataset import DatasetManifest, labels
from octoutcome.imaging import AugmentationConfig
from octoutcome.models import build_model
from octoutcome.synthetic import SyntheticConfig, generate_synthetic
from octoutcome.training import (ImageStore, RunResult, TrainConfig, get_preset, load_run, permute_outcomes,
                                 predict_patient, predict_patients, resolve_init, save_run, select_best,
                                 train_run, view_probabilities)

SIZE = 32


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    generate_synthetic(SyntheticConfig.separable(n=24, image_height=24, image_width=32), 0, str(root))
    from octoutcome.dataset import read_manifest
    return read_manifest(str(root / "manifest.csv"))


def small_config(**kw):
    base = dict(batch_size=8, max_steps=6, eval_every=2, input_size=SIZE, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_select_best_examples():
    assert select_best([(50, 0.6), (100, 0.8), (150, 0.7)]) == 100
    assert select_best([(50, 0.7), (100, 0.7)]) == 50
    with pytest.raises(ValueError):
        select_best([])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 5).map(lambda v: v / 5), min_size=1, max_size=20))
def test_select_best_matches_linear_scan(values):
    curve = [(50 * (i + 1), v) for i, v in enumerate(values)]
    best_i = 0
    for i in range(len(values)):
        if values[i] > values[best_i]:
            best_i = i
    assert select_best(curve) == curve[best_i][0]


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(max_steps=1000, eval_every=300)
    with pytest.raises(ValueError):
        TrainConfig(input_size=64, augmentation=AugmentationConfig())
    assert TrainConfig(input_size=64).augmentation == AugmentationConfig.desk(64)
    assert TrainConfig().lr == 1e-4 and TrainConfig().batch_size == 32 and TrainConfig().max_steps == 1000


def test_presets_cover_the_nine_configurations():
    assert len({get_preset(n).name for n in ["rn-rand", "rn-in", "RN-IN†", "rn-by", "RN-BY†", "cbr-tiny",
                                              "cbr-small", "CBR-LargeW", "CBR-LargeT"]}) == 9
    assert get_preset("RN-BY†").freeze and get_preset("rn-by-frozen").init == "byol"
    with pytest.raises(KeyError):
        get_preset("vgg")
    with pytest.raises(ValueError):
        resolve_init(get_preset("rn-in"), {})


def test_run_is_deterministic_and_keeps_best_checkpoint(dataset, tmp_path):
    a = train_run("CBR-Tiny", dataset, small_config())
    b = train_run("CBR-Tiny", dataset, small_config())
    assert a.val_auroc_curve == b.val_auroc_curve and a.best_step == b.best_step
    assert a.best_weights == b.best_weights
    assert [s for s, _ in a.val_auroc_curve] == [2, 4, 6]
    assert a.best_step == select_best(a.val_auroc_curve)
    assert len(a.loss_curve) == 6
    # the retained weights reproduce the validation AUROC recorded at the best step
    from octoutcome.metrics import auroc
    model = build_model("CBR-Tiny", a.best_weights, 0, SIZE)
    val = dataset.split("val")
    store = ImageStore(dataset)
    probs = predict_patients(model, val, store, small_config().augmentation)
    assert auroc(probs, labels(val)) == pytest.approx(dict(a.val_auroc_curve)[a.best_step], abs=1e-12)
    save_run(a, str(tmp_path), "run_0")
    back = load_run(str(tmp_path), "run_0")
    assert back.best_weights == a.best_weights and back.val_auroc_curve == a.val_auroc_curve


def test_stop_at_ends_on_first_evaluation_reaching_the_target(dataset):
    full = train_run("CBR-Tiny", dataset, small_config())
    first = full.val_auroc_curve[0][1]
    # the prefix of an early-stopped run is the full run's prefix
    stopped = train_run("CBR-Tiny", dataset, small_config(), stop_at=first)
    assert stopped.val_auroc_curve == full.val_auroc_curve[:1]
    assert stopped.loss_curve == full.loss_curve[:2]
    assert stopped.best_step == 2
    unreachable = train_run("CBR-Tiny", dataset, small_config(), stop_at=1.1)
    assert unreachable.val_auroc_curve == full.val_auroc_curve


def test_empty_validation_split_is_rejected(dataset):
    train_only = DatasetManifest([r for r in dataset.records if r.split == "train"], root=dataset.root)
    with pytest.raises(ValueError, match="validation"):
        train_run("CBR-Tiny", train_only, small_config())


def test_frozen_run_only_changes_head(dataset):
    init = build_model("CBR-Tiny", "random", 5, SIZE).weights()
    res = train_run("CBR-Tiny", dataset, small_config(freeze=True, seed=5))
    for k, v in res.best_weights.tensors.items():
        if not k.startswith("head."):
            np.testing.assert_array_equal(v, init.tensors[k])


def test_two_view_prediction_is_mean_and_symmetric(dataset, tmp_path):
    model = build_model("CBR-Tiny", "random", 1, SIZE)
    cfg = AugmentationConfig.desk(SIZE)
    store = ImageStore(dataset)
    r = dataset.records[0]
    ph, pv = view_probabilities(model, [store.eval_tensor(r.oct_h, cfg), store.eval_tensor(r.oct_v, cfg)])
    assert predict_patient(model, r, store, cfg) == pytest.approx((ph + pv) / 2, abs=1e-15)
    from dataclasses import replace
    swapped = replace(r, oct_h=r.oct_v, oct_v=r.oct_h)
    assert predict_patient(model, swapped, store, cfg) == predict_patient(model, r, store, cfg)
    same = replace(r, oct_v=r.oct_h)
    assert predict_patient(model, same, store, cfg) == pytest.approx(ph, abs=1e-15)


def test_zero_head_predicts_one_half(dataset):
    model = build_model("CBR-Tiny", "random", 0, SIZE, zero_head=True)
    probs = predict_patients(model, dataset.records[:5], ImageStore(dataset), AugmentationConfig.desk(SIZE))
    np.testing.assert_array_equal(probs, 0.5)


def test_missing_image_is_rejected(dataset, tmp_path):
    root = tmp_path / "copy"
    shutil.copytree(dataset.root, root)
    os.remove(root / dataset.records[0].oct_h)
    broken = DatasetManifest(dataset.records, dataset.provenance, str(root))
    with pytest.raises(FileNotFoundError):
        predict_patients(build_model("CBR-Tiny", "random", 0, SIZE), broken.records[:1], ImageStore(broken),
                         AugmentationConfig.desk(SIZE))


def test_permuted_outcomes_keep_images_and_label_balance(dataset):
    perm = permute_outcomes(dataset, 0)
    assert [r.oct_h for r in perm.records] == [r.oct_h for r in dataset.records]
    assert sorted(labels(perm.records)) == sorted(labels(dataset.records))
    assert [r.split for r in perm.records] == [r.split for r in dataset.records]
