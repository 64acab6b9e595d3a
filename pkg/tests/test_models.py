import os

import numpy as np
import pytest

from octoutcome import functional as F
from octoutcome.models import (ARCHITECTURES, build_model, forward_logit, freeze_backbone, get_architecture,
                               param_count, trainable_parameters)
from octoutcome.optim import Adam
from octoutcome.tensor import ShapeError, Tensor, no_grad
from octoutcome.weights import (WeightFileError, from_bytes, load_weights, save_weights, to_bytes)


def resnet50_param_count_by_shape_walk(n_out=1):
    """Enumerate the standard bottleneck layout (3-4-6-3) shape by shape."""

    def conv(cin, cout, k):
        return cin * cout * k * k

    def bn(c):
        return 2 * c

    total = conv(3, 64, 7) + bn(64)
    cin = 64
    for width, depth in ((64, 3), (128, 4), (256, 6), (512, 3)):
        for j in range(depth):
            cout = width * 4
            total += conv(cin, width, 1) + bn(width)
            total += conv(width, width, 3) + bn(width)
            total += conv(width, cout, 1) + bn(cout)
            if j == 0:
                total += conv(cin, cout, 1) + bn(cout)
            cin = cout
    return total + cin * n_out + n_out


def test_resnet50_parameter_count_matches_shape_walk():
    model = build_model("ResNet-50", input_size=64)
    assert param_count(model) == resnet50_param_count_by_shape_walk() == 23_510_081


def test_parameter_counts_are_strictly_ordered():
    counts = {name: param_count(build_model(name, input_size=32)) for name in ARCHITECTURES}
    order = ["CBR-Tiny", "CBR-Small", "CBR-Tall", "CBR-Wide", "ResNet-50"]
    assert all(counts[a] < counts[b] for a, b in zip(order, order[1:]))


def test_aliases_resolve_to_same_architecture():
    assert get_architecture("CBR-LargeW") is get_architecture("CBR-Wide")
    assert get_architecture("CBR-LargeT") is get_architecture("CBR-Tall")
    with pytest.raises(KeyError):
        get_architecture("VGG-16")


def test_same_seed_gives_bitwise_identical_weights():
    a = build_model("CBR-Tiny", seed=0).state_dict()
    b = build_model("CBR-Tiny", seed=0).state_dict()
    c = build_model("CBR-Tiny", seed=1).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_weight_file_round_trips(tmp_path):
    model = build_model("CBR-Small", seed=3, input_size=32)
    path = tmp_path / "small.weights"
    save_weights(model.weights(), str(path))
    loaded = load_weights(str(path))
    assert loaded == model.weights()
    again = build_model("CBR-Small", str(path), seed=99, input_size=32)
    assert all(np.array_equal(v, again.state_dict()[k]) for k, v in model.state_dict().items())
    save_weights(loaded, str(tmp_path / "again.weights"))
    assert path.read_bytes() == (tmp_path / "again.weights").read_bytes()


def test_corrupt_and_mismatched_weight_files_are_rejected(tmp_path):
    raw = to_bytes(build_model("CBR-Tiny").weights())
    with pytest.raises(WeightFileError):
        from_bytes(raw[:-7])
    with pytest.raises(WeightFileError):
        from_bytes(b"NOPE" + raw[4:])
    path = tmp_path / "tiny.weights"
    path.write_bytes(raw)
    with pytest.raises(ValueError, match="CBR-Tiny"):
        build_model("CBR-Small", str(path))


def test_shape_mismatch_lists_offending_paths():
    w = build_model("CBR-Tiny").weights()
    w.tensors["block1.conv.weight"] = np.zeros((1, 1, 1, 1), dtype=np.float32)
    with pytest.raises(ValueError, match="block1.conv.weight"):
        build_model("CBR-Tiny", w)


def test_backbone_only_file_loads_and_keeps_head():
    full = build_model("CBR-Tiny", seed=4)
    w = full.weights("byol")
    for k in list(w.tensors):
        if k.startswith("head."):
            del w.tensors[k]
    model = build_model("CBR-Tiny", w, seed=0)
    assert model.provenance == "byol"
    np.testing.assert_array_equal(model.block1.conv.weight.data, full.block1.conv.weight.data)


@pytest.mark.parametrize("name", list(ARCHITECTURES))
def test_every_architecture_accepts_224_and_emits_one_logit(name):
    if name == "ResNet-50":
        pytest.importorskip("numba")
    model = build_model(name, input_size=224).eval()
    with no_grad():
        out = forward_logit(model, np.zeros((1, 3, 224, 224), dtype=np.float32))
    assert out.shape == (1,)


def test_wrong_spatial_size_is_rejected_naming_dimension():
    model = build_model("CBR-Tiny", input_size=64)
    with pytest.raises(ShapeError, match="height"):
        forward_logit(model, np.zeros((1, 3, 32, 64), dtype=np.float32))
    with pytest.raises(ShapeError, match="channels"):
        forward_logit(model, np.zeros((1, 1, 64, 64), dtype=np.float32))


def test_zero_head_on_zero_input_gives_zero_logit():
    model = build_model("CBR-Tiny", input_size=32, zero_head=True)
    out = forward_logit(model, np.zeros((2, 3, 32, 32), dtype=np.float32))
    np.testing.assert_array_equal(out.data, [0.0, 0.0])


def test_train_mode_forward_is_pure_without_updates():
    model = build_model("CBR-Tiny", input_size=32).train()
    x = np.random.default_rng(0).standard_normal((4, 3, 32, 32)).astype(np.float32)
    a = forward_logit(model, x).data
    b = forward_logit(model, x).data
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("name", ["CBR-Tiny", "CBR-Tall", "ResNet-50"])
def test_eval_outputs_do_not_depend_on_batch_composition(name):
    model = build_model(name, input_size=32, seed=2).eval()
    x = np.random.default_rng(1).standard_normal((5, 3, 32, 32)).astype(np.float32)
    with no_grad():
        full = forward_logit(model, x).data
        single = np.concatenate([forward_logit(model, x[i:i + 1]).data for i in range(5)])
        subset = forward_logit(model, x[[4, 1]]).data
    np.testing.assert_array_equal(full, single)
    np.testing.assert_array_equal(subset, full[[4, 1]])


def _one_step(model, x, y):
    opt = Adam(trainable_parameters(model), lr=1e-3)
    loss = F.bce_with_logits(model(Tensor(x)), y)
    loss.backward()
    opt.step()
    opt.zero_grad()


def test_frozen_backbone_stays_fixed_while_head_learns():
    model = freeze_backbone(build_model("CBR-Tiny", input_size=32, seed=0)).train()
    before = {k: v.copy() for k, v in model.state_dict().items()}
    rng = np.random.default_rng(0)
    for _ in range(50):
        _one_step(model, rng.standard_normal((4, 3, 32, 32)).astype(np.float32), np.array([0, 1, 0, 1.0]))
    after = model.state_dict()
    # backbone parameters and batch-norm statistics are untouched
    assert all(np.array_equal(before[k], after[k]) for k in before if not k.startswith("head."))
    assert not np.array_equal(before["head.weight"], after["head.weight"])
    assert all(p.requires_grad is False for p in model.backbone_parameters())


def test_unfrozen_model_updates_backbone_after_one_step():
    model = build_model("CBR-Tiny", input_size=32, seed=0).train()
    before = model.block1.conv.weight.data.copy()
    _one_step(model, np.random.default_rng(0).standard_normal((4, 3, 32, 32)).astype(np.float32),
              np.array([0, 1, 0, 1.0]))
    assert not np.array_equal(before, model.block1.conv.weight.data)
