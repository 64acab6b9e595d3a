"""CBR family and ResNet-50 classifiers emitting a single logit."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np

from . import functional as F
from .nn import (BatchNorm, Conv2d, GlobalAvgPool, Linear, MaxPool2d, Module,
                 Sequential, init_uniform_fan_in)
from .tensor import ShapeError, Tensor
from .weights import ModelWeights, load_weights, state_to_weights


@dataclass(frozen=True)
class ConvBlockSpec:
    channels: int
    kernel: int = 3
    stride: int = 1
    pool: bool = True


@dataclass(frozen=True)
class StageSpec:
    width: int
    depth: int
    stride: int


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str
    family: str  # "cbr" or "resnet"
    blocks: Tuple[Union[ConvBlockSpec, StageSpec], ...]


def _cbr(name, channels, pooled=None):
    pooled = set(range(len(channels))) if pooled is None else set(pooled)
    return ArchitectureSpec(name, "cbr", tuple(
        ConvBlockSpec(c, pool=i in pooled) for i, c in enumerate(channels)))


ARCHITECTURES = {
    "CBR-Tiny": _cbr("CBR-Tiny", [16, 32, 64, 128]),
    "CBR-Small": _cbr("CBR-Small", [32, 64, 128, 256]),
    "CBR-Wide": _cbr("CBR-Wide", [64, 128, 256, 512]),
    # pooling after blocks 1, 2, 3 and 5 (1-based)
    "CBR-Tall": _cbr("CBR-Tall", [32, 64, 128, 128, 256, 256], pooled=[0, 1, 2, 4]),
    "ResNet-50": ArchitectureSpec("ResNet-50", "resnet", (
        StageSpec(64, 3, 1), StageSpec(128, 4, 2), StageSpec(256, 6, 2), StageSpec(512, 3, 2))),
}

# Alternate names used for the two larger CBR models in some result tables.
ALIASES = {"CBR-LargeW": "CBR-Wide", "CBR-LargeT": "CBR-Tall"}


def get_architecture(name: Union[str, ArchitectureSpec]) -> ArchitectureSpec:
    if isinstance(name, ArchitectureSpec):
        return name
    name = ALIASES.get(name, name)
    for key, spec in ARCHITECTURES.items():
        if key.lower() == name.lower():
            return spec
    raise KeyError(f"unknown architecture {name!r}; known: {', '.join(ARCHITECTURES)}")


class CBRBlock(Module):
    def __init__(self, in_ch: int, spec: ConvBlockSpec):
        super().__init__()
        self.conv = Conv2d(in_ch, spec.channels, spec.kernel, spec.stride, padding=spec.kernel // 2)
        self.bn = BatchNorm(spec.channels)
        self.pool = MaxPool2d(2) if spec.pool else None

    def forward(self, x):
        x = F.relu(self.bn(self.conv(x)))
        return self.pool(x) if self.pool is not None else x


class Bottleneck(Module):
    expansion = 4

    def __init__(self, in_ch: int, width: int, stride: int):
        super().__init__()
        out_ch = width * self.expansion
        self.conv1 = Conv2d(in_ch, width, 1)
        self.bn1 = BatchNorm(width)
        self.conv2 = Conv2d(width, width, 3, stride=stride, padding=1)
        self.bn2 = BatchNorm(width)
        self.conv3 = Conv2d(width, out_ch, 1)
        self.bn3 = BatchNorm(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.downsample = Sequential(Conv2d(in_ch, out_ch, 1, stride=stride), BatchNorm(out_ch))
        else:
            self.downsample = None

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        identity = self.downsample(x) if self.downsample is not None else x
        return F.relu(out + identity)


class VisionModel(Module):
    """Backbone + global average pool + dense head producing one logit per image."""

    head_name = "head"

    def __init__(self, spec: ArchitectureSpec, input_size: int = 224):
        super().__init__()
        object.__setattr__(self, "spec", spec)
        object.__setattr__(self, "input_size", int(input_size))
        object.__setattr__(self, "frozen", False)

    @property
    def classifier(self) -> Linear:
        return getattr(self, self.head_name)

    def head_paths(self) -> List[str]:
        return [k for k in self.state_dict() if k.startswith(self.head_name + ".")]

    def backbone_parameters(self) -> List[Tensor]:
        prefix = self.head_name + "."
        return [p for k, p in self.named_parameters() if not k.startswith(prefix)]

    def features(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def forward(self, x: Tensor) -> Tensor:
        return self.classifier(self.features(x)).reshape(-1)

    def train(self, mode: bool = True):
        super().train(mode)
        if self.frozen:
            # a frozen backbone keeps its batchnorm statistics fixed too
            for name, m in self._modules.items():
                if name != self.head_name:
                    m.train(False)
        return self

    def weights(self, provenance: str = "random") -> ModelWeights:
        return state_to_weights(self.state_dict(), self.spec.name, provenance)


class CBRNet(VisionModel):
    def __init__(self, spec: ArchitectureSpec, input_size: int = 224):
        super().__init__(spec, input_size)
        in_ch = 3
        for i, block in enumerate(spec.blocks):
            self.add_module(f"block{i + 1}", CBRBlock(in_ch, block))
            in_ch = block.channels
        object.__setattr__(self, "feature_dim", in_ch)
        self.gap = GlobalAvgPool()
        self.head = Linear(in_ch, 1)

    def features(self, x):
        for i in range(len(self.spec.blocks)):
            x = getattr(self, f"block{i + 1}")(x)
        return self.gap(x)


class ResNet50(VisionModel):
    head_name = "fc"

    def __init__(self, spec: ArchitectureSpec, input_size: int = 224):
        super().__init__(spec, input_size)
        self.conv1 = Conv2d(3, 64, 7, stride=2, padding=3)
        self.bn1 = BatchNorm(64)
        self.maxpool = MaxPool2d(3, stride=2, padding=1)
        in_ch = 64
        for i, stage in enumerate(spec.blocks):
            blocks = []
            for j in range(stage.depth):
                blocks.append(Bottleneck(in_ch, stage.width, stage.stride if j == 0 else 1))
                in_ch = stage.width * Bottleneck.expansion
            self.add_module(f"layer{i + 1}", Sequential(*blocks))
        object.__setattr__(self, "feature_dim", in_ch)
        self.gap = GlobalAvgPool()
        self.fc = Linear(in_ch, 1)

    def features(self, x):
        x = self.maxpool(F.relu(self.bn1(self.conv1(x))))
        for i in range(len(self.spec.blocks)):
            x = getattr(self, f"layer{i + 1}")(x)
        return self.gap(x)


def param_count(model: Module) -> int:
    return int(sum(p.size for p in model.parameters()))


def _mismatch(message: str, offending: List[str]) -> ValueError:
    listed = ", ".join(offending[:10])
    more = f" (+{len(offending) - 10} more)" if len(offending) > 10 else ""
    return ValueError(f"{message}: {listed}{more}")


def load_into(model: VisionModel, weights: ModelWeights) -> None:
    """Load ``weights`` into ``model`` after validating paths and shapes.

    Every backbone path must be present with its exact shape. Head paths may
    be absent altogether (backbone-only files from pretraining or external
    conversion), in which case the model keeps its current head.
    """
    if weights.architecture and weights.architecture != model.spec.name:
        raise ValueError(f"weight file is for {weights.architecture!r}, model is {model.spec.name!r}")
    state = model.state_dict()
    head = set(model.head_paths())
    extra = [k for k in weights.tensors if k not in state]
    if extra:
        raise _mismatch("unexpected paths in weight file", extra)
    missing = [k for k in state if k not in weights.tensors]
    if missing and not (set(missing) == head):
        raise _mismatch("missing paths in weight file", [k for k in missing if k not in head] or missing)
    bad = [f"{k} {tuple(v.shape)}!={tuple(state[k].shape)}"
           for k, v in weights.tensors.items() if tuple(v.shape) != tuple(state[k].shape)]
    if bad:
        raise _mismatch("shape mismatch", bad)
    model.load_state_dict(weights.tensors)


def build_model(arch: Union[str, ArchitectureSpec], init: Union[str, ModelWeights] = "random",
                seed: int = 0, input_size: int = 224, zero_head: bool = False) -> VisionModel:
    """Construct a model; ``init`` is "random", a weight-file path or a ModelWeights."""
    spec = get_architecture(arch)
    cls = ResNet50 if spec.family == "resnet" else CBRNet
    model = cls(spec, input_size)
    init_uniform_fan_in(model, np.random.default_rng(seed))
    provenance = "random"
    if not (isinstance(init, str) and init == "random"):
        weights = load_weights(init) if isinstance(init, str) else init
        load_into(model, weights)
        provenance = weights.provenance
    if zero_head:
        model.classifier.weight.data[...] = 0
        model.classifier.bias.data[...] = 0
    object.__setattr__(model, "provenance", provenance)
    return model


def freeze_backbone(model: VisionModel) -> VisionModel:
    """Only the dense head keeps receiving gradients; backbone batchnorm stays in eval mode."""
    for p in model.backbone_parameters():
        p.requires_grad = False
    object.__setattr__(model, "frozen", True)
    model.train(model.training)
    return model


def trainable_parameters(model: Module) -> List[Tensor]:
    return [p for p in model.parameters() if p.requires_grad]


def forward_logit(model: VisionModel, batch: Union[Tensor, np.ndarray]) -> Tensor:
    """Logits, shape (B,), for a normalised (B, 3, S, S) batch with S = model.input_size."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.ndim != 4:
        raise ShapeError(f"expected a 4-d batch, got shape {x.shape}")
    if x.shape[1] != 3:
        raise ShapeError(f"channels (dim 1) is {x.shape[1]}, expected 3")
    S = model.input_size
    if x.shape[2] != S:
        raise ShapeError(f"height (dim 2) is {x.shape[2]}, expected {S}")
    if x.shape[3] != S:
        raise ShapeError(f"width (dim 3) is {x.shape[3]}, expected {S}")
    return model(x)


def copy_model(model: VisionModel) -> VisionModel:
    """Independent copy with identical weights, mode and freeze state."""
    clone = build_model(model.spec, "random", 0, model.input_size)
    clone.load_state_dict(model.state_dict())
    object.__setattr__(clone, "provenance", getattr(model, "provenance", "random"))
    if model.frozen:
        freeze_backbone(clone)
    clone.train(model.training)
    return clone


def clone_state(model: Module):
    return {k: v.copy() for k, v in model.state_dict().items()}


__all__ = [
    "ARCHITECTURES", "ArchitectureSpec", "CBRNet", "ResNet50", "VisionModel", "build_model",
    "clone_state", "copy_model", "forward_logit", "freeze_backbone", "get_architecture",
    "load_into", "param_count", "trainable_parameters",
]
