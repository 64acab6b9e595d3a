"""Self-supervised BYOL pretraining of a vision backbone.

An online network (encoder, projector, predictor) learns to predict the
target network's projection of a second augmented view of the same image.
The target (encoder, projector) is never trained directly; after every
optimiser step it moves towards the online weights by an exponential moving
average.
"""

from __future__ import annotations

import os
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from . import functional as F
from .imaging import AugmentationConfig, ImageBuffer, augment_train, read_image
from .models import VisionModel, build_model
from .nn import BatchNorm, Linear, Module
from .optim import Adam
from .perf import keep_heap_memory
from .tensor import Tensor, no_grad
from .weights import ModelWeights


@dataclass
class BYOLConfig:
    epochs: int = 20
    batch_size: int = 32
    accumulation: int = 8
    tau: float = 0.996
    projector_dim: int = 64
    projector_hidden: int = 128
    predictor_hidden: int = 128
    lr: float = 1e-4
    input_size: int = 224
    augmentation: Optional[AugmentationConfig] = None

    def __post_init__(self):
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationConfig.from_dict(self.augmentation)
        if self.augmentation is None:
            self.augmentation = (AugmentationConfig() if self.input_size == 224
                                 else AugmentationConfig.desk(self.input_size))
        if self.augmentation.final_size != self.input_size:
            raise ValueError("augmentation final_size must equal input_size")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must be in [0, 1], got {self.tau}")
        if min(self.epochs, self.batch_size, self.accumulation) < 1:
            raise ValueError("epochs, batch_size and accumulation must be positive")

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.accumulation

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augmentation"] = self.augmentation.to_dict()
        return d


class MLP(Module):
    """Linear -> batch norm -> relu -> linear, the projector/predictor shape."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.fc1 = Linear(in_dim, hidden)
        self.bn = BatchNorm(hidden)
        self.fc2 = Linear(hidden, out_dim)

    def forward(self, x):
        return self.fc2(F.relu(self.bn(self.fc1(x))))


def _init_mlp(mlp: MLP, rng: np.random.Generator) -> None:
    for lin in (mlp.fc1, mlp.fc2):
        fan_in = lin.weight.shape[1]
        a = np.sqrt(6.0 / fan_in)
        lin.weight.data[...] = rng.uniform(-a, a, lin.weight.shape)
        lin.bias.data[...] = 0


def cosine_loss(p: Tensor, z: Tensor) -> Tensor:
    """Per-row 2 - 2 cos(p, z); rejects zero-norm rows."""
    for name, t in (("prediction", p), ("target projection", z)):
        norms = np.linalg.norm(t.data.reshape(t.shape[0], -1), axis=1)
        if np.any(norms == 0):
            raise ValueError(f"zero-norm {name} vector; cosine undefined")
    return 2.0 - 2.0 * F.cosine_similarity(p, z)


def byol_loss(p1: Tensor, z2: Tensor, p2: Optional[Tensor] = None, z1: Optional[Tensor] = None) -> Tensor:
    """Symmetrised loss averaged over the batch; each term lies in [0, 4].

    With only ``p1, z2`` given, the one-directional loss is returned.
    """
    p1, z2 = _as_rows(p1), _as_rows(z2)
    loss = cosine_loss(p1, z2).mean()
    if p2 is None:
        return loss
    return (loss + cosine_loss(_as_rows(p2), _as_rows(z1)).mean()) * 0.5


def _as_rows(t) -> Tensor:
    t = t if isinstance(t, Tensor) else Tensor(np.asarray(t, dtype=np.float64))
    return t.reshape(1, -1) if t.ndim == 1 else t


def _param_map(obj) -> "OrderedDict[str, np.ndarray]":
    if isinstance(obj, Module):
        return OrderedDict((k, p.data) for k, p in obj.named_parameters())
    return OrderedDict(obj.items())


def ema_update(target, online, tau: float):
    """target <- tau * target + (1 - tau) * online, in place, over matching parameter paths.

    Accepts modules or mappings of path -> array.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    t_map, o_map = _param_map(target), _param_map(online)
    if list(t_map) != list(o_map):
        missing = sorted(set(o_map) ^ set(t_map))
        raise ValueError(f"parameter paths differ between target and online: {missing[:10]}")
    for key, t in t_map.items():
        o = o_map[key]
        if t.shape != o.shape:
            raise ValueError(f"shape mismatch at {key}: {t.shape} vs {o.shape}")
        t *= tau
        t += (1.0 - tau) * o
    return target


class BYOLNetwork(Module):
    """Encoder + projector (+ predictor for the online branch)."""

    def __init__(self, encoder: VisionModel, config: BYOLConfig, with_predictor: bool, rng):
        super().__init__()
        self.encoder = encoder
        self.projector = MLP(encoder.feature_dim, config.projector_hidden, config.projector_dim)
        _init_mlp(self.projector, rng)
        if with_predictor:
            self.predictor = MLP(config.projector_dim, config.predictor_hidden, config.projector_dim)
            _init_mlp(self.predictor, rng)
        else:
            self.predictor = None

    def project(self, x: Tensor) -> Tensor:
        return self.projector(self.encoder.features(x))

    def forward(self, x: Tensor) -> Tensor:
        z = self.project(x)
        return self.predictor(z) if self.predictor is not None else z


def encoder_parameter_paths(net: BYOLNetwork) -> List[str]:
    return [k for k, _ in net.named_parameters() if not k.startswith("predictor.")]


@dataclass
class BYOLResult:
    weights: ModelWeights
    epoch_losses: List[float]
    steps: int
    online: BYOLNetwork = field(repr=False)
    target: BYOLNetwork = field(repr=False)


def _encoder_weights(net: BYOLNetwork) -> ModelWeights:
    """Backbone tensors only: the classification head is not part of pretraining."""
    model = net.encoder
    head = set(model.head_paths())
    tensors = OrderedDict((k, np.array(v, dtype=np.float32))
                          for k, v in model.state_dict().items() if k not in head)
    return ModelWeights(model.spec.name, "byol", tensors)


def list_corpus(directory: str) -> List[str]:
    paths = []
    for root, _, files in os.walk(directory):
        paths.extend(os.path.join(root, f) for f in files if f.lower().endswith(".png"))
    return sorted(paths)


def pretrain(architecture: str, corpus: Union[str, Sequence[str], Sequence[ImageBuffer]],
             config: Optional[BYOLConfig] = None, seed: int = 0, log=None, on_step=None) -> BYOLResult:
    """Run BYOL and return backbone weights with provenance "byol".

    Gradients from ``accumulation`` micro-batches (each loss divided by
    ``accumulation``) are summed before one Adam step, followed by the target
    EMA update. Micro-batches left over at the end of an epoch are flushed as
    a final, rescaled step. Micro-batches of a single image are skipped since
    batch normalisation needs at least two samples.

    ``on_step(step, online, target)``, if given, is called after every EMA
    update with the two networks.
    """
    keep_heap_memory()
    config = config or BYOLConfig()
    if isinstance(corpus, str):
        corpus = list_corpus(corpus)
    images = [c if isinstance(c, ImageBuffer) else read_image(c) for c in corpus]
    if not images:
        raise ValueError("empty image corpus")
    aug = config.augmentation
    rng = np.random.default_rng([seed, 3])
    encoder = build_model(architecture, "random", seed, config.input_size)
    online = BYOLNetwork(encoder, config, True, rng)
    target_encoder = build_model(architecture, "random", seed, config.input_size)
    target = BYOLNetwork(target_encoder, config, False, rng)
    # the target starts as an exact copy of the online encoder + projector
    t_params = dict(target.named_parameters())
    for key, p in online.named_parameters():
        if key in t_params:
            t_params[key].data[...] = p.data
    for p in target.parameters():
        p.requires_grad = False
    online.train()
    target.train()
    head_prefix = f"encoder.{encoder.head_name}."
    params = [p for k, p in online.named_parameters()
              if p.requires_grad and not k.startswith(head_prefix)]
    opt = Adam(params, lr=config.lr)
    online_shared = OrderedDict((k, p.data) for k, p in online.named_parameters()
                                if not k.startswith("predictor."))
    target_map = OrderedDict((k, p.data) for k, p in target.named_parameters())

    S = config.input_size
    n = len(images)
    steps = 0
    epoch_losses: List[float] = []
    for epoch in range(config.epochs):
        order = np.random.default_rng([seed, 4, epoch]).permutation(n)
        losses = []
        pending = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            if idx.size < 2:
                continue
            views = []
            for v in range(2):
                buf = np.empty((idx.size, S, S, 3), dtype=np.float32)
                for j, i in enumerate(idx):
                    r = np.random.default_rng([seed, 5, epoch, int(i), v])
                    buf[j] = augment_train(images[i], aug, r).transpose(1, 2, 0)
                views.append(Tensor(buf.transpose(0, 3, 1, 2)))
            with no_grad():
                z1 = target.project(views[0])
                z2 = target.project(views[1])
            p1 = online(views[0])
            p2 = online(views[1])
            loss = byol_loss(p1, z2, p2, z1)
            (loss * (1.0 / config.accumulation)).backward()
            losses.append(float(loss.data))
            pending += 1
            if pending == config.accumulation:
                opt.step()
                opt.zero_grad()
                ema_update(target_map, online_shared, config.tau)
                steps += 1
                pending = 0
                if on_step:
                    on_step(steps, online, target)
        if pending:
            # average over the micro-batches actually accumulated
            for p in params:
                if p.grad is not None:
                    p.grad *= config.accumulation / pending
            opt.step()
            opt.zero_grad()
            ema_update(target_map, online_shared, config.tau)
            steps += 1
            if on_step:
                on_step(steps, online, target)
        epoch_losses.append(float(np.mean(losses)) if losses else float("nan"))
        if log:
            log(f"epoch {epoch + 1} loss {epoch_losses[-1]:.4f} steps {steps}")
    return BYOLResult(_encoder_weights(online), epoch_losses, steps, online, target)


__all__ = [
    "BYOLConfig", "BYOLNetwork", "BYOLResult", "MLP", "byol_loss", "cosine_loss", "ema_update",
    "list_corpus", "pretrain",
]
