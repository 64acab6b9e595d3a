"""Self-supervised pretraining on unlabeled scans, then reuse as an initialisation.

BYOL trains an online network to predict a slowly moving (EMA) copy of
itself on two augmentations of the same image. Here it runs on the PNGs of a
synthetic cohort, prints the per-epoch loss, and checks the resulting
encoder drops into the ResNet-50 preset that expects BYOL weights.

    python3 demos/byol_pretraining.py        # ~1 minute
"""

import tempfile

import numpy as np

from octoutcome.byol import BYOLConfig, list_corpus, pretrain
from octoutcome.models import build_model
from octoutcome.synthetic import SyntheticConfig, generate_synthetic
from octoutcome.training import get_preset, resolve_init
from octoutcome.weights import save_weights

root = tempfile.mkdtemp(prefix="byol_")
generate_synthetic(SyntheticConfig(n=64), seed=0, out_dir=root)
corpus = list_corpus(root)
print(len(corpus), "unlabeled images")

# 128 images / (32 per micro-batch x 2 accumulated) = 2 optimiser steps per epoch
config = BYOLConfig(epochs=8, batch_size=32, accumulation=2, input_size=48)
result = pretrain("CBR-Tiny", corpus, config, seed=0, log=print)
print("steps:", result.steps, " loss first/last epoch:",
      round(result.epoch_losses[0], 4), round(result.epoch_losses[-1], 4))

# the target network is an exponential moving average of the online one
online = dict(result.online.named_parameters())
gap = max(float(np.max(np.abs(p.data - online[k].data))) for k, p in result.target.named_parameters())
print(f"largest online/target difference after {result.steps} EMA updates: {gap:.2e}")

# a ResNet-50 encoder trained the same way initialises the rn-by preset
short = pretrain("ResNet-50", corpus[:16], BYOLConfig(epochs=1, batch_size=8, accumulation=1, input_size=32))
path = root + "/rn_by.weights"
save_weights(short.weights, path)
preset = get_preset("rn-by")
model = build_model(preset.architecture, resolve_init(preset, {"byol": path}), seed=0, input_size=32)
print(preset.label, "initialised from", path, "-", len(short.weights.tensors), "backbone tensors")
