"""Where do the discriminator's gradients go?

Build one batch, backpropagate only the discriminator loss, and look at
which parameter groups receive a gradient in each mode.
"""

import numpy as np

from masknet import autodiff as ad
from masknet.autodiff import Tensor
from masknet.config import ExperimentConfig
from masknet.losses import cross_entropy
from masknet.model import MaskNet
from masknet.synth import build_dataset
from masknet.training import length_batches, stack_features

cfg = ExperimentConfig()
ds = build_dataset(cfg.data)
train = ds["train"]
idx = length_batches(train, 16)[0]
X = stack_features(train, idx)
accents = [train[i].accent for i in idx]
print("batch", X.shape, "accents", accents)

# the mask: one value per channel, repeated over time
m = MaskNet(cfg.model)
b = m.forward(X)
print("mask shape", b.M.shape, "range", b.M.data.min(), b.M.data.max())
print("same mask at every frame:", np.array_equal(b.M.data, b.M.data[:, :, :1].repeat(b.M.shape[2], 2)))


def grad_norms(mode):
    model = MaskNet(cfg.with_mode(mode).model)
    out = model.forward(X)
    model.zero_grad()
    ad.backward(cross_entropy(out.discriminator_logits, accents))
    groups = {}
    for name, p in model.params.items():
        g = 0.0 if p.grad is None else float(np.sum(p.grad.astype(np.float64) ** 2))
        groups[name.split(".")[0]] = groups.get(name.split(".")[0], 0.0) + g
    return {k: np.sqrt(v) for k, v in groups.items()}


for mode in ("multitask", "grl", "masknet"):
    print(mode, {k: f"{v:.3g}" for k, v in grad_norms(mode).items()})
# masknet: the encoder row is exactly 0, the forget net absorbs the reversed signal

# reversal is an exact -lambda scaling
x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
ad.backward(ad.total(ad.grad_reverse(x, 0.5)))
print("grad through grad_reverse(lambda=0.5):", x.grad)
