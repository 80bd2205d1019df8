"""A shrunken version of the four-mode comparison, plus the forget-net timing.

Runs in about a minute. The full-size version is ``masknet matrix --seeds 0,1,2``.
"""

import numpy as np

from masknet.config import parse_config_text
from masknet.experiments import bench_forget_input, run_matrix
from masknet.metrics import probe_accuracy
from masknet.synth import build_dataset

cfg = parse_config_text(
    """
epochs = 10
data.train_count = 600
data.test_in_count = 150
data.test_ood_count = 150
"""
)

# accent is easy to read off the raw input: that is what the modes fight
ds = build_dataset(cfg.data)
pooled = {s: np.array([e.features.mean(1) for e in ds[s]]) for s in ("train", "test_in")}
labels = {s: [e.accent for e in ds[s]] for s in ("train", "test_in")}
print("raw-input probe accuracy", probe_accuracy(pooled["train"], labels["train"], pooled["test_in"], labels["test_in"]))

report = run_matrix(cfg, seeds=(0,), log=print)
print(report.format_table())
for mode in ("multitask", "grl", "masknet"):
    print(mode, "training-time adversary accuracy", report.runs[(mode, 0)].adversary_accuracy)

print(bench_forget_input(cfg, steps=100, warmup=10).format())
