"""The four-mode comparison table and the forget-net input benchmark."""

from __future__ import annotations

import gc
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .model import MODES
from .synth import build_dataset
from .training import Trainer, format_records, length_batches, train

COLUMNS = ("test", "ood_a", "ood_b", "probe_accuracy")


@dataclass
class MatrixReport:
    """Rows are modes, columns are ``COLUMNS``; values are means over seeds."""

    seeds: tuple
    held_out: tuple
    runs: dict = field(default_factory=dict)  # (mode, seed) -> MetricsReport

    def cell(self, mode, column, seed=None):
        seeds = self.seeds if seed is None else (seed,)
        a, b = self.held_out
        key = {"test": "test_in", "ood_a": f"test_ood/a{a}", "ood_b": f"test_ood/a{b}"}
        vals = []
        for s in seeds:
            rep = self.runs[(mode, s)]
            vals.append(rep.probe_accuracy["test_in"] if column == "probe_accuracy" else rep.wer[key[column]])
        return float(np.mean(vals))

    def table(self):
        return {mode: {c: self.cell(mode, c) for c in COLUMNS} for mode in MODES}

    def records(self):
        rows = []
        for (mode, seed), rep in sorted(self.runs.items(), key=lambda kv: (MODES.index(kv[0][0]), kv[0][1])):
            rows.extend(rep.records())
        for mode, cols in self.table().items():
            rows.extend((f"matrix-{mode}", mode, "mean", c, v) for c, v in cols.items())
        return rows

    def timing_records(self):
        return [r for _, rep in sorted(self.runs.items()) for r in rep.timing_records()]

    def format_table(self):
        a, b = self.held_out
        head = ["mode", "Test WER", f"OOD a{a} WER", f"OOD a{b} WER", "probe acc"]
        lines = ["  ".join(f"{h:>12}" for h in head)]
        for mode, cols in self.table().items():
            lines.append("  ".join([f"{mode:>12}"] + [f"{cols[c]:12.2f}" for c in COLUMNS]))
        lines.append(f"means over seeds {list(self.seeds)}; probe: fresh linear classifier on pooled masked features")
        return "\n".join(lines) + "\n"


def run_matrix(cfg, seeds=(0,), out_dir=None, log=None):
    """Train and evaluate every mode for every seed on a shared dataset per seed.

    Modes share initial weights wherever parameter names coincide, because
    initialization is keyed by (seed, parameter name).
    """
    held = cfg.data.held_out_accents
    if len(held) != 2:
        raise ValueError("the comparison table expects exactly two held-out accents")
    report = MatrixReport(seeds=tuple(seeds), held_out=tuple(held))
    for seed in seeds:
        base = cfg.with_seed(seed)
        ds = build_dataset(base.data)
        for mode in MODES:
            run_dir = os.path.join(out_dir, f"{mode}-s{seed}") if out_dir else None
            _, rep = train(base.with_mode(mode), ds, out_dir=run_dir)
            report.runs[(mode, seed)] = rep
            if log:
                log(f"{mode} seed {seed}: wer {rep.wer} probe {rep.probe_accuracy}")
    if out_dir:
        write_matrix(report, out_dir)
    return report


def write_matrix(report, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "matrix.tsv"), "w", encoding="utf-8") as fh:
        fh.write(format_records(report.records()))
    with open(os.path.join(out_dir, "matrix.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.format_table())
    with open(os.path.join(out_dir, "timing.tsv"), "w", encoding="utf-8") as fh:
        fh.write(format_records(report.timing_records()))


# --------------------------------------------------------------- benchmark


@dataclass
class TimingStats:
    mean: float
    std: float
    steps: int

    @property
    def interval(self):
        return self.mean - 2 * self.std, self.mean + 2 * self.std


@dataclass
class BenchReport:
    encoder_params: int
    forget_params_z: int
    forget_params_x: int
    time_z: TimingStats
    time_x: TimingStats

    @property
    def overlap(self):
        lo_z, hi_z = self.time_z.interval
        lo_x, hi_x = self.time_x.interval
        return not (hi_z < lo_x or hi_x < lo_z)

    @property
    def verdict(self):
        if self.overlap:
            return "inconclusive: the mean +/- 2 std intervals overlap"
        return "F(Z) is faster" if self.time_z.mean < self.time_x.mean else "F(Z) is slower"

    def records(self):
        """Deterministic rows (parameter counts only)."""
        return [
            ("bench", "masknet", "encoder", "parameters", self.encoder_params),
            ("bench", "masknet", "forget_z", "parameters", self.forget_params_z),
            ("bench", "masknet", "forget_x", "parameters", self.forget_params_x),
        ]

    def timing_records(self):
        rows = []
        for name, t in (("forget_z", self.time_z), ("forget_x", self.time_x)):
            rows += [
                ("bench", "masknet", name, "step_seconds_mean", t.mean),
                ("bench", "masknet", name, "step_seconds_std", t.std),
                ("bench", "masknet", name, "steps", t.steps),
            ]
        return rows

    def format(self):
        lines = [
            f"encoder parameters:          {self.encoder_params}",
            f"forget net on Z, parameters: {self.forget_params_z}",
            f"forget net on X, parameters: {self.forget_params_x}",
        ]
        for name, t in (("F(Z)", self.time_z), ("F(X)", self.time_x)):
            lo, hi = t.interval
            lines.append(
                f"{name} step time: {1e3 * t.mean:.3f} ms +/- {1e3 * t.std:.3f} ms "
                f"(2 std interval [{1e3 * lo:.3f}, {1e3 * hi:.3f}] ms, {t.steps} steps)"
            )
        lines.append(f"verdict: {self.verdict}")
        return "\n".join(lines) + "\n"


def bench_forget_input(cfg, steps=100, warmup=10, dataset=None):
    """Per-step training time for a forget net on Z versus a duplicate encoder on X.

    Both variants train on the same fixed batch (one length bucket, so the
    input shape is constant) and their steps alternate, so slow drift of
    the machine affects both equally. Garbage collection is paused while
    timing.
    """
    cfg = cfg.with_mode("masknet")
    ds = dataset if dataset is not None else build_dataset(cfg.data)
    trainers = {
        fi: Trainer(replace(cfg, model=replace(cfg.model, forget_input=fi)), ds) for fi in ("z", "x")
    }
    examples = trainers["z"].train_set
    idx = max(length_batches(examples, cfg.batch_size), key=len)
    times = {"z": [], "x": []}
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        for i in range(warmup + steps):
            for fi, tr in trainers.items():
                t0 = time.perf_counter()
                tr.train_step(examples, idx)
                dt = time.perf_counter() - t0
                if i >= warmup:
                    times[fi].append(dt)
    finally:
        if was_enabled:
            gc.enable()
    m = trainers["z"].model
    mx = trainers["x"].model
    stats = {fi: TimingStats(float(np.mean(t)), float(np.std(t, ddof=1)), len(t)) for fi, t in times.items()}
    return BenchReport(
        encoder_params=m.parameter_count("encoder."),
        forget_params_z=m.parameter_count("forget."),
        forget_params_x=mx.parameter_count("forget."),
        time_z=stats["z"],
        time_x=stats["x"],
    )
