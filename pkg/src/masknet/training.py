"""Training loop, evaluation, and the metrics report.

Utterances are batched by length (every synthetic utterance of L tokens
has the same frame count), so no padding or length masks are needed.
"""

from __future__ import annotations

import copy
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint, save_checkpoint
from .decoding import beam_decode, greedy_decode
from .errors import ContractError, ModeError, NonFiniteError, TrainingDiverged
from .losses import total_loss
from .metrics import probe_accuracy, wer
from .model import MaskNet
from .synth import build_dataset

log = logging.getLogger(__name__)


# ------------------------------------------------------------- optimizers


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps, self.weight_decay = lr, beta1, beta2, eps, weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.beta1**t
        c2 = 1 - self.beta2**t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)

    def state(self):
        arrays = {f"m.{k}": v for k, v in self.m.items()}
        arrays.update({f"v.{k}": v for k, v in self.v.items()})
        return {"step": self.step_count}, arrays

    def load_state(self, scalars, arrays):
        self.step_count = int(scalars["step"])
        for k in self.m:
            self.m[k] = arrays[f"m.{k}"].copy()
            self.v[k] = arrays[f"v.{k}"].copy()


class SGD:
    def __init__(self, params, lr=1e-2, momentum=0.9, weight_decay=0.0):
        self.params = params
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.step_count = 0
        self.buf = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.step_count += 1
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            self.buf[k] = self.momentum * self.buf[k] + g
            p.data = (p.data - self.lr * self.buf[k]).astype(p.data.dtype)

    def state(self):
        return {"step": self.step_count}, {f"buf.{k}": v for k, v in self.buf.items()}

    def load_state(self, scalars, arrays):
        self.step_count = int(scalars["step"])
        for k in self.buf:
            self.buf[k] = arrays[f"buf.{k}"].copy()


def make_optimizer(ocfg, params):
    if ocfg.kind == "adam":
        return Adam(params, ocfg.lr, ocfg.beta1, ocfg.beta2, ocfg.eps, ocfg.weight_decay)
    return SGD(params, ocfg.lr, ocfg.momentum, ocfg.weight_decay)


# ----------------------------------------------------------------- batching


def length_batches(examples, batch_size, rng=None):
    """Group examples of equal frame count into batches; shuffle if ``rng`` given."""
    buckets = {}
    for i, ex in enumerate(examples):
        buckets.setdefault(ex.features.shape[1], []).append(i)
    batches = []
    for T in sorted(buckets):
        idx = np.array(buckets[T])
        if rng is not None:
            idx = idx[rng.permutation(idx.size)]
        batches.extend(idx[i : i + batch_size] for i in range(0, idx.size, batch_size))
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def stack_features(examples, idx):
    return Tensor(np.stack([examples[i].features for i in idx]))


def split_train_validation(examples, fraction, seed):
    n_val = int(round(len(examples) * fraction))
    order = np.random.default_rng([seed, 17]).permutation(len(examples))
    val = sorted(order[:n_val].tolist())
    val_set = set(val)
    train = [ex for i, ex in enumerate(examples) if i not in val_set]
    return train, [examples[i] for i in val]


# ---------------------------------------------------------------- reports


@dataclass
class MetricsReport:
    run_id: str
    mode: str
    seed: int
    wer: dict = field(default_factory=dict)
    probe_accuracy: dict = field(default_factory=dict)
    adversary_accuracy: dict = field(default_factory=dict)
    loss_curves: dict = field(default_factory=dict)
    step_seconds: float = float("nan")

    def records(self):
        """Deterministic metric rows ``(run_id, mode, split, metric, value)``.

        Wall-clock numbers are left out so equal seeds give equal files;
        see :meth:`timing_records`.
        """
        rows = []
        for split, v in self.wer.items():
            rows.append((self.run_id, self.mode, split, "wer", v))
        for split, v in self.probe_accuracy.items():
            rows.append((self.run_id, self.mode, split, "probe_accuracy", v))
        for split, v in self.adversary_accuracy.items():
            rows.append((self.run_id, self.mode, split, "adversary_accuracy", v))
        for name, curve in self.loss_curves.items():
            for epoch, v in enumerate(curve):
                rows.append((self.run_id, self.mode, f"epoch{epoch}", name, v))
        return rows

    def timing_records(self):
        return [(self.run_id, self.mode, "train", "step_seconds", self.step_seconds)]


def format_records(rows):
    return "".join(f"{r}\t{m}\t{s}\t{k}\t{v!r}\n" for r, m, s, k, v in rows)


# ---------------------------------------------------------------- trainer


class Trainer:
    """Owns model, optimizer, and batch-order RNG for one training run."""

    def __init__(self, cfg, dataset=None):
        self.cfg = cfg
        self.dataset = dataset if dataset is not None else build_dataset(cfg.data)
        if self.dataset.config is not None and self.dataset.config != cfg.data:
            raise ContractError("the dataset was generated from a different data config than the experiment's")
        self.train_set, self.val_set = split_train_validation(
            self.dataset["train"], cfg.validation_fraction, cfg.seed
        )
        self.model = MaskNet(cfg.model)
        self.optimizer = make_optimizer(cfg.optimizer, self.model.params)
        self.rng = np.random.default_rng([cfg.seed, 29])
        self.epoch = 0
        self.curves = {"task_loss": [], "adversarial_loss": [], "total_loss": [], "val_wer": []}
        self.step_times = []
        self.best_val_wer = math.inf
        self.best_epoch = -1
        self.best_snapshot = None

    # -- state

    def snapshot(self):
        return {k: p.data.copy() for k, p in self.model.params.items()}, copy.deepcopy(self.model.bn)

    def checkpoint(self):
        params, bn = self.snapshot()
        opt_scalars, opt_arrays = self.optimizer.state()
        best = None
        if self.best_snapshot is not None:
            best = {"params": self.best_snapshot[0], "bn": self.best_snapshot[1]}
        return Checkpoint(
            config=self.cfg,
            params=params,
            bn=bn,
            optimizer_scalars=opt_scalars,
            optimizer_arrays=opt_arrays,
            epoch=self.epoch,
            rng_state=self.rng.bit_generator.state,
            curves=copy.deepcopy(self.curves),
            best_val_wer=self.best_val_wer,
            best_epoch=self.best_epoch,
            best=best,
        )

    @classmethod
    def from_checkpoint(cls, ckpt, dataset=None):
        tr = cls(ckpt.config, dataset)
        tr.load(ckpt)
        return tr

    def load(self, ckpt):
        for k, arr in ckpt.params.items():
            self.model.params[k].data = arr.copy()
        self.model.bn = copy.deepcopy(ckpt.bn)
        self.optimizer.load_state(ckpt.optimizer_scalars, ckpt.optimizer_arrays)
        self.rng.bit_generator.state = ckpt.rng_state
        self.epoch = ckpt.epoch
        self.curves = copy.deepcopy(ckpt.curves)
        self.best_val_wer = ckpt.best_val_wer
        self.best_epoch = ckpt.best_epoch
        if ckpt.best is not None:
            self.best_snapshot = (
                {k: v.copy() for k, v in ckpt.best["params"].items()},
                copy.deepcopy(ckpt.best["bn"]),
            )

    # -- steps

    def train_step(self, examples, idx):
        cfg = self.cfg.model
        X = stack_features(examples, idx)
        targets = [examples[i].tokens for i in idx]
        nuisance = [examples[i].accent for i in idx] if cfg.has_discriminator else None
        self.model.zero_grad()
        bundle = self.model.forward(X, training=True)
        objective, breakdown = total_loss(bundle, targets, nuisance, cfg)
        if not np.isfinite(breakdown.total):
            raise NonFiniteError(f"non-finite objective {breakdown.total}")
        ad.backward(objective)
        self.optimizer.step()
        return breakdown

    def run_epoch(self):
        sums = {"task_loss": 0.0, "adversarial_loss": 0.0, "total_loss": 0.0}
        n = 0
        for idx in length_batches(self.train_set, self.cfg.batch_size, self.rng):
            t0 = time.perf_counter()
            b = self.train_step(self.train_set, idx)
            self.step_times.append(time.perf_counter() - t0)
            sums["task_loss"] += b.task_loss
            sums["adversarial_loss"] += b.adversarial_loss
            sums["total_loss"] += b.total
            n += 1
        for k, v in sums.items():
            self.curves[k].append(v / max(n, 1))
        self.epoch += 1
        if self.val_set:
            val = greedy_wer(self.model, self.val_set)
            self.curves["val_wer"].append(val)
            if val < self.best_val_wer:
                self.best_val_wer = val
                self.best_epoch = self.epoch
                self.best_snapshot = self.snapshot()
        log.info("epoch %d: %s", self.epoch, {k: v[-1] for k, v in self.curves.items() if v})

    def fit(self, out_dir=None):
        """Train until ``cfg.epochs``; on divergence keep the last good checkpoint."""
        while self.epoch < self.cfg.epochs:
            last_good = self.checkpoint()
            try:
                self.run_epoch()
            except NonFiniteError as exc:
                if out_dir:
                    save_checkpoint(last_good, os.path.join(out_dir, "last_good.ckpt"))
                raise TrainingDiverged(f"epoch {self.epoch + 1}: {exc}", last_good) from exc
        return self

    def use_best(self):
        """Load the best-by-validation parameters into the live model."""
        if self.best_snapshot is not None:
            params, bn = self.best_snapshot
            for k, arr in params.items():
                self.model.params[k].data = arr.copy()
            self.model.bn = copy.deepcopy(bn)


# -------------------------------------------------------------- evaluation


def forward_split(model, examples, batch_size=256):
    """Eval-mode pass: per-utterance log-probs [T', V+1], pooled Z~, adversary logits."""
    logprobs = [None] * len(examples)
    pooled = [None] * len(examples)
    adv = [None] * len(examples)
    for idx in length_batches(examples, batch_size):
        bundle = model.forward(stack_features(examples, idx), training=False)
        lp = bundle.predictor_logprobs.data
        zt = bundle.Z_tilde.data.mean(axis=2)
        D = bundle.discriminator_logits.data if bundle.discriminator_logits is not None else None
        for j, i in enumerate(idx):
            logprobs[i] = lp[j]
            pooled[i] = zt[j]
            adv[i] = None if D is None else D[j]
    return logprobs, np.array(pooled), adv


def greedy_wer(model, examples):
    logprobs, _, _ = forward_split(model, examples)
    return wer([ex.tokens for ex in examples], [greedy_decode(lp) for lp in logprobs])


def evaluate_model(model, cfg, dataset, train_examples=None, splits=("train", "test_in", "test_ood"),
                   beam_width=None):
    """WER per split (beam search), probe and adversary accuracy on nuisance labels.

    The probe is a fresh linear classifier fit on pooled Z~ of the training
    split. WER for each held-out accent is also reported as ``test_ood/a<k>``.
    """
    beam_width = beam_width or cfg.eval_beam_width
    train_examples = train_examples if train_examples is not None else dataset["train"]
    report_wer, probe, adversary = {}, {}, {}
    _, train_pooled, _ = forward_split(model, train_examples)
    train_labels = np.array([ex.accent for ex in train_examples])
    for split in splits:
        exs = train_examples if split == "train" else dataset[split]
        logprobs, pooled, adv = forward_split(model, exs)
        hyps = [list(beam_decode(lp, beam_width).tokens) for lp in logprobs]
        refs = [list(ex.tokens) for ex in exs]
        report_wer[split] = wer(refs, hyps)
        if split == "test_ood":
            for a in sorted({ex.accent for ex in exs}):
                sel = [i for i, ex in enumerate(exs) if ex.accent == a]
                report_wer[f"test_ood/a{a}"] = wer([refs[i] for i in sel], [hyps[i] for i in sel])
        if split != "test_ood":
            # held-out accents are unseen classes for the probe, so test_ood has none
            labels = np.array([ex.accent for ex in exs])
            probe[split] = probe_accuracy(train_pooled, train_labels, pooled, labels, l2=cfg.probe_l2)
            if adv[0] is not None:
                adversary[split] = 100.0 * float(np.mean(np.argmax(np.array(adv), axis=1) == labels))
    return report_wer, probe, adversary


def evaluate(ckpt, split, dataset=None, require_mode=None, use_best=True):
    """Evaluate one split of a checkpoint; returns ``(wer, probe, adversary)`` dicts."""
    if require_mode is not None and ckpt.config.model.mode != require_mode:
        raise ModeError(
            f"checkpoint was trained in mode {ckpt.config.model.mode!r}; this analysis needs {require_mode!r}"
        )
    tr = Trainer.from_checkpoint(ckpt, dataset)
    if split not in tr.dataset.splits:
        raise ContractError(f"no split {split!r} in dataset")
    if use_best:
        tr.use_best()
    return evaluate_model(tr.model, tr.cfg, tr.dataset, tr.train_set, splits=(split,))


def train(cfg, dataset=None, out_dir=None, run_id=None):
    """Train one configuration, evaluate the best-by-validation model.

    Returns ``(final Checkpoint, MetricsReport)``. With ``out_dir`` the
    final and best checkpoints and the metric files are written there.
    """
    tr = Trainer(cfg, dataset)
    tr.fit(out_dir)
    final = tr.checkpoint()
    tr.use_best()
    report_wer, probe, adversary = evaluate_model(tr.model, cfg, tr.dataset, tr.train_set)
    run_id = run_id or f"{cfg.model.mode}-s{cfg.seed}"
    report = MetricsReport(
        run_id=run_id,
        mode=cfg.model.mode,
        seed=cfg.seed,
        wer=report_wer,
        probe_accuracy=probe,
        adversary_accuracy=adversary,
        loss_curves=final.curves,
        step_seconds=float(np.mean(tr.step_times)) if tr.step_times else float("nan"),
    )
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(final, os.path.join(out_dir, "final.ckpt"))
        save_checkpoint(best_checkpoint(final), os.path.join(out_dir, "best.ckpt"))
        with open(os.path.join(out_dir, "metrics.tsv"), "w", encoding="utf-8") as fh:
            fh.write(format_records(report.records()))
        with open(os.path.join(out_dir, "timing.tsv"), "w", encoding="utf-8") as fh:
            fh.write(format_records(report.timing_records()))
    return final, report


def best_checkpoint(ckpt):
    """The best-by-validation parameters as a standalone checkpoint."""
    if ckpt.best is None:
        return ckpt
    out = copy.copy(ckpt)
    out.params = ckpt.best["params"]
    out.bn = ckpt.best["bn"]
    out.epoch = ckpt.best_epoch
    return out
