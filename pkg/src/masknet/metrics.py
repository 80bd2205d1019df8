"""Edit distance, corpus WER, and the nuisance probe."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .errors import ContractError


@dataclass(frozen=True)
class EditCounts:
    substitutions: int
    deletions: int
    insertions: int
    ref_len: int

    @property
    def distance(self):
        return self.substitutions + self.deletions + self.insertions


def edit_distance(ref, hyp):
    """Unit-cost Levenshtein alignment of ``hyp`` against ``ref``.

    Among minimum-distance alignments the one with the most substitutions
    is reported. ``deletions - insertions`` always equals
    ``len(ref) - len(hyp)``, so this fixes all three counts and makes
    ``edit_distance(b, a)`` the mirror of ``edit_distance(a, b)``.
    """
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    # cell = (distance, -substitutions); tuple order gives the tie-break
    prev = [(j, 0) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0)]
        for j in range(1, m + 1):
            d, s = prev[j - 1]
            if ref[i - 1] != hyp[j - 1]:
                diag = (d + 1, s - 1)
            else:
                diag = (d, s)
            up = (prev[j][0] + 1, prev[j][1])
            left = (cur[j - 1][0] + 1, cur[j - 1][1])
            cur.append(min(diag, up, left))
        prev = cur
    dist, neg_s = prev[m]
    S = -neg_s
    D = (dist - S + n - m) // 2
    I = dist - S - D
    return EditCounts(S, D, I, n)


def wer(refs, hyps):
    """Corpus word error rate in percent: total edits over total reference tokens."""
    if len(refs) != len(hyps):
        raise ContractError(f"{len(refs)} references but {len(hyps)} hypotheses")
    total_ref = sum(len(r) for r in refs)
    if total_ref < 1:
        raise ContractError("WER needs at least one reference token")
    edits = sum(edit_distance(r, h).distance for r, h in zip(refs, hyps))
    return 100.0 * edits / total_ref


class LinearProbe:
    """Multinomial logistic regression on standardized features.

    Fit by L-BFGS to convergence with a small L2 penalty on the weights
    (not the biases) so separable data still has a finite optimum.
    """

    def __init__(self, l2=1e-3, max_iter=2000):
        self.l2 = l2
        self.max_iter = max_iter

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        self.classes_ = np.unique(y)
        if self.classes_.size < 2:
            raise ContractError("probe needs at least two nuisance classes in its training split")
        self.mean_ = X.mean(axis=0)
        std = X.std(axis=0)
        self.scale_ = np.where(std > 1e-12, std, 1.0)
        Xs = (X - self.mean_) / self.scale_
        n, d = Xs.shape
        K = self.classes_.size
        Y = (y[:, None] == self.classes_[None, :]).astype(np.float64)
        Xb = np.hstack([Xs, np.ones((n, 1))])
        l2 = self.l2

        def objective(w):
            W = w.reshape(K, d + 1)
            logits = Xb @ W.T
            logits -= logits.max(axis=1, keepdims=True)
            logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
            loss = -(Y * logp).sum() / n + 0.5 * l2 * np.sum(W[:, :d] ** 2)
            grad = (np.exp(logp) - Y).T @ Xb / n
            grad[:, :d] += l2 * W[:, :d]
            return loss, grad.ravel()

        res = minimize(objective, np.zeros(K * (d + 1)), jac=True, method="L-BFGS-B",
                       options={"maxiter": self.max_iter, "gtol": 1e-8, "ftol": 1e-12})
        self.coef_ = res.x.reshape(K, d + 1)
        self.converged_ = bool(res.success)
        return self

    def predict(self, X):
        Xs = (np.asarray(X, dtype=np.float64) - self.mean_) / self.scale_
        logits = Xs @ self.coef_[:, :-1].T + self.coef_[:, -1]
        return self.classes_[np.argmax(logits, axis=1)]


def probe_accuracy(train_features, train_labels, features, labels, l2=1e-3):
    """Fit a fresh linear probe on the training split; accuracy (%) on another split.

    Features are time-pooled, one row per utterance. Lower is more invariant.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ContractError("probe evaluation split is empty")
    probe = LinearProbe(l2=l2).fit(train_features, train_labels)
    return 100.0 * float(np.mean(probe.predict(features) == labels))
