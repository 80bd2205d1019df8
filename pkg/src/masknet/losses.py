"""CTC and cross-entropy losses, plus the mode-dependent training objective.

The CTC blank is the last class (index ``V`` for ``V`` real tokens).
All CTC arithmetic happens in float64 log space.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ModeError, OracleSizeError


def ctc_min_frames(target):
    """Fewest frames that can emit ``target``: one per token plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def ctc_feasible(num_frames, target):
    return num_frames >= ctc_min_frames(target)


def _check_target(target, V):
    for tok in target:
        if not 0 <= tok < V:
            raise ContractError(f"CTC target token {tok} outside [0, {V}); index {V} is the blank")


def _logaddexp3(a, b, c):
    return np.logaddexp(np.logaddexp(a, b), c)


def ctc_forward_backward(logprobs, targets):
    """Per-utterance negative log-likelihood and its gradient.

    ``logprobs`` is a float array [B, T, V+1]. Returns ``(nll [B], grad
    [B, T, V+1])`` where ``grad = d nll / d logprobs``. Infeasible targets
    get ``nll = +inf`` and a zero gradient.
    """
    lp = np.asarray(logprobs, dtype=np.float64)
    B, T, V1 = lp.shape
    blank = V1 - 1
    lengths = np.array([len(t) for t in targets])
    S = 2 * int(lengths.max(initial=0)) + 1
    ext = np.full((B, S), blank, dtype=np.int64)
    for b, tgt in enumerate(targets):
        _check_target(tgt, blank)
        ext[b, 1 : 2 * len(tgt) : 2] = tgt
    S_b = 2 * lengths + 1
    valid = np.arange(S)[None, :] < S_b[:, None]

    # emit[b, t, s] = logprobs[b, t, ext[b, s]]
    emit = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (B, T, S)), axis=2)
    emit = np.where(valid[:, None, :], emit, -np.inf)
    skip = np.zeros((B, S), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])

    ninf = -np.inf
    alpha = np.full((T, B, S), ninf)
    alpha[0, :, 0] = emit[:, 0, 0]
    if S > 1:
        alpha[0, :, 1] = emit[:, 0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        a1 = np.concatenate([np.full((B, 1), ninf), prev[:, :-1]], axis=1)
        a2 = np.concatenate([np.full((B, 2), ninf), prev[:, :-2]], axis=1)[:, :S]
        a2 = np.where(skip, a2, ninf)
        alpha[t] = _logaddexp3(prev, a1, a2) + emit[:, t]

    rows = np.arange(B)
    last = alpha[T - 1, rows, S_b - 1]
    second = np.where(S_b > 1, alpha[T - 1, rows, np.maximum(S_b - 2, 0)], ninf)
    log_p = np.logaddexp(last, second)

    # beta[t, b, s]: log-prob of emitting frames t+1.. given state s at frame t
    beta = np.full((T, B, S), ninf)
    beta[T - 1, rows, S_b - 1] = 0.0
    beta[T - 1, rows[S_b > 1], (S_b - 2)[S_b > 1]] = 0.0
    skip_next = np.zeros((B, S), dtype=bool)
    skip_next[:, :-2] = skip[:, 2:]
    for t in range(T - 2, -1, -1):
        nb = beta[t + 1] + emit[:, t + 1]
        b1 = np.concatenate([nb[:, 1:], np.full((B, 1), ninf)], axis=1)
        b2 = np.concatenate([nb[:, 2:], np.full((B, 2), ninf)], axis=1)[:, :S]
        b2 = np.where(skip_next, b2, ninf)
        beta[t] = _logaddexp3(nb, b1, b2)

    feasible = np.isfinite(log_p)
    safe_log_p = np.where(feasible, log_p, 0.0)
    with np.errstate(invalid="ignore"):
        occupancy = np.exp(alpha + beta - safe_log_p[None, :, None])
    occupancy = np.where(feasible[None, :, None] & np.isfinite(occupancy), occupancy, 0.0)
    onehot = np.zeros((B, S, V1))
    onehot[rows[:, None], np.arange(S)[None, :], ext] = valid
    grad = -np.einsum("tbs,bsk->btk", occupancy, onehot)
    return -log_p, grad


def ctc_batch_loss(logprobs, targets):
    """Mean CTC loss over the feasible utterances of a batch.

    Returns ``(loss, feasible)``. Utterances too long for their frame count
    are skipped (flagged False); if none is feasible the loss is +inf
    with zero gradient.
    """
    if logprobs.data.ndim != 3:
        raise ContractError(f"ctc_batch_loss expects [B, T, V+1], got {logprobs.shape}")
    if len(targets) != logprobs.shape[0]:
        raise ContractError(f"{len(targets)} targets for batch of {logprobs.shape[0]}")
    nll, grad = ctc_forward_backward(logprobs.data, targets)
    feasible = np.isfinite(nll)
    n = int(feasible.sum())
    dtype = logprobs.dtype
    if n == 0:
        value = np.asarray(np.inf, dtype=dtype)
        return ad.attach(value, (logprobs,), lambda g: (np.zeros_like(logprobs.data),), "ctc", False), feasible
    value = np.asarray(nll[feasible].mean(), dtype=dtype)
    scaled = (grad / n).astype(dtype)
    return ad.attach(value, (logprobs,), lambda g: (scaled * g,), "ctc"), feasible


def ctc_loss(logprobs, target):
    """``-log P(target | logprobs)`` for one utterance, logprobs [T, V+1]."""
    if logprobs.data.ndim != 2:
        raise ContractError(f"ctc_loss expects [T, V+1], got {logprobs.shape}")
    nll, grad = ctc_forward_backward(logprobs.data[None], [list(target)])
    dtype = logprobs.dtype
    value = np.asarray(nll[0], dtype=dtype)
    g0 = grad[0].astype(dtype)
    return ad.attach(value, (logprobs,), lambda g: (g0 * g,), "ctc", check_finite=False)


def ctc_collapse(path, blank):
    out = []
    prev = None
    for k in path:
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return tuple(out)


def ctc_brute_oracle(logprobs, target, max_paths=10**6):
    """CTC loss by enumerating every frame-level path. For tests only."""
    lp = np.asarray(getattr(logprobs, "data", logprobs), dtype=np.float64)
    T, V1 = lp.shape
    if V1**T > max_paths:
        raise OracleSizeError(f"{V1}^{T} paths exceed the oracle limit of {max_paths}")
    target = tuple(target)
    blank = V1 - 1
    scores = [
        sum(lp[t, k] for t, k in enumerate(path))
        for path in itertools.product(range(V1), repeat=T)
        if ctc_collapse(path, blank) == target
    ]
    if not scores:
        return np.inf
    return -float(np.logaddexp.reduce(scores))


def cross_entropy(logits, labels):
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels, dtype=np.int64)
    K = logits.shape[1]
    if labels.shape != (logits.shape[0],):
        raise ContractError(f"{labels.shape[0]} labels for {logits.shape[0]} logit rows")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ContractError(f"labels must lie in [0, {K})")
    return ad.scale(ad.mean(ad.pick(ad.log_softmax(logits), labels)), -1.0)


@dataclass(frozen=True)
class LossBreakdown:
    task_loss: float
    adversarial_loss: float
    total: float
    mode: str
    # weight applied to adversarial_loss inside ``total``
    adversarial_scale: float = 0.0
    infeasible: int = 0


def adversarial_scale(cfg):
    """Weight of the discriminator loss in the summed objective.

    In ``multitask`` the nuisance head is an auxiliary task weighted by
    ``adversarial_weight``. In ``grl`` and ``masknet`` that weight already
    lives in the reversal layer, so the discriminator itself trains at
    full strength while modules below the reversal see ``-lambda``.
    """
    if not cfg.has_discriminator:
        return 0.0
    return cfg.adversarial_weight if cfg.mode == "multitask" else 1.0


def total_loss(bundle, targets, nuisance, cfg):
    """Return ``(objective tensor, LossBreakdown)`` for one batch."""
    task, feasible = ctc_batch_loss(bundle.predictor_logprobs, targets)
    infeasible = int((~feasible).sum())
    if not cfg.has_discriminator:
        if nuisance is not None:
            raise ModeError("nuisance labels supplied in baseline mode")
        t = float(task.data)
        return task, LossBreakdown(t, 0.0, t, cfg.mode, 0.0, infeasible)
    if nuisance is None:
        raise ContractError(f"mode {cfg.mode} needs nuisance labels")
    if bundle.discriminator_logits is None:
        raise ModeError(f"bundle from mode {bundle.mode} has no discriminator output")
    adv = cross_entropy(bundle.discriminator_logits, nuisance)
    w = adversarial_scale(cfg)
    objective = ad.add(task, ad.scale(adv, w)) if w != 1.0 else ad.add(task, adv)
    breakdown = LossBreakdown(
        float(task.data), float(adv.data), float(objective.data), cfg.mode, w, infeasible
    )
    return objective, breakdown
