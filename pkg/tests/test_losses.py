import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from masknet import autodiff as ad
from masknet.autodiff import Tensor
from masknet.errors import ContractError, ModeError, OracleSizeError
from masknet.losses import (
    ctc_batch_loss,
    ctc_brute_oracle,
    ctc_feasible,
    ctc_loss,
    cross_entropy,
)


def random_logprobs(rng, T, V1):
    x = rng.standard_normal((T, V1)) * 2
    return x - np.logaddexp.reduce(x, axis=1, keepdims=True)


def random_instances(n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        T = int(rng.integers(1, 5))
        V = int(rng.integers(1, 4))
        L = int(rng.integers(0, 3))
        target = [int(v) for v in rng.integers(0, V, L)]
        out.append((random_logprobs(rng, T, V + 1), target))
    return out


def test_single_certain_step():
    lp = np.array([[0.0, -np.inf]])
    assert float(ctc_loss(Tensor(lp), [0]).data) == 0.0


def test_two_frames_uniform():
    lp = np.log(np.full((2, 2), 0.5))
    # alignments aa, a-, -a carry 3/4 of the mass
    assert ctc_brute_oracle(lp, [0]) == pytest.approx(-math.log(0.75), abs=1e-12)
    assert float(ctc_loss(Tensor(lp), [0]).data) == pytest.approx(-math.log(0.75), abs=1e-12)


def test_repeat_needs_blank():
    lp = np.log(np.full((2, 2), 0.5))
    x = Tensor(lp, requires_grad=True)
    loss = ctc_loss(x, [0, 0])
    assert loss.data == np.inf
    assert not ctc_feasible(2, [0, 0]) and ctc_feasible(3, [0, 0])
    ad.backward(loss)
    np.testing.assert_array_equal(x.grad, 0)


def test_oracle_edge_cases():
    lp = np.array([[-np.inf, 0.0], [-np.inf, 0.0]])
    assert ctc_brute_oracle(lp, []) == 0.0
    assert float(ctc_loss(Tensor(lp), []).data) == 0.0
    assert ctc_brute_oracle(np.log(np.full((2, 3), 1 / 3)), [0, 1, 0]) == np.inf
    with pytest.raises(OracleSizeError):
        ctc_brute_oracle(np.zeros((7, 10)), [1])


def test_ctc_matches_oracle_sweep():
    worst = 0.0
    for lp, target in random_instances(300):
        got = float(ctc_loss(Tensor(lp), target).data)
        want = ctc_brute_oracle(lp, target)
        if want == np.inf:
            assert got == np.inf
        else:
            worst = max(worst, abs(got - want))
    assert worst <= 1e-6


def test_batched_equals_per_utterance():
    rng = np.random.default_rng(4)
    lp = np.stack([random_logprobs(rng, 6, 4) for _ in range(5)])
    targets = [[0], [1, 1], [2, 0, 1], [], [0, 0, 0, 0]]
    loss, feasible = ctc_batch_loss(Tensor(lp), targets)
    singles = [float(ctc_loss(Tensor(lp[b]), targets[b]).data) for b in range(5)]
    assert list(feasible) == [True, True, True, True, False]
    assert float(loss.data) == pytest.approx(np.mean(singles[:4]), abs=1e-12)


def test_token_equal_to_blank_rejected():
    with pytest.raises(ContractError):
        ctc_loss(Tensor(np.zeros((3, 3))), [2])


@pytest.mark.parametrize("seed", range(20))
def test_ctc_gradcheck(seed):
    rng = np.random.default_rng(seed)
    T, V = 5, 3
    target = [int(v) for v in rng.integers(0, V, 1 + seed % 3)]
    # differentiate through a log_softmax so the input rows stay normalized
    err = ad.finite_diff_gradcheck(lambda x: ctc_loss(ad.log_softmax(x), target),
                                   Tensor(rng.standard_normal((T, V + 1))))
    assert err <= 1e-3


def test_ctc_gradient_is_negative_occupancy():
    rng = np.random.default_rng(0)
    x = Tensor(random_logprobs(rng, 4, 3), requires_grad=True)
    ad.backward(ctc_loss(x, [0, 1]))
    # each frame occupies exactly one state: the occupancies sum to 1
    np.testing.assert_allclose(-x.grad.sum(axis=1), 1.0, atol=1e-12)


@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(1, 4), st.integers(0, 3))
@settings(max_examples=60, deadline=None)
def test_ctc_nonnegative_and_blank_padding_invariant(seed, T, V, L):
    rng = np.random.default_rng(seed)
    lp = random_logprobs(rng, T, V + 1)
    target = [int(v) for v in rng.integers(0, V, L)]
    loss = float(ctc_loss(Tensor(lp), target).data)
    assert loss >= 0
    if np.isfinite(loss):
        certain_blank = np.full((1, V + 1), -np.inf)
        certain_blank[0, V] = 0.0
        padded = np.concatenate([lp, certain_blank])
        assert float(ctc_loss(Tensor(padded), target).data) == pytest.approx(loss, abs=1e-6)


def test_ctc_zero_only_when_certain():
    lp = np.full((3, 3), -np.inf)
    lp[[0, 1, 2], [0, 2, 1]] = 0.0
    assert float(ctc_loss(Tensor(lp), [0, 1]).data) == 0.0
    soft = np.log(np.full((3, 3), 1 / 3))
    assert float(ctc_loss(Tensor(soft), [0, 1]).data) > 0


# -------------------------------------------------------- cross entropy


def test_cross_entropy_values():
    assert float(cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 3]).data) == pytest.approx(math.log(4))
    confident = np.array([[60.0, 0.0, 0.0]])
    assert float(cross_entropy(Tensor(confident), [0]).data) == pytest.approx(0.0, abs=1e-20)
    with pytest.raises(ContractError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


@pytest.mark.parametrize("seed", range(20))
def test_cross_entropy_gradcheck(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 4, 3)
    err = ad.finite_diff_gradcheck(lambda x: cross_entropy(x, labels), Tensor(rng.standard_normal((3, 4))))
    assert err <= 1e-5


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_cross_entropy_nonnegative(seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((5, 6)) * 5
    assert float(cross_entropy(Tensor(logits), rng.integers(0, 6, 5)).data) >= 0
