import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from masknet import autodiff as ad
from masknet.autodiff import Tensor
from masknet.errors import (
    ContractError,
    DimensionError,
    NonFiniteError,
    UninitializedStatisticsError,
    UnreliableOracleError,
)

SEEDS = range(20)


def _weighted_sum(out, rng):
    # random weights keep every output coordinate's gradient generic
    w = Tensor(rng.standard_normal(out.shape))
    return ad.total(ad.mul(out, w))


def _away_from_zero(a, margin):
    return np.where(np.abs(a) < margin, np.sign(a + 1e-12) * margin * 2, a)


# --------------------------------------------------------------- linear


def test_linear_identity_and_permutation():
    x = Tensor([[1.0, 2.0]])
    out = ad.linear(x, Tensor(np.eye(2)), Tensor([0.0, 0.0]))
    np.testing.assert_array_equal(out.data, [[1, 2]])
    out = ad.linear(Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0], [1.0, 0.0]]), Tensor([1.0, 1.0]))
    np.testing.assert_array_equal(out.data, [[1, 2]])


def test_linear_shape_mismatch_reports_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        ad.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


@pytest.mark.parametrize("seed", SEEDS)
def test_linear_gradcheck(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    W = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(4), requires_grad=True)
    w = rng.standard_normal((2, 4))
    err = ad.gradcheck_tensors(lambda: ad.total(ad.mul(ad.linear(x, W, b), Tensor(w))), [x, W, b])
    assert err <= 1e-4


# --------------------------------------------------------------- conv1d


def test_conv1d_identity_kernel():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((2, 3, 7)).astype(np.float32))
    k = Tensor(np.eye(3, dtype=np.float32)[:, :, None])
    out = ad.conv1d(x, k)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv1d_shape_arithmetic():
    x = Tensor(np.zeros((1, 1, 5)))
    out = ad.conv1d(x, Tensor(np.ones((1, 1, 3))), stride=2, padding=1)
    assert out.shape == (1, 1, 3)


def test_conv1d_matches_direct_loop():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 9))
    k = rng.standard_normal((4, 3, 3))
    out = ad.conv1d(Tensor(x), Tensor(k), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1)))
    for b in range(2):
        for o in range(4):
            for t in range(out.shape[2]):
                expect = np.sum(xp[b, :, 2 * t : 2 * t + 3] * k[o])
                assert out[b, o, t] == pytest.approx(expect, rel=1e-12, abs=1e-12)


def test_conv1d_too_short_raises():
    with pytest.raises(DimensionError):
        ad.conv1d(Tensor(np.zeros((1, 1, 2))), Tensor(np.ones((1, 1, 5))))


@pytest.mark.parametrize("seed", SEEDS)
def test_conv1d_gradcheck(seed):
    rng = np.random.default_rng(seed)
    stride, padding = [(1, 0), (2, 1), (1, 1), (3, 2)][seed % 4]
    x = Tensor(rng.standard_normal((1, 2, 6)), requires_grad=True)
    k = Tensor(rng.standard_normal((3, 2, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    out_shape = ad.conv1d(x, k, b, stride, padding).shape
    w = Tensor(rng.standard_normal(out_shape))
    err = ad.gradcheck_tensors(lambda: ad.total(ad.mul(ad.conv1d(x, k, b, stride, padding), w)), [x, k, b])
    assert err <= 1e-4


# ------------------------------------------------------------ batchnorm


def test_batchnorm_train_normalizes():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((4, 3, 10)).astype(np.float64) * 5 + 2)
    st_ = ad.BatchNormState(3)
    out = ad.batchnorm1d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), st_, training=True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2)), 0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=(0, 2)), 1, atol=1e-5)


def test_batchnorm_constant_channel_gives_beta():
    x = Tensor(np.full((2, 1, 5), 7.0, dtype=np.float32))
    out = ad.batchnorm1d(x, Tensor([1.0]), Tensor([3.0]), ad.BatchNormState(1), training=True)
    np.testing.assert_allclose(out.data, 3.0, atol=1e-6)


def test_batchnorm_eval_before_train_raises():
    with pytest.raises(UninitializedStatisticsError):
        ad.batchnorm1d(Tensor(np.zeros((1, 2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                       ad.BatchNormState(2), training=False)


def test_batchnorm_running_moments_update():
    x = Tensor(np.arange(8, dtype=np.float32).reshape(2, 1, 4))
    s = ad.BatchNormState(1)
    ad.batchnorm1d(x, Tensor([1.0]), Tensor([0.0]), s, training=True)
    assert s.running_mean[0] == pytest.approx(0.1 * 3.5)
    assert s.running_var[0] == pytest.approx(0.9 + 0.1 * np.var(np.arange(8)) * 8 / 7, rel=1e-6)
    out = ad.batchnorm1d(x, Tensor([1.0]), Tensor([0.0]), s, training=False)
    expect = (x.data - s.running_mean[0]) / np.sqrt(s.running_var[0] + 1e-5)
    np.testing.assert_allclose(out.data, expect, rtol=1e-6)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradcheck(seed, training):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    gamma = Tensor(rng.standard_normal(3), requires_grad=True)
    beta = Tensor(rng.standard_normal(3), requires_grad=True)
    state = ad.BatchNormState(3, running_mean=rng.standard_normal(3), running_var=rng.random(3) + 0.5,
                              num_batches=1)
    w = Tensor(rng.standard_normal((2, 3, 4)))

    def f():
        s = ad.BatchNormState(3, running_mean=state.running_mean.copy(),
                              running_var=state.running_var.copy(), num_batches=1)
        return ad.total(ad.mul(ad.batchnorm1d(x, gamma, beta, s, training), w))

    assert ad.gradcheck_tensors(f, [x, gamma, beta]) <= 1e-3


# ---------------------------------------------------------- activations


def test_relu_and_sigmoid_values():
    np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    assert ad.sigmoid(Tensor([0.0])).data[0] == 0.5


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_sigmoid_open_interval(dtype):
    s = ad.sigmoid(Tensor(np.array([-40.0, 40.0, -1000.0, 1000.0], dtype=dtype))).data
    assert np.all(s > 0) and np.all(s < 1)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("kind", ["relu", "sigmoid"])
def test_activation_gradcheck(seed, kind):
    rng = np.random.default_rng(seed)
    # relu has a kink at 0: keep inputs at least 10 epsilons away
    x0 = _away_from_zero(rng.standard_normal((3, 4)) * 3, 1e-5)
    w = Tensor(rng.standard_normal((3, 4)))
    err = ad.finite_diff_gradcheck(lambda x: ad.total(ad.mul(ad.pointwise_activation(x, kind), w)), Tensor(x0))
    assert err <= 1e-4


def test_gradcheck_oracle_self_checks():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal(6).astype(np.float32))
    assert ad.finite_diff_gradcheck(ad.total, x) < 1e-8
    assert ad.finite_diff_gradcheck(lambda t: ad.total(ad.sigmoid(t)), x, epsilon=1e-3) <= 1e-4


def test_gradcheck_detects_nondeterminism():
    rng = np.random.default_rng(0)
    with pytest.raises(UnreliableOracleError):
        ad.finite_diff_gradcheck(lambda t: ad.total(ad.scale(t, rng.random())), Tensor([1.0, 2.0]))


# --------------------------------------------------------- time pooling


def test_mean_over_time():
    x = Tensor(np.array([[[1.0, 2.0, 3.0]]]), requires_grad=True)
    out = ad.mean_over_time(x)
    assert out.data[0, 0] == 2.0
    ad.backward(ad.total(out))
    np.testing.assert_array_equal(x.grad, np.full((1, 1, 3), 1 / 3))
    one = np.random.default_rng(0).standard_normal((2, 3, 1))
    np.testing.assert_array_equal(ad.mean_over_time(Tensor(one)).data, one[:, :, 0])


def test_mean_over_time_empty_raises():
    with pytest.raises(DimensionError):
        ad.mean_over_time(Tensor(np.zeros((1, 2, 0))))


def test_tile_over_time():
    x = Tensor(np.array([[0.3]], dtype=np.float32), requires_grad=True)
    out = ad.tile_over_time(x, 4)
    assert out.shape == (1, 1, 4)
    assert all(v == x.data[0, 0] for v in out.data[0, 0])
    assert ad.tile_over_time(x, 1).shape == (1, 1, 1)
    y = Tensor(np.array([[0.3]]), requires_grad=True)
    ad.backward(ad.total(ad.tile_over_time(y, 5)))
    assert y.grad[0, 0] == 5
    with pytest.raises(DimensionError):
        ad.tile_over_time(x, 0)


@given(
    st.integers(1, 3), st.integers(1, 5), st.integers(1, 8), st.integers(0, 2**31 - 1)
)
@settings(max_examples=50, deadline=None)
def test_tile_then_slice_is_bitwise_identity(B, C, T, seed):
    x = np.random.default_rng(seed).standard_normal((B, C)).astype(np.float32)
    out = ad.tile_over_time(Tensor(x), T).data
    for t in range(T):
        assert np.array_equal(out[:, :, t], x)


@pytest.mark.parametrize("seed", SEEDS)
def test_pooling_gradcheck(seed):
    rng = np.random.default_rng(seed)
    T = 1 + seed % 5
    w1 = Tensor(rng.standard_normal((2, 3)))
    w2 = Tensor(rng.standard_normal((2, 3, T)))
    assert ad.finite_diff_gradcheck(lambda x: ad.total(ad.mul(ad.mean_over_time(x), w1)),
                                    Tensor(rng.standard_normal((2, 3, T)))) <= 1e-4
    assert ad.finite_diff_gradcheck(lambda x: ad.total(ad.mul(ad.tile_over_time(x, T), w2)),
                                    Tensor(rng.standard_normal((2, 3)))) <= 1e-4


# ---------------------------------------------------------- mul and add


def test_mul_identity_and_zero():
    a = Tensor(np.random.default_rng(0).standard_normal((2, 3)))
    np.testing.assert_array_equal(ad.mul(a, Tensor(np.ones((2, 3)))).data, a.data)
    np.testing.assert_array_equal(ad.mul(a, Tensor(np.zeros((2, 3)))).data, 0)
    with pytest.raises(DimensionError):
        ad.mul(a, Tensor(np.ones((3, 2))))


@pytest.mark.parametrize("seed", SEEDS)
def test_mul_add_gradcheck(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 3)))
    assert ad.gradcheck_tensors(lambda: ad.total(ad.mul(ad.mul(a, b), w)), [a, b]) <= 1e-5
    assert ad.gradcheck_tensors(lambda: ad.total(ad.mul(ad.add(a, b), w)), [a, b]) <= 1e-5


# --------------------------------------------------------- log_softmax


def test_log_softmax_uniform_and_shift():
    out = ad.log_softmax(Tensor(np.zeros((1, 4)))).data
    np.testing.assert_allclose(out, np.log(0.25))
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 5))
    np.testing.assert_allclose(ad.log_softmax(Tensor(x)).data, ad.log_softmax(Tensor(x + 17.5)).data, atol=1e-12)
    big = ad.log_softmax(Tensor(np.array([[1000.0, 0.0]], dtype=np.float32))).data
    assert np.all(np.isfinite(big))


@given(st.integers(0, 2**31 - 1), st.floats(-50, 50))
@settings(max_examples=50, deadline=None)
def test_log_softmax_rows_normalize(seed, shift):
    x = np.random.default_rng(seed).standard_normal((3, 2, 6)) * 10
    out = ad.log_softmax(Tensor(x)).data
    np.testing.assert_allclose(np.exp(out).sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(ad.log_softmax(Tensor(x + shift)).data, out, atol=1e-9)


@pytest.mark.parametrize("seed", SEEDS)
def test_log_softmax_gradcheck(seed):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.standard_normal((2, 3, 4)))
    assert ad.finite_diff_gradcheck(lambda x: ad.total(ad.mul(ad.log_softmax(x), w)),
                                    Tensor(rng.standard_normal((2, 3, 4)))) <= 1e-4


# ----------------------------------------------------- routing primitives


def test_grad_reverse_contract():
    x = Tensor([1.5, -2.0], requires_grad=True)
    out = ad.grad_reverse(x, 1.0)
    np.testing.assert_array_equal(out.data, x.data)
    ad.backward(ad.total(out))
    np.testing.assert_array_equal(x.grad, [-1, -1])
    x.zero_grad()
    ad.backward(ad.total(ad.grad_reverse(x, 0.0)))
    np.testing.assert_array_equal(x.grad, [0, 0])
    with pytest.raises(ContractError):
        ad.grad_reverse(x, -1.0)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_reverse_is_exact_negated_scaling(seed):
    rng = np.random.default_rng(seed)
    lam = float(rng.random() * 3)
    x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 3)))

    def run(reverse):
        x.zero_grad()
        h = ad.sigmoid(x)
        h = ad.grad_reverse(h, lam) if reverse else h
        ad.backward(ad.total(ad.mul(ad.mean_over_time(ad.mul(h, h)), w)))
        return x.grad.copy()

    plain, rev = run(False), run(True)
    # the reversal factor enters once; sigmoid' is applied after it either way
    h = ad.sigmoid(Tensor(x.data)).data
    upstream = (2 * h * np.broadcast_to(w.data[:, :, None] / 4, h.shape))
    np.testing.assert_array_equal(rev, (upstream * np.float64(-lam)) * h * (1 - h))
    np.testing.assert_array_equal(plain, upstream * h * (1 - h))


def test_stop_gradient_blocks_exactly():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    sg = ad.stop_gradient(x)
    assert sg.data is x.data
    ad.backward(ad.total(ad.mul(sg, sg)))
    assert x.grad is None


def test_stop_gradient_mixed_paths():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal(4), requires_grad=True)
    ad.backward(ad.total(ad.mul(x, ad.stop_gradient(x))))
    with_barrier = x.grad.copy()
    x.zero_grad()
    # same graph with the barrier replaced by a constant copy
    ad.backward(ad.total(ad.mul(x, Tensor(x.data.copy()))))
    np.testing.assert_array_equal(with_barrier, x.grad)


# -------------------------------------------------------------- backward


def test_backward_sum_and_path_summation():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    ad.backward(ad.total(x))
    np.testing.assert_array_equal(x.grad, [1, 1, 1])
    x.zero_grad()
    ad.backward(ad.total(ad.mul(x, x)))
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_backward_requires_scalar():
    with pytest.raises(ContractError):
        ad.backward(Tensor([1.0, 2.0], requires_grad=True))


def test_leaf_gradients_accumulate():
    x = Tensor([1.0], requires_grad=True)
    ad.backward(ad.total(x))
    ad.backward(ad.total(x))
    assert x.grad[0] == 2


def test_backward_is_deterministic():
    def run():
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((2, 3, 8)).astype(np.float32), requires_grad=True)
        k = Tensor(rng.standard_normal((4, 3, 3)).astype(np.float32), requires_grad=True)
        h = ad.relu(ad.conv1d(x, k, padding=1))
        loss = ad.total(ad.mul(h, ad.log_softmax(h)))
        ad.backward(loss)
        return x.grad, k.grad

    (a1, b1), (a2, b2) = run(), run()
    assert np.array_equal(a1, a2) and np.array_equal(b1, b2)


def test_non_finite_forward_raises():
    with pytest.raises(NonFiniteError):
        ad.scale(Tensor([1.0]), np.inf)
