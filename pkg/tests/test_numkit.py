import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from calibench.numkit import (ContractError, Graph, ShapeError, Tensor, adam, grad_check,
                              optimizer_step, parameter, poly_lr, sgd)
from calibench.numkit import calt, ops
from calibench.numkit.rng import derive_seed, generator, splitmix64


def grads_of(loss_fn, *params):
    with Graph() as g:
        loss = loss_fn()
    g.backward(loss)
    return [p.grad for p in params]


# -- forward values ---------------------------------------------------------------------------

def test_matmul_identity_and_hand_value():
    A = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ops.matmul(Tensor(np.eye(2)), A).data, A.data)
    assert np.array_equal(ops.matmul(A, Tensor([[1.0], [1.0]])).data, [[3.0], [7.0]])
    assert np.array_equal(ops.matmul(Tensor(np.zeros((2, 2))), A).data, np.zeros((2, 2)))


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_conv_delta_kernel_is_channel_mix():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 5, 5))
    w = np.zeros((3, 2, 3, 3))
    mix = rng.normal(size=(3, 2))
    w[:, :, 1, 1] = mix
    out = ops.conv2d(Tensor(x), Tensor(w)).data
    assert np.allclose(out, np.einsum("oc,chw->ohw", mix, x), atol=1e-12)


def test_conv_ones_kernel_on_constant_image():
    out = ops.conv2d(Tensor(np.full((1, 6, 6), 2.5)), Tensor(np.ones((1, 1, 3, 3)))).data
    assert np.allclose(out[0, 1:-1, 1:-1], 9 * 2.5)
    assert out[0, 0, 0] == pytest.approx(4 * 2.5)  # zero padding at the corner


@pytest.mark.parametrize("H,stride,expect", [(4, 2, 2), (5, 2, 3), (7, 1, 7), (16, 2, 8)])
def test_conv_output_size(H, stride, expect):
    out = ops.conv2d(Tensor(np.ones((1, H, H))), Tensor(np.ones((1, 1, 3, 3))), stride=stride)
    assert out.shape == (1, expect, expect)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(3)
    x, w = rng.normal(size=(2, 6, 5)), rng.normal(size=(3, 2, 3, 3))
    out = ops.conv2d(Tensor(x), Tensor(w), stride=2).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros(out.shape)
    for o in range(3):
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                ref[o, i, j] = np.sum(xp[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o])
    assert np.allclose(out, ref, atol=1e-12)


def test_softmax_examples():
    p = ops.softmax_channelwise(Tensor(np.zeros((4, 2, 2)))).data
    assert np.allclose(p, 0.25)
    p = ops.softmax_channelwise(Tensor(np.array([[math.log(2)], [0.0]]))).data
    assert np.allclose(p[:, 0], [2 / 3, 1 / 3], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 2, 4), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_sums_to_one_and_shift_invariant(logits, c):
    p = ops.softmax_channelwise(Tensor(logits)).data
    assert np.allclose(p.sum(axis=0), 1.0, atol=1e-12)
    assert np.all((p >= 0) & (p <= 1))
    q = ops.softmax_channelwise(Tensor(logits + c)).data
    assert np.allclose(p, q, atol=1e-12)


def test_log_clamp_keeps_values_finite():
    out = ops.log(Tensor([0.0, 1e-300, 1.0])).data
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(math.log(1e-12))


# -- backward ---------------------------------------------------------------------------------

def test_backward_square():
    w = parameter(3.0)
    (g,) = grads_of(lambda: w * w, w)
    assert g == pytest.approx(6.0)


def test_backward_relu_sum():
    w = parameter([-1.0, 2.0, -3.0, 4.0])
    (g,) = grads_of(lambda: ops.sum(ops.relu(w)), w)
    assert np.array_equal(g, [0.0, 1.0, 0.0, 1.0])


def test_backward_rejects_non_scalar():
    w = parameter([1.0, 2.0])
    with Graph() as g:
        y = w * 2.0
    with pytest.raises(ContractError):
        g.backward(y)


def test_backward_twice_rejected():
    w = parameter(1.0)
    with Graph() as g:
        y = w * w
    g.backward(y)
    with pytest.raises(ContractError):
        g.backward(y)


def test_no_recording_outside_graph():
    w = parameter(2.0)
    y = w * w
    assert y._graph is None


def test_two_layer_net_gradcheck():
    rng = np.random.default_rng(1)
    W1, W2 = parameter(rng.normal(size=(5, 4))), parameter(rng.normal(size=(3, 5)))
    x = Tensor(rng.normal(size=(4, 6)))

    def loss():
        h = ops.leaky_relu(ops.matmul(W1, x))
        return ops.mean(ops.mul(ops.matmul(W2, h), ops.matmul(W2, h)))

    assert grad_check([W1, W2], loss, samples_per_param=None) < 1e-4


def test_linear_squared_loss_gradcheck_exact():
    rng = np.random.default_rng(2)
    W = parameter(rng.normal(size=(2, 3)))
    x, y = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(2, 4)))

    def loss():
        r = ops.matmul(W, x) - y
        return ops.sum(r * r)

    assert grad_check([W], loss, samples_per_param=None) < 1e-8


def test_softmax_log_loss_gradcheck():
    rng = np.random.default_rng(4)
    W = parameter(rng.normal(size=(3, 2)))
    x = Tensor(rng.normal(size=(2, 5)))
    y = np.eye(3)[rng.integers(3, size=5)].T

    def loss():
        p = ops.softmax_channelwise(ops.matmul(W, x))
        return -ops.mean(ops.sum(ops.log(p) * y, axis=0))

    assert grad_check([W], loss, samples_per_param=None) < 1e-4


OPS_1 = {
    "exp": ops.exp, "log": lambda a: ops.log(ops.exp(a)), "sqrt": lambda a: ops.sqrt(a * a + 1.0),
    "abs": ops.abs, "relu": ops.relu, "leaky": ops.leaky_relu, "sigmoid": ops.sigmoid,
    "softmax": ops.softmax_channelwise, "neg": ops.neg, "reshape": lambda a: ops.reshape(a, (-1,)),
    "mean_axis": lambda a: ops.mean(a, axis=1), "concat": lambda a: ops.concat([a, a * 2.0]),
    "norm": ops.norm,
}


@pytest.mark.parametrize("name", sorted(OPS_1))
@pytest.mark.parametrize("seed", range(3))
def test_unary_op_gradients(name, seed):
    rng = np.random.default_rng(seed)
    # keep away from the kinks of abs/relu
    data = rng.normal(size=(3, 4))
    data[np.abs(data) < 1e-3] = 0.5
    a = parameter(data)
    weights = Tensor(rng.normal(size=OPS_1[name](Tensor(data)).shape))
    err = grad_check([a], lambda: ops.sum(ops.mul(OPS_1[name](a), weights)), samples_per_param=None)
    assert err < 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_binary_broadcast_gradients(seed):
    rng = np.random.default_rng(seed)
    a = parameter(rng.normal(size=(3, 4)))
    b = parameter(rng.uniform(0.5, 2.0, size=(1, 4)))
    for f in (ops.add, ops.sub, ops.mul, ops.div):
        assert grad_check([a, b], lambda: ops.sum(f(a, b) * f(a, b)), samples_per_param=None) < 1e-6


@pytest.mark.parametrize("k,stride", [(3, 1), (3, 2), (4, 2), (1, 1)])
def test_conv_gradients(k, stride):
    rng = np.random.default_rng(k * 10 + stride)
    x = parameter(rng.normal(size=(2, 6, 6)))
    w = parameter(rng.normal(size=(3, 2, k, k)))
    b = parameter(rng.normal(size=3))
    r = Tensor(rng.normal(size=ops.conv2d(x, w, b, stride=stride).shape))
    err = grad_check([x, w, b], lambda: ops.sum(ops.conv2d(x, w, b, stride=stride) * r), samples_per_param=None)
    assert err < 1e-6


# -- optimizers ---------------------------------------------------------------------------------

def test_sgd_plain_step():
    w = parameter(1.0)
    w.grad = np.array(2.0)
    optimizer_step(sgd(0.1, momentum=0.0, weight_decay=0.0), [w], 0.1)
    assert w.data == pytest.approx(0.8)
    assert w.grad is None


def test_sgd_momentum_recurrence():
    w = parameter(0.0)
    st_ = sgd(0.1, momentum=0.9, weight_decay=0.0)
    w.grad = np.array(1.0)
    optimizer_step(st_, [w], 0.1)
    assert w.data == pytest.approx(-0.1)
    w.grad = np.array(1.0)
    optimizer_step(st_, [w], 0.1)
    assert w.data == pytest.approx(-0.1 - 0.19)


def test_sgd_weight_decay():
    w = parameter(2.0)
    w.grad = np.array(0.0)
    optimizer_step(sgd(1.0, momentum=0.0, weight_decay=5e-4), [w], 1.0)
    assert w.data == pytest.approx(2.0 - 1e-3)


def test_adam_zero_gradient_and_first_step():
    w = parameter([1.0, -1.0])
    st_ = adam(1e-2)
    w.grad = np.zeros(2)
    optimizer_step(st_, [w], 1e-2)
    assert np.array_equal(w.data, [1.0, -1.0])
    w.grad = np.array([3.0, -0.5])
    optimizer_step(st_, [w], 1e-2)
    # second step, moments over (0, g): mhat = 0.1g/(1-.81), shat = 0.01g^2/(1-.9801)
    mhat = 0.1 * np.array([3.0, -0.5]) / (1 - 0.9 ** 2)
    shat = 0.01 * np.array([9.0, 0.25]) / (1 - 0.99 ** 2)
    assert np.allclose(w.data, np.array([1.0, -1.0]) - 1e-2 * mhat / (np.sqrt(shat) + 1e-8))


def test_optimizer_missing_grad():
    with pytest.raises(ContractError):
        optimizer_step(sgd(0.1), [parameter(1.0)], 0.1)


def test_poly_lr_examples():
    assert poly_lr(1.0, 0, 10) == 1.0
    assert poly_lr(1.0, 10, 10) == 0.0
    assert poly_lr(2.0, 5, 10, 0.9) == pytest.approx(2.0 * 0.5 ** 0.9)
    assert 0.5 ** 0.9 == pytest.approx(0.5359, abs=1e-4)
    with pytest.raises(ContractError):
        poly_lr(1.0, 0, 0)


@given(st.integers(1, 500), st.floats(0.1, 3.0))
def test_poly_lr_monotone(M, power):
    vals = [poly_lr(1.0, i, M, power) for i in range(M + 1)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_grad_check_eps_range():
    w = parameter(1.0)
    with pytest.raises(ValueError):
        grad_check([w], lambda: w * w, eps=1e-2)


# -- rng and tensor files -------------------------------------------------------------------------

def test_splitmix64_reference_values():
    # first outputs for state 0 from the published reference implementation
    state, a = splitmix64(0)
    _, b = splitmix64(state)
    assert a == 0xE220A8397B1DCDAF
    assert b == 0x6E789E6AA1B965F4


def test_derive_seed_paths_differ_and_repeat():
    assert derive_seed(0, "c1") != derive_seed(0, "c2")
    assert derive_seed(7, "x", 3) == derive_seed(7, "x", 3)
    assert np.array_equal(generator(1, "a").normal(size=4), generator(1, "a").normal(size=4))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)),
              elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_calt_round_trip(arr):
    assert np.array_equal(calt.decode(calt.encode(arr)), arr)


def test_calt_header_layout():
    raw = calt.encode(np.arange(6, dtype=float).reshape(2, 3))
    assert raw[:4] == b"CALT"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert raw[8] == 1 and raw[9] == 2
    assert int.from_bytes(raw[10:14], "little") == 2 and int.from_bytes(raw[14:18], "little") == 3
    assert len(raw) == 18 + 6 * 8


def test_calt_errors_carry_offset():
    raw = calt.encode(np.ones(3))
    with pytest.raises(calt.FormatError) as e:
        calt.decode(b"XALT" + raw[4:])
    assert e.value.offset == 0
    with pytest.raises(calt.FormatError) as e:
        calt.decode(raw[:-4])
    assert e.value.offset > 0
    with pytest.raises(calt.FormatError):
        calt.decode(raw + b"\x00")
