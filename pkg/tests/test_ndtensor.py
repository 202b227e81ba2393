import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hmrkit.ndtensor import (
    Adam,
    AdamState,
    ConfigurationError,
    ContractError,
    DimensionError,
    OptimizerError,
    Tensor,
    adam_step,
    avg_pool2d,
    check_gradients,
    concat,
    conv2d,
    layer_norm,
    masked_softmax,
    matmul,
    upsample_nearest2d,
)

FD_TOL = 1e-5


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def u(rng, *shape):
    return rng.uniform(-1.0, 1.0, size=shape)


# ---------------------------------------------------------------- matmul


def test_matmul_identity(rng):
    m = u(rng, 3, 3)
    assert np.array_equal(matmul(Tensor(np.eye(3)), Tensor(m)).data, m)


def test_matmul_zero(rng):
    out = matmul(Tensor(np.zeros((2, 4))), Tensor(u(rng, 4, 5)))
    assert np.all(out.data == 0)


def test_matmul_gradient(rng):
    errs = check_gradients(matmul, [u(rng, 4, 5), u(rng, 5, 3)])
    assert max(errs) <= 1e-6


def test_matmul_batched_broadcast_gradient(rng):
    errs = check_gradients(matmul, [u(rng, 2, 4, 5), u(rng, 5, 3)])
    assert max(errs) <= 1e-6


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


# --------------------------------------------------------- masked softmax


def _dense_renorm_oracle(scores, mask):
    out = np.zeros_like(scores)
    for r in range(scores.shape[0]):
        cols = np.flatnonzero(mask[r])
        kept = scores[r, cols]
        e = np.exp(kept - kept.max())
        out[r, cols] = e / e.sum()
    return out


def test_masked_softmax_uniform():
    p = masked_softmax(Tensor(np.zeros((5, 5))), np.ones((5, 5), bool)).data
    assert np.allclose(p, 1 / 5, atol=1e-15)


def test_masked_softmax_diagonal_only(rng):
    p = masked_softmax(Tensor(u(rng, 4, 4) * 10), np.eye(4, dtype=bool)).data
    assert np.array_equal(p, np.eye(4))


def test_masked_softmax_matches_oracle(rng):
    for _ in range(20):
        s = u(rng, 6, 6) * 5
        mask = rng.random((6, 6)) < 0.5
        np.fill_diagonal(mask, True)
        p = masked_softmax(Tensor(s), mask).data
        np.testing.assert_allclose(p, _dense_renorm_oracle(s, mask), rtol=0, atol=1e-14)
        assert np.all(p[~mask] == 0.0)
        assert np.all(np.abs(p.sum(-1) - 1) <= 1e-6)


def test_masked_softmax_ignores_garbage_in_masked_slots():
    s = np.array([[0.0, 1e308, -1e308], [1.0, 2.0, 3.0], [np.inf, 0.0, 1.0]])
    mask = np.array([[True, False, False], [True, True, True], [False, True, True]])
    p = masked_softmax(Tensor(s), mask).data
    assert np.all(np.isfinite(p))
    assert p[0, 0] == 1.0 and p[2, 0] == 0.0


def test_masked_softmax_all_false_row_rejected():
    mask = np.ones((3, 3), bool)
    mask[1] = False
    with pytest.raises(ContractError):
        masked_softmax(Tensor(np.zeros((3, 3))), mask)


def test_masked_softmax_gradient(rng):
    mask = rng.random((6, 6)) < 0.6
    np.fill_diagonal(mask, True)
    errs = check_gradients(lambda s: masked_softmax(s, mask), [u(rng, 6, 6)])
    assert errs[0] <= FD_TOL


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_masked_softmax_rows_sum_to_one(n, seed):
    r = np.random.default_rng(seed)
    s = r.normal(size=(n, n)) * 20
    mask = r.random((n, n)) < 0.3
    np.fill_diagonal(mask, True)
    p = masked_softmax(Tensor(s), mask).data
    assert np.all(np.abs(p.sum(-1) - 1) <= 1e-6)
    assert np.all(p[~mask] == 0.0)


# -------------------------------------------------------------- layer norm


def test_layer_norm_constant_input_gives_bias():
    bias = np.array([0.5, -1.0, 2.0, 3.0])
    out = layer_norm(Tensor(np.full((4,), 7.0)), Tensor(np.ones(4)), Tensor(bias)).data
    np.testing.assert_allclose(out, bias, atol=1e-12)


def test_layer_norm_standardizes():
    out = layer_norm(Tensor(np.array([1.0, 2.0, 3.0])), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    assert abs(out.mean()) <= 1e-12
    # eps=1e-5 in the denominator keeps the variance just under 1
    assert abs(out.var() - 1) <= 1e-4


def test_layer_norm_gradient(rng):
    errs = check_gradients(layer_norm, [u(rng, 2, 4), u(rng, 4), u(rng, 4)])
    assert max(errs) <= FD_TOL


def test_layer_norm_empty_axis():
    with pytest.raises(DimensionError):
        layer_norm(Tensor(np.zeros((3, 0))), Tensor(np.zeros(0)), Tensor(np.zeros(0)))


# ------------------------------------------------------------------ conv2d


def test_conv_1x1_identity(rng):
    x = u(rng, 2, 5, 5)
    k = np.zeros((2, 2, 1, 1))
    k[0, 0] = k[1, 1] = 1.0
    assert np.array_equal(conv2d(Tensor(x), Tensor(k)).data, x)


def test_conv_delta_kernel_shifts(rng):
    x = u(rng, 1, 6, 6)
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 2] = 1.0  # picks the right neighbour
    out = conv2d(Tensor(x), Tensor(k), padding=1).data
    np.testing.assert_array_equal(out[0, :, :-1], x[0, :, 1:])
    np.testing.assert_array_equal(out[0, :, -1], 0.0)


def _conv_loop_oracle(x, k, stride, pad):
    c_out, c_in, ks, _ = k.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (xp.shape[1] - ks) // stride + 1
    wo = (xp.shape[2] - ks) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                out[o, i, j] = np.sum(xp[:, i * stride : i * stride + ks, j * stride : j * stride + ks] * k[o])
    return out


@pytest.mark.parametrize("stride,pad,size", [(1, 1, 5), (2, 1, 7), (1, 0, 5), (2, 2, 5)])
def test_conv_matches_loop(rng, stride, pad, size):
    x, k = u(rng, 2, size, size), u(rng, 3, 2, 3, 3)
    np.testing.assert_allclose(conv2d(Tensor(x), Tensor(k), stride=stride, padding=pad).data, _conv_loop_oracle(x, k, stride, pad), atol=1e-13)


def test_conv_gradient(rng):
    errs = check_gradients(lambda x, k: conv2d(x, k, padding=1), [u(rng, 2, 5, 5), u(rng, 3, 2, 3, 3)])
    assert max(errs) <= FD_TOL


def test_conv_strided_batched_gradient(rng):
    errs = check_gradients(
        lambda x, k, b: conv2d(x, k, b, stride=2, padding=1), [u(rng, 2, 2, 7, 7), u(rng, 3, 2, 3, 3), u(rng, 3)]
    )
    assert max(errs) <= FD_TOL


def test_conv_non_integral_output_rejected():
    with pytest.raises(ConfigurationError):
        conv2d(Tensor(np.zeros((1, 6, 6))), Tensor(np.zeros((1, 1, 3, 3))), stride=2, padding=1)


def test_conv_even_kernel_rejected():
    with pytest.raises(ConfigurationError):
        conv2d(Tensor(np.zeros((1, 6, 6))), Tensor(np.zeros((1, 1, 2, 2))))


def test_pool_and_upsample_gradients(rng):
    assert check_gradients(lambda x: avg_pool2d(x, 2), [u(rng, 2, 4, 6)])[0] <= FD_TOL
    assert check_gradients(lambda x: upsample_nearest2d(x, 2), [u(rng, 2, 3, 3)])[0] <= FD_TOL


# ---------------------------------------------------------- elementwise ops

UNARY = {
    "exp": lambda t: t.exp(),
    "log": lambda t: (t * t + 0.5).log(),
    "sqrt": lambda t: (t * t + 0.5).sqrt(),
    "tanh": lambda t: t.tanh(),
    "sigmoid": lambda t: t.sigmoid(),
    "softplus": lambda t: t.softplus(),
    "gelu": lambda t: t.gelu(),
    "abs": lambda t: t.abs(),
    "pow": lambda t: (t * t + 1.0) ** 1.5,
    "norm": lambda t: t.norm(axis=-1),
    "mean": lambda t: t.mean(axis=0),
    "transpose": lambda t: t.transpose(1, 0) * 2.0,
    "getitem": lambda t: t[np.array([0, 2, 0]), 1:],
    "div": lambda t: t / (t * t + 1.0),
    "concat": lambda t: concat([t, t * 3.0], axis=1),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(rng, name):
    assert check_gradients(UNARY[name], [u(rng, 3, 4)])[0] <= FD_TOL


def test_broadcast_binary_gradients(rng):
    ops = [lambda a, b: a + b, lambda a, b: a - b, lambda a, b: a * b, lambda a, b: a / (b * b + 1.0)]
    for op in ops:
        assert max(check_gradients(op, [u(rng, 3, 4), u(rng, 1, 4)])) <= FD_TOL


def test_norm_subgradient_at_zero():
    x = Tensor(np.zeros((2, 3)), requires_grad=True)
    x.norm(axis=-1).sum().backward()
    assert np.array_equal(x.grad, np.zeros((2, 3)))


def test_abs_subgradient_at_zero():
    x = Tensor(np.zeros(3), requires_grad=True)
    x.abs().sum().backward()
    assert np.array_equal(x.grad, np.zeros(3))


# ---------------------------------------------------------------- backward


def test_backward_sum_gives_ones(rng):
    x = Tensor(u(rng, 3, 2), requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((3, 2)))


def test_backward_square(rng):
    a = u(rng, 4)
    x = Tensor(a, requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * a, rtol=0, atol=0)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_backward_frees_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    y = (x * 2.0).sum()
    y.backward()
    assert y._parents == () and y._backward is None


def test_shared_node_visited_once():
    x = Tensor(np.array([3.0]), requires_grad=True)
    h = x * x
    (h + h + h).sum().backward()
    np.testing.assert_array_equal(x.grad, [18.0])


def test_gradient_accumulation_is_additive(rng):
    a = u(rng, 5)
    x1 = Tensor(a, requires_grad=True)
    ((x1 * x1).sum() + x1.exp().sum()).backward()

    x2 = Tensor(a, requires_grad=True)
    (x2 * x2).sum().backward()
    x2.exp().sum().backward()
    np.testing.assert_allclose(x1.grad, x2.grad, rtol=1e-15)


def test_forward_bit_identical_repeat(rng):
    x, k = u(rng, 2, 8, 8), u(rng, 4, 2, 3, 3)
    a = conv2d(Tensor(x), Tensor(k), padding=1).gelu().sum().data
    b = conv2d(Tensor(x), Tensor(k), padding=1).gelu().sum().data
    assert a.tobytes() == b.tobytes()


# -------------------------------------------------------------------- adam


def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([1.0, -2.0])}
    new, state = adam_step(p, {"w": np.zeros(2)}, AdamState(learning_rate=0.1))
    assert np.array_equal(new["w"], p["w"])
    assert state.step == 1
    assert np.all(state.first_moment["w"] == 0) and np.all(state.second_moment["w"] == 0)


def test_adam_moments_decay_under_zero_gradient():
    state = AdamState(learning_rate=0.1)
    p = {"w": np.array([1.0])}
    p, state = adam_step(p, {"w": np.array([1.0])}, state)
    m0, v0 = state.first_moment["w"].copy(), state.second_moment["w"].copy()
    p, state = adam_step(p, {"w": np.zeros(1)}, state)
    assert abs(state.first_moment["w"][0]) < abs(m0[0])
    assert state.second_moment["w"][0] < v0[0]
    assert state.step == 2


def test_adam_one_step_descends():
    x = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam({"x": x}, lr=0.1)
    (x * x).sum().backward()
    opt.step()
    assert x.data[0] < 1.0


def test_adam_converges_on_quadratic():
    # f(x) = 0.5 (x - c)^T A (x - c); closed-form minimiser c
    A = np.array([[3.0, 0.5], [0.5, 1.0]])
    c = np.array([0.7, -1.2])
    x = Tensor(np.zeros(2), requires_grad=True)
    opt = Adam({"x": x}, lr=0.1)
    for _ in range(200):
        opt.zero_grad()
        d2 = (x - c).reshape(1, 2)
        (0.5 * matmul(matmul(d2, Tensor(A)), d2.transpose(1, 0))).sum().backward()
        opt.step()
    grad = A @ (x.data - c)
    assert np.linalg.norm(grad) < 1e-3
    assert np.allclose(x.data, c, atol=1e-3)


def test_adam_nan_gradient_names_parameter():
    with pytest.raises(OptimizerError) as info:
        adam_step({"layer.w": np.ones(2)}, {"layer.w": np.array([np.nan, 0.0])}, AdamState())
    assert info.value.parameter == "layer.w"
    assert "layer.w" in str(info.value)


def test_adam_rejects_nonpositive_lr():
    with pytest.raises(OptimizerError):
        adam_step({"w": np.ones(1)}, {"w": np.ones(1)}, AdamState(learning_rate=0.0))
