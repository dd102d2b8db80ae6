import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swinvox.errors import ContractError, DegenerateBatchError, DimensionError, NonFiniteError, PoisonedGradientError
from swinvox.tensor import (
    AdamW, AdamWState, Tape, Tensor, adamw_step, backward, check_entries, finite_diff_check, ops, precision,
)


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def strict_fd(f, params, h=1e-6, rtol=1e-4, atol=1e-9):
    """Every entry: |analytic - numeric| <= rtol * max(|a|, |n|) + atol."""
    for c in check_entries(f, params, h=h):
        assert abs(c.analytic - c.numeric) <= rtol * max(abs(c.analytic), abs(c.numeric)) + atol, c


# ---------------------------------------------------------------- matmul


def test_matmul_identity_and_hand_case(f64):
    m = np.array([[1.5, -2.0], [3.0, 4.25]])
    assert np.array_equal(ops.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)
    assert ops.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def test_matmul_triple_loop_exact(f64, rng):
    # Integer-valued entries make every partial sum exact, so order cannot matter.
    a = rng.integers(-9, 10, (3, 4)).astype(np.float64)
    b = rng.integers(-9, 10, (4, 2)).astype(np.float64)
    assert np.array_equal(ops.matmul(Tensor(a), Tensor(b)).data, triple_loop(a, b))
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    np.testing.assert_allclose(ops.matmul(Tensor(a), Tensor(b)).data, triple_loop(a, b), rtol=0, atol=1e-14)


def test_matmul_batched_broadcast_and_grad(f64, rng):
    a, b = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(4, 5)))
    assert ops.matmul(a, b).shape == (2, 3, 5)
    strict_fd(lambda: ops.sum(ops.mul(ops.matmul(a, b), ops.matmul(a, b))), [a, b])


def test_matmul_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


# --------------------------------------------------------------- softmax


def test_softmax_cases(f64, rng):
    np.testing.assert_allclose(ops.softmax_lastdim(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(ops.softmax_lastdim(Tensor([1000.0, 0.0])).data, [1.0, 0.0], atol=1e-6)
    x = rng.normal(size=(4, 7)) * 3
    e = np.exp(x)
    np.testing.assert_allclose(ops.softmax_lastdim(Tensor(x)).data, e / e.sum(-1, keepdims=True), rtol=1e-13)
    with precision(np.float32):
        rows = ops.softmax_lastdim(Tensor(rng.normal(size=(50, 9)) * 10)).data.sum(-1)
    assert np.all(np.abs(rows - 1) <= 1e-6)


def test_softmax_grad(f64, rng):
    x = leaf(rng.normal(size=(3, 5)))
    w = Tensor(rng.normal(size=(3, 5)))
    strict_fd(lambda: ops.sum(ops.mul(ops.softmax_lastdim(x), w)), [x])


# ------------------------------------------------------------ layer norm


def test_layer_norm_constant_row_is_zero(f64):
    one, zero = Tensor(np.ones(6)), Tensor(np.zeros(6))
    assert np.array_equal(ops.layer_norm(Tensor(np.full((2, 6), 3.5)), one, zero).data, np.zeros((2, 6)))
    # 3.7 is not dyadic, so its mean carries one rounding that eps then amplifies.
    assert np.abs(ops.layer_norm(Tensor(np.full((2, 6), 3.7)), one, zero).data).max() < 1e-12


def test_layer_norm_moments_and_grad(f64, rng):
    x = leaf(rng.normal(2.0, 3.0, size=(5, 8)))
    out = ops.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    assert np.abs(out.mean(-1)).max() < 1e-5
    assert np.abs(out.var(-1) - 1).max() < 1e-5
    g, b = leaf(rng.normal(size=8)), leaf(rng.normal(size=8))
    w = Tensor(rng.normal(size=(5, 8)))
    strict_fd(lambda: ops.sum(ops.mul(ops.layer_norm(x, g, b), w)), [x, g, b])
    assert finite_diff_check(lambda: ops.sum(ops.mul(ops.layer_norm(x, g, b), w)), [x, g, b]) < 1e-4


# ----------------------------------------------------------- elementwise


def test_elementwise_values():
    assert ops.sigmoid(Tensor(0.0)).item() == 0.5
    assert ops.relu(Tensor([-1.0, 2.0])).data.tolist() == [0.0, 2.0]
    s = ops.sigmoid(Tensor(np.linspace(-15, 15, 41))).data
    assert s.dtype == np.float32 and np.all((s > 0) & (s < 1))
    with precision(np.float64):
        s64 = ops.sigmoid(Tensor(np.linspace(-30, 30, 41))).data
    assert np.all((s64 > 0) & (s64 < 1))
    np.testing.assert_allclose(ops.gelu(Tensor([1.0])).data, [0.5 * (1 + math.erf(1 / math.sqrt(2)))], rtol=1e-6)


@pytest.mark.parametrize("name", ["gelu", "sigmoid", "exp", "square"])
def test_elementwise_grads(f64, rng, name):
    x = leaf(rng.normal(size=(4, 3)))
    w = Tensor(rng.normal(size=(4, 3)))
    fn = {"gelu": ops.gelu, "sigmoid": ops.sigmoid, "exp": ops.exp,
          "square": lambda t: ops.mul(t, t)}[name]
    strict_fd(lambda: ops.sum(ops.mul(fn(x), w)), [x])


def test_relu_grad_away_from_kink(f64, rng):
    x = leaf(rng.choice([-1, 1], size=(4, 3)) * rng.uniform(0.1, 2.0, size=(4, 3)))
    strict_fd(lambda: ops.sum(ops.mul(ops.relu(x), x)), [x])


def test_add_mul_scale_broadcast_grads(f64, rng):
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4,)))
    strict_fd(lambda: ops.sum(ops.mul(ops.add(a, b), ops.scale(ops.mul(a, b), 0.7))), [a, b])
    with pytest.raises(DimensionError):
        ops.add(Tensor(np.ones((3, 4))), Tensor(np.ones((3,))))


def test_structural_op_grads(f64, rng):
    x = leaf(rng.normal(size=(2, 4, 4, 3)))
    w = Tensor(rng.normal(size=(2, 4, 4, 3)))

    def f():
        y = ops.roll(ops.transpose(x, (0, 2, 1, 3)), (1, -2), (1, 2))
        y = ops.concat([y[:, :2], ops.reshape(y, (2, 4, 4, 3))[:, 2:]], axis=1)
        return ops.sum(ops.mul(y, w))

    strict_fd(f, [x])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_forward_is_an_error(f64):
    with pytest.raises(NonFiniteError):
        ops.log(Tensor([0.0]))
    with pytest.raises(NonFiniteError):
        ops.div(Tensor([1.0]), Tensor([0.0]))


# --------------------------------------------------------- conv transpose


def scatter_oracle(x, w, bias):
    b, ci, d, h, wd = x.shape
    co = w.shape[1]
    out = np.zeros((b, co, 2 * d + 2, 2 * h + 2, 2 * wd + 2))
    for n in range(b):
        for c in range(ci):
            for i in range(d):
                for j in range(h):
                    for k in range(wd):
                        # Output index 2*i + kd - 1, stored shifted by +1 so the pad fits.
                        out[n, :, 2 * i:2 * i + 4, 2 * j:2 * j + 4, 2 * k:2 * k + 4] += x[n, c, i, j, k] * w[c]
    return out[:, :, 1:-1, 1:-1, 1:-1] + bias.reshape(1, co, 1, 1, 1)


def test_conv_transpose_single_voxel_scatter(f64):
    w = np.zeros((1, 1, 4, 4, 4))
    w[0, 0, 1, 2, 1] = 3.0
    w[0, 0, 2, 2, 2] = -1.0
    out = ops.conv_transpose3d(Tensor(np.full((1, 1, 1, 1, 1), 2.0)), Tensor(w)).data
    assert out.shape == (1, 1, 2, 2, 2)
    # Output index o = 2*i + k - 1 with i = 0: taps k in {1, 2} land at o in {0, 1}.
    expect = np.zeros((2, 2, 2))
    expect[0, 1, 0] = 6.0
    expect[1, 1, 1] = -2.0
    assert np.array_equal(out[0, 0], expect)


def test_conv_transpose_matches_loop_oracle_exactly(f64, rng):
    x = rng.integers(-3, 4, (2, 3, 2, 3, 2)).astype(np.float64)
    w = rng.integers(-3, 4, (3, 2, 4, 4, 4)).astype(np.float64)
    bias = rng.integers(-3, 4, 2).astype(np.float64)
    out = ops.conv_transpose3d(Tensor(x), Tensor(w), Tensor(bias)).data
    assert out.shape == (2, 2, 4, 6, 4)
    assert np.array_equal(out, scatter_oracle(x, w, bias))
    x, w, bias = rng.normal(size=x.shape), rng.normal(size=w.shape), rng.normal(size=2)
    np.testing.assert_allclose(ops.conv_transpose3d(Tensor(x), Tensor(w), Tensor(bias)).data,
                               scatter_oracle(x, w, bias), rtol=0, atol=1e-13)


def test_conv_transpose_zero_input_and_errors(f64, rng):
    bias = rng.normal(size=3)
    out = ops.conv_transpose3d(Tensor(np.zeros((1, 2, 2, 2, 2))), Tensor(rng.normal(size=(2, 3, 4, 4, 4))),
                               Tensor(bias)).data
    assert np.array_equal(out, np.broadcast_to(bias.reshape(1, 3, 1, 1, 1), out.shape))
    with pytest.raises(DimensionError):
        ops.conv_transpose3d(Tensor(np.zeros((1, 2, 2, 2, 2))), Tensor(np.zeros((3, 3, 4, 4, 4))))


def test_conv_transpose_grad(f64, rng):
    x, w, b = leaf(rng.normal(size=(2, 2, 2, 3, 2))), leaf(rng.normal(size=(2, 3, 4, 4, 4))), leaf(rng.normal(size=3))
    r = Tensor(rng.normal(size=(2, 3, 4, 6, 4)))
    strict_fd(lambda: ops.sum(ops.mul(ops.conv_transpose3d(x, w, b), r)), [x, w, b])


# ------------------------------------------------------------ batch norm


def test_batch_norm_train_eval(f64, rng):
    x = leaf(rng.normal(3.0, 2.0, size=(2, 3, 2, 2, 2)))
    one, zero = Tensor(np.ones(3)), Tensor(np.zeros(3))
    out, rm, rv = ops.batch_norm3d(x, one, zero, np.zeros(3), np.ones(3), training=True)
    assert np.abs(out.data.mean(axis=(0, 2, 3, 4))).max() < 1e-5
    assert np.abs(out.data.var(axis=(0, 2, 3, 4)) - 1).max() < 1e-4
    mu = x.data.mean(axis=(0, 2, 3, 4))
    np.testing.assert_allclose(rm, 0.1 * mu)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.data.var(axis=(0, 2, 3, 4), ddof=1))
    ev, _, _ = ops.batch_norm3d(x, Tensor([2.0, 1.0, 0.5]), Tensor([1.0, 0.0, -1.0]), np.zeros(3), np.ones(3),
                                training=False)
    scale = np.array([2.0, 1.0, 0.5]).reshape(1, 3, 1, 1, 1) / np.sqrt(1 + 1e-5)
    np.testing.assert_allclose(ev.data, x.data * scale + np.array([1.0, 0.0, -1.0]).reshape(1, 3, 1, 1, 1))


@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_grad(f64, rng, training):
    x = leaf(rng.normal(size=(2, 2, 2, 2, 2)))
    g, b = leaf(rng.normal(size=2) + 1), leaf(rng.normal(size=2))
    r = Tensor(rng.normal(size=(2, 2, 2, 2, 2)))
    rm, rv = rng.normal(size=2), rng.uniform(0.5, 2, size=2)
    strict_fd(lambda: ops.sum(ops.mul(ops.batch_norm3d(x, g, b, rm, rv, training)[0], r)), [x, g, b])


def test_batch_norm_degenerate():
    with pytest.raises(DegenerateBatchError):
        ops.batch_norm3d(Tensor(np.ones((1, 2, 1, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                         np.zeros(2), np.ones(2), training=True)


# -------------------------------------------------------------- backward


def test_backward_sum_of_squares():
    x = leaf([1.0, 2.0])
    unused = leaf([5.0])
    with Tape() as tape:
        loss = ops.sum(ops.mul(x, x))
    grads = backward(loss, tape)
    assert grads[x].tolist() == [2.0, 4.0]
    assert grads[unused].tolist() == [0.0]


def test_backward_contracts():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = ops.mul(x, x)
    with pytest.raises(ContractError):
        tape.backward(y)
    with pytest.raises(ContractError):
        backward(ops.sum(x))


def test_tape_is_topological_and_shared_nodes_accumulate():
    x = leaf([3.0])
    with Tape() as tape:
        y = ops.mul(x, x)
        z = ops.add(y, y)
        loss = ops.sum(z)
    for rec in tape.records:
        assert all(node is None or node < rec.output for node in rec.inputs)
    assert tape.backward(loss)[x].tolist() == [12.0]


def test_finite_diff_check_exactness(f64, rng):
    a = leaf(rng.normal(size=5))
    c = Tensor(rng.normal(size=5))
    # Central differences are exact for polynomials of degree <= 2 at any step,
    # so a coarse step keeps cancellation error out of the way.
    assert finite_diff_check(lambda: ops.sum(ops.mul(a, c)), [a], h=1e-3) < 1e-10
    assert finite_diff_check(lambda: ops.sum(ops.mul(ops.mul(a, a), c)), [a], h=1e-3) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8))
def test_softmax_rows_sum_to_one_property(values):
    with precision(np.float64):
        out = ops.softmax_lastdim(Tensor(np.array(values))).data
    assert abs(out.sum() - 1) < 1e-12 and np.all(out > 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 4), st.integers(0, 2 ** 31))
def test_matmul_grad_property(m, k, n, seed):
    r = np.random.default_rng(seed)
    with precision(np.float64):
        a, b = leaf(r.normal(size=(m, k))), leaf(r.normal(size=(k, n)))
        w = Tensor(r.normal(size=(m, n)))
        with Tape() as tape:
            loss = ops.sum(ops.mul(ops.matmul(a, b), w))
        g = tape.backward(loss)
    np.testing.assert_allclose(g[a], w.data @ b.data.T, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(g[b], a.data.T @ w.data, rtol=1e-12, atol=1e-12)


# ----------------------------------------------------------------- AdamW


def test_adamw_zero_grad_cases():
    p = np.array([1.0, -2.0], dtype=np.float32)
    s = AdamWState.zeros_like(p, lr=1e-2, weight_decay=0.0)
    out = adamw_step(p, np.zeros(2, np.float32), s)
    assert np.array_equal(out, p) and s.t == 1
    s = AdamWState.zeros_like(p, lr=1e-2, weight_decay=0.5)
    out = adamw_step(p, np.zeros(2, np.float32), s)
    assert np.array_equal(out, p * np.float32(1 - 1e-2 * 0.5))


def test_adamw_matches_reference_formula():
    rng = np.random.default_rng(0)
    p = rng.normal(size=4)
    s = AdamWState.zeros_like(p, lr=0.1, beta1=0.8, beta2=0.9, eps=1e-8, weight_decay=0.1)
    m = v = np.zeros(4)
    ref = p.copy()
    for t in range(1, 4):
        g = rng.normal(size=4)
        p = adamw_step(p, g, s)
        m = 0.8 * m + 0.2 * g
        v = 0.9 * v + 0.1 * g * g
        ref = ref * (1 - 0.1 * 0.1) - 0.1 * (m / (1 - 0.8 ** t)) / (np.sqrt(v / (1 - 0.9 ** t)) + 1e-8)
    np.testing.assert_allclose(p, ref, rtol=1e-14)
    assert s.t == 3 and np.all(s.v >= 0)


def test_adamw_scalar_quadratic_descends():
    x = np.array([1.0])
    s = AdamWState.zeros_like(x, lr=1e-2, weight_decay=1e-2)
    mags = []
    for _ in range(100):
        x = adamw_step(x, 2 * x, s)
        mags.append(abs(x[0]))
    assert all(b < a for a, b in zip(mags[5:], mags[6:]))


def test_adamw_poisoned_gradient():
    opt = AdamW()
    with pytest.raises(PoisonedGradientError) as info:
        opt.step({"w": np.ones(2)}, {"w": np.array([1.0, np.nan])})
    assert info.value.name == "w"
    with pytest.raises(DimensionError):
        adamw_step(np.ones(2), np.ones(3), AdamWState.zeros_like(np.ones(2)))
