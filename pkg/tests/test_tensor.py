"""Tensor engine: op semantics, gradients vs finite differences, AdamW."""

import numpy as np
import pytest

from fedstill import tensor as T
from fedstill.errors import (MissingGradient, NonFiniteValue, NotScalar,
                             ShapeMismatch)

from oracles import finite_difference_grad, grad_close


def leaf(arr):
    return T.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


# ------------------------------------------------------------------ op values

def test_matmul_identity():
    a = np.arange(9.0).reshape(3, 3) + 1.0
    out = T.matmul(T.Tensor(np.eye(3)), T.Tensor(a))
    np.testing.assert_array_equal(out.data, a)


def test_conv2d_one_by_one_all_ones_kernel_is_identity():
    img = T.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    k = T.Tensor(np.ones((1, 1, 1, 1)))
    out = T.conv2d(img, k)
    np.testing.assert_array_equal(out.data, img.data)


def test_conv2d_padding_preserves_shape():
    rng = np.random.default_rng(0)
    x = T.Tensor(rng.normal(size=(3, 2, 5, 7)))
    k = T.Tensor(rng.normal(size=(4, 3, 3, 3)))
    assert T.conv2d(x, k).shape == (4, 2, 5, 7)


def test_conv2d_depth_slices_share_weights():
    rng = np.random.default_rng(1)
    base = rng.normal(size=(2, 1, 4, 4))
    k = T.Tensor(rng.normal(size=(3, 2, 3, 3)))
    stacked = T.Tensor(np.concatenate([base, base], axis=1))
    out = T.conv2d(stacked, k)
    np.testing.assert_array_equal(out.data[:, 0], out.data[:, 1])


def test_sigmoid_at_zero():
    out = T.sigmoid(T.Tensor(np.zeros(4)))
    np.testing.assert_allclose(out.data, 0.5, atol=1e-15)


def test_sigmoid_extreme_inputs_stay_finite():
    out = T.sigmoid(T.Tensor(np.array([-1e4, 1e4])))
    assert np.all(np.isfinite(out.data))
    assert out.data[0] >= 0.0 and out.data[1] <= 1.0


def test_clamp_bounds():
    out = T.clamp(T.Tensor(np.array([-1.0, 0.5, 2.0])), 0.0, 1.0)
    np.testing.assert_array_equal(out.data, [0.0, 0.5, 1.0])


def test_embed_lookup_gathers_rows():
    table = T.Tensor(np.arange(12.0).reshape(4, 3))
    out = T.embed_lookup(table, [2, 0])
    np.testing.assert_array_equal(out.data, [[6, 7, 8], [0, 1, 2]])


def test_apply_dispatch_matches_direct_call():
    a, b = T.Tensor(np.ones((2, 2))), T.Tensor(np.full((2, 2), 3.0))
    np.testing.assert_array_equal(T.apply("add", [a, b]).data, np.full((2, 2), 4.0))
    np.testing.assert_array_equal(
        T.apply("reshape", [a], shape=(4,)).data, np.ones(4))
    with pytest.raises(ValueError):
        T.apply("transpose", [a])


def test_shape_mismatch_reports_offending_shapes():
    with pytest.raises(ShapeMismatch) as err:
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))
    assert "(2, 3)" in str(err.value)


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_result_raises():
    big = T.Tensor(np.array([1e308]))
    with pytest.raises(NonFiniteValue):
        T.mul(big, big)


# ------------------------------------------------------------------ backward

def test_backward_requires_scalar():
    with T.Tape():
        x = leaf([1.0, 2.0])
        y = T.mul(x, x)
    with pytest.raises(NotScalar):
        T.backward(y)


def test_backward_simple_chain():
    with T.Tape() as tape:
        x = leaf([1.0, 2.0, 3.0])
        loss = T.tsum(T.mul(x, x))
    grads = T.backward(loss, tape)
    np.testing.assert_allclose(grads[x.uid].data, [2.0, 4.0, 6.0])


def test_backward_fanout_accumulates():
    with T.Tape() as tape:
        x = leaf(2.0)
        loss = T.add(T.mul(x, x), T.mul(x, x))
    grads = T.backward(loss, tape)
    np.testing.assert_allclose(grads[x.uid].data, 8.0)


def test_backward_unreachable_leaf_gets_zero():
    with T.Tape() as tape:
        x = leaf([1.0, 2.0])
        unused = leaf([5.0])
        _ = T.mul(unused, unused)  # on tape, but not part of the loss
        loss = T.tsum(x)
    grads = T.backward(loss, tape)
    np.testing.assert_array_equal(grads[unused.uid].data, [0.0])


def test_backward_is_linear_in_the_loss():
    rng = np.random.default_rng(7)
    xv = rng.uniform(-2, 2, size=(3, 3))

    def run(mode):
        with T.Tape() as tape:
            x = leaf(xv)
            a = T.tsum(T.mul(x, x))
            b = T.tmean(T.relu(x))
            loss = {"a": a, "b": b, "ab": T.add(a, b)}[mode]
        return T.backward(loss, tape)[x.uid].data

    np.testing.assert_allclose(run("ab"), run("a") + run("b"), atol=1e-12)


def test_ops_without_tape_record_nothing():
    x = leaf([1.0, 2.0])
    y = T.mul(x, x)
    assert y._grad_fn is None and not y.requires_grad


def test_rerun_same_seed_is_bit_identical():
    def run():
        rng = np.random.default_rng(42)
        w = leaf(rng.normal(size=(4, 3)))
        state = T.OptimizerState(base_lr=1e-2, warmup_frac=0.0)
        for _ in range(5):
            xv = rng.normal(size=(3, 2))
            with T.Tape() as tape:
                loss = T.tsum(T.mul(T.matmul(w, T.Tensor(xv)),
                                    T.matmul(w, T.Tensor(xv))))
            grads = T.backward(loss, tape)
            T.adamw_step({"w": w}, grads, state, step_total=5)
        return w.data.copy()

    a, b = run(), run()
    assert a.tobytes() == b.tobytes()


# ------------------------------------------------ gradients vs finite differences

def _scalarize(out):
    return T.tsum(T.mul(out, out)) if out.data.size != 1 else out


def check_op_grad(build, arrays, rtol=1e-4):
    """Compare backward() against the central-difference oracle per input."""
    for target in range(len(arrays)):
        def f(x):
            args = [np.array(a, dtype=np.float64) for a in arrays]
            args[target] = x
            return _scalarize(build(*[T.Tensor(a) for a in args])).item()

        with T.Tape() as tape:
            leaves = [leaf(a) for a in arrays]
            loss = _scalarize(build(*leaves))
        grads = T.backward(loss, tape)
        analytic = grads[leaves[target].uid].data
        numeric = finite_difference_grad(f, np.array(arrays[target], dtype=np.float64))
        assert grad_close(analytic, numeric, rtol), (
            f"gradient mismatch on input {target}")


def test_grad_add_sub_mul_broadcast():
    rng = np.random.default_rng(10)
    a = rng.uniform(-2, 2, size=(3, 4))
    b = rng.uniform(-2, 2, size=(3, 1))
    check_op_grad(T.add, [a, b])
    check_op_grad(T.sub, [a, b])
    check_op_grad(T.mul, [a, b])


def test_grad_matmul():
    rng = np.random.default_rng(11)
    check_op_grad(T.matmul, [rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (4, 2))])


def test_grad_conv2d():
    rng = np.random.default_rng(12)
    x = rng.uniform(-2, 2, (2, 2, 4, 5))
    k = rng.uniform(-2, 2, (3, 2, 3, 3))
    check_op_grad(T.conv2d, [x, k])


def test_grad_relu_away_from_kink():
    rng = np.random.default_rng(13)
    x = rng.uniform(0.2, 2, (3, 3)) * rng.choice([-1.0, 1.0], size=(3, 3))
    check_op_grad(T.relu, [x])


def test_grad_sigmoid():
    rng = np.random.default_rng(14)
    check_op_grad(T.sigmoid, [rng.uniform(-2, 2, (2, 5))])


def test_grad_sum_mean_axes():
    rng = np.random.default_rng(15)
    x = rng.uniform(-2, 2, (2, 3, 4))
    check_op_grad(lambda t: T.tsum(t), [x])
    check_op_grad(lambda t: T.tsum(t, axis=(1, 2)), [x])
    check_op_grad(lambda t: T.tmean(t), [x])
    check_op_grad(lambda t: T.tmean(t, axis=1, keepdims=True), [x])


def test_grad_concat_reshape():
    rng = np.random.default_rng(16)
    a = rng.uniform(-2, 2, (2, 3))
    b = rng.uniform(-2, 2, (4, 3))
    check_op_grad(lambda x, y: T.concat([x, y], axis=0), [a, b])
    check_op_grad(lambda x: T.reshape(x, (3, 2)), [a])


def test_grad_embed_lookup():
    rng = np.random.default_rng(17)
    table = rng.uniform(-2, 2, (5, 3))
    check_op_grad(lambda t: T.embed_lookup(t, [0, 3, 3, 1]), [table])


def test_grad_clamp_interior_and_clamped():
    x = np.array([[-0.5, 0.3], [0.9, 1.7]])
    with T.Tape() as tape:
        xt = leaf(x)
        loss = T.tsum(T.clamp(xt, 0.0, 1.0))
    g = T.backward(loss, tape)[xt.uid].data
    np.testing.assert_array_equal(g, [[0.0, 1.0], [1.0, 0.0]])


def test_grad_randomized_composite_graphs():
    """Multi-op graphs with fan-out, checked against the oracle."""
    rng = np.random.default_rng(18)
    for _ in range(10):
        w1 = rng.uniform(-1, 1, (4, 3))
        w2 = rng.uniform(-1, 1, (2, 4))
        x = rng.uniform(-1, 1, (3, 5))

        def net(w1t, w2t, xt):
            h = T.relu(T.matmul(w1t, xt))
            out = T.sigmoid(T.matmul(w2t, h))
            return T.tmean(T.mul(out, out))

        check_op_grad(net, [w1, w2, x])


# ------------------------------------------------------------------ optimizer

def test_adamw_unit_moment_first_step():
    p = leaf(1.0)
    state = T.OptimizerState(base_lr=0.1, weight_decay=0.0, beta1=0.0,
                             beta2=0.0, warmup_frac=0.0)
    grads = {p.uid: T.Tensor(1.0)}
    T.adamw_step({"p": p}, grads, state, step_total=10)
    assert abs(p.data - 0.9) < 1e-8
    assert state.step == 1


def test_adamw_decay_is_decoupled():
    for lr in (0.1, 0.01):
        p = leaf(2.0)
        state = T.OptimizerState(base_lr=lr, weight_decay=1e-5, warmup_frac=0.0)
        T.adamw_step({"p": p}, {p.uid: T.Tensor(0.0)}, state, step_total=10)
        np.testing.assert_allclose(p.data, 2.0 * (1.0 - lr * 1e-5), rtol=1e-15)


def test_adamw_zero_grad_zero_decay_is_identity():
    p = leaf(np.array([1.0, -2.0, 3.0]))
    before = p.data.copy()
    state = T.OptimizerState(weight_decay=0.0)
    T.adamw_step({"p": p}, {p.uid: T.Tensor(np.zeros(3))}, state, step_total=10)
    assert p.data.tobytes() == before.tobytes()


def test_adamw_missing_gradient_names_parameter():
    p = leaf(1.0)
    state = T.OptimizerState()
    with pytest.raises(MissingGradient) as err:
        T.adamw_step({"weights": p}, {}, state, step_total=10)
    assert "weights" in str(err.value)


def test_schedule_endpoints_and_midpoint():
    assert T.schedule_lr(0, 1000, 4e-4) == 0.0
    assert T.schedule_lr(100, 1000, 4e-4) == pytest.approx(4e-4)
    assert T.schedule_lr(50, 1000, 4e-4) == pytest.approx(2e-4)
    assert T.schedule_lr(700, 1000, 4e-4) == pytest.approx(4e-4)


def test_schedule_monotone_then_flat():
    vals = [T.schedule_lr(s, 200, 1e-3) for s in range(201)]
    warmup_end = 20
    ramp = vals[:warmup_end + 1]
    assert all(b >= a for a, b in zip(ramp, ramp[1:]))
    assert all(v == vals[warmup_end] for v in vals[warmup_end:])


def test_schedule_rejects_bad_inputs():
    with pytest.raises(ValueError):
        T.schedule_lr(5, 0, 1e-3)
    with pytest.raises(ValueError):
        T.schedule_lr(-1, 10, 1e-3)
