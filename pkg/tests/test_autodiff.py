import numpy as np
import pytest

from kpseq import autodiff as ad
from kpseq.autodiff import (
    ShapeError,
    Tape,
    Tensor,
    add,
    backward,
    concat_channels,
    conv2d,
    elementwise,
    grad_check,
    maxpool2,
    mean_all,
    mul,
    one_minus,
    relu,
    sigmoid,
    sigmoid_ce_map,
    sub,
    sum_all,
    tanh,
    upsample_nearest2,
)
from oracles import naive_conv2d


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


# ---------------------------------------------------------------------------
# conv2d


def test_conv2d_identity_kernel():
    out = conv2d([[[5.0]]], [[[[1.0]]]], [0.0])
    assert out.data.shape == (1, 1, 1)
    assert out.data[0, 0, 0] == 5.0


def test_conv2d_ones_padding_pattern():
    x = np.ones((1, 3, 3))
    w = np.ones((1, 1, 3, 3))
    out = conv2d(x, w, np.zeros(1)).data[0]
    # zero padding: corners see 4 inputs, edges 6, center all 9
    expected = np.array([[4.0, 6.0, 4.0], [6.0, 9.0, 6.0], [4.0, 6.0, 4.0]])
    assert np.array_equal(out, expected)
    assert np.array_equal(out, naive_conv2d(x, w, np.zeros(1))[0])


def test_conv2d_zero_weights_gives_bias():
    x = rand((3, 4, 5), seed=1)
    w = np.zeros((2, 3, 3, 3))
    b = np.array([0.7, -1.2])
    out = conv2d(x, w, b).data
    assert np.allclose(out[0], 0.7) and np.allclose(out[1], -1.2)


@pytest.mark.parametrize("shape,cout,k", [((2, 5, 4), 3, 3), ((1, 6, 6), 2, 5), ((4, 3, 3), 1, 1)])
def test_conv2d_matches_direct_sum(shape, cout, k):
    rng = np.random.default_rng(7)
    x = rng.standard_normal(shape)
    w = rng.standard_normal((cout, shape[0], k, k))
    b = rng.standard_normal(cout)
    assert np.allclose(conv2d(x, w, b).data, naive_conv2d(x, w, b), atol=1e-12)


def test_conv2d_batched_matches_per_sample():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 3, 6, 6))
    w = rng.standard_normal((2, 3, 3, 3))
    b = rng.standard_normal(2)
    batched = conv2d(x, w, b).data
    for n in range(4):
        assert np.allclose(batched[n], conv2d(x[n], w, b).data)


def test_conv2d_rejects_bad_shapes():
    with pytest.raises(ShapeError):
        conv2d(rand((3, 4, 4)), rand((2, 2, 3, 3)), None)  # channel mismatch
    with pytest.raises(ShapeError):
        conv2d(rand((2, 4, 4)), rand((2, 2, 2, 2)), None)  # even kernel
    with pytest.raises(ShapeError):
        conv2d(rand((2, 4, 4)), rand((2, 2, 3, 3)), np.zeros(3))  # bias length


def test_conv2d_linear_in_input():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    lhs = conv2d(3.5 * x, w).data
    rhs = 3.5 * conv2d(x, w).data
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_conv2d_grad_check_all_args():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)

    def f(xt, wt, bt):
        return sum_all(sigmoid(conv2d(xt, wt, bt)))

    assert grad_check(f, [x, w, b], eps=1e-5) < 1e-4


# ---------------------------------------------------------------------------
# maxpool2 / upsample_nearest2


def test_maxpool2_basic():
    out = maxpool2([[[1.0, 2.0], [3.0, 4.0]]])
    assert out.data.shape == (1, 1, 1)
    assert out.data[0, 0, 0] == 4.0


def test_maxpool2_constant():
    x = np.full((3, 4, 6), 2.5)
    out = maxpool2(x).data
    assert out.shape == (3, 2, 3)
    assert np.all(out == 2.5)


def test_maxpool2_tie_routes_to_first_row_major():
    x = np.array([[[4.0, 4.0], [1.0, 2.0]]])
    tape = Tape()
    xt = tape.watch(x)
    loss = sum_all(maxpool2(xt))
    g = backward(tape, loss)[xt.node_id].data
    assert np.array_equal(g, [[[1.0, 0.0], [0.0, 0.0]]])
    # off the tie, finite differences agree
    x2 = np.array([[[4.0, 3.9], [1.0, 2.0]]])
    assert grad_check(lambda t: sum_all(maxpool2(t)), [x2]) < 1e-6


def test_maxpool2_rejects_odd_dims():
    with pytest.raises(ShapeError):
        maxpool2(rand((1, 3, 4)))
    with pytest.raises(ShapeError):
        maxpool2(rand((1, 4, 5)))


def test_upsample_basic():
    out = upsample_nearest2([[[1.0]]])
    assert np.array_equal(out.data, [[[1.0, 1.0], [1.0, 1.0]]])


def test_pool_of_upsample_is_identity():
    x = rand((3, 5, 7), seed=2)
    assert np.array_equal(maxpool2(upsample_nearest2(x)).data, x)


def test_upsample_grad_is_all_fours():
    x = rand((2, 3, 3), seed=4)
    tape = Tape()
    xt = tape.watch(x)
    loss = sum_all(upsample_nearest2(xt))
    g = backward(tape, loss)[xt.node_id].data
    assert np.array_equal(g, np.full(x.shape, 4.0))


def test_pool_upsample_grad_checks():
    x = rand((2, 4, 4), seed=9) * 2.0
    assert grad_check(lambda t: sum_all(tanh(maxpool2(t))), [x]) < 1e-4
    assert grad_check(lambda t: sum_all(tanh(upsample_nearest2(t))), [x]) < 1e-4


# ---------------------------------------------------------------------------
# elementwise


def test_sigmoid_tanh_closed_form():
    assert sigmoid(np.zeros((1, 1, 1))).data[0, 0, 0] == 0.5
    assert tanh(np.zeros((1, 1, 1))).data[0, 0, 0] == 0.0


def test_one_minus_sigmoid_identity():
    x = rand((2, 3, 3), seed=6)
    s = sigmoid(x)
    total = add(one_minus(s), s).data
    assert np.allclose(total, 1.0, atol=1e-15)


def test_binary_ops_reject_shape_mismatch():
    for op in (add, sub, mul):
        with pytest.raises(ShapeError):
            op(rand((2, 3, 3)), rand((2, 3, 4)))


def test_elementwise_dispatch():
    x = rand((1, 2, 2), seed=8)
    assert np.array_equal(elementwise("relu", x).data, np.maximum(x, 0))
    assert np.array_equal(elementwise("add", x, x).data, 2 * x)
    with pytest.raises(ValueError):
        elementwise("nope", x)


@pytest.mark.parametrize("kind", ["sigmoid", "tanh", "one_minus"])
@pytest.mark.parametrize("shape", [(1, 2, 2), (3, 4, 5), (2, 1, 6)])
def test_unary_grad_checks(kind, shape):
    x = rand(shape, seed=hash((kind, shape)) % 1000)
    assert grad_check(lambda t: sum_all(elementwise(kind, t)), [x]) < 1e-4


def test_relu_grad_check_off_kink():
    x = rand((2, 3, 3), seed=10)
    x[np.abs(x) < 1e-2] = 0.5  # keep clear of the non-differentiable point
    assert grad_check(lambda t: sum_all(relu(t)), [x]) < 1e-4


@pytest.mark.parametrize("kind", ["add", "sub", "mul"])
def test_binary_grad_checks(kind):
    a = rand((2, 3, 3), seed=12)
    b = rand((2, 3, 3), seed=13)
    assert grad_check(lambda x, y: sum_all(elementwise(kind, x, y)), [a, b]) < 1e-4


# ---------------------------------------------------------------------------
# concat_channels


def test_concat_shapes_and_recovery():
    a = rand((1, 3, 4), seed=14)
    b = rand((2, 3, 4), seed=15)
    out = concat_channels(a, b)
    assert out.data.shape == (3, 3, 4)
    assert np.array_equal(out.data[:1], a)
    assert np.array_equal(out.data[1:], b)


def test_concat_rejects_spatial_mismatch():
    with pytest.raises(ShapeError):
        concat_channels(rand((1, 3, 4)), rand((1, 3, 5)))


def test_concat_gradient_splits():
    a = rand((2, 3, 3), seed=16)
    b = rand((1, 3, 3), seed=17)
    tape = Tape()
    at, bt = tape.watch(a), tape.watch(b)
    loss = sum_all(concat_channels(at, bt))
    grads = backward(tape, loss)
    assert np.array_equal(grads[at.node_id].data, np.ones(a.shape))
    assert np.array_equal(grads[bt.node_id].data, np.ones(b.shape))


# ---------------------------------------------------------------------------
# backward / tape


def test_backward_sum_gives_ones():
    x = rand((2, 3, 3), seed=18)
    tape = Tape()
    xt = tape.watch(x)
    loss = sum_all(xt)
    grads = backward(tape, loss)
    assert np.array_equal(grads[xt.node_id].data, np.ones(x.shape))
    assert grads[loss.node_id].item() == 1.0


def test_backward_square_gives_2x():
    x = rand((3, 2, 2), seed=19)
    tape = Tape()
    xt = tape.watch(x)
    loss = sum_all(mul(xt, xt))
    g = backward(tape, loss)[xt.node_id].data
    assert np.allclose(g, 2 * x, atol=1e-14)


def test_backward_rejects_non_scalar():
    tape = Tape()
    xt = tape.watch(rand((2, 2, 2)))
    y = sigmoid(xt)
    with pytest.raises(ShapeError):
        backward(tape, y)


def test_backward_composed_conv_sigmoid_sum():
    rng = np.random.default_rng(20)
    x = rng.standard_normal((2, 5, 5))
    w = rng.standard_normal((2, 2, 3, 3))
    b = rng.standard_normal(2)
    err = grad_check(lambda xt, wt, bt: sum_all(sigmoid(conv2d(xt, wt, bt))), [x, w, b], eps=1e-5)
    assert err < 1e-4


def test_tape_nodes_topologically_ordered():
    tape = Tape()
    xt = tape.watch(rand((2, 4, 4)))
    y = sum_all(relu(conv2d(xt, rand((2, 2, 3, 3), seed=1))))
    assert y.node_id == len(tape) - 1
    for nid in range(len(tape)):
        for inp in tape.node(nid).inputs:
            assert inp < nid


def test_constants_get_no_gradient():
    x = rand((2, 3, 3), seed=21)
    c = Tensor(rand((2, 3, 3), seed=22))
    tape = Tape()
    xt = tape.watch(x)
    loss = sum_all(mul(xt, c))
    grads = backward(tape, loss)
    assert xt.node_id in grads
    assert len(grads) == len([n for n in range(len(tape)) if n in grads])


def test_mixed_tapes_rejected():
    t1, t2 = Tape(), Tape()
    a = t1.watch(rand((1, 2, 2)))
    b = t2.watch(rand((1, 2, 2)))
    with pytest.raises(ValueError):
        add(a, b)


# ---------------------------------------------------------------------------
# sigmoid_ce_map (autodiff-level contract; loss reduction lives in heatmaps)


def test_sigmoid_ce_map_gradient_is_sigmoid_minus_target():
    rng = np.random.default_rng(23)
    x = rng.standard_normal((2, 4, 4)) * 3
    z = rng.uniform(0, 1, (2, 4, 4))
    tape = Tape()
    xt = tape.watch(x)
    loss = sum_all(sigmoid_ce_map(xt, z))
    g = backward(tape, loss)[xt.node_id].data
    from scipy.special import expit

    assert np.allclose(g, expit(x) - z, atol=1e-12)


def test_sigmoid_ce_map_rejects_bad_targets():
    x = rand((1, 2, 2))
    with pytest.raises(ValueError):
        sigmoid_ce_map(x, np.full((1, 2, 2), 1.5))


# ---------------------------------------------------------------------------
# grad_check itself


def test_grad_check_sum_is_exact():
    assert grad_check(lambda t: sum_all(t), [rand((3, 3))], eps=1e-5) < 1e-9


def test_grad_check_rejects_non_scalar_and_bad_eps():
    with pytest.raises(ShapeError):
        grad_check(lambda t: sigmoid(t), [rand((2, 2))])
    with pytest.raises(ValueError):
        grad_check(lambda t: sum_all(t), [rand((2, 2))], eps=0.0)


def test_grad_check_subsampling_is_deterministic():
    x = rand((4, 6, 6), seed=30)
    f = lambda t: mean_all(tanh(t))
    e1 = grad_check(f, [x], max_elements_per_input=20, seed=3)
    e2 = grad_check(f, [x], max_elements_per_input=20, seed=3)
    assert e1 == e2 and e1 < 1e-4


# ---------------------------------------------------------------------------
# determinism


def test_forward_bit_identical_across_runs():
    rng = np.random.default_rng(31)
    x = rng.standard_normal((3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    r1 = sigmoid(conv2d(maxpool2(x), w, b)).data
    r2 = sigmoid(conv2d(maxpool2(x), w, b)).data
    assert np.array_equal(r1, r2)


def test_float32_dtype_is_preserved():
    x = np.ones((1, 2, 2), dtype=np.float32)
    w = np.ones((1, 1, 1, 1), dtype=np.float32)
    out = conv2d(x, w)
    assert out.dtype == np.float32
    assert sigmoid(out).dtype == np.float32
