"""Op-level forward values and gradient checks for the autograd core."""

import numpy as np
import pytest

from imagit import tensor as T
from imagit.tensor import Tensor, grad_check, op_forward


def scalarize(t):
    return T.tsum(t)


def test_softmax_uniform_rows():
    y = T.softmax(Tensor(np.zeros((3, 5))), axis=-1)
    assert np.allclose(y.values, 0.2)
    assert np.allclose(y.values.sum(axis=-1), 1.0)


def test_softmax_rows_sum_to_one_random(rng):
    for _ in range(20):
        shape = tuple(rng.integers(1, 6, size=rng.integers(1, 4)))
        x = rng.normal(size=shape) * 5
        y = T.softmax(Tensor(x), axis=-1).values
        assert np.all(y >= 0)
        assert np.allclose(y.sum(axis=-1), 1.0)


def test_softmax_mask_excludes_positions():
    x = Tensor(np.array([[1.0, 2.0, 3.0]]))
    mask = np.array([[True, False, True]])
    y = T.softmax(x, axis=-1, mask=mask).values
    assert y[0, 1] == 0.0
    assert np.isclose(y.sum(), 1.0)


def test_softmax_fully_masked_rejected():
    x = Tensor(np.zeros((2, 3)))
    mask = np.array([[True, True, True], [False, False, False]])
    with pytest.raises(T.ShapeMismatch):
        T.softmax(x, axis=-1, mask=mask)


def test_layer_norm_constant_vector_zeros():
    y = T.layer_norm(Tensor(np.full((4,), 3.7)))
    assert np.allclose(y.values, 0.0)


def test_matmul_shape_error_names_op():
    with pytest.raises(T.ShapeMismatch, match="matmul"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_add_shape_error_names_op():
    with pytest.raises(T.ShapeMismatch, match="add"):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))


def test_unknown_op_rejected():
    with pytest.raises(KeyError):
        op_forward("outer_product", [Tensor(np.zeros(2))])


def test_cross_entropy_uniform_logits():
    # uniform logits over V classes -> NLL = ln V per position
    v = 7
    logits = Tensor(np.zeros((3, v)))
    nll = T.cross_entropy_with_logits(logits, np.array([0, 3, 6]))
    assert np.allclose(nll.values, np.log(v))


def test_cross_entropy_grad_five_classes(rng):
    logits = Tensor(rng.normal(size=(4, 5)))
    targets = np.array([0, 2, 4, 1])

    def fn(inputs):
        return T.tsum(T.cross_entropy_with_logits(inputs[0], targets))

    assert grad_check(fn, [logits]) <= 1e-5


def test_label_smoothing_floor():
    # smoothed CE of the one-hot-optimal prediction exceeds plain CE minimum
    logits = np.full((1, 20), -20.0)
    logits[0, 3] = 20.0
    plain = T.cross_entropy_with_logits(Tensor(logits), np.array([3])).values[0]
    smooth = T.cross_entropy_with_logits(Tensor(logits), np.array([3]),
                                         smoothing=0.1).values[0]
    assert plain < 1e-6
    assert smooth > 0.5


def test_matmul_backward_matches_finite_difference(rng):
    a = Tensor(rng.normal(size=(3, 4)))
    b = Tensor(rng.normal(size=(4, 2)))

    def fn(inputs):
        return scalarize(T.matmul(inputs[0], inputs[1]))

    assert grad_check(fn, [a, b]) <= 1e-5


def test_reparameterize_identity_at_zero_eps():
    mu = Tensor(np.array([1.0, -2.0]))
    logvar = Tensor(np.array([0.3, 0.1]))
    out = T.reparameterize(mu, logvar, np.zeros(2))
    assert np.allclose(out.values, mu.values)


def test_nearest_upsample_values():
    x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
    y = T.nearest_upsample(x, 2).values
    assert y.shape == (1, 1, 4, 4)
    assert np.all(y[0, 0, :2, :2] == 0.0)
    assert np.all(y[0, 0, 2:, 2:] == 3.0)


def test_conv2d_known_value():
    # 1x1 input channel, 2x2 kernel of ones over a 3x3 ramp, stride 1, no pad
    x = Tensor(np.arange(9.0).reshape(1, 1, 3, 3))
    w = Tensor(np.ones((1, 1, 2, 2)))
    y = T.conv2d(x, w).values
    assert y.shape == (1, 1, 2, 2)
    assert np.allclose(y[0, 0], [[0 + 1 + 3 + 4, 1 + 2 + 4 + 5], [3 + 4 + 6 + 7, 4 + 5 + 7 + 8]])


def test_transpose_conv2d_default_doubles_spatial(rng):
    x = Tensor(rng.normal(size=(2, 3, 4, 4)))
    w = Tensor(rng.normal(size=(3, 5, 4, 4)))
    y = T.transpose_conv2d(x, w, stride=2, padding=1)
    assert y.shape == (2, 5, 8, 8)


def test_transpose_conv2d_matches_conv_adjoint(rng):
    # <conv(x), y> == <x, tconv(y)>: the same kernel array serves both sides,
    # read as (Cout,Cin,kh,kw) by conv and (Cin,Cout,kh,kw) by tconv
    x = rng.normal(size=(1, 2, 6, 6))
    w = rng.normal(size=(3, 2, 4, 4))
    y = rng.normal(size=(1, 3, 3, 3))
    conv_x = T.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).values
    lhs = float((conv_x * y).sum())
    tconv_y = T.transpose_conv2d(Tensor(y), Tensor(w), stride=2, padding=1)
    rhs = float((x * tconv_y.values).sum())
    assert np.isclose(lhs, rhs, rtol=1e-12)


EVERY_OP_SHAPES = {
    "matmul": [((2, 3), (3, 4)), ((5, 2), (2, 2)), ((2, 3, 4), (4, 2))],
    "add": [((3, 4), (3, 4)), ((2, 1, 3), (4, 3)), ((5,), (5,))],
    "mul": [((3, 4), (3, 4)), ((2, 1), (2, 5)), ((6,), (6,))],
    "relu": [((4, 3),), ((7,),), ((2, 2, 2),)],
    "tanh": [((4, 3),), ((7,),), ((2, 2, 2),)],
    "sigmoid": [((4, 3),), ((7,),), ((2, 2, 2),)],
}


def test_every_registered_elementwise_op_grad(rng):
    for name, shape_sets in EVERY_OP_SHAPES.items():
        for shapes in shape_sets:
            # bound away from relu's kink so central differences stay valid
            tensors = [Tensor(rng.uniform(0.2, 1.0, size=s) * rng.choice([-1.0, 1.0], size=s))
                       for s in shapes]

            def fn(inputs, name=name):
                return scalarize(op_forward(name, inputs))

            err = grad_check(fn, tensors)
            assert err <= 1e-5, f"{name} at {shapes}: {err}"


def test_structured_op_grads(rng):
    x = Tensor(rng.normal(size=(2, 5)))
    assert grad_check(lambda i: scalarize(T.softmax(i[0], axis=-1)), [x]) <= 1e-5

    x = Tensor(rng.normal(size=(3, 6)))
    g = Tensor(rng.uniform(0.5, 1.5, size=(6,)))
    b = Tensor(rng.normal(size=(6,)))
    assert grad_check(lambda i: scalarize(T.layer_norm(i[0], i[1], i[2])), [x, g, b]) <= 1e-5

    a = Tensor(rng.normal(size=(2, 3)))
    c = Tensor(rng.normal(size=(2, 4)))
    assert grad_check(lambda i: scalarize(T.concat([i[0], i[1]], axis=1)), [a, c]) <= 1e-5

    table = Tensor(rng.normal(size=(6, 4)))
    ids = np.array([[0, 2], [5, 2]])
    assert grad_check(lambda i: scalarize(T.embedding_lookup(i[0], ids)), [table]) <= 1e-5

    x = Tensor(rng.normal(size=(2, 2, 4, 4)))
    w = Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.5)
    bb = Tensor(rng.normal(size=(3,)))
    assert grad_check(
        lambda i: scalarize(T.conv2d(i[0], i[1], i[2], stride=1, padding=1)), [x, w, bb]) <= 1e-5

    x = Tensor(rng.normal(size=(2, 3, 2, 2)))
    w = Tensor(rng.normal(size=(3, 2, 4, 4)) * 0.5)
    bb = Tensor(rng.normal(size=(2,)))
    assert grad_check(
        lambda i: scalarize(T.transpose_conv2d(i[0], i[1], i[2], stride=2, padding=1)),
        [x, w, bb]) <= 1e-5

    x = Tensor(rng.normal(size=(1, 2, 3, 3)))
    assert grad_check(lambda i: scalarize(T.nearest_upsample(i[0], 2)), [x]) <= 1e-5

    x = Tensor(rng.normal(size=(3, 7)))
    assert grad_check(lambda i: scalarize(T.mean_pool(i[0], axis=-1)), [x]) <= 1e-5

    mu = Tensor(rng.normal(size=(4,)))
    lv = Tensor(rng.normal(size=(4,)) * 0.3)
    eps = rng.normal(size=(4,))
    assert grad_check(lambda i: scalarize(T.reparameterize(i[0], i[1], eps)), [mu, lv]) <= 1e-5

    x = Tensor(rng.normal(size=(2, 3, 4, 4)))
    g = Tensor(rng.uniform(0.5, 1.5, size=(3,)))
    b = Tensor(rng.normal(size=(3,)))
    assert grad_check(lambda i: scalarize(T.instance_norm(i[0], i[1], i[2])), [x, g, b]) <= 1e-5


def test_grad_check_rejects_bad_eps():
    x = Tensor(np.ones(2))
    with pytest.raises(T.GraphError):
        grad_check(lambda i: T.tsum(i[0]), [x], eps=1e-2)


def test_grad_check_rejects_nonscalar():
    x = Tensor(np.ones(3))
    with pytest.raises(T.GraphError):
        grad_check(lambda i: i[0], [x])


def test_debug_mode_flags_nonfinite():
    T.set_debug_checks(True)
    try:
        with pytest.raises(FloatingPointError), np.errstate(divide="ignore"):
            T.log(Tensor(np.array([0.0])))
    finally:
        T.set_debug_checks(False)


def test_backward_accumulates_across_uses(rng):
    x = Tensor(rng.normal(size=(3,)), requires_grad=True)
    y = T.tsum(T.add(x, x))
    y.backward()
    assert np.allclose(x.grad, 2.0)


def test_detach_blocks_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    y = T.tsum(T.mul(x.detach(), Tensor(np.full(3, 2.0))))
    assert not y.requires_grad
