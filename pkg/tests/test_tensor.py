import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcheck import directional_error
from minichic.tensor import (Adam, Conv, ConvR, GraphError, LayerSpec, Lin, LinR, MissingParameterError,
                             NonFiniteError, Parameters, ShapeError, TConv, Tensor, add, avgpool2, concat,
                             conv2d, count_params, crop2d, depthwise_conv2d, forward_layer, init_layer,
                             linear, mean_all, pad_edge, relu, reshape, square, stack, sub, sum_all,
                             precision, tconv2x, tconv_taps, unpad_edge)


def t(a, grad=True):
    return Tensor(a, requires_grad=grad)


@pytest.fixture
def f64():
    """Gradient checks run the engine in double precision."""
    with precision(np.float64):
        yield


# layer-kind gradient checks -------------------------------------------------------

LINEAR_KINDS = [Lin(8, 2), LinR(8), Lin(16, 16), LinR(24)]
CONV_KINDS = [Conv(7, 8, 1), Conv(8, 3, 1), ConvR(3, 3), Conv(3, 4, 3), Conv(40, 3, 1)]


@pytest.mark.parametrize("spec", LINEAR_KINDS + CONV_KINDS, ids=str)
@pytest.mark.parametrize("final", [True, False])
def test_layer_gradients(spec, final, rng, f64):
    params = Parameters()
    init_layer(spec, "l", rng, params)
    if spec.kind.startswith("Linear"):
        x = t(rng.standard_normal((13, spec.in_feat)))
    else:
        x = t(rng.standard_normal((1, spec.in_feat, 9, 11)))
    leaves = [x, *params.values()]
    err = directional_error(lambda: forward_layer(spec, params, x, "l", final=final), leaves,
                            eps=1e-6)
    assert err < 1e-3


@pytest.mark.parametrize("k", [4, 8])
@pytest.mark.parametrize("shape,out", [((5, 6), (10, 12)), ((5, 6), (9, 11)), ((1, 1), (2, 1))])
def test_tconv_gradients(k, shape, out, rng, f64):
    x = t(rng.standard_normal(shape))
    w = t(rng.standard_normal((k, k)))
    assert directional_error(lambda: tconv2x(x, w, *out), [x, w], eps=1e-6) < 1e-3


@pytest.mark.parametrize("stride", [1, 2])
def test_depthwise_gradients(stride, rng, f64):
    x = t(rng.standard_normal((1, 3, 9, 8)))
    w = t(rng.standard_normal((3, 7, 7)) * 0.2)
    b = t(rng.standard_normal(3))
    err = directional_error(lambda: depthwise_conv2d(x, w, b, stride), [x, w, b], eps=1e-6)
    assert err < 1e-3


def test_misc_op_gradients(rng, f64):
    a = t(rng.standard_normal((2, 3, 5, 5)))
    b = t(rng.standard_normal((1, 3, 1, 1)))
    checks = [
        (lambda: avgpool2(a), [a]),
        (lambda: relu(a), [a]),
        (lambda: square(sub(a, b)), [a, b]),
        (lambda: mean_all(square(a)), [a]),
        (lambda: crop2d(a, 3, 4), [a]),
        (lambda: concat([a, reshape(a, a.shape)], axis=1), [a]),
        (lambda: stack([a, add(a, b)], axis=0), [a, b]),
    ]
    for build, leaves in checks:
        assert directional_error(build, leaves, eps=1e-6) < 1e-3


# forward behaviour ---------------------------------------------------------------

def test_linear_matches_numpy(rng):
    x, w, b = rng.standard_normal((4, 3)), rng.standard_normal((2, 3)), rng.standard_normal(2)
    out = linear(t(x), t(w), t(b)).data
    np.testing.assert_allclose(out, x @ w.T + b, rtol=1e-5)


def test_conv_matches_direct_sum(rng):
    x = rng.standard_normal((1, 2, 5, 6)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    out = conv2d(t(x), t(w)).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
    ref = np.zeros((1, 3, 5, 6))
    for o in range(3):
        for y in range(5):
            for z in range(6):
                ref[0, o, y, z] = (xp[0, :, y:y + 3, z:z + 3] * w[o]).sum()
    np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-5)


def test_residual_layer_adds_input(rng):
    params = Parameters()
    spec = LinR(4)
    init_layer(spec, "r", rng, params)
    params["r.w"].data[:] = 0
    params["r.b"].data[:] = 0
    x = t(rng.standard_normal((3, 4)), grad=False)
    np.testing.assert_array_equal(forward_layer(spec, params, x, "r", final=True).data, x.data)
    np.testing.assert_array_equal(forward_layer(spec, params, x, "r").data, np.maximum(x.data, 0))


def test_tconv_taps_cover_kernel():
    for k in (4, 8):
        taps = tconv_taps(k)
        assert sorted(kk for ph in taps for kk, _ in ph) == list(range(k))


def test_pad_unpad_adjoint(rng):
    a = rng.standard_normal((2, 4, 5))
    g = rng.standard_normal((2, 4 + 3, 5 + 2))
    lhs = (pad_edge(a, 1, 2, 0, 2) * g).sum()
    rhs = (a * unpad_edge(g, 1, 2, 0, 2)).sum()
    assert lhs == pytest.approx(rhs)


# layer specs / parameters ------------------------------------------------------------

def test_layer_spec_notation_and_counts():
    assert str(Conv(7, 8, 1)) == "7-8-Conv-1"
    assert str(ConvR(3, 3)) == "3-3-ConvR-3"
    assert str(LinR(8)) == "8-8-LinR"
    assert str(TConv(4)) == "1-1-TConv-4"
    assert count_params([LinR(8), Lin(8, 2)]) == 72 + 18
    assert TConv(8).n_params() == 64


@pytest.mark.parametrize("bad", [dict(kind="Dense", in_feat=1, out_feat=1),
                                 dict(kind="LinearResidual", in_feat=2, out_feat=3),
                                 dict(kind="TConv", in_feat=1, out_feat=1, kernel=4, stride=1)])
def test_layer_spec_validation(bad):
    with pytest.raises(ValueError):
        LayerSpec(**bad)


def test_missing_parameter_and_shape_errors(rng):
    params = Parameters()
    with pytest.raises(MissingParameterError):
        forward_layer(Lin(2, 2), params, t(np.ones((1, 2))), "nope")
    init_layer(Lin(2, 2), "a", rng, params)
    with pytest.raises(ShapeError):
        forward_layer(Lin(3, 2), params, t(np.ones((1, 3))), "a")
    with pytest.raises(ShapeError):
        conv2d(t(np.ones((1, 2, 4, 4))), t(np.ones((1, 3, 1, 1))))


# autodiff engine -------------------------------------------------------------------

def test_backward_twice_raises():
    x = t([1.0, 2.0])
    loss = sum_all(square(x))
    loss.backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0])
    with pytest.raises(GraphError):
        loss.backward()


def test_backward_non_scalar_and_nan():
    with pytest.raises(GraphError):
        square(t([1.0, 2.0])).backward()
    with pytest.raises(NonFiniteError):
        sum_all(t([np.nan])).backward()


def test_shared_subexpression_accumulates():
    x = t([3.0])
    y = square(x)
    sum_all(add(y, y)).backward()
    np.testing.assert_allclose(x.grad, [12.0])


def test_adam_minimises_quadratic():
    params = Parameters([("p", t([5.0, -3.0]))])
    opt = Adam(params, lr=0.1)
    for _ in range(300):
        opt.zero_grad()
        sum_all(square(params["p"])).backward()
        opt.step()
    assert np.abs(params["p"].data).max() < 0.05


def test_adam_requires_gradients():
    params = Parameters([("p", t([1.0]))])
    with pytest.raises(GraphError):
        Adam(params).step()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=3), st.data())
def test_broadcast_add_gradient_shapes(shape, data):
    bshape = [data.draw(st.sampled_from([1, s])) for s in shape]
    a = t(np.ones(shape))
    b = t(np.ones(bshape))
    sum_all(add(a, b)).backward()
    assert a.grad.shape == tuple(shape) and b.grad.shape == tuple(bshape)
    assert b.grad.sum() == pytest.approx(np.prod(shape))


def test_precision_context_restores_float32():
    with precision(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32
