import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import check_grad, numeric_grad, rel_err
from naturalae import autodiff as ad
from naturalae.autodiff import ShapeError, Tape, Tensor, backward
from naturalae.transforms import apply_angle, apply_distance, tilt_homography


# ------------------------------------------------------------------ conv2d


def test_conv_identity_kernel():
    x = np.random.default_rng(0).random((5, 5, 1))
    out = ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_conv_sum_of_ones():
    out = ad.conv2d(Tensor(np.ones((3, 3, 1))), Tensor(np.ones((3, 3, 1, 1))))
    assert out.shape == (1, 1, 1)
    assert out.data.item() == 9.0


@pytest.mark.parametrize("H,k,stride,pad", [(8, 3, 1, 0), (9, 3, 2, 1), (7, 5, 3, 2), (6, 1, 2, 0)])
def test_conv_output_extent(H, k, stride, pad):
    out = ad.conv2d(Tensor(np.zeros((H, H, 2))), Tensor(np.zeros((k, k, 2, 4))), stride=stride, padding=pad)
    assert out.shape == ((H + 2 * pad - k) // stride + 1,) * 2 + (4,)


def test_conv_channel_mismatch_is_diagnosed():
    with pytest.raises(ShapeError, match="Cin=3"):
        ad.conv2d(Tensor(np.zeros((5, 5, 2))), Tensor(np.zeros((3, 3, 3, 1))))


def test_conv_even_kernel_rejected():
    with pytest.raises(ShapeError, match="odd"):
        ad.conv2d(Tensor(np.zeros((5, 5, 1))), Tensor(np.zeros((2, 2, 1, 1))))


def test_conv_gradient_8x8(rng):
    x = rng.normal(size=(8, 8, 2))
    k = rng.normal(size=(3, 3, 2, 3))
    w = rng.normal(size=(8, 8, 3))
    err = check_grad(lambda a, b: ad.sum_all(ad.mul(ad.conv2d(a, b, 1, 1), Tensor(w))), [x, k])
    assert err <= 1e-4


def test_conv_strided_batched_gradient_with_bias(rng):
    x = rng.normal(size=(2, 7, 7, 2))
    k = rng.normal(size=(3, 3, 2, 2))
    b = rng.normal(size=(2,))
    w = rng.normal(size=(2, 4, 4, 2))
    err = check_grad(lambda a, kk, bb: ad.sum_all(ad.mul(ad.conv2d(a, kk, 2, 1, bb), Tensor(w))), [x, k, b])
    assert err <= 1e-4


# ------------------------------------------------------------- elementwise


def test_relu_and_sigmoid_values():
    assert ad.relu(Tensor(-1.0)).item() == 0.0
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5


def test_add_gradient_4x4(rng):
    a, b = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    w = rng.normal(size=(4, 4))
    assert check_grad(lambda x, y: ad.sum_all(ad.mul(ad.add(x, y), Tensor(w))), [a, b]) <= 1e-6


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_binary_shape_mismatch(op):
    with pytest.raises(ShapeError):
        ad.elementwise(op, Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_unknown_op():
    with pytest.raises(ValueError):
        ad.elementwise("tanh", Tensor(1.0))


def test_clamp01_straight_through_inside_zero_outside():
    x = Tensor(np.array([-0.5, 0.0, 0.3, 1.0, 1.7]), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(ad.clamp01(x))
    backward(tape, loss)
    np.testing.assert_array_equal(loss.item(), 2.3)
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 1.0, 1.0, 0.0])


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "relu", "sigmoid", "clamp01", "exp", "log", "abs", "scale"])
def test_elementwise_gradients_randomized(op):
    # 100 trials across all ops combined stay under a second
    rng = np.random.default_rng(zlib.crc32(op.encode()))
    for _ in range(10):
        a = rng.uniform(0.2, 0.8, (3, 3)) if op in ("log", "clamp01") else rng.normal(size=(3, 3))
        b = rng.uniform(0.5, 2.0, (3, 3))
        w = rng.normal(size=(3, 3))
        # keep away from the kinks of relu/abs where differences straddle
        if op in ("relu", "abs"):
            a = np.where(np.abs(a) < 1e-2, 0.5, a)
        if op in ("add", "sub", "mul", "div"):
            err = check_grad(lambda x, y: ad.sum_all(ad.mul(ad.elementwise(op, x, y), Tensor(w))), [a, b])
        elif op == "scale":
            err = check_grad(lambda x: ad.sum_all(ad.mul(ad.elementwise(op, x, 1.7), Tensor(w))), [a])
        else:
            err = check_grad(lambda x: ad.sum_all(ad.mul(ad.elementwise(op, x), Tensor(w))), [a])
        assert err <= 1e-3, op


# ----------------------------------------------------------- other ops


def test_reductions_and_shapes_gradients(rng):
    x = rng.normal(size=(3, 4, 2))
    w = rng.normal(size=(4, 3, 2))
    assert check_grad(lambda t: ad.norm(t, 2), [x]) <= 1e-4
    assert check_grad(lambda t: ad.norm(t, 1), [x]) <= 1e-4
    ws = rng.normal(size=x.shape)
    wp = rng.normal(size=(7, 8, 2))
    wr = rng.normal(size=(3, 4, 3))
    assert check_grad(lambda t: ad.sum_all(ad.mul(ad.log_softmax(t), Tensor(ws))), [x]) <= 1e-4
    assert check_grad(lambda t: ad.sum_all(ad.mul(ad.reshape(t, (4, 3, 2)), Tensor(w))), [x]) <= 1e-6
    assert check_grad(lambda t: ad.sum_all(ad.mul(ad.pad_edge(t, 2), Tensor(wp))), [x]) <= 1e-6
    assert check_grad(lambda t: ad.sum_all(ad.getitem(t, (slice(0, 2), Ellipsis, 1))), [x]) <= 1e-6
    assert check_grad(lambda t: ad.sum_all(ad.mul(ad.repeat_last(ad.getitem(t, (Ellipsis, slice(0, 1))), 3),
                                                  Tensor(wr))), [x]) <= 1e-6


def test_norm_zero_subgradient_is_zero():
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    with Tape() as tape:
        n = ad.norm(x, 2)
    backward(tape, n)
    assert n.item() == 0.0
    np.testing.assert_array_equal(x.grad, 0.0)


# ---------------------------------------------------------- bilinear sample


def test_bilinear_identity_lattice(rng):
    x = rng.random((6, 5, 3))
    ys, xs = np.meshgrid(np.arange(6.0), np.arange(5.0), indexing="ij")
    out = ad.bilinear_sample(Tensor(x), np.stack([xs, ys], axis=-1))
    np.testing.assert_array_equal(out.data, x)


def test_bilinear_midpoint():
    x = np.array([[[0.0], [1.0]]])
    out = ad.bilinear_sample(Tensor(x), np.array([[[0.5, 0.0]]]))
    assert out.data.item() == 0.5


def test_bilinear_out_of_bounds_reads_zero():
    x = np.ones((3, 3, 1))
    out = ad.bilinear_sample(Tensor(x), np.array([[[-5.0, 1.0], [1.0, 9.0], [-0.5, 1.0]]]))
    np.testing.assert_allclose(out.data.ravel(), [0.0, 0.0, 0.5])


def test_bilinear_gradient_6x6(rng, backend):
    x = rng.random((6, 6, 2))
    coords = rng.uniform(-1.0, 6.5, (5, 4, 2))
    # step 1e-4 on pixel values never crosses a cell boundary: coords are fixed
    w = rng.normal(size=(5, 4, 2))
    assert check_grad(lambda t: ad.sum_all(ad.mul(ad.bilinear_sample(t, coords), Tensor(w))), [x]) <= 1e-4


# ------------------------------------------------------------------ backward


def test_backward_linear_and_quadratic():
    x = Tensor(np.arange(4.0), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(x)
    grads = backward(tape, loss)
    np.testing.assert_array_equal(grads[x], 1.0)
    y = Tensor(np.array(3.0), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(ad.mul(y, y))
    backward(tape, loss)
    assert y.grad.item() == 6.0


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ad.scale(x, 2.0)
    with pytest.raises(ShapeError, match="scalar"):
        backward(tape, y)


def test_backward_consumes_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(ad.mul(x, x))
    assert len(tape) == 2
    backward(tape, loss)
    assert len(tape) == 0


def test_tape_is_topologically_ordered(rng):
    x = Tensor(rng.random((4, 4, 1)), requires_grad=True)
    with Tape() as tape:
        y = ad.conv2d(ad.sigmoid(x), Tensor(np.ones((3, 3, 1, 1))), padding=1)
        ad.sum_all(ad.mul(y, y))
    seen = {id(x)}
    for out, inputs, _ in tape.nodes:
        assert all(id(t) in seen or not t.requires_grad for t in inputs)
        seen.add(id(out))


def test_no_recording_without_tape_or_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    ad.sum_all(x)
    with Tape() as tape:
        ad.sum_all(Tensor(np.ones(3)))
    assert len(tape) == 0


def test_composite_blur_warp_detector_gradient(rng):
    from naturalae.detector import Architecture, DetectorModel, detection_loss

    arch = Architecture("tiny", 16, 2, 3, ((3, 2, 4), (3, 2, 6)))
    model = DetectorModel.initialize(arch, 4)
    sign = rng.random((16, 16, 3))
    hm = tilt_homography(25.0, 16)

    def build(s):
        x = apply_angle(apply_distance(s, 1.0, 3), hm)
        return detection_loss(model, x, 0, (0.5, 0.5, 0.6, 0.6))

    assert check_grad(build, [sign]) <= 1e-3


def test_forward_deterministic_and_replayable(rng):
    x = rng.random((8, 8, 3))
    k = rng.normal(size=(3, 3, 3, 2))
    a = ad.conv2d(Tensor(x), Tensor(k), 2, 1).data
    b = ad.conv2d(Tensor(x), Tensor(k), 2, 1).data
    assert a.tobytes() == b.tobytes()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)), arrays(np.float64, (3, 4), elements=st.floats(-3, 3)))
def test_mul_gradient_property(a, b):
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_all(ad.mul(ta, tb))
    backward(tape, loss)
    np.testing.assert_array_equal(ta.grad, b)
    np.testing.assert_array_equal(tb.grad, a)


def test_fd_helper_on_known_function():
    g = numeric_grad(lambda v: float(np.sum(v**3)), np.array([1.0, 2.0]))
    assert rel_err(g, [3.0, 12.0]) < 1e-7
