import math

import numpy as np
import pytest

from fadconv.nn import BatchNorm2d, Conv2d, ConvGeometry, Dense, ShapeError, grad_check, layer_rng
from fadconv.nn import functional as F
from fadconv.nn.gradcheck import rel_error


def naive_conv(x, w, bias, geom):
    """Direct loop-nest cross-correlation; the oracle for conv2d."""
    b, c, h, wd = x.shape
    k, s, p, d, g = geom.kernel_size, geom.stride, geom.padding, geom.dilation, geom.groups
    ho, wo = geom.output_size(h, wd)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cin_g, cout_g = c // g, geom.out_channels // g
    out = np.zeros((b, geom.out_channels, ho, wo))
    for n in range(b):
        for o in range(geom.out_channels):
            grp = o // cout_g
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cin_g):
                        for u in range(k):
                            for v in range(k):
                                acc += w[o, ci, u, v] * xp[n, grp * cin_g + ci, i * s + u * d, j * s + v * d]
                    out[n, o, i, j] = acc + (0.0 if bias is None else bias[o])
    return out


# ---------------------------------------------------------------- conv2d


def test_identity_kernel():
    x = np.random.default_rng(0).standard_normal((1, 1, 5, 5))
    y = F.conv2d(x, np.ones((1, 1, 1, 1)), None, ConvGeometry(1, 1, 1))
    np.testing.assert_array_equal(y, x)


def test_two_by_two_valid():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    w = np.array([[[[1.0, 0.0], [0.0, 1.0]]]])
    y = F.conv2d(x, w, None, ConvGeometry(1, 1, 2))
    assert y.shape == (1, 1, 1, 1) and y[0, 0, 0, 0] == 5.0


def test_ones_padded_counts_taps():
    y = F.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), None, ConvGeometry(1, 1, 3, padding=1))
    assert y[0, 0, 1, 1] == 9.0
    assert y[0, 0, 0, 0] == y[0, 0, 0, 2] == y[0, 0, 2, 0] == y[0, 0, 2, 2] == 4.0


@pytest.mark.parametrize("geom", [
    ConvGeometry(3, 4, 3, 1, 1),
    ConvGeometry(3, 2, 3, 2, 1),
    ConvGeometry(4, 6, 3, 1, 2, dilation=2, groups=2),
    ConvGeometry(2, 3, 1),
    ConvGeometry(4, 4, 5, 3, 0, groups=4),
])
def test_matches_loop_oracle(geom):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, geom.in_channels, 7, 8))
    w = rng.standard_normal(geom.weight_shape)
    b = rng.standard_normal(geom.out_channels)
    np.testing.assert_allclose(F.conv2d(x, w, b, geom), naive_conv(x, w, b, geom), rtol=1e-12, atol=1e-12)


def test_per_sample_kernels_match_individual_convs():
    rng = np.random.default_rng(2)
    geom = ConvGeometry(3, 4, 3, 1, 1)
    x = rng.standard_normal((3, 3, 6, 6))
    w = rng.standard_normal((3, *geom.weight_shape))
    b = rng.standard_normal((3, 4))
    y = F.conv2d(x, w, b, geom)
    for n in range(3):
        np.testing.assert_allclose(y[n], F.conv2d(x[n:n + 1], w[n], b[n], geom)[0], rtol=1e-13, atol=1e-13)


def test_linearity_in_kernel():
    rng = np.random.default_rng(3)
    geom = ConvGeometry(3, 5, 3, 1, 1)
    x = rng.standard_normal((2, 3, 6, 6))
    w1, w2 = rng.standard_normal((2, *geom.weight_shape))
    a, b = 0.7, -1.3
    lhs = F.conv2d(x, a * w1 + b * w2, None, geom)
    rhs = a * F.conv2d(x, w1, None, geom) + b * F.conv2d(x, w2, None, geom)
    assert np.max(np.abs(lhs - rhs)) / np.max(np.abs(rhs)) <= 1e-10


def test_deterministic():
    rng = np.random.default_rng(4)
    geom = ConvGeometry(4, 4, 3, 1, 1)
    x = rng.standard_normal((2, 4, 9, 9))
    w = rng.standard_normal(geom.weight_shape)
    assert np.array_equal(F.conv2d(x, w, None, geom), F.conv2d(x.copy(), w.copy(), None, geom))


def test_shape_errors():
    geom = ConvGeometry(3, 4, 3)
    with pytest.raises(ShapeError, match="channels"):
        F.conv2d(np.zeros((1, 2, 5, 5)), np.zeros(geom.weight_shape), None, geom)
    with pytest.raises(ShapeError, match="weight shape"):
        F.conv2d(np.zeros((1, 3, 5, 5)), np.zeros((4, 3, 1, 1)), None, geom)
    with pytest.raises(ShapeError):
        F.conv2d(np.zeros((1, 3, 2, 2)), np.zeros(geom.weight_shape), None, geom)


def test_geometry_validation():
    with pytest.raises(ValueError):
        ConvGeometry(3, 4, 3, groups=2)
    with pytest.raises(ValueError):
        ConvGeometry(4, 4, 3, padding=-1)
    with pytest.raises(ValueError):
        ConvGeometry(0, 4, 3)
    assert ConvGeometry(1, 1, 3, 2, 1).output_size(7, 8) == (4, 4)


# ---------------------------------------------------------------- conv2d backward


def test_backward_scalar_case():
    geom = ConvGeometry(1, 1, 1)
    x = np.array([[[[2.5]]]])
    gx, gw, gb = F.conv2d_backward(x, np.array([[[[3.0]]]]), np.array([[[[-4.0]]]]), geom)
    assert gw[0, 0, 0, 0] == 2.5 * -4.0
    assert gx[0, 0, 0, 0] == 3.0 * -4.0
    assert gb[0] == -4.0


def test_backward_zero_grad():
    rng = np.random.default_rng(5)
    geom = ConvGeometry(2, 3, 3, 1, 1)
    x = rng.standard_normal((2, 2, 4, 4))
    gx, gw, gb = F.conv2d_backward(x, rng.standard_normal(geom.weight_shape), np.zeros((2, 3, 4, 4)), geom)
    assert not gx.any() and not gw.any() and not gb.any()


def _fd_conv(x, w, geom, r, eps=1e-5):
    def f(xx, ww):
        return float(np.sum(r * F.conv2d(xx, ww, None, geom)))
    gx, gw = np.zeros_like(x), np.zeros_like(w)
    for arr, out in ((x, gx), (w, gw)):
        for i in range(arr.size):
            o = arr.flat[i]
            arr.flat[i] = o + eps
            fp = f(x, w)
            arr.flat[i] = o - eps
            fm = f(x, w)
            arr.flat[i] = o
            out.flat[i] = (fp - fm) / (2 * eps)
    return gx, gw


@pytest.mark.parametrize("geom", [
    ConvGeometry(2, 3, 3, 1, 1),
    ConvGeometry(2, 2, 3, 2, 1),
    ConvGeometry(2, 4, 3, 1, 1, groups=2),
    ConvGeometry(2, 2, 3, 1, 2, dilation=2),
])
def test_backward_matches_finite_differences(geom):
    rng = np.random.default_rng(6)
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal(geom.weight_shape)
    ho, wo = geom.output_size(4, 4)
    r = rng.standard_normal((1, geom.out_channels, ho, wo))
    gx, gw, gb = F.conv2d_backward(x, w, r, geom)
    nx, nw = _fd_conv(x, w, geom, r)
    assert max(rel_error(a, n) for a, n in zip(gx.ravel(), nx.ravel())) < 1e-6
    assert max(rel_error(a, n) for a, n in zip(gw.ravel(), nw.ravel())) < 1e-6
    np.testing.assert_allclose(gb, r.sum(axis=(0, 2, 3)))


def test_backward_rejects_bad_grad_shape():
    geom = ConvGeometry(1, 1, 3)
    with pytest.raises(ShapeError, match="grad_out"):
        F.conv2d_backward(np.zeros((1, 1, 5, 5)), np.zeros((1, 1, 3, 3)), np.zeros((1, 1, 5, 5)), geom)


def test_conv_layer_accumulates_grads():
    geom = ConvGeometry(2, 2, 3, 1, 1)
    layer = Conv2d(geom, layer_rng(0, "c"))
    x = np.random.default_rng(7).standard_normal((1, 2, 4, 4))
    g = np.ones((1, 2, 4, 4))
    layer.forward(x)
    layer.backward(g)
    first = layer.weight.grad.copy()
    layer.forward(x)
    layer.backward(g)
    np.testing.assert_allclose(layer.weight.grad, 2 * first)
    layer.zero_grad()
    assert not layer.weight.grad.any()


# ---------------------------------------------------------------- elementwise and dense


def test_softmax_constant_is_uniform():
    for c in (-50.0, 0.0, 3.7, 800.0):
        np.testing.assert_array_equal(F.softmax(np.full(4, c)), np.full(4, 0.25))


def test_softmax_sums_to_one_and_positive():
    x = np.random.default_rng(8).standard_normal((50, 7)) * 30
    y = F.softmax(x, axis=1)
    assert np.all(y > 0)
    assert np.max(np.abs(y.sum(axis=1) - 1)) <= 1e-12


def test_softmax_empty_axis_rejected():
    with pytest.raises(ShapeError):
        F.softmax(np.zeros((3, 0)))


def test_relu_definition():
    np.testing.assert_array_equal(F.relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])


def test_sigmoid_range_and_stability():
    y = F.sigmoid(np.array([-1000.0, -5.0, 0.0, 5.0, 1000.0]))
    assert y[2] == 0.5
    assert np.all((y >= 0) & (y <= 1)) and np.all(np.isfinite(y))
    mid = F.sigmoid(np.linspace(-30, 30, 101))
    assert np.all((mid > 0) & (mid < 1))


def test_dense_is_affine():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((3, 4))
    w = rng.standard_normal((2, 4))
    b = rng.standard_normal(2)
    np.testing.assert_allclose(F.dense(x, w, b), np.einsum("oi,bi->bo", w, x) + b)


def test_batchnorm_hand_case():
    # one channel, values 1,1,5,5: mean 3, biased variance 4
    x = np.array([1.0, 1.0, 5.0, 5.0]).reshape(4, 1, 1, 1)
    y, _ = F.batchnorm_train(x, np.ones(1), np.zeros(1), eps=0.0)
    np.testing.assert_allclose(y.ravel(), [-1.0, -1.0, 1.0, 1.0])


def test_batchnorm_running_stats_and_eval():
    bn = BatchNorm2d(1)
    x = np.array([1.0, 1.0, 5.0, 5.0]).reshape(4, 1, 1, 1)
    bn.forward(x)
    np.testing.assert_allclose(bn.running_mean, [0.9 * 0 + 0.1 * 3])
    # running variance uses the unbiased estimate 16/3
    np.testing.assert_allclose(bn.running_var, [0.9 * 1 + 0.1 * 16 / 3])
    bn.eval()
    y = bn.forward(np.array([3.0]).reshape(1, 1, 1, 1))
    expected = (3.0 - bn.running_mean[0]) / math.sqrt(bn.running_var[0] + 1e-5)
    assert y.item() == pytest.approx(expected, rel=1e-14)


# ---------------------------------------------------------------- losses


def test_cross_entropy_saturated():
    target = np.random.default_rng(10).integers(0, 3, (2, 4, 4))
    logits = np.moveaxis(np.eye(3)[target], -1, 1) * 10.0
    loss, _ = F.loss(logits, target, "cross_entropy")
    assert loss < 1e-3


def test_cross_entropy_uniform_six_classes():
    loss, grad = F.loss(np.zeros((2, 6, 3, 3)), np.zeros((2, 3, 3), dtype=int), "cross_entropy")
    assert loss == pytest.approx(math.log(6), rel=1e-14)
    assert loss == pytest.approx(1.7918, abs=1e-4)
    np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-15)


def test_bce_logit_zero_target_one():
    loss, grad = F.loss(np.zeros((1, 1, 1, 1)), np.ones((1, 1, 1), dtype=int), "bce")
    assert loss == pytest.approx(math.log(2), rel=1e-14)
    assert grad.item() == pytest.approx(-0.5)


def test_loss_errors():
    with pytest.raises(ValueError, match="out of range"):
        F.loss(np.zeros((1, 2, 2, 2)), np.full((1, 2, 2), 2), "cross_entropy")
    with pytest.raises(ValueError, match="binary"):
        F.loss(np.zeros((1, 1, 2, 2)), np.full((1, 2, 2), 2), "bce")
    with pytest.raises(ValueError, match="unknown loss"):
        F.loss(np.zeros((1, 1, 2, 2)), np.zeros((1, 2, 2), dtype=int), "hinge")


@pytest.mark.parametrize("kind,ch", [("cross_entropy", 3), ("bce", 1)])
def test_loss_gradients(kind, ch):
    rng = np.random.default_rng(11)
    logits = rng.standard_normal((2, ch, 3, 3))
    target = rng.integers(0, 3 if ch == 3 else 2, (2, 3, 3))
    _, grad = F.loss(logits, target, kind)
    eps = 1e-6
    for i in range(logits.size):
        lp, lm = logits.copy(), logits.copy()
        lp.flat[i] += eps
        lm.flat[i] -= eps
        num = (F.loss(lp, target, kind)[0] - F.loss(lm, target, kind)[0]) / (2 * eps)
        assert rel_error(grad.flat[i], num) < 1e-6


# ---------------------------------------------------------------- grad_check


def test_grad_check_dense():
    res = grad_check(Dense(4, 3, layer_rng(0, "d")), np.random.default_rng(12).standard_normal((5, 4)))
    assert res.ok and res.max_rel_error < 1e-8


def test_grad_check_conv():
    res = grad_check(Conv2d(ConvGeometry(2, 3, 3, 1, 1), layer_rng(0, "c"), bias=True),
                     np.random.default_rng(13).standard_normal((1, 2, 4, 4)))
    assert res.passes(1e-6)


def test_grad_check_batchnorm_restores_buffers():
    bn = BatchNorm2d(2)
    before = bn.running_mean.copy()
    res = grad_check(bn, np.random.default_rng(14).standard_normal((3, 2, 2, 2)) + 5)
    assert res.passes(1e-6)
    np.testing.assert_array_equal(bn.running_mean, before)


def test_grad_check_reports_wrong_backward():
    class Broken(Dense):
        def backward(self, grad):
            return 2 * super().backward(grad)

    res = grad_check(Broken(3, 2, layer_rng(0, "b")), np.ones((2, 3)))
    assert not res.passes(1e-3)
    assert res.worst.startswith("input")


def test_grad_check_reports_non_finite():
    class Exploding(Dense):
        def backward(self, grad):
            g = super().backward(grad)
            self.weight.grad[0, 0] = np.nan
            return g

    res = grad_check(Exploding(3, 2, layer_rng(0, "e")), np.ones((2, 3)))
    assert not res.ok and "weight" in res.failure


def test_layer_rng_is_path_keyed():
    a = layer_rng(0, "x").standard_normal(3)
    assert np.array_equal(a, layer_rng(0, "x").standard_normal(3))
    assert not np.array_equal(a, layer_rng(0, "y").standard_normal(3))
    assert not np.array_equal(a, layer_rng(1, "x").standard_normal(3))
