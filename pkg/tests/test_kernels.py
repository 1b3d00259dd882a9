import numpy as np
import pytest

from ondevice_ft import kernels as K

import gradcheck
from oracles import conv_naive


@pytest.mark.parametrize("name", sorted(gradcheck.CHECKS))
def test_backward_matches_finite_differences(name):
    passed, checked, worst = gradcheck.run(name, instances=50)
    assert passed == checked, f"{name}: {checked - passed} failures, worst error {worst:.3g}"


def test_fc_1920_to_4_matches_finite_differences():
    rng = np.random.default_rng(5)
    assert gradcheck.check_fc_ig(rng, big=True)[0]
    assert gradcheck.check_fc_wg(rng, big=True)[0]


# -- convolution ---------------------------------------------------------------


def test_conv_identity_1x1():
    x = np.random.default_rng(0).standard_normal((2, 3, 5, 4)).astype(np.float32)
    w = np.eye(3, dtype=np.float32)[:, :, None, None]
    assert np.array_equal(K.conv2d_fw(x, w), x)


def test_conv_zero_weights_gives_bias():
    x = np.random.default_rng(0).standard_normal((1, 2, 5, 5)).astype(np.float32)
    y = K.conv2d_fw(x, np.zeros((3, 2, 3, 3), np.float32), np.array([1.0, -2.0, 0.5], np.float32), padding=1)
    assert np.array_equal(y, np.broadcast_to(np.array([1.0, -2.0, 0.5], np.float32)[None, :, None, None], y.shape))


def test_conv_3x3_on_5x5_matches_naive_loop():
    rng = np.random.default_rng(1)
    x, w = rng.standard_normal((1, 1, 5, 5)), rng.standard_normal((1, 1, 3, 3))
    assert np.allclose(K.conv2d_fw(x, w), conv_naive(x, w), atol=1e-6)


@pytest.mark.parametrize("stride,padding,k", [(1, 0, 3), (2, 1, 3), (2, 2, 5), (1, 1, 1), (3, 1, 3)])
def test_conv_matches_naive_loop_general(stride, padding, k):
    rng = np.random.default_rng(stride * 10 + padding)
    x, w, b = rng.standard_normal((2, 3, 9, 8)), rng.standard_normal((4, 3, k, k)), rng.standard_normal(4)
    assert np.allclose(K.conv2d_fw(x, w, b, stride, padding), conv_naive(x, w, b, stride, padding), atol=1e-5)


def test_conv_rejects_channel_mismatch():
    with pytest.raises(K.ShapeError):
        K.conv2d_fw(np.zeros((1, 2, 5, 5)), np.zeros((1, 3, 3, 3)))
    with pytest.raises(K.ShapeError):
        K.conv2d_bw_ig(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)), 1, 0, (1, 1, 5, 5))


def test_conv_ig_zero_and_identity():
    w = np.zeros((2, 3, 3, 3), np.float32)
    assert not K.conv2d_bw_ig(np.zeros((1, 2, 4, 4), np.float32), w, 1, 1, (1, 3, 4, 4)).any()
    dy = np.random.default_rng(2).standard_normal((1, 3, 4, 4)).astype(np.float32)
    eye = np.eye(3, dtype=np.float32)[:, :, None, None]
    assert np.array_equal(K.conv2d_bw_ig(dy, eye, 1, 0, dy.shape), dy)


def test_conv_wg_zero_and_delta():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 2, 6, 6)).astype(np.float32)
    dw, db = K.conv2d_bw_wg(x, np.zeros((1, 1, 4, 4), np.float32), 1, 0, 3)
    assert not dw.any() and not db.any()
    dy = np.zeros((1, 1, 4, 4), np.float32)
    dy[0, 0, 2, 1] = 1
    dw, db = K.conv2d_bw_wg(x, dy, 1, 0, 3)
    assert np.array_equal(dw[0], x[0, :, 2:5, 1:4]) and db[0] == 1


# -- batch norm ------------------------------------------------------------------


def test_batchnorm_identity_and_zero_gamma():
    eps = 1e-5
    x = np.random.default_rng(4).standard_normal((2, 3, 4, 4)).astype(np.float32)
    y = K.batchnorm_fw(x, np.ones(3), np.zeros(3), np.zeros(3), np.full(3, 1 - eps), eps)
    assert np.allclose(y, x, atol=1e-6)
    assert not K.batchnorm_bw_ig(x, np.zeros(3), np.ones(3), eps).any()


def test_batchnorm_rejects_nonpositive_variance():
    with pytest.raises(ValueError):
        K.batchnorm_fw(np.zeros((1, 1, 2, 2)), [1.0], [0.0], [0.0], [-1.0], 1e-5)


# -- relu and sign masks -----------------------------------------------------------


def test_relu_backward_cases():
    dy = np.random.default_rng(5).standard_normal((2, 3, 4, 4)).astype(np.float32)
    _, pos = K.relu_fw(np.abs(dy) + 1)
    assert np.array_equal(K.relu_bw(dy, pos), dy)
    _, neg = K.relu_fw(-np.abs(dy) - 1)
    assert not K.relu_bw(dy, neg).any()


def test_sign_mask_is_one_bit_per_element_and_exact():
    rng = np.random.default_rng(6)
    for shape in [(1, 1, 3, 3), (2, 5, 7, 9), (4, 32, 24, 40)]:
        b = rng.random(shape) < 0.5
        m = K.SignMask.from_bool(b)
        assert m.nbytes == -(-b.size // 8)
        assert np.array_equal(m.unpack(), b)


# -- max pooling -------------------------------------------------------------------


def test_maxpool_example_routes_to_max():
    x = np.array([[[[1, 2], [3, 4]]]], np.float32)
    y, arg = K.maxpool_fw(x)
    assert y.item() == 4
    dx = K.maxpool_bw(np.ones_like(y), arg)
    assert dx[0, 0].tolist() == [[0, 0], [0, 1]]


@pytest.mark.parametrize("k", [2, 3])
def test_maxpool_ties_pick_first_index(k):
    x = np.full((1, 2, 2 * k, 2 * k), 7.0, np.float32)
    _, arg = K.maxpool_fw(x, k)
    assert not arg.any()
    dx = K.maxpool_bw(np.ones((1, 2, 2, 2), np.float32), arg, k)
    assert dx.sum() == 8 and dx[0, 0, 0, 0] == 1 and dx[0, 0, 0, k] == 1


def test_route_mask_agrees_with_separate_relu_and_pool():
    rng = np.random.default_rng(7)
    x = np.round(rng.standard_normal((3, 4, 8, 10)), 1).astype(np.float32)  # rounding forces ties
    dy = rng.standard_normal((3, 4, 4, 5)).astype(np.float32)
    r, sign = K.relu_fw(x)
    _, arg = K.maxpool_fw(r)
    # a window whose max is <= 0 has no gradient either way; elsewhere both paths pick the same element
    separate = K.relu_bw(K.maxpool_bw(dy, arg), sign)
    fused = K.maxpool_relu_bw(dy, K.route_mask(x))
    assert np.array_equal(fused, separate)


def test_maxpool_rejects_untiled_input():
    with pytest.raises(K.ShapeError):
        K.maxpool_fw(np.zeros((1, 1, 3, 4), np.float32))


# -- fully connected --------------------------------------------------------------


def test_fc_examples():
    x = np.random.default_rng(8).standard_normal((3, 5)).astype(np.float32)
    b = np.arange(4, dtype=np.float32)
    assert np.array_equal(K.fc_fw(x, np.zeros((4, 5), np.float32), b), np.broadcast_to(b, (3, 4)))
    assert np.array_equal(K.fc_fw(x, np.eye(5, dtype=np.float32), np.zeros(5, np.float32)), x)


def test_mac_counter_hand_counts():
    x = np.zeros((2, 3, 9, 9), np.float32)
    w = np.zeros((4, 3, 3, 3), np.float32)
    with K.count_macs() as c:
        K.conv2d_fw(x, w, None, 2, 1)
        K.fc_fw(np.zeros((2, 1920), np.float32), np.zeros((4, 1920), np.float32))
    assert c.calls[("fw", "conv")] == 2 * 4 * 3 * 9 * 5 * 5
    assert c.calls[("fw", "fc")] == 2 * 7680
    with K.count_macs() as c2, K.uncounted():
        K.fc_fw(np.zeros((1, 2), np.float32), np.zeros((1, 2), np.float32))
    assert c2.total == 0
