import struct

import numpy as np
import pytest

from tubenet.tensor import (KernelSet, ShapeError, conv3d, conv3d_backward,
                            conv3d_out_shape, finite_diff_grad,
                            fully_connected, fully_connected_backward,
                            load_tensor, make_kernels, maxpool3d,
                            maxpool3d_backward, save_tensor, sgd_step,
                            softmax_xent)


def rel_err(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return np.abs(a - b).max() / denom


# ---------------------------------------------------------------------------
# file format


def test_tensor_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 2, 5, 7)).astype(np.float32)
    p = tmp_path / "x.t4"
    save_tensor(p, x)
    y = load_tensor(p)
    assert y.dtype == np.float32
    assert np.array_equal(
        x.view(np.uint32), y.view(np.uint32))  # bit exact


def test_tensor_header_layout(tmp_path):
    x = np.zeros((1, 2, 3, 4), dtype=np.float32)
    p = tmp_path / "x.t4"
    save_tensor(p, x)
    raw = p.read_bytes()
    assert raw[:2] == b"T4"
    _, d0, d1, d2, d3 = struct.unpack("<H4I", raw[2:20])
    assert (d0, d1, d2, d3) == (1, 2, 3, 4)
    assert len(raw) == 20 + 4 * x.size
    payload = np.frombuffer(raw[20:], dtype="<f4")
    assert np.array_equal(payload.reshape(x.shape), x)


def test_tensor_bad_magic_rejected(tmp_path):
    p = tmp_path / "bad.t4"
    p.write_bytes(b"XX" + b"\x00" * 30)
    with pytest.raises(ValueError):
        load_tensor(p)


def test_tensor_wrong_rank_rejected(tmp_path):
    with pytest.raises(ShapeError):
        save_tensor(tmp_path / "x.t4", np.zeros((2, 2, 2), dtype=np.float32))


# ---------------------------------------------------------------------------
# conv3d


def test_conv_identity_kernel():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 4, 5, 6)).astype(np.float32)
    w = np.zeros((1, 1, 3, 3, 3), dtype=np.float32)
    w[0, 0, 1, 1, 1] = 1.0
    y = conv3d(x, KernelSet(w, np.zeros(1, dtype=np.float32)))
    assert np.allclose(y, x, atol=1e-6)


def test_conv_all_ones_sums_to_27():
    x = np.ones((1, 3, 3, 3), dtype=np.float32)
    k = KernelSet(np.ones((1, 1, 3, 3, 3), dtype=np.float32),
                  np.zeros(1, dtype=np.float32))
    y = conv3d(x, k, pad=(0, 0, 0))
    assert y.shape == (1, 1, 1, 1)
    assert y[0, 0, 0, 0] == 27.0


def test_conv_shape_64x8x300x400_to_128():
    k = KernelSet(np.zeros((128, 64, 3, 3, 3), dtype=np.float32),
                  np.zeros(128, dtype=np.float32))
    assert conv3d_out_shape((64, 8, 300, 400), k) == (128, 8, 300, 400)


def test_conv_linearity():
    rng = np.random.default_rng(2)
    k = make_kernels(3, 2, (3, 3, 3), rng)
    k = KernelSet(k.weights, np.zeros_like(k.bias))
    x = rng.standard_normal((2, 3, 4, 4)).astype(np.float64)
    y = rng.standard_normal((2, 3, 4, 4)).astype(np.float64)
    lhs = conv3d(2.5 * x - 1.25 * y, k)
    rhs = 2.5 * conv3d(x, k) - 1.25 * conv3d(y, k)
    assert rel_err(lhs, rhs) < 1e-10


def test_conv_grads_match_finite_differences():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 4, 4))
    k = make_kernels(2, 2, (3, 3, 3), rng, dtype=np.float64)
    gy = rng.standard_normal(conv3d_out_shape(x.shape, k))
    gx, gw, gb = conv3d_backward(gy, x, k)

    fx = finite_diff_grad(lambda v: float((conv3d(v, k) * gy).sum()), x)
    assert rel_err(gx, fx) < 1e-5

    def loss_w(w):
        return float((conv3d(x, KernelSet(w, k.bias)) * gy).sum())

    fw = finite_diff_grad(loss_w, k.weights)
    assert rel_err(gw, fw) < 1e-5

    def loss_b(b):
        return float((conv3d(x, KernelSet(k.weights, b)) * gy).sum())

    fb = finite_diff_grad(loss_b, k.bias)
    assert rel_err(gb, fb) < 1e-5


# ---------------------------------------------------------------------------
# maxpool3d


def test_pool_shapes_match_architecture_rows():
    # same kernel/stride rules as the 1x2x2 and 2x2x2 pooling rows
    x = np.arange(2 * 8 * 6 * 8, dtype=np.float64).reshape(2, 8, 6, 8)
    y, _ = maxpool3d(x, (1, 2, 2))
    assert y.shape == (2, 8, 3, 4)
    y, _ = maxpool3d(x, (2, 2, 2))
    assert y.shape == (2, 4, 3, 4)


def test_pool_ceil_division_on_partial_windows():
    x = np.arange(1 * 5 * 5 * 5, dtype=np.float64).reshape(1, 5, 5, 5)
    y, amap = maxpool3d(x, (2, 2, 2))
    assert y.shape == (1, 3, 3, 3)
    assert y[0, -1, -1, -1] == x.max()


def test_pool_constant_input_lowest_flat_index_tie():
    x = np.zeros((1, 2, 4, 4))
    y, amap = maxpool3d(x, (2, 2, 2))
    assert np.all(y == 0)
    # each window's argmax is its lowest flat index element
    first = amap.indices[0, 0, 0, 0]
    assert first == 0


def test_pool_output_is_window_max_and_argmax_consistent():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((3, 4, 6, 6))
    y, amap = maxpool3d(x, (2, 2, 2))
    assert np.array_equal(x.ravel()[amap.indices.ravel()].reshape(y.shape), y)


def test_pool_backward_matches_finite_differences():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 4, 4, 4))
    y, amap = maxpool3d(x, (2, 2, 2))
    gy = rng.standard_normal(y.shape)
    gx = maxpool3d_backward(gy, amap)
    fx = finite_diff_grad(lambda v: float((maxpool3d(v, (2, 2, 2))[0]
                                           * gy).sum()), x)
    assert rel_err(gx, fx) < 1e-5


# ---------------------------------------------------------------------------
# fully connected / softmax / sgd


def test_fc_identity_and_bias():
    x = np.arange(5.0)
    assert np.allclose(fully_connected(x, np.eye(5), np.zeros(5)), x)
    b = np.full(3, 7.0)
    assert np.allclose(fully_connected(x, np.zeros((3, 5)), b), b)


def test_fc_projects_8192_to_4096():
    w = np.zeros((4096, 8192))
    y = fully_connected(np.zeros(8192), w, np.zeros(4096))
    assert y.shape == (4096,)


def test_fc_backward_matches_finite_differences():
    rng = np.random.default_rng(6)
    x = rng.standard_normal(7)
    w = rng.standard_normal((4, 7))
    gy = rng.standard_normal(4)
    gx, gw, gb = fully_connected_backward(gy, x, w)
    fx = finite_diff_grad(
        lambda v: float((fully_connected(v, w, np.zeros(4)) * gy).sum()), x)
    assert rel_err(gx, fx) < 1e-6
    fw = finite_diff_grad(
        lambda v: float((fully_connected(x, v, np.zeros(4)) * gy).sum()), w)
    assert rel_err(gw, fw) < 1e-6
    assert np.allclose(gb, gy)


def test_softmax_xent_uniform_is_log_n():
    loss, grad = softmax_xent(np.zeros(5), 2)
    assert loss == pytest.approx(np.log(5), rel=1e-12)
    assert grad.sum() == pytest.approx(0.0, abs=1e-12)


def test_softmax_xent_confident_limit():
    logits = np.zeros(4)
    logits[1] = 50.0
    loss, _ = softmax_xent(logits, 1)
    assert loss < 1e-12


def test_softmax_xent_grad_matches_finite_differences():
    rng = np.random.default_rng(7)
    logits = rng.standard_normal(4)
    _, grad = softmax_xent(logits, 3)
    fg = finite_diff_grad(lambda v: softmax_xent(v, 3)[0], logits)
    assert rel_err(grad, fg) < 1e-5


def test_sgd_step_examples():
    assert sgd_step(np.array([1.0]), np.array([2.0]), 0.0)[0] == 1.0
    assert sgd_step(np.array([1.0]), np.array([2.0]), 0.1)[0] == \
        pytest.approx(0.8)


def test_sgd_quadratic_bowl_monotone():
    # f(p) = p^2, gradient 2p, lr below 1/curvature
    p = np.array([3.0])
    prev = float(p[0] ** 2)
    for _ in range(20):
        p = sgd_step(p, 2 * p, 0.2)
        cur = float(p[0] ** 2)
        assert cur < prev
        prev = cur


def test_sgd_step_nested_structures():
    params = {"a": np.ones(3), "b": [np.ones(2), np.ones(1)]}
    grads = {"a": np.ones(3), "b": [np.ones(2), np.ones(1)]}
    out = sgd_step(params, grads, 0.5)
    assert np.allclose(out["a"], 0.5)
    assert np.allclose(out["b"][0], 0.5)
    assert np.allclose(params["a"], 1.0)  # input untouched


def test_finite_diff_exact_on_linear():
    a = np.arange(6.0)
    g = finite_diff_grad(lambda v: float(a @ v), np.zeros(6))
    assert rel_err(g, a) < 1e-9
