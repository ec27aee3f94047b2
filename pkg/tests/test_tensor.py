import numpy as np
import pytest

from weakbox_kit import tensor as T


def test_conv2d_identity_kernel():
    x = T.Tensor(np.random.default_rng(0).uniform(-1, 1, (1, 1, 4, 4)).astype(np.float32))
    k = T.Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
    out = T.conv2d(x, k)
    assert np.array_equal(out.data, x.data)


def test_conv2d_zero_kernel():
    x = T.Tensor(np.random.default_rng(1).uniform(-1, 1, (2, 3, 5, 5)).astype(np.float32))
    k = T.Tensor(np.zeros((4, 3, 3, 3), dtype=np.float32))
    out = T.conv2d(x, k, pad=1)
    assert not out.data.any()


def test_conv2d_ones_kernel_counts_taps():
    x = T.Tensor(np.ones((1, 1, 5, 5), dtype=np.float32))
    k = T.Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
    out = T.conv2d(x, k, stride=1, pad=1)
    assert out.data[0, 0, 2, 2] == 9.0
    assert out.data[0, 0, 0, 0] == 4.0
    assert out.data[0, 0, 0, 2] == 6.0


def test_conv2d_rejects_even_kernel():
    x = T.Tensor(np.zeros((1, 1, 4, 4), dtype=np.float32))
    k = T.Tensor(np.zeros((1, 1, 2, 2), dtype=np.float32))
    with pytest.raises(T.ShapeError, match="odd"):
        T.conv2d(x, k)


def test_conv2d_rejects_channel_mismatch():
    x = T.Tensor(np.zeros((1, 2, 4, 4), dtype=np.float32))
    k = T.Tensor(np.zeros((1, 3, 3, 3), dtype=np.float32))
    with pytest.raises(T.ShapeError) as err:
        T.conv2d(x, k)
    assert "(1, 2, 4, 4)" in str(err.value) and "(1, 3, 3, 3)" in str(err.value)


def test_maxpool_single_window():
    x = T.Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=np.float32))
    out = T.maxpool2d(x)
    assert out.data.tolist() == [[[[4.0]]]]


def test_maxpool_constant_halves_resolution():
    x = T.Tensor(np.full((1, 2, 6, 8), 3.5, dtype=np.float32))
    out = T.maxpool2d(x)
    assert out.data.shape == (1, 2, 3, 4)
    assert np.all(out.data == 3.5)


def test_maxpool_gradient_routes_to_argmax():
    x = T.Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=np.float32), requires_grad=True)
    T.backward(T.tsum(T.maxpool2d(x)))
    assert x.grad.tolist() == [[[[0.0, 0.0], [0.0, 1.0]]]]


def test_maxpool_tie_routes_first_in_row_major():
    x = T.Tensor(np.full((1, 1, 2, 2), 7.0, dtype=np.float32), requires_grad=True)
    T.backward(T.tsum(T.maxpool2d(x)))
    assert x.grad.tolist() == [[[[1.0, 0.0], [0.0, 0.0]]]]


def test_maxpool_odd_input_pads_and_records():
    x = T.Tensor(np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3))
    out = T.maxpool2d(x)
    assert out.data.shape == (1, 1, 2, 2)
    assert out.meta["pool_padded"] == (1, 1)
    assert out.data[0, 0, 1, 1] == 8.0


def test_bilinear_constant():
    x = T.Tensor(np.full((1, 1, 3, 3), 2.25, dtype=np.float32))
    out = T.bilinear_resize(x, 7, 5)
    assert out.data.shape == (1, 1, 7, 5)
    assert np.allclose(out.data, 2.25)


def test_bilinear_align_corners_midpoint():
    x = T.Tensor(np.array([[[[0.0, 2.0]]]], dtype=np.float32))
    out = T.bilinear_resize(x, 1, 3)
    assert out.data[0, 0, 0].tolist() == [0.0, 1.0, 2.0]


def test_bilinear_identity_same_size():
    x = T.Tensor(np.random.default_rng(2).uniform(-1, 1, (2, 3, 5, 4)).astype(np.float32))
    out = T.bilinear_resize(x, 5, 4)
    assert np.array_equal(out.data, x.data)


def test_reduce_max_examples():
    g = np.array([[0, 1, 0], [0, 0, 0], [0, 1, 1]], dtype=np.float32)
    assert T.reduce_max(T.Tensor(g), axis=0).data.tolist() == [0.0, 1.0, 1.0]
    assert T.reduce_max(T.Tensor(g), axis=1).data.tolist() == [1.0, 0.0, 1.0]
    zero = T.Tensor(np.zeros((3, 3), dtype=np.float32))
    assert not T.reduce_max(zero, axis=0).data.any()


def test_reduce_max_gradient_first_argmax():
    g = np.array([[1.0, 1.0], [0.0, 1.0]], dtype=np.float32)
    x = T.Tensor(g, requires_grad=True)
    T.backward(T.tsum(T.reduce_max(x, axis=1)))
    # row 0 ties: first column wins; row 1 max at column 1
    assert x.grad.tolist() == [[1.0, 0.0], [0.0, 1.0]]


def test_backward_sum_ones():
    x = T.Tensor(np.random.default_rng(3).uniform(-2, 2, (3, 4)).astype(np.float32), requires_grad=True)
    T.backward(T.tsum(x))
    assert np.all(x.grad == 1.0)


def test_backward_sigmoid_at_zero():
    x = T.Tensor(0.0, requires_grad=True)
    T.backward(T.sigmoid(x))
    assert abs(float(x.grad) - 0.25) < 1e-7


def test_backward_square_at_three():
    x = T.Tensor(3.0, requires_grad=True)
    T.backward(T.mul(x, x))
    assert float(x.grad) == 6.0


def test_backward_off_tape_raises():
    x = T.Tensor(1.0, requires_grad=False)
    with pytest.raises(T.TapeError):
        T.backward(x)


def test_backward_twice_raises():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    loss = T.tsum(x)
    T.backward(loss)
    with pytest.raises(T.TapeError):
        T.backward(loss)


def test_backward_needs_scalar():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(T.ShapeError):
        T.backward(T.mul(x, x))


def test_backward_linearity():
    rng = np.random.default_rng(4)
    base = rng.uniform(-2, 2, (4, 4)).astype(np.float32)
    a, b = 1.7, -0.6

    def grads(scale_a, scale_b):
        x = T.Tensor(base, requires_grad=True)
        l1 = T.tsum(T.sigmoid(x))
        l2 = T.tmean(T.mul(x, x))
        T.backward(T.add(T.affine(l1, scale_a, 0.0), T.affine(l2, scale_b, 0.0)))
        return x.grad.copy()

    combined = grads(a, b)
    ga = grads(1.0, 0.0)
    gb = grads(0.0, 1.0)
    assert np.allclose(combined, a * ga + b * gb, atol=1e-6)


def test_determinism_bit_identical():
    def run():
        x = T.Tensor(np.linspace(-1, 1, 12, dtype=np.float32).reshape(3, 4), requires_grad=True)
        y = T.sigmoid(T.mul(x, T.affine(x, 0.5, 0.25)))
        loss = T.tmean(y)
        T.backward(loss)
        return y.data.copy(), x.grad.copy()

    d1, g1 = run()
    d2, g2 = run()
    assert np.array_equal(d1, d2) and np.array_equal(g1, g2)


def test_minimum_tie_routes_to_first():
    a = T.Tensor([2.0, 1.0], requires_grad=True)
    b = T.Tensor([2.0, 3.0], requires_grad=True)
    T.backward(T.tsum(T.minimum(a, b)))
    assert a.grad.tolist() == [1.0, 1.0]
    assert b.grad.tolist() == [0.0, 0.0]


def test_clamp_gradient_inclusive_at_bounds():
    x = T.Tensor([-2.0, -1.0, 0.0, 1.0, 2.0], requires_grad=True)
    T.backward(T.tsum(T.clamp(x, -1.0, 1.0)))
    assert x.grad.tolist() == [0.0, 1.0, 1.0, 1.0, 0.0]


def test_op_outputs_are_read_only():
    x = T.Tensor([1.0, 2.0])
    out = T.affine(x, 2.0, 0.0)
    with pytest.raises(ValueError):
        out.data[0] = 5.0


def test_no_grad_blocks_tape():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with T.no_grad():
        y = T.tsum(T.mul(x, x))
    assert y._node is None and not y.requires_grad


def test_batchnorm_running_stats_update_and_eval():
    rng = np.random.default_rng(5)
    x = rng.normal(2.0, 3.0, (4, 2, 6, 6)).astype(np.float32)
    gamma = T.Tensor(np.ones(2, dtype=np.float32))
    beta = T.Tensor(np.zeros(2, dtype=np.float32))
    rm = np.zeros(2, dtype=np.float32)
    rv = np.ones(2, dtype=np.float32)
    out = T.batchnorm2d(T.Tensor(x), gamma, beta, rm, rv, training=True)
    # normalized output has ~zero mean, unit variance per channel
    assert abs(out.data[:, 0].mean()) < 1e-4
    assert abs(out.data[:, 0].std() - 1.0) < 1e-3
    # momentum 0.9 update pulls running stats toward the batch stats
    assert abs(rm[0] - 0.1 * x[:, 0].mean()) < 1e-4
    # eval mode uses the running stats, not the batch stats
    out_eval = T.batchnorm2d(T.Tensor(x), gamma, beta, rm.copy(), rv.copy(), training=False)
    expect = (x[:, 0] - rm[0]) / np.sqrt(rv[0] + 1e-5)
    assert np.allclose(out_eval.data[:, 0], expect, atol=1e-4)
