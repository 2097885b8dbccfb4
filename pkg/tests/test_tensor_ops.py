"""Closed-form and hand-computed checks for the tensor primitives."""

import numpy as np
import pytest

from unetformer import ops, tensor
from unetformer.errors import GraphError, NumericError, ShapeError
from unetformer.optim import AdamW, cosine_lr
from unetformer.nn import Parameter
from unetformer.tensor import Tensor


def t(data, grad=False, dtype=np.float32):
    return Tensor(np.asarray(data), requires_grad=grad, dtype=dtype)


# ---------------------------------------------------------------------------
# elementwise and shape ops


def test_softmax_uniform_logits():
    x = t(np.zeros((3, 5)))
    out = tensor.softmax(x, axis=1)
    assert np.allclose(out.data, 0.2)


def test_softmax_rows_sum_to_one():
    g = np.random.default_rng(0)
    x = t(g.normal(size=(4, 7)) * 10)
    out = tensor.softmax(x, axis=1)
    assert np.allclose(out.data.sum(axis=1), 1.0, atol=1e-6)


def test_relu6_clamps_both_sides():
    out = tensor.relu6(t([-1.0, 3.0, 9.0]))
    assert out.data.tolist() == [0.0, 3.0, 6.0]


def test_relu_and_sigmoid_values():
    assert tensor.relu(t([-2.0, 0.5])).data.tolist() == [0.0, 0.5]
    assert np.allclose(tensor.sigmoid(t([0.0])).data, 0.5)


def test_permute_then_inverse_is_identity():
    g = np.random.default_rng(1)
    x = t(g.normal(size=(2, 3, 4, 5)))
    y = tensor.permute(tensor.permute(x, 0, 2, 3, 1), 0, 3, 1, 2)
    assert np.array_equal(y.data, x.data)


def test_reshape_concat_slice_pad_flip_round_trips():
    g = np.random.default_rng(2)
    x = t(g.normal(size=(2, 6)))
    assert np.array_equal(tensor.reshape(x, 3, 4).data.reshape(2, 6), x.data)
    halves = tensor.concat([x, x], axis=0)
    assert np.array_equal(halves.data[:2], x.data)
    assert np.array_equal(tensor.slice_(halves, (slice(2, 4),)).data, x.data)
    padded = tensor.pad(x, ((1, 1), (0, 2)))
    assert padded.shape == (4, 8)
    assert np.array_equal(padded.data[1:3, :6], x.data)
    assert np.array_equal(tensor.flip(tensor.flip(x, (1,)), (1,)).data, x.data)


def test_matmul_matches_numpy():
    g = np.random.default_rng(3)
    a, b = g.normal(size=(2, 3, 4)), g.normal(size=(2, 4, 5))
    out = tensor.matmul(t(a, dtype=np.float64), t(b, dtype=np.float64))
    assert np.allclose(out.data, a @ b, atol=1e-12)


def test_scalar_reductions_are_rank_zero():
    x = t(np.ones((2, 3)))
    assert tensor.sum_(x).shape == ()
    assert tensor.mean(x).shape == ()
    assert tensor.sum_(x).item() == 6.0


def test_binary_op_dtype_mismatch_rejected():
    with pytest.raises(ShapeError):
        tensor.add(t([1.0]), t([1.0], dtype=np.float64))


# ---------------------------------------------------------------------------
# backward mechanics


def test_backward_sum_of_squares():
    x = t([1.0, 2.0], grad=True)
    loss = tensor.sum_(x * x)
    tensor.backward(loss)
    assert np.allclose(x.grad, [2.0, 4.0])


def test_backward_softmax_cross_entropy_closed_form():
    # d(-sum(y*log_softmax(x)))/dx == softmax(x) - y
    g = np.random.default_rng(4)
    logits = t(g.normal(size=(1, 6)), grad=True, dtype=np.float64)
    onehot = np.zeros((1, 6))
    onehot[0, 2] = 1.0
    loss = tensor.sum_(tensor.log_softmax(logits, axis=1)
                       * Tensor(onehot, dtype=np.float64)) * -1.0
    tensor.backward(loss)
    probs = np.exp(logits.data) / np.exp(logits.data).sum()
    assert np.allclose(logits.grad, probs - onehot, atol=1e-12)


def test_backward_accumulates_over_reuse():
    x = t([3.0], grad=True)
    loss = tensor.sum_(x * x + x)
    tensor.backward(loss)
    assert np.allclose(x.grad, [7.0])


def test_backward_broadcast_unbroadcasts_grads():
    a = t(np.ones((2, 3)), grad=True)
    b = t(np.ones((1, 3)), grad=True)
    s = t(np.array(2.0), grad=True)
    tensor.backward(tensor.sum_(a * b * s))
    assert a.grad.shape == (2, 3)
    assert np.allclose(b.grad, [[4.0, 4.0, 4.0]])
    assert s.grad.shape == () and s.grad == 6.0


def test_backward_requires_scalar_loss():
    x = t([1.0, 2.0], grad=True)
    y = x * 2.0
    with pytest.raises(ShapeError):
        tensor.backward(y)


def test_backward_on_empty_graph_rejected():
    with pytest.raises(GraphError):
        tensor.backward(t(np.array(1.0), grad=True))


def test_no_grad_records_nothing():
    x = t([1.0], grad=True)
    with tensor.no_grad():
        y = tensor.sum_(x * x)
    assert not tensor.active_graph().nodes
    with pytest.raises(GraphError):
        tensor.backward(y)


def test_non_finite_values_rejected():
    with pytest.raises(NumericError):
        Tensor(np.array([np.nan]))
    with pytest.raises(NumericError):
        tensor.log(t([0.0]))


# ---------------------------------------------------------------------------
# convolution and pooling hand cases


def test_conv2d_all_ones_sums_window():
    x = t(np.ones((1, 1, 3, 3)))
    w = t(np.ones((1, 1, 3, 3)))
    out = ops.conv2d(x, w)
    assert out.shape == (1, 1, 1, 1)
    assert out.data.reshape(()) == 9.0


def test_conv2d_identity_kernel():
    g = np.random.default_rng(5)
    x = t(g.normal(size=(2, 3, 5, 5)))
    w = np.zeros((3, 3, 3, 3), dtype=np.float32)
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    out = ops.conv2d(x, t(w), padding=1)
    assert np.allclose(out.data, x.data, atol=1e-7)


def test_conv2d_output_size_uses_floor_division():
    # 7x7 stride-2 kernel on 64px with pad 3 lands on 32px, as the encoder
    # stem requires; odd remainders drop the trailing positions.
    x = t(np.zeros((1, 1, 64, 64)))
    w = t(np.zeros((1, 1, 7, 7)))
    assert ops.conv2d(x, w, stride=2, padding=3).shape == (1, 1, 32, 32)
    assert ops.conv2d(t(np.zeros((1, 1, 5, 5))), t(np.zeros((1, 1, 2, 2))),
                      stride=2).shape == (1, 1, 2, 2)


def test_conv2d_shape_mismatch_rejected():
    x = t(np.zeros((1, 4, 5, 5)))
    w = t(np.zeros((2, 3, 3, 3)))
    with pytest.raises(ShapeError):
        ops.conv2d(x, w)


def test_max_pool2d_reduces_window_max():
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    out = ops.max_pool2d(t(x), 2, stride=2)
    assert out.data.reshape(2, 2).tolist() == [[5.0, 7.0], [13.0, 15.0]]


def test_global_avg_pool_of_channel_constant():
    x = np.zeros((1, 3, 4, 4), dtype=np.float32)
    x[0, 0], x[0, 1], x[0, 2] = 1.0, 2.0, 3.0
    out = ops.global_avg_pool(t(x))
    assert out.shape == (1, 3, 1, 1)
    assert out.data.reshape(3).tolist() == [1.0, 2.0, 3.0]


# ---------------------------------------------------------------------------
# strip pooling


def test_strip_pool_hand_case_w2():
    x = t(np.array([0.0, 4.0, 0.0, 0.0]).reshape(1, 1, 1, 4))
    out = ops.strip_avg_pool(x, 2, along="w")
    assert out.data.reshape(4).tolist() == [2.0, 2.0, 0.0, 0.0]


def test_strip_pool_preserves_constants_bit_exactly():
    for w in (1, 2, 3, 5, 8):
        x = t(np.full((2, 3, 6, 7), 0.3, dtype=np.float32))
        for along in ("h", "w"):
            out = ops.strip_avg_pool(x, w, along=along)
            assert np.array_equal(out.data, x.data)


def test_strip_pool_impulse_support():
    w = 3  # centered window reaches one cell each side
    x = np.zeros((1, 1, 1, 7), dtype=np.float32)
    x[0, 0, 0, 3] = 1.0
    out = ops.strip_avg_pool(t(x), w, along="w").data.reshape(7)
    assert np.flatnonzero(out).tolist() == [2, 3, 4]


def test_strip_pool_matches_direct_window_mean():
    g = np.random.default_rng(6)
    x = g.normal(size=(1, 2, 1, 9))
    for w in (2, 3, 4):
        out = ops.strip_avg_pool(t(x, dtype=np.float64), w, along="w").data
        lo_off, hi_off = (w - 1) // 2, w // 2
        for p in range(9):
            lo, hi = max(0, p - lo_off), min(9, p + hi_off + 1)
            expected = x[:, :, :, lo:hi].mean(axis=3)
            assert np.allclose(out[:, :, :, p], expected, atol=1e-12)


# ---------------------------------------------------------------------------
# bilinear upsampling


def test_bilinear_constant_stays_constant():
    x = t(np.full((1, 2, 3, 3), 0.7, dtype=np.float32))
    out = ops.bilinear_upsample(x, 2)
    assert out.shape == (1, 2, 6, 6)
    assert np.array_equal(out.data, np.full((1, 2, 6, 6), 0.7, dtype=np.float32))


def test_bilinear_hand_case_2x2():
    # input value(y, x) = 2y + x is affine, so the interpolant is affine in
    # the clipped half-pixel source coordinates [0, 0.25, 0.75, 1].
    x = t(np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(1, 1, 2, 2),
          dtype=np.float64)
    out = ops.bilinear_upsample(x, 2).data.reshape(4, 4)
    coords = np.array([0.0, 0.25, 0.75, 1.0])
    expected = 2.0 * coords[:, None] + coords[None, :]
    assert np.allclose(out, expected, atol=1e-12)


def test_bilinear_doubles_spatial_dims():
    x = t(np.zeros((2, 3, 4, 5)))
    assert ops.bilinear_upsample(x, 2).shape == (2, 3, 8, 10)


# ---------------------------------------------------------------------------
# batch norm


def test_batchnorm_train_normalizes_batch():
    g = np.random.default_rng(7)
    x = t(g.normal(loc=3.0, scale=2.0, size=(4, 2, 5, 5)))
    gamma, beta = Parameter(np.ones(2)), Parameter(np.zeros(2))
    rm, rv = np.zeros(2, dtype=np.float64), np.ones(2, dtype=np.float64)
    out = ops.batchnorm2d(x, gamma, beta, rm, rv, training=True).data
    assert np.allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
    assert np.allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-3)
    assert not np.allclose(rm, 0.0)  # running stats moved


def test_batchnorm_constant_channel_maps_to_zero():
    x = t(np.full((2, 3, 4, 4), 5.0, dtype=np.float32))
    gamma, beta = Parameter(np.ones(3)), Parameter(np.zeros(3))
    out = ops.batchnorm2d(x, gamma, beta, np.zeros(3), np.ones(3),
                          training=True).data
    assert np.allclose(out, 0.0, atol=1e-6)


def test_batchnorm_eval_identity_stats():
    g = np.random.default_rng(8)
    x = t(g.normal(size=(1, 2, 3, 3)))
    gamma, beta = Parameter(np.ones(2)), Parameter(np.zeros(2))
    out = ops.batchnorm2d(x, gamma, beta, np.zeros(2), np.ones(2),
                          training=False, eps=1e-12).data
    assert np.allclose(out, x.data, atol=1e-6)


def test_batchnorm_channel_mismatch_rejected():
    x = t(np.zeros((1, 3, 2, 2)))
    with pytest.raises(ShapeError):
        ops.batchnorm2d(x, Parameter(np.ones(2)), Parameter(np.zeros(2)),
                        np.zeros(2), np.ones(2), training=True)


# ---------------------------------------------------------------------------
# optimizer and schedule


def test_adamw_zero_grad_leaves_param():
    p = Parameter(np.array([1.5]))
    opt = AdamW([("p", p)], lr=0.1, weight_decay=0.0)
    p.grad = np.zeros(1, dtype=np.float32)
    opt.step()
    assert p.data.tolist() == [1.5]


def test_adamw_first_step_is_unit_normalized():
    p = Parameter(np.array([1.0]))
    opt = AdamW([("p", p)], lr=0.1, weight_decay=0.0)
    p.grad = np.ones(1, dtype=np.float32)
    opt.step()
    # bias correction makes m_hat = g and v_hat = g^2 on step one
    assert np.allclose(p.data, 1.0 - 0.1, atol=1e-6)


def test_adamw_decoupled_decay():
    p = Parameter(np.array([2.0]))
    opt = AdamW([("p", p)], lr=0.1, weight_decay=0.5)
    p.grad = np.zeros(1, dtype=np.float32)
    opt.step()
    assert np.allclose(p.data, 2.0 * (1.0 - 0.1 * 0.5), atol=1e-7)


def test_adamw_rejects_bad_lr():
    with pytest.raises(Exception):
        AdamW([("p", Parameter(np.array([1.0])))], lr=0.0)


def test_cosine_lr_endpoints_and_midpoint():
    assert cosine_lr(6e-4, 0, 100) == 6e-4
    assert cosine_lr(6e-4, 100, 100) == 0.0
    assert abs(cosine_lr(6e-4, 50, 100) - 3e-4) < 1e-12


def test_cosine_lr_rejects_zero_total():
    with pytest.raises(Exception):
        cosine_lr(1e-3, 0, 0)


# ---------------------------------------------------------------------------
# determinism


def test_op_pipeline_is_bit_deterministic():
    def run():
        g = np.random.default_rng(123)
        x = t(g.normal(size=(2, 4, 8, 8)))
        w = t(g.normal(size=(4, 4, 3, 3)))
        y = ops.conv2d(x, w, padding=1)
        y = tensor.relu(y)
        y = ops.strip_avg_pool(y, 3, along="h")
        y = ops.bilinear_upsample(y, 2)
        return tensor.softmax(y, axis=1).data

    assert np.array_equal(run(), run())
