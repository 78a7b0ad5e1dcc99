import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advtex.autodiff import (AdamState, Tensor, adam_step, backward, bilinear_sample, concat, conv2d,
                             conv_output_size, l1_loss, leaky_relu, masked_bce_loss, sigmoid)
from advtex.gradcheck import gradcheck


def naive_conv2d(x, w, b, stride, padding):
    c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = b[o]
                for c in range(c_in):
                    for di in range(k):
                        for dj in range(k):
                            r, cc = i * stride - padding + di, j * stride - padding + dj
                            if 0 <= r < h and 0 <= cc < wd:
                                acc += x[c, r, cc] * w[o, c, di, dj]
                out[o, i, j] = acc
    return out


def test_conv_counts_non_padding_taps():
    y = conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 4, 4))), Tensor(np.zeros(1)), stride=2, padding=1)
    expected = naive_conv2d(np.ones((1, 4, 4)), np.ones((1, 1, 4, 4)), np.zeros(1), 2, 1)
    np.testing.assert_array_equal(expected, [[[9, 9], [9, 9]]])
    np.testing.assert_array_equal(y.data, expected)


def test_conv_zero_input_gives_bias():
    rng = np.random.default_rng(1)
    y = conv2d(Tensor(np.zeros((2, 6, 6))), Tensor(rng.normal(size=(3, 2, 4, 4))), Tensor([0.5, -1.0, 2.0]))
    for o, b in enumerate([0.5, -1.0, 2.0]):
        np.testing.assert_allclose(y.data[o], b)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_matches_nested_loops(stride):
    rng = np.random.default_rng(stride)
    x, w, b = rng.normal(size=(2, 7, 9)), rng.normal(size=(3, 2, 4, 4)), rng.normal(size=3)
    y = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=1)
    np.testing.assert_allclose(y.data, naive_conv2d(x, w, b, stride, 1), rtol=1e-5, atol=1e-5)


def test_conv_channel_mismatch_rejected():
    with pytest.raises(ValueError, match="channel mismatch"):
        conv2d(Tensor(np.zeros((2, 8, 8))), Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros(1)))


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_gradients(stride):
    rng = np.random.default_rng(10 + stride)
    x, w, b = rng.normal(size=(2, 8, 8)), rng.normal(size=(3, 2, 4, 4)), rng.normal(size=3)
    err = gradcheck(lambda x, w, b: conv2d(x, w, b, stride, 1).sum(), [x, w, b])
    assert err < 1e-3


@settings(max_examples=40, deadline=None)
@given(h=st.integers(2, 40), w=st.integers(2, 40), stride=st.sampled_from([1, 2]))
def test_conv_output_shape_formula(h, w, stride):
    y = conv2d(Tensor(np.zeros((1, h, w))), Tensor(np.zeros((2, 1, 4, 4))), Tensor(np.zeros(2)), stride=stride)
    assert y.shape == (2, (h + 2 - 4) // stride + 1, (w + 2 - 4) // stride + 1)
    assert y.shape[1] == conv_output_size(h, 4, stride, 1)


def test_leaky_relu_values_and_gradient():
    y = leaky_relu(Tensor([1.0, -1.0, 0.0]), 0.2)
    np.testing.assert_allclose(y.data, [1.0, -0.2, 0.0])
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 5, 5))
    x[np.abs(x) < 1e-3] = 0.5
    assert gradcheck(lambda t: (leaky_relu(t, 0.2) * t).sum(), [x]) < 1e-3


def test_leaky_relu_subgradient_at_zero_is_positive_branch():
    x = Tensor(np.zeros(3), requires_grad=True)
    backward(leaky_relu(x, 0.2).sum())
    np.testing.assert_array_equal(x.grad, 1.0)


def test_sigmoid_values_and_gradient():
    y = sigmoid(Tensor([0.0, 40.0, -40.0]))
    assert y.data[0] == 0.5
    assert y.data[1] == pytest.approx(1.0, abs=1e-7)
    assert np.all(np.isfinite(y.data)) and y.data[2] >= 0
    rng = np.random.default_rng(3)
    assert gradcheck(lambda t: (sigmoid(t) * t).sum(), [rng.normal(size=(2, 4, 4)) * 3]) < 1e-3


def test_bilinear_exact_at_integers_and_midpoints():
    src = np.arange(2 * 3 * 4, dtype=np.float64).reshape(2, 3, 4)
    rows, cols = np.meshgrid(np.arange(3), np.arange(4), indexing="ij")
    out = bilinear_sample(Tensor(src), np.stack([rows, cols]).astype(float))
    np.testing.assert_array_equal(out.data, src)
    two = Tensor(np.array([[[0.0, 1.0]]]))
    mid = bilinear_sample(two, np.array([[[0.0]], [[0.5]]]))
    assert mid.data[0, 0, 0] == pytest.approx(0.5)


def test_bilinear_invalid_pixels_zero_and_out_of_range_counted():
    src = Tensor(np.ones((1, 3, 3)))
    coords = np.array([[[0.0, 5.0, 1.0]], [[0.0, 1.0, -3.0]]])
    out = bilinear_sample(src, coords, validity=np.array([[True, True, False]]))
    np.testing.assert_array_equal(out.data[0, 0], [1.0, 1.0, 0.0])
    assert out.out_of_range == 1


def test_bilinear_gradient():
    rng = np.random.default_rng(4)
    coords = np.stack([rng.uniform(0, 4, (6, 6)), rng.uniform(0, 4, (6, 6))])
    valid = rng.uniform(size=(6, 6)) > 0.2
    weights = rng.normal(size=(3, 6, 6))
    fn = lambda s: (bilinear_sample(s, coords, valid) * weights).sum()  # noqa: E731
    assert gradcheck(fn, [rng.normal(size=(3, 5, 5))]) < 1e-3


@settings(max_examples=30, deadline=None)
@given(r=st.floats(0, 3), c=st.floats(0, 3), t=st.floats(0, 1))
def test_bilinear_linear_along_axis(r, c, t):
    rng = np.random.default_rng(0)
    src = Tensor(rng.normal(size=(1, 5, 5)))
    c0 = np.floor(c)
    a = bilinear_sample(src, np.array([[[r]], [[c0]]])).data
    b = bilinear_sample(src, np.array([[[r]], [[c0 + 1]]])).data
    m = bilinear_sample(src, np.array([[[r]], [[c0 + t]]])).data
    np.testing.assert_allclose(m, (1 - t) * a + t * b, atol=1e-5)


def test_bce_max_entropy_and_empty_mask():
    loss, n = masked_bce_loss(Tensor(np.full((1, 3, 3), 0.5)), 1, np.ones((1, 3, 3)))
    assert float(loss.data) == pytest.approx(math.log(2), rel=1e-6) and n == 9
    loss, n = masked_bce_loss(Tensor(np.full((1, 3, 3), 0.5)), 0, np.zeros((1, 3, 3)))
    assert float(loss.data) == 0.0 and n == 0


def test_bce_half_mask_matches_scalar_arithmetic():
    scores = np.array([[[0.9, 0.2], [0.6, 0.3]]])
    mask = np.array([[[1, 0], [0, 1]]])
    expected = -(math.log(0.9) + math.log(0.3)) / 2
    loss, _ = masked_bce_loss(Tensor(scores, dtype=np.float64), 1, mask)
    assert float(loss.data) == pytest.approx(expected, rel=1e-12)
    expected0 = -(math.log(0.1) + math.log(0.7)) / 2
    loss0, _ = masked_bce_loss(Tensor(scores, dtype=np.float64), 0, mask)
    assert float(loss0.data) == pytest.approx(expected0, rel=1e-12)


@pytest.mark.parametrize("label", [0, 1])
def test_bce_gradient(label):
    rng = np.random.default_rng(5 + label)
    mask = rng.uniform(size=(1, 4, 4)) > 0.3
    fn = lambda s: masked_bce_loss(s, label, mask)[0]  # noqa: E731
    assert gradcheck(fn, [rng.uniform(0.05, 0.95, (1, 4, 4))]) < 1e-3


def test_l1_loss_values():
    a = np.random.default_rng(6).normal(size=(3, 4, 4))
    assert float(l1_loss(Tensor(a), a)[0].data) == 0.0
    assert float(l1_loss(Tensor(a + 1.0), a)[0].data) == pytest.approx(1.0, rel=1e-6)
    loss, n = l1_loss(Tensor(a), a + 1, np.zeros((4, 4)))
    assert n == 0 and float(loss.data) == 0.0


def test_l1_loss_matches_scalar_loop():
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=(3, 5, 5)), rng.normal(size=(3, 5, 5))
    mask = rng.uniform(size=(5, 5)) > 0.5
    total, count = 0.0, 0
    for c in range(3):
        for i in range(5):
            for j in range(5):
                if mask[i, j]:
                    total += abs(a[c, i, j] - b[c, i, j])
                    count += 1
    loss, n = l1_loss(Tensor(a, dtype=np.float64), b, mask)
    assert n == count
    assert float(loss.data) == total / count


def test_l1_gradient():
    rng = np.random.default_rng(8)
    a, b = rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4, 4))
    assert gradcheck(lambda t: l1_loss(t, b)[0], [a]) < 1e-3


def test_backward_linear_and_square():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    backward((x * x).sum())
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError, match="scalar"):
        backward(Tensor(np.ones(3), requires_grad=True) * 2.0)


def test_backward_twice_doubles():
    rng = np.random.default_rng(9)
    x = Tensor(rng.normal(size=(2, 6, 6)), requires_grad=True)
    w = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
    loss = sigmoid(conv2d(x, w, Tensor(np.zeros(1)))).sum()
    backward(loss)
    first = x.grad.copy(), w.grad.copy()
    backward(loss)
    np.testing.assert_array_equal(x.grad, 2 * first[0])
    np.testing.assert_array_equal(w.grad, 2 * first[1])


def test_composite_graph_gradient():
    rng = np.random.default_rng(11)
    x, w, b = rng.normal(size=(2, 8, 8)), rng.normal(size=(1, 2, 4, 4)) * 0.3, rng.normal(size=1)
    mask = np.ones((1, 4, 4))

    def fn(x, w, b):
        return masked_bce_loss(sigmoid(leaky_relu(conv2d(x, w, b, stride=2), 0.2)), 1, mask)[0]

    assert gradcheck(fn, [x, w, b]) < 1e-3


def test_concat_and_sub_gradients():
    rng = np.random.default_rng(12)
    a, b = rng.normal(size=(2, 3, 3)), rng.normal(size=(1, 3, 3))
    wts = rng.normal(size=(3, 3, 3))
    assert gradcheck(lambda a, b: (concat([a, b - b * 0.5], axis=0) * wts).sum(), [a, b]) < 1e-3


def scalar_adam(p, g, m, v, t, lr, b1, b2, eps):
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mh = m / (1 - b1 ** t)
    vh = v / (1 - b2 ** t)
    return p - lr * mh / (math.sqrt(vh) + eps), m, v


def test_adam_zero_gradient_is_stationary():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    st_ = AdamState(learning_rate=0.1)
    p.grad = np.zeros(2)
    adam_step(p, st_)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert st_.step_count == 1 and p.grad is None


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.array([1.0, 1.0, 1.0]), dtype=np.float64, requires_grad=True)
    st_ = AdamState(learning_rate=1e-3)
    g = np.array([0.5, -3.0, 1e-2])
    p.grad = g.copy()
    adam_step(p, st_)
    expected = 1.0 - 1e-3 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p.data, expected, rtol=0, atol=1e-15)
    np.testing.assert_allclose(np.abs(p.data - 1.0), 1e-3, rtol=1e-5)


def test_adam_two_steps_match_scalar_recurrence():
    p = Tensor(np.array([0.3]), dtype=np.float64, requires_grad=True)
    st_ = AdamState(learning_rate=0.01, beta1=0.5, beta2=0.999, epsilon=1e-8)
    ref, m, v = 0.3, 0.0, 0.0
    for t in (1, 2):
        p.grad = np.array([0.7])
        adam_step(p, st_)
        ref, m, v = scalar_adam(ref, 0.7, m, v, t, 0.01, 0.5, 0.999, 1e-8)
    assert p.data[0] == ref
    assert st_.step_count == 2


def test_adam_zero_lr_is_noop_and_missing_grad_rejected():
    p = Tensor(np.array([0.25, 4.0]), requires_grad=True)
    p.grad = np.array([1.0, -1.0])
    adam_step(p, AdamState(learning_rate=0.0))
    np.testing.assert_array_equal(p.data, [0.25, 4.0])
    with pytest.raises(ValueError):
        adam_step(p, AdamState())


def test_requires_grad_is_captured_when_the_graph_is_built():
    w = Tensor(np.ones((1, 1, 4, 4)), requires_grad=False)
    x = Tensor(np.ones((1, 5, 5)), requires_grad=True)
    loss = conv2d(x, w, Tensor(np.zeros(1))).sum()
    w.requires_grad = True  # unfreezing after the forward pass must not leak gradients
    backward(loss)
    assert w.grad is None and x.grad is not None


def test_bce_on_sigmoid_scores_uses_logits():
    z = np.array([[[-3.0, 0.5], [2.0, -0.2]]])
    mask = np.array([[[1, 1], [0, 1]]])
    for label in (0, 1):
        via_sigmoid, _ = masked_bce_loss(sigmoid(Tensor(z, dtype=np.float64)), label, mask)
        plain, _ = masked_bce_loss(Tensor(1 / (1 + np.exp(-z)), dtype=np.float64), label, mask)
        assert float(via_sigmoid.data) == pytest.approx(float(plain.data), rel=1e-12)
        assert gradcheck(lambda t, lb=label: masked_bce_loss(sigmoid(t), lb, mask)[0], [z]) < 1e-3


def test_bce_gradient_survives_saturated_sigmoid():
    # float32 sigmoid of -120 is exactly 0; the logit form still pushes it up
    z = Tensor(np.array([[[-120.0, 120.0]]], dtype=np.float32), requires_grad=True)
    loss, _ = masked_bce_loss(sigmoid(z), 1, np.ones((1, 1, 2)))
    assert float(loss.data) == pytest.approx(60.0, rel=1e-6)
    backward(loss)
    np.testing.assert_allclose(z.grad, [[[-0.5, 0.0]]], atol=1e-7)
