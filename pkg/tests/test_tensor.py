import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import gradcheck, naive_attention, naive_conv, ulp_close
from mcva import tensor as T
from mcva.errors import EmptyKeySet, NumericalError, ShapeError
from mcva.tensor import Tape, Tensor

TOL = 1e-4


def p64(rng, *shape, lo=None):
    a = rng.standard_normal(shape)
    if lo is not None:  # keep away from kinks
        a = np.where(np.abs(a) < lo, np.sign(a + 1e-12) * lo, a)
    return Tensor(a, requires_grad=True)


def weighted(out, rng):
    """Scalar sum(out * r) so every output entry carries a distinct weight."""
    r = Tensor(np.random.default_rng(99).standard_normal(out.shape))
    return T.sum_(out * r)


# ------------------------------------------------------------------ backward basics


def test_square_gradient_at_three():
    x = Tensor(np.array(3.0), requires_grad=True)
    with Tape() as tape:
        y = x * x
    assert tape.backward(y)[x] == pytest.approx(6.0)


def test_mse_at_minimum_has_zero_gradient():
    rng = np.random.default_rng(0)
    pred = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    target = Tensor(pred.data.copy())
    with Tape() as tape:
        loss = T.mean(T.square(pred - target))
    assert np.all(tape.backward(loss)[pred] == 0)


def test_non_scalar_loss_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ShapeError):
        tape.backward(y)


def test_unreached_tensor_gets_zero_gradient():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones((4,)), requires_grad=True)
    with Tape() as tape:
        loss = T.sum_(a)
    g = tape.backward(loss)
    assert g[b].shape == (4,) and np.all(g[b] == 0)
    assert g[a].shape == a.shape


def test_gradient_shapes_match_tensor_shapes():
    rng = np.random.default_rng(1)
    a = p64(rng, 3, 4)
    b = p64(rng, 4)
    with Tape() as tape:
        loss = T.sum_(T.tanh(a + b) * a)
    g = tape.backward(loss)
    assert g[a].shape == a.shape and g[b].shape == b.shape


def test_no_recording_outside_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    y = x * 2.0
    assert y.parents == () and not y.requires_grad


def test_backward_replay_is_deterministic():
    rng = np.random.default_rng(2)
    x = p64(rng, 2, 3, 6, 6)
    w = p64(rng, 4, 3, 3, 3)
    with Tape() as tape:
        loss = T.sum_(T.gelu(T.conv2d(x, w, stride=2)))
    g1 = tape.backward(loss)
    g2 = tape.backward(loss)
    assert np.array_equal(g1[x], g2[x]) and np.array_equal(g1[w], g2[w])


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    with Tape() as tape:
        y = x * x
        loss = T.sum_(y + y * x)
    # loss = x^2 + x^3, derivative 2x + 3x^2 = 16 at x = 2
    assert tape.backward(loss)[x][0] == pytest.approx(16.0)


def test_non_finite_forward_raises():
    with pytest.raises(NumericalError):
        T.reciprocal(Tensor(np.zeros(2)))


# ------------------------------------------------------------------ gradient checks


UNARY = {
    "neg": T.neg,
    "square": T.square,
    "abs": T.abs_,
    "relu": T.relu,
    "gelu": T.gelu,
    "sigmoid": T.sigmoid,
    "tanh": T.tanh,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradcheck(name):
    rng = np.random.default_rng(3)
    x = p64(rng, 3, 4, lo=0.05)
    assert gradcheck(lambda: weighted(UNARY[name](x), rng), [x]) < TOL


def test_sqrt_reciprocal_gradcheck():
    rng = np.random.default_rng(4)
    x = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
    assert gradcheck(lambda: weighted(T.sqrt(x), rng), [x]) < TOL
    assert gradcheck(lambda: weighted(T.reciprocal(x), rng), [x]) < TOL


def test_broadcast_add_mul_gradcheck():
    rng = np.random.default_rng(5)
    a, b, c = p64(rng, 2, 3, 4), p64(rng, 4), p64(rng, 3, 1)
    assert gradcheck(lambda: weighted(a * b + c - a, rng), [a, b, c]) < TOL


def test_reductions_and_shaping_gradcheck():
    rng = np.random.default_rng(6)
    a = p64(rng, 2, 3, 4)

    def f():
        s = T.sum_(a, axis=1) * T.mean(a, axis=(0, 2), keepdims=True).reshape(3, 1)[0]
        t = T.transpose(T.reshape(a, (6, 4)), (1, 0))
        return weighted(s, rng) + weighted(t[1:3], rng) + T.mean(a)

    assert gradcheck(f, [a]) < TOL


def test_concat_mask_fill_gradcheck():
    rng = np.random.default_rng(7)
    a, b = p64(rng, 2, 3), p64(rng, 2, 5)
    mask = rng.random((2, 8)) > 0.4
    assert gradcheck(lambda: weighted(T.mask_fill(T.concat([a, b], axis=1), mask), rng), [a, b]) < TOL


def test_matmul_batched_and_folded_gradcheck():
    rng = np.random.default_rng(8)
    a, b, w = p64(rng, 2, 3, 4), p64(rng, 2, 4, 5), p64(rng, 4, 6)
    assert gradcheck(lambda: weighted(T.matmul(a, b), rng), [a, b]) < TOL
    assert gradcheck(lambda: weighted(T.matmul(a, w), rng), [a, w]) < TOL


def test_softmax_with_mask_gradcheck():
    rng = np.random.default_rng(9)
    a = p64(rng, 3, 5)
    mask = np.array([[1, 0, 1, 1, 0], [1, 1, 1, 1, 1], [0, 0, 1, 0, 0]], dtype=bool)
    assert gradcheck(lambda: weighted(T.softmax(a, axis=-1, mask=mask), rng), [a]) < TOL


def test_layer_norm_gradcheck():
    rng = np.random.default_rng(10)
    x, g, b = p64(rng, 3, 2, 6), p64(rng, 6), p64(rng, 6)
    assert gradcheck(lambda: weighted(T.layer_norm(x, g, b), rng), [x, g, b]) < TOL


def test_attention_gradcheck():
    rng = np.random.default_rng(11)
    q, k, v = p64(rng, 2, 3, 4), p64(rng, 2, 5, 4), p64(rng, 2, 5, 3)
    mask = rng.random((2, 1, 5)) > 0.3
    mask[..., 0] = True
    assert gradcheck(lambda: weighted(T.scaled_dot_attention(q, k, v, mask), rng), [q, k, v]) < TOL


@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_gradcheck(stride):
    rng = np.random.default_rng(12 + stride)
    x, w, b = p64(rng, 2, 3, 5, 6), p64(rng, 4, 3, 3, 3), p64(rng, 4)
    assert gradcheck(lambda: weighted(T.conv2d(x, w, b, stride=stride), rng), [x, w, b]) < TOL


def test_crop_patch_gradcheck():
    rng = np.random.default_rng(14)
    maps = p64(rng, 3, 6, 7)
    centers = np.array([[2.3, 3.6], [0.2, -0.7], [5.5, 6.25]])
    assert gradcheck(lambda: weighted(T.crop_patch(maps, centers, 5), rng), [maps]) < TOL


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 5), st.integers(0, 10_000))
def test_random_shape_gradcheck(m, n, d, seed):
    rng = np.random.default_rng(seed)
    x, w = p64(rng, m, d), p64(rng, d, n)
    g, b = p64(rng, n), p64(rng, n)

    def f():
        h = T.layer_norm(T.matmul(x, w), g, b) if n > 2 else T.matmul(x, w)
        return weighted(T.tanh(h) * T.sigmoid(h), rng)

    # a small step: with eps = 1e-3 the truncation error of near-degenerate
    # layer norms (d = 1) alone can exceed the tolerance
    assert gradcheck(f, [x, w, g, b], eps=1e-6) < TOL


# ------------------------------------------------------------------ forward examples and oracles


def test_conv_identity_kernel_example():
    out = T.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)), stride=2)
    assert out.shape == (1, 1, 1) and out.data[0, 0, 0] == 1.0


def test_conv_zero_input_example():
    rng = np.random.default_rng(0)
    out = T.conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(rng.standard_normal((1, 1, 3, 3))),
                   Tensor(np.zeros(1)), stride=2)
    assert np.all(out.data == 0)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


@pytest.mark.parametrize("h,w,stride", [(5, 5, 2), (7, 4, 2), (6, 6, 1), (1, 3, 2)])
def test_conv_output_extent_is_ceil(h, w, stride):
    out = T.conv2d(Tensor(np.ones((1, h, w))), Tensor(np.ones((2, 1, 3, 3))), stride=stride)
    assert out.shape == (2, -(-h // stride), -(-w // stride))


def test_conv_random_2x5x5_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x, w, b = rng.standard_normal((2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2).data
    assert np.allclose(got, naive_conv(x, w, b, 2), rtol=1e-13, atol=1e-13)


def test_attention_single_key_returns_value():
    rng = np.random.default_rng(2)
    v = rng.standard_normal((1, 3))
    out = T.scaled_dot_attention(Tensor(rng.standard_normal((4, 2))), Tensor(rng.standard_normal((1, 2))),
                                 Tensor(v)).data
    assert np.allclose(out, np.repeat(v, 4, axis=0), rtol=0, atol=1e-15)


def test_attention_identical_keys_average_values():
    rng = np.random.default_rng(3)
    k = np.repeat(rng.standard_normal((1, 3)), 5, axis=0)
    v = rng.standard_normal((5, 2))
    out = T.scaled_dot_attention(Tensor(rng.standard_normal((2, 3))), Tensor(k), Tensor(v)).data
    assert np.allclose(out, v.mean(axis=0)[None].repeat(2, 0), atol=1e-15)


def test_attention_random_2x3x4_matches_loop_oracle():
    rng = np.random.default_rng(4)
    q, k, v = rng.standard_normal((2, 4)), rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    got = T.scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v)).data
    assert np.allclose(got, naive_attention(q, k, v), rtol=1e-13, atol=1e-14)


def test_attention_empty_key_set():
    with pytest.raises(EmptyKeySet):
        T.scaled_dot_attention(Tensor(np.ones((2, 3))), Tensor(np.ones((0, 3))), Tensor(np.ones((0, 2))))


def test_attention_dim_mismatch():
    with pytest.raises(ShapeError):
        T.scaled_dot_attention(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))), Tensor(np.ones((4, 2))))


def test_softmax_large_logits_stable():
    out = T.softmax(Tensor(np.array([[1e4, 1e4 - 1.0, -1e4]])))
    assert np.all(np.isfinite(out.data)) and out.data.sum() == pytest.approx(1.0)


def test_dyadic_inputs_make_conv_bitwise_exact():
    rng = np.random.default_rng(5)
    for _ in range(20):
        x = rng.integers(-64, 65, (3, 6, 7)) / 16
        w = rng.integers(-64, 65, (2, 3, 3, 3)) / 16
        b = rng.integers(-64, 65, 2) / 16
        for s in (1, 2):
            assert np.array_equal(T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=s).data, naive_conv(x, w, b, s))


def test_matmul_within_4ulps_of_exact_sum():
    import math

    rng = np.random.default_rng(6)
    for _ in range(30):
        m, n, p = rng.integers(1, 9, 3)
        a, b = rng.standard_normal((m, n)), rng.standard_normal((n, p))
        got = T.matmul(Tensor(a), Tensor(b)).data
        exact = np.array([[math.fsum(a[i, k] * b[k, j] for k in range(n)) for j in range(p)] for i in range(m)])
        scale = np.abs(a) @ np.abs(b)
        assert np.all(np.abs(got - exact) <= 4 * np.spacing(scale))


def test_ulp_helper_sanity():
    assert ulp_close(1.0, np.nextafter(1.0, 2.0))
    assert not ulp_close(1.0, 1.0 + 1e-12)
