"""Tests for the scalar-field MLP: shapes, init bounds, and gradients
against central finite differences (batches rejected when any ReLU
pre-activation sits within 1e-5 of its kink)."""

import numpy as np
import pytest

from composdf.decoder import HIDDEN_WIDTH, DecoderGrads, SdfDecoder


def make_decoder(rng, dim=8, dtype=np.float64):
    return SdfDecoder.random(dim, rng, dtype=dtype)


def clear_of_kinks(cache, margin=1e-5):
    _, h1, _, h2, _ = cache
    return min(np.min(np.abs(h1)), np.min(np.abs(h2))) > margin


def sample_clear_batch(dec, rng, n=16):
    for _ in range(50):
        z = rng.standard_normal((n, dec.dim))
        _, cache = dec.forward(z)
        if clear_of_kinks(cache):
            return z
    raise AssertionError("could not sample a kink-free batch")


def central_diff(f, arr, i, h=1e-6):
    orig = arr.flat[i]
    arr.flat[i] = orig + h
    fp = f()
    arr.flat[i] = orig - h
    fm = f()
    arr.flat[i] = orig
    return (fp - fm) / (2.0 * h)


def test_forward_shapes_and_dtype():
    rng = np.random.default_rng(50)
    dec = SdfDecoder.random(8, rng, dtype=np.float32)
    z = rng.standard_normal((10, 8)).astype(np.float32)
    phi, cache = dec.forward(z)
    assert phi.shape == (10,) and phi.dtype == np.float32
    grads, gz = dec.backward(cache, np.ones(10, dtype=np.float32))
    assert gz.shape == (10, 8) and gz.dtype == np.float32
    assert grads.w1.shape == dec.w1.shape


def test_init_is_he_uniform_bounded_with_zero_biases():
    rng = np.random.default_rng(51)
    dec = SdfDecoder.random(8, rng, dtype=np.float64)
    assert np.max(np.abs(dec.w1)) <= np.sqrt(6.0 / 8)
    assert np.max(np.abs(dec.w2)) <= np.sqrt(6.0 / HIDDEN_WIDTH)
    assert np.max(np.abs(dec.w3)) <= np.sqrt(6.0 / HIDDEN_WIDTH)
    assert np.all(dec.b1 == 0) and np.all(dec.b2 == 0) and np.all(dec.b3 == 0)
    # near-full use of the range, not a narrower law
    assert np.max(np.abs(dec.w2)) > 0.8 * np.sqrt(6.0 / HIDDEN_WIDTH)


def test_init_is_deterministic_under_seed():
    a = SdfDecoder.random(8, np.random.default_rng(7))
    b = SdfDecoder.random(8, np.random.default_rng(7))
    for (_, x), (_, y) in zip(a.param_arrays(), b.param_arrays()):
        np.testing.assert_array_equal(x, y)


def test_param_count_matches_hand_count():
    rng = np.random.default_rng(52)
    dec = SdfDecoder.random(8, rng)
    assert dec.n_params == 8 * 32 + 32 + 32 * 32 + 32 + 32 * 1 + 1 == 1377
    assert dec.byte_size() == 5508


def test_zero_weights_output_bias_only():
    dec = SdfDecoder(
        np.zeros((8, 4)), np.zeros(4), np.zeros((4, 4)), np.zeros(4),
        np.zeros((4, 1)), np.array([0.37]),
    )
    phi, _ = dec.forward(np.random.default_rng(0).standard_normal((5, 8)))
    np.testing.assert_allclose(phi, 0.37, atol=1e-15)


def test_shape_validation():
    with pytest.raises(ValueError):
        SdfDecoder(np.zeros((8, 4)), np.zeros(5), np.zeros((4, 4)), np.zeros(4),
                   np.zeros((4, 1)), np.zeros(1))
    with pytest.raises(ValueError):
        SdfDecoder(np.zeros((8, 4)), np.zeros(4), np.zeros((4, 4)), np.zeros(4),
                   np.zeros((4, 2)), np.zeros(2))


def test_parameter_gradients_match_finite_differences():
    rng = np.random.default_rng(53)
    dec = make_decoder(rng)
    z = sample_clear_batch(dec, rng)
    proj = rng.standard_normal(len(z))

    def loss():
        phi, _ = dec.forward(z)
        return float(np.sum(phi * proj))

    _, cache = dec.forward(z)
    grads, _ = dec.backward(cache, proj.copy())
    for name, arr in dec.param_arrays():
        g = getattr(grads, name)
        for i in rng.choice(arr.size, size=min(30, arr.size), replace=False):
            fd = central_diff(loss, arr, i)
            assert abs(fd - g.flat[i]) <= 1e-6 * max(1.0, abs(fd)), (name, i)


def test_input_gradients_match_finite_differences():
    rng = np.random.default_rng(54)
    dec = make_decoder(rng)
    z = sample_clear_batch(dec, rng, n=8)
    proj = rng.standard_normal(len(z))

    def loss():
        phi, _ = dec.forward(z)
        return float(np.sum(phi * proj))

    _, cache = dec.forward(z)
    _, gz = dec.backward(cache, proj.copy())
    for i in rng.choice(z.size, size=40, replace=False):
        fd = central_diff(loss, z, i)
        assert abs(fd - gz.flat[i]) <= 1e-6 * max(1.0, abs(fd))


def test_grads_accumulate_with_add_():
    rng = np.random.default_rng(55)
    dec = make_decoder(rng)
    z = rng.standard_normal((6, 8))
    _, cache = dec.forward(z)
    g1, _ = dec.backward(cache, np.ones(6))
    g2, _ = dec.backward(cache, np.ones(6))
    total = DecoderGrads.zeros_like(dec).add_(g1).add_(g2)
    np.testing.assert_allclose(total.w1, 2 * g1.w1, atol=1e-12)
