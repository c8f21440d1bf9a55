import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from odimo import network as nw
from odimo.quant import (
    QuantizationError,
    QuantSpec,
    act_codes,
    fake_quantize_activations,
    fake_quantize_weights,
    fold_bn,
    truncate_activation,
    truncate_lsb,
    weight_codes,
)
from odimo.tensor import Tensor


def q(bits, s=0.0):
    return QuantSpec(bits, Tensor(np.float64(s), requires_grad=True))


def fq(values, bits, s=0.0):
    return fake_quantize_weights(Tensor(np.asarray(values, dtype=np.float64)), q(bits, s)).data


def test_ternary_examples():
    np.testing.assert_array_equal(fq([0.7, 0.3, -2.0], 2), [1.0, 0.0, -1.0])
    out = fq([0.7, 0.3, -2.0, 0.51], 2, s=np.log(3.0))
    np.testing.assert_allclose(out, [0.0, 0.0, -3.0, 0.0])


def test_zero_is_fixed_point():
    for bits in (2, 3, 4, 8):
        assert fq([0.0], bits, 0.4)[0] == 0.0
    assert fake_quantize_activations(Tensor([0.0]), 7).data[0] == 0.0


def test_eight_bit_example():
    assert fq([0.5], 8)[0] == pytest.approx(64 / 127)


def test_bitwidth_below_two_rejected():
    with pytest.raises(QuantizationError):
        QuantSpec(1)


def test_activation_seven_bit_example():
    out = fake_quantize_activations(Tensor(np.array([0.5])), 7, 0.0).data
    assert out[0] == pytest.approx(64 / 127)


def test_eight_bit_then_truncate_matches_seven_bit_grid():
    # all 256 codes of an 8-bit activation with range [0, 1]
    codes8 = np.arange(256)
    x = codes8 / 255.0
    q8 = fake_quantize_activations(Tensor(x), 8, 0.0)
    np.testing.assert_allclose(q8.data, x, atol=1e-12)
    t = truncate_activation(q8, 8, 0.0, 1).data
    np.testing.assert_allclose(t, (codes8 // 2) * 2 / 255.0, atol=1e-12)
    # a 7-bit converter with the same step covers [0, 254/255]; on its grid both paths agree
    direct7 = fake_quantize_activations(Tensor(x), 7, np.log(254 / 255)).data
    even = codes8 % 2 == 0
    np.testing.assert_allclose(t[even], direct7[even], atol=1e-12)
    np.testing.assert_array_equal(truncate_lsb(codes8), codes8 // 2)


def test_truncate_lsb_examples_and_checks():
    np.testing.assert_array_equal(truncate_lsb([255, 0, 129]), [127, 0, 64])
    with pytest.raises(QuantizationError):
        truncate_lsb([3.5])
    with pytest.raises(QuantizationError):
        truncate_lsb([-2])


floats = st.floats(-4, 4, allow_nan=False, width=64)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 30), elements=floats), st.sampled_from([2, 3, 4, 8]), st.floats(-2, 1))
def test_idempotent_and_on_grid(x, bits, s):
    spec = q(bits, s)
    once = fake_quantize_weights(Tensor(x), spec)
    twice = fake_quantize_weights(once, spec)
    np.testing.assert_array_equal(once.data, twice.data)
    levels = 2 ** (bits - 1) - 1
    k = once.data / (np.exp(s) / levels)
    np.testing.assert_allclose(k, np.rint(k), atol=1e-9)
    assert np.all(np.abs(np.rint(k)) <= levels)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.integers(1, 30), elements=st.floats(-3, 3, width=32)), st.sampled_from([2, 8]))
def test_idempotent_float32(x, bits):
    spec = QuantSpec(bits, Tensor(np.float32(-0.3), requires_grad=True))
    once = fake_quantize_weights(Tensor(x), spec)
    np.testing.assert_array_equal(fake_quantize_weights(once, spec).data, once.data)


def test_ternary_values_are_three_levels():
    x = np.random.default_rng(0).normal(size=1000)
    s = 0.3
    vals = set(np.unique(fq(x, 2, s)).round(12))
    assert vals == {round(-np.exp(s), 12), 0.0, round(np.exp(s), 12)}


def test_straight_through_gradient_rule():
    x = Tensor(np.array([-3.0, -0.9, -0.2, 0.0, 0.4, 0.99, 1.5]), requires_grad=True)
    spec = q(8, 0.0)
    out = fake_quantize_weights(x, spec)
    g = np.arange(1.0, 8.0)
    (out * Tensor(g)).sum().backward()
    inside = np.abs(x.data) <= 1.0
    np.testing.assert_array_equal(x.grad, g * inside)
    expected_s = np.sum(g * (out.data - x.data * inside))
    assert spec.log_scale.grad == pytest.approx(expected_s)


def test_activation_gradient_rule():
    x = Tensor(np.array([-0.5, 0.2, 0.7, 2.5]), requires_grad=True)
    r = Tensor(np.float64(0.0), requires_grad=True)
    out = fake_quantize_activations(x, 8, r)
    out.sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 1.0, 0.0])
    assert r.grad == pytest.approx(np.sum(out.data - x.data * np.array([0, 1, 1, 0])))


def test_weight_codes_match_fake_quant():
    x = np.random.default_rng(1).normal(size=50)
    codes, step = weight_codes(x, 8, 0.2)
    np.testing.assert_allclose(codes * step, fq(x, 8, 0.2), rtol=1e-12)
    codes, step = act_codes(np.abs(x), 8, 0.2)
    assert codes.max() <= 255 and codes.min() >= 0


# -- batch-norm folding ---------------------------------------------------------


def test_fold_bn_identity_and_doubling():
    w = np.random.default_rng(2).normal(size=(3, 2, 3, 3))
    b = np.zeros(3)
    w1, b1 = fold_bn(w, b, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), eps=0.0)
    np.testing.assert_array_equal(w1, w)
    w2, _ = fold_bn(w, b, 2 * np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), eps=0.0)
    np.testing.assert_array_equal(w2, 2 * w)
    with pytest.raises(QuantizationError):
        fold_bn(w, b, np.ones(3), np.zeros(3), np.zeros(3), np.zeros(3), eps=0.0)


def _random_bn(net, rng):
    for node in net.nodes:
        if node.op == "bn":
            c = net.params[f"{node.name}.gamma"].shape[0]
            net.params[f"{node.name}.gamma"] = Tensor(rng.uniform(0.5, 2.0, c), requires_grad=True)
            net.params[f"{node.name}.beta"] = Tensor(rng.normal(size=c), requires_grad=True)
            net.buffers[f"{node.name}.running_mean"] = rng.normal(size=c)
            net.buffers[f"{node.name}.running_var"] = rng.uniform(0.2, 3.0, c)


def test_fold_bn_preserves_network_function():
    rng = np.random.default_rng(3)
    net = nw.build(nw.toy_resnet(), seed=0, dtype=np.float64)
    for k in list(net.params):
        if k.endswith(".bias"):
            net.params[k] = Tensor(rng.normal(size=net.params[k].shape), requires_grad=True)
    _random_bn(net, rng)
    folded = net.fold_bn()
    assert not any(n.op == "bn" for n in folded.nodes)
    x = Tensor(rng.uniform(0, 1, (16, 1, 8, 8)))
    ref = nw.run(net, x).data
    got = nw.run(folded, x).data
    assert np.max(np.abs(ref - got)) < 1e-5


def test_fold_bn_preserves_function_float32():
    rng = np.random.default_rng(4)
    net = nw.build(nw.toy_resnet(), seed=1)
    _random_bn(net, rng)
    folded = net.fold_bn()
    x = Tensor(rng.uniform(0, 1, (8, 1, 8, 8)).astype(np.float32))
    assert np.max(np.abs(nw.run(net, x).data - nw.run(folded, x).data)) < 1e-4
