import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flipfed import checkpoint
from flipfed.errors import DimensionError, NumericError
from flipfed.nncore import (Architecture, LossSpec, ModelParams, conv2d, dense, flat_index, flatten,
                            forward_with_trace, init_params, kl_divergence, loss_and_grad, sgd_step,
                            softmax, unflatten)

from conftest import finite_difference, small_conv_arch, small_mlp_arch


def naive_conv(x, w, b):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    out = np.zeros((n, f, h - kh + 1, wd - kw + 1))
    for i in range(n):
        for o in range(f):
            for r in range(h - kh + 1):
                for s in range(wd - kw + 1):
                    out[i, o, r, s] = np.sum(x[i, :, r:r + kh, s:s + kw] * w[o]) + b[o]
    return out


def test_identity_dense_layer():
    arch = Architecture((2,), (dense(2, activation="identity"),))
    p = ModelParams([np.eye(2)], [np.zeros(2)])
    logits, trace = forward_with_trace(p, arch, np.array([[1.0, 2.0]]))
    np.testing.assert_array_equal(logits, [[1.0, 2.0]])
    np.testing.assert_array_equal(trace.post[0], [[1.0, 2.0]])


def test_zero_weights_give_zero_logits(rng):
    arch = small_conv_arch()
    p = init_params(arch, rng) * 0.0
    logits, _ = forward_with_trace(p, arch, rng.uniform(size=(3, 1, 6, 6)))
    assert np.all(logits == 0)


def test_forward_matches_direct_math(rng):
    arch = small_conv_arch()
    p = init_params(arch, rng)
    for b in p.biases:
        b[:] = rng.normal(size=b.shape)
    x = rng.uniform(size=(4, 1, 6, 6))
    z1 = naive_conv(x, p.weights[0], p.biases[0])
    a1 = np.maximum(z1, 0).reshape(4, -1)
    a2 = np.maximum(a1 @ p.weights[1].T + p.biases[1], 0)
    expected = a2 @ p.weights[2].T + p.biases[2]
    logits, trace = forward_with_trace(p, arch, x)
    np.testing.assert_allclose(trace.pre[0], z1, atol=1e-12)
    np.testing.assert_allclose(logits, expected, atol=1e-12)


def test_shape_mismatch_raises(conv_model):
    arch, p = conv_model
    with pytest.raises(DimensionError):
        forward_with_trace(p, arch, np.zeros((2, 1, 5, 5)))


def test_incompatible_architecture():
    with pytest.raises(DimensionError):
        Architecture((4,), (conv2d(2),))
    with pytest.raises(DimensionError):
        Architecture((1, 2, 2), (conv2d(2, (3, 3)),))


def test_relu_trace_consistency(conv_model, rng):
    arch, p = conv_model
    _, trace = forward_with_trace(p, arch, rng.uniform(size=(5, 1, 6, 6)))
    for layer, z, a in zip(arch.layers, trace.pre, trace.post):
        if layer.activation == "relu":
            np.testing.assert_array_equal(a, np.maximum(z, 0))


def _composite(arch, rng, lam=0.7, alpha=0.3):
    x_t = rng.uniform(size=(4,) + arch.input_shape)
    return LossSpec("backdoor_composite", lam=lam, alpha=alpha, anchor=init_params(arch, rng),
                    triggered_x=x_t, target_label=2)


@pytest.mark.parametrize("kind", ["cross_entropy", "backdoor_composite", "kl_distill", "trigger_activation"])
@pytest.mark.parametrize("make_arch", [small_conv_arch, small_mlp_arch])
def test_gradients_match_finite_differences(kind, make_arch):
    rng = np.random.default_rng(7)
    arch = make_arch()
    p = init_params(arch, rng)
    for b in p.biases:
        b[:] = rng.normal(scale=0.1, size=b.shape)
    x = rng.uniform(size=(4,) + arch.input_shape)
    y = np.array([0, 1, 2, 1])
    spec = {
        "cross_entropy": LossSpec(),
        "backdoor_composite": _composite(arch, rng),
        "kl_distill": LossSpec("kl_distill", teacher_logits=rng.normal(size=(4, 3)), temperature=2.0),
        "trigger_activation": LossSpec("trigger_activation", triggered_x=rng.uniform(size=x.shape)),
    }[kind]
    _, g = loss_and_grad(p, arch, x, y, spec)
    num = finite_difference(lambda f: loss_and_grad(unflatten(f, arch), arch, x, y, spec)[0], flatten(p))
    ana = flatten(g)
    assert np.max(np.abs(num - ana)) <= 1e-4 * max(1.0, np.max(np.abs(ana)))


def test_proximal_term_vanishes_at_anchor(conv_model, rng):
    arch, p = conv_model
    spec = LossSpec("backdoor_composite", alpha=2.0, anchor=p.copy())
    x = rng.uniform(size=(3, 1, 6, 6))
    y = np.array([0, 1, 2])
    assert loss_and_grad(p, arch, x, y, spec)[0] == loss_and_grad(p, arch, x, y, LossSpec())[0]


def test_degenerate_composite_is_cross_entropy(conv_model, rng):
    arch, p = conv_model
    x = rng.uniform(size=(3, 1, 6, 6))
    y = np.array([0, 1, 2])
    spec = LossSpec("backdoor_composite", lam=0.0, alpha=0.0)
    v1, g1 = loss_and_grad(p, arch, x, y, spec)
    v2, g2 = loss_and_grad(p, arch, x, y, LossSpec())
    assert v1 == v2 and g1.equal(g2)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_reports_layer(conv_model, rng):
    arch, p = conv_model
    p.weights[1][0, 0] = np.inf
    with pytest.raises(NumericError) as info:
        loss_and_grad(p, arch, rng.uniform(size=(2, 1, 6, 6)), np.array([0, 1]), LossSpec())
    assert info.value.where == 1


def test_bad_labels_rejected(conv_model, rng):
    arch, p = conv_model
    with pytest.raises(DimensionError):
        loss_and_grad(p, arch, rng.uniform(size=(2, 1, 6, 6)), np.array([0, 3]), LossSpec())


def test_sgd_step_arithmetic():
    p = ModelParams([np.array([[1.0]])], [np.array([1.0])])
    g = ModelParams([np.array([[2.0]])], [np.array([2.0])])
    assert sgd_step(p, g, 0.5).equal(ModelParams([np.array([[0.0]])], [np.array([0.0])]))
    assert sgd_step(p, g, 0.0).equal(p)


def test_sgd_decreases_convex_quadratic():
    # single linear unit with squared-error surrogate via the proximal term only
    arch = Architecture((2,), (dense(1, activation="identity"),))
    anchor = ModelParams([np.array([[3.0, -1.0]])], [np.array([0.5])])
    p = ModelParams([np.zeros((1, 2))], [np.zeros(1)])
    spec = LossSpec("backdoor_composite", alpha=1.0, anchor=anchor)
    x, y = np.zeros((1, 2)), np.array([0])
    base = loss_and_grad(p, arch, x, y, LossSpec())[0]  # constant CE part (single class)
    losses = []
    for _ in range(20):
        value, g = loss_and_grad(p, arch, x, y, spec)
        losses.append(value - base)
        p = sgd_step(p, g, 0.1)
    # closed form: ||theta - anchor||^2 shrinks by (1 - 2 * 0.1)^2 per step
    d0 = anchor.sq_norm()
    np.testing.assert_allclose(losses, [d0 * 0.64 ** k for k in range(20)], rtol=1e-10)
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_flatten_roundtrip_and_norms(conv_model, rng):
    arch, p = conv_model
    assert unflatten(flatten(p), arch).equal(p)
    q = init_params(arch, rng)
    per_layer = sum(np.sum((a - b) ** 2) for a, b in zip(p.arrays(), q.arrays()))
    assert np.isclose(np.sum((flatten(p) - flatten(q)) ** 2), per_layer)
    with pytest.raises(DimensionError):
        unflatten(flatten(p)[:-1], arch)


def test_flat_index_contract():
    arch = Architecture((1, 3, 3), (conv2d(2, (2, 2)), dense(2, activation="identity")))
    p = init_params(arch, np.random.default_rng(0))
    flat = flatten(p)
    k = 0
    for j, (w, b) in enumerate(zip(p.weights, p.biases)):
        for name, arr in (("weight", w), ("bias", b)):
            for idx in np.ndindex(arr.shape):
                assert flat_index(arch, k) == (j, name, idx)
                assert flat[k] == arr[idx]
                k += 1
    assert k == flat.size


def test_kl_divergence_cases():
    assert kl_divergence([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 0.0
    assert kl_divergence([1.0, 2.0], [11.0, 12.0]) == pytest.approx(0.0, abs=1e-15)
    p = np.exp([1.0, 0.0]) / np.exp([1.0, 0.0]).sum()
    q = np.exp([0.0, 1.0]) / np.exp([0.0, 1.0]).sum()
    assert kl_divergence([1.0, 0.0], [0.0, 1.0]) == pytest.approx(float(np.sum(p * np.log(p / q))), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=2, max_size=6), st.integers(0, 10_000))
def test_kl_nonnegative(p, seed):
    q = np.random.default_rng(seed).normal(scale=5, size=len(p))
    assert kl_divergence(p, q) >= 0.0


def test_softmax_is_stable():
    s = softmax(np.array([[1000.0, 1001.0]]))
    assert np.all(np.isfinite(s)) and np.isclose(s.sum(), 1.0)


def test_checkpoint_roundtrip_is_bit_exact(tmp_path, conv_model):
    arch, p = conv_model
    path = tmp_path / "model.ckpt"
    checkpoint.save_model(path, p, arch, round=3)
    q, arch2, meta = checkpoint.load_model(path)
    assert arch2 == arch and meta == {"round": 3}
    assert flatten(q).tobytes() == flatten(p).tobytes()
