import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flipfed.attack import (DIRECTIONAL, DIRECTIONLESS, F3BA, F3BA_TRIGOPT, TRAIN_ONLY, AttackConfig, Attacker,
                            activation_difference, baseline_rescale_update, candidate_count, f3ba_update,
                            first_layer_sign_source, flip_following_layers, flip_weights, importance_scores,
                            layer_fractions, layer_sign_source, optimize_trigger, select_candidates,
                            trigger_gradient)
from flipfed.datagen import Dataset, Trigger, apply_trigger, corner_trigger, gen_blobs_dataset
from flipfed.errors import ConfigError, DimensionError
from flipfed.federation import Client, GlobalState, RoundConfig, local_train_benign
from flipfed.nncore import Architecture, ModelParams, conv2d, dense, forward, forward_with_trace, init_params

from conftest import small_conv_arch, small_mlp_arch


def _mp(*ws):
    return ModelParams([np.asarray(w, dtype=float) for w in ws], [np.zeros(np.shape(w)[0]) for w in ws])


def _client(n=40, seed=0, cid=0):
    return Client(cid, gen_blobs_dataset(3, n, (1, 6, 6), 0.2, seed), True)


# -- importance scores and selection ----------------------------------------

def test_importance_examples():
    cur, prev = _mp([[2.0, -1.0]]), _mp([[1.0, -0.5]])
    np.testing.assert_array_equal(importance_scores(cur, prev)[0], [[2.0, 0.5]])
    np.testing.assert_array_equal(importance_scores(_mp([[0.5]]), _mp([[1.0]]))[0], [[-0.25]])


def test_directionless_is_absolute(rng):
    cur, prev = _mp(rng.normal(size=(4, 5))), _mp(rng.normal(size=(4, 5)))
    d = importance_scores(cur, prev, DIRECTIONAL)[0]
    np.testing.assert_array_equal(importance_scores(cur, prev, DIRECTIONLESS)[0], np.abs(d))


def test_scores_without_history_are_seeded():
    cur = _mp(np.ones((3, 3)))
    a = importance_scores(cur, None, rng=np.random.default_rng(5))[0]
    b = importance_scores(cur, None, rng=np.random.default_rng(5))[0]
    assert np.array_equal(a, b) and a.shape == (3, 3)
    with pytest.raises(DimensionError):
        importance_scores(cur, _mp(np.ones((2, 3))))


def test_selection_examples():
    assert select_candidates([np.array([5.0, -1.0, 3.0, 0.0])], 0.25)[0].tolist() == [False, True, False, False]
    assert select_candidates([np.zeros(4)], 0.5)[0].tolist() == [True, True, False, False]
    assert select_candidates([np.zeros(1000)], 0.0001)[0].sum() == 1
    with pytest.raises(ConfigError):
        select_candidates([np.zeros(4)], 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 200), st.floats(0.001, 1.0))
def test_selection_matches_sort_oracle(seed, size, frac):
    s = np.random.default_rng(seed).integers(-3, 3, size=size).astype(float)
    mask = select_candidates([s], frac)[0]
    k = max(1, int(round(frac * size)))
    oracle = sorted(range(size), key=lambda i: (s[i], i))[:k]
    assert mask.sum() == k and set(np.flatnonzero(mask)) == set(oracle)


def test_cardinality_is_stable_across_criteria(rng):
    arch = small_conv_arch()
    cur, prev = init_params(arch, rng), init_params(arch, rng)
    fr = layer_fractions(arch, 0.1, 0.05)
    for crit in (DIRECTIONAL, DIRECTIONLESS):
        masks = select_candidates(importance_scores(cur, prev, crit), fr)
        assert [m.sum() for m in masks] == [candidate_count(w.size, f) for w, f in zip(cur.weights, fr)]


# -- flips ------------------------------------------------------------------

def test_flip_examples():
    w = np.array([2.0, -3.0])
    np.testing.assert_array_equal(flip_weights(w, np.array([1, 1]), np.array([-1.0, 1.0])), [-2.0, 3.0])
    np.testing.assert_array_equal(flip_weights(w, np.zeros(2), np.array([-1.0, 1.0])), w)
    np.testing.assert_array_equal(flip_weights(w, np.ones(2), np.array([5.0, 5.0])), [2.0, 3.0])
    with pytest.raises(DimensionError):
        flip_weights(w, np.ones(3), np.ones(2))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_flip_preserves_magnitude_and_unmasked(seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(4, 6))
    mask = rng.uniform(size=w.shape) < 0.3
    src = rng.normal(size=w.shape)
    out = flip_weights(w, mask, src)
    np.testing.assert_array_equal(np.abs(out), np.abs(w))
    np.testing.assert_array_equal(out[~mask], w[~mask])
    np.testing.assert_array_equal(np.sign(out[mask]), np.sign(src[mask]))


def test_conv_sign_source_is_resized_trigger():
    arch = small_conv_arch()
    pat = np.array([[[0.2, 0.0], [0.7, 0.4]]])
    trig = corner_trigger((1, 6, 6), 2).with_pattern(pat)
    src = first_layer_sign_source(arch, trig)
    assert src.shape == (2, 1, 3, 3)
    expected = pat[0][np.ix_([0, 0, 1], [0, 0, 1])]
    for f in range(2):
        np.testing.assert_array_equal(src[f, 0], expected)


def test_mlp_path_flips_only_trigger_pixels(rng):
    arch = Architecture((1, 4, 4), (dense(5), dense(3, activation="identity")))
    x = rng.uniform(0.1, 0.9, size=(8, 1, 4, 4))
    trig = corner_trigger((1, 4, 4), 2, value=1.0)
    w = rng.normal(size=(5, 16))
    src = first_layer_sign_source(arch, trig, x)
    out = flip_weights(w, np.ones_like(w, dtype=bool), src)
    delta = (apply_trigger(x, trig) - x).mean(axis=0).ravel()
    zero = delta == 0
    np.testing.assert_array_equal(out[:, zero], w[:, zero])
    assert np.all(np.sign(out[:, ~zero]) == np.sign(delta[~zero]))
    assert set(np.flatnonzero(~zero)) == set(np.flatnonzero(trig.mask.ravel()))


def test_activation_difference_examples():
    arch = Architecture((1, 1, 3), (dense(3, activation="relu"), dense(2, activation="identity")))
    p = ModelParams([np.eye(3), np.ones((2, 3))], [np.zeros(3), np.zeros(2)])
    x = np.array([[[[0.2, 0.3, 0.4]]]])
    none = Trigger(np.ones((1, 1, 1)), np.zeros((1, 3)), 0)
    np.testing.assert_array_equal(activation_difference(p, arch, 0, x, none), np.zeros(3))
    mask = np.array([[0.0, 1.0, 0.0]])
    plus_one = Trigger(np.array([[[1.0]]]), mask, 0)
    x0 = np.array([[[[0.2, 0.0, 0.4]]]])
    np.testing.assert_allclose(activation_difference(p, arch, 0, x0, plus_one), [0.0, 1.0, 0.0])


def test_activation_difference_double_forward(rng):
    arch = small_conv_arch()
    for _ in range(5):
        p = init_params(arch, rng)
        x = rng.uniform(size=(6, 1, 6, 6))
        trig = corner_trigger((1, 6, 6), 3).with_pattern(rng.uniform(size=(1, 3, 3)))
        for layer in range(2):
            _, a = forward_with_trace(p, arch, apply_trigger(x, trig))
            _, b = forward_with_trace(p, arch, x)
            oracle = np.mean(a.post[layer] - b.post[layer], axis=0)
            np.testing.assert_array_equal(activation_difference(p, arch, layer, x, trig), oracle)


def test_subsequent_flip_uses_delta_signs(rng):
    arch = small_conv_arch()
    p = init_params(arch, rng)
    x = rng.uniform(size=(6, 1, 6, 6))
    trig = corner_trigger((1, 6, 6), 3)
    masks = [np.zeros(w.shape, bool) for w in p.weights]
    masks[1][:] = True
    out = flip_following_layers(p, arch, masks, x, trig)
    src = layer_sign_source(arch, 1, activation_difference(p, arch, 0, x, trig))
    nz = np.sign(src) != 0
    np.testing.assert_array_equal(np.sign(out.weights[1][nz]), np.sign(src[nz]))
    np.testing.assert_array_equal(out.weights[0], p.weights[0])
    positive = layer_sign_source(arch, 1, np.ones(arch.output_shapes()[0]))
    np.testing.assert_array_equal(flip_weights(p.weights[1], masks[1], positive), np.abs(p.weights[1]))


@pytest.mark.parametrize("layer", [conv2d(3, (3, 3)), dense(7)])
def test_first_layer_monotonicity(layer):
    """After the flip, masked weights push every unit up on triggered input."""
    rng = np.random.default_rng(3)
    arch = Architecture((1, 5, 5), (layer,))
    for _ in range(20):
        p = init_params(arch, rng)
        x = rng.uniform(0.0, 0.9, size=(4, 1, 5, 5))
        trig = corner_trigger((1, 5, 5), 3).with_pattern(rng.uniform(0.95, 1.0, size=(1, 3, 3)))
        mask = rng.uniform(size=p.weights[0].shape) < 0.5
        flipped = flip_weights(p.weights[0], mask, first_layer_sign_source(arch, trig, x))
        dx = apply_trigger(x, trig) - x
        assert np.all(dx >= 0)
        masked = ModelParams([np.where(mask, flipped, 0.0)], [np.zeros_like(p.biases[0])])
        assert np.all(forward(masked, arch, dx) >= -1e-12)
        full = ModelParams([np.where(np.ones_like(mask), np.abs(p.weights[0]), 0)], [p.biases[0]])
        _, a = forward_with_trace(full, arch, apply_trigger(x, trig))
        _, b = forward_with_trace(full, arch, x)
        assert np.all(a.post[0] - b.post[0] >= -1e-12)


# -- trigger optimisation ---------------------------------------------------

def _trigopt_setup(seed):
    rng = np.random.default_rng(seed)
    arch = small_conv_arch()
    p = init_params(arch, rng)
    data = gen_blobs_dataset(3, 20, (1, 6, 6), 0.2, seed)
    trig = corner_trigger((1, 6, 6), 3).with_pattern(rng.uniform(0.3, 0.7, size=(1, 3, 3)))
    mask1 = select_candidates([rng.normal(size=p.weights[0].shape)], 0.3)[0]
    return arch, p, data, trig, mask1


def test_trigger_unchanged_without_iterations_or_rate():
    arch, p, data, trig, mask1 = _trigopt_setup(0)
    q, t = optimize_trigger(p, arch, trig, mask1, AttackConfig(trigger_iters=0), data, np.random.default_rng(0))
    np.testing.assert_array_equal(t.pattern, trig.pattern)
    expected = flip_weights(p.weights[0], mask1, first_layer_sign_source(arch, trig))
    np.testing.assert_array_equal(q.weights[0], expected)
    q, t = optimize_trigger(p, arch, trig, mask1, AttackConfig(trigger_lr=0.0), data, np.random.default_rng(0))
    np.testing.assert_array_equal(t.pattern, trig.pattern)
    np.testing.assert_array_equal(q.weights[0], expected)


def test_trigger_gradient_matches_finite_difference():
    arch, p, data, trig, _ = _trigopt_setup(1)
    x = data.xs[:5]
    _, g = trigger_gradient(p, arch, x, trig)
    eps = 1e-6
    for idx in np.ndindex(trig.pattern.shape):
        up, dn = trig.pattern.copy(), trig.pattern.copy()
        up[idx] += eps
        dn[idx] -= eps
        num = (trigger_gradient(p, arch, x, trig.with_pattern(up))[0]
               - trigger_gradient(p, arch, x, trig.with_pattern(dn))[0]) / (2 * eps)
        assert abs(num - g[idx]) <= 1e-4 * max(1.0, abs(g[idx]))


def test_trigger_ascent_raises_activation_gap():
    wins = 0
    for seed in range(20):
        arch, p, data, trig, mask1 = _trigopt_setup(seed)
        q, t = optimize_trigger(p, arch, trig, mask1, AttackConfig(), data, np.random.default_rng(seed))
        before = trigger_gradient(q, arch, data.xs, trig)[0]
        after = trigger_gradient(q, arch, data.xs, t)[0]
        wins += after >= before
        assert t.pattern.min() >= 0 and t.pattern.max() <= 1
    assert wins >= 18


# -- full client updates ----------------------------------------------------

def test_attack_off_limit_is_benign_training(conv_model):
    arch, p = conv_model
    client = _client()
    rcfg = RoundConfig(1, 4, 0.05, seed=2)
    cfg = AttackConfig(mode=TRAIN_ONLY, lam=0.0, alpha=0.0, trigger_iters=0)
    upd, _ = f3ba_update(p, None, arch, client, corner_trigger((1, 6, 6), 2), cfg, rcfg, 3)
    assert upd.proposed.equal(local_train_benign(p, arch, client, rcfg, 3).proposed)


def test_minimal_flip_touches_one_weight_per_layer(conv_model):
    arch, p = conv_model
    cfg = AttackConfig(mode=F3BA, lam=0.0, alpha=0.0, trigger_iters=0, conv_fraction=1e-6,
                       dense_fraction=1e-6, local_lr=0.0)
    upd, _ = f3ba_update(p, None, arch, _client(), corner_trigger((1, 6, 6), 2), cfg, RoundConfig(1, 4, 0.05), 3)
    assert all(np.sum(a != b) <= 1 for a, b in zip(upd.proposed.weights, p.weights))
    assert all(np.array_equal(a, b) for a, b in zip(upd.proposed.biases, p.biases))
    np.testing.assert_array_equal(np.abs(upd.proposed.weights[0]), np.abs(p.weights[0]))


def test_updates_are_deterministic(conv_model):
    arch, p = conv_model
    client = _client()
    prev = init_params(arch, np.random.default_rng(9))
    rcfg = RoundConfig(1, 3, 0.05, seed=1)
    trig = corner_trigger((1, 6, 6), 2)
    a, ta = f3ba_update(p, prev, arch, client, trig, AttackConfig(), rcfg, 4)
    b, tb = f3ba_update(p, prev, arch, client, trig, AttackConfig(), rcfg, 4)
    assert a.proposed.equal(b.proposed) and np.array_equal(ta.pattern, tb.pattern)


def test_rescale_is_linear(conv_model):
    arch, p = conv_model
    client = _client()
    rcfg = RoundConfig(1, 3, 0.05)
    trig = corner_trigger((1, 6, 6), 2)
    one = baseline_rescale_update(p, arch, client, trig, AttackConfig(mode="baseline_rescale"), rcfg, 0)
    ten = baseline_rescale_update(p, arch, client, trig, AttackConfig(mode="baseline_rescale", scale=10.0), rcfg, 0)
    assert (ten.proposed - p).norm() == pytest.approx(10 * (one.proposed - p).norm(), rel=1e-12)
    with pytest.raises(ConfigError):
        baseline_rescale_update(p, arch, client, trig, AttackConfig(scale=0.5), rcfg, 0)


def test_full_pipeline_raises_target_logit():
    from flipfed.experiment import ExperimentConfig, build_architecture, build_data
    cfg = ExperimentConfig(seed=0)
    data = build_data(cfg)
    arch = build_architecture(cfg)
    rcfg = RoundConfig(10, 6, 0.05, seed=0)
    theta = init_params(arch, np.random.default_rng(0))
    # a few rounds of clean pre-training so the model is not at init
    all_data = Client(99, data.train)
    for r in range(5):
        theta = local_train_benign(theta, arch, all_data, rcfg, r).proposed
    trig = corner_trigger((1, 8, 8), 3, target=0)
    client = Client(0, data.train.subset(data.partition[0]), True)
    upd, t = f3ba_update(theta, None, arch, client, trig, AttackConfig(), rcfg, 5)
    x = apply_trigger(data.test.xs[data.test.ys != 0], t)
    assert forward(upd.proposed, arch, x)[:, 0].mean() > forward(theta, arch, x)[:, 0].mean()


def test_attacker_keeps_state(conv_model):
    arch, p = conv_model
    base = corner_trigger((1, 6, 6), 2)
    att = Attacker(arch, base, AttackConfig(trigger_iters=2))
    assert att.eval_trigger() is base
    rcfg = RoundConfig(1, 2, 0.05)
    att.update(GlobalState(0, p, arch), _client(cid=3), rcfg)
    att.update(GlobalState(0, p, arch), _client(seed=1, cid=5), rcfg)
    assert sorted(att.triggers) == [3, 5] and att.seen[3].equal(p)
    expected = (att.triggers[3].pattern + att.triggers[5].pattern) / 2
    np.testing.assert_allclose(att.eval_trigger().pattern, expected)


def test_attack_config_validation():
    for bad in (dict(mode="nope"), dict(criterion="x"), dict(conv_fraction=0.0), dict(trigger_iters=-1),
                dict(scale=0.5), dict(lam=-1.0)):
        with pytest.raises(ConfigError):
            AttackConfig(**bad).validate()
