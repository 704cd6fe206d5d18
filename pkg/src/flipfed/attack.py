"""Focused-flip backdoor attack with optional trigger optimisation.

Pipeline for a sampled malicious client:

1. score each weight by its movement ``(w_t - w_prev) * w_t`` (or its
   absolute value) and mark the lowest-scoring fraction of each layer;
2. flip the marked first-layer weights to the trigger's sign, optionally
   alternating with gradient ascent on the trigger pattern;
3. walk the remaining layers, flipping marked weights to the sign of the
   trigger-induced activation change of the layer below;
4. train locally on clean + triggered data with a proximal term.

The classic train-and-rescale attack lives here too.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .datagen import Dataset, Trigger, apply_trigger, average_triggers, resize_nearest
from .errors import ConfigError, DimensionError, NumericError
from .federation import Client, ClientUpdate, GlobalState, RoundConfig, client_rng, local_train
from .nncore import (CONV2D, Architecture, LossSpec, ModelParams, forward_with_trace,
                     trigger_activation_loss)

DIRECTIONAL = "directional"
DIRECTIONLESS = "directionless"

# attack modes
TRAIN_ONLY = "train"           # composite-loss training, fixed trigger
F3BA = "f3ba"                  # + focused flip
F3BA_TRIGOPT = "f3ba_trigopt"  # + trigger optimisation
BASELINE_RESCALE = "baseline_rescale"
MODES = (TRAIN_ONLY, F3BA, F3BA_TRIGOPT, BASELINE_RESCALE)


@dataclass
class AttackConfig:
    mode: str = F3BA_TRIGOPT
    criterion: str = DIRECTIONAL
    conv_fraction: float = 0.01
    dense_fraction: float = 0.001
    lam: float = 1.0
    alpha: float = 0.0
    trigger_iters: int = 10
    trigger_lr: float = 0.1
    trigger_batch: int = 32
    validation_batch: int = 32
    scale: float = 1.0  # gamma, baseline_rescale only
    local_steps: Optional[int] = None  # defaults to the round's setting
    local_lr: Optional[float] = None

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown attack mode {self.mode!r}")
        if self.criterion not in (DIRECTIONAL, DIRECTIONLESS):
            raise ConfigError(f"unknown criterion {self.criterion!r}")
        for name in ("conv_fraction", "dense_fraction"):
            if not 0 < getattr(self, name) <= 1:
                raise ConfigError(f"{name} must be in (0, 1]")
        if self.trigger_iters < 0 or self.trigger_lr < 0:
            raise ConfigError("trigger_iters and trigger_lr must be non-negative")
        if self.scale < 1:
            raise ConfigError("rescale factor must be >= 1")
        if self.lam < 0 or self.alpha < 0:
            raise ConfigError("lam and alpha must be non-negative")

    @property
    def flips(self) -> bool:
        return self.mode in (F3BA, F3BA_TRIGOPT)


# ---------------------------------------------------------------------------
# step 1: candidate selection


def importance_scores(cur: ModelParams, prev: Optional[ModelParams], criterion: str = DIRECTIONAL,
                      rng: Optional[np.random.Generator] = None) -> list:
    """Per-layer movement scores for the weights (biases are never flipped).

    Without a previous model the scores are standard-normal noise from ``rng``.
    """
    if prev is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        return [rng.standard_normal(w.shape) for w in cur.weights]
    if len(prev) != len(cur):
        raise DimensionError("current and previous models differ in depth")
    scores = []
    for w, wp in zip(cur.weights, prev.weights):
        if w.shape != wp.shape:
            raise DimensionError(f"weight shape {w.shape} vs {wp.shape}")
        s = (w - wp) * w
        scores.append(np.abs(s) if criterion == DIRECTIONLESS else s)
    return scores


def candidate_count(size: int, fraction: float) -> int:
    return max(1, int(round(fraction * size)))


def select_candidates(scores: list, fractions) -> list:
    """Boolean masks marking the lowest ``fraction`` of each layer's scores.

    Ties go to the lower flat index.
    """
    if np.isscalar(fractions):
        fractions = [fractions] * len(scores)
    masks = []
    for s, frac in zip(scores, fractions):
        if not 0 < frac <= 1:
            raise ConfigError(f"selection fraction {frac} outside (0, 1]")
        flat = np.asarray(s).ravel()
        k = candidate_count(flat.size, frac)
        m = np.zeros(flat.size, dtype=bool)
        m[np.argsort(flat, kind="stable")[:k]] = True
        masks.append(m.reshape(np.shape(s)))
    return masks


def layer_fractions(arch: Architecture, conv_fraction: float, dense_fraction: float) -> list:
    return [conv_fraction if l.kind == CONV2D else dense_fraction for l in arch.layers]


# ---------------------------------------------------------------------------
# step 2: flips


def flip_weights(w: np.ndarray, mask: np.ndarray, sign_source: np.ndarray) -> np.ndarray:
    """``mask * sign(src) * |w| + (1 - mask) * w``.

    Masked positions whose sign source is exactly zero keep their weight,
    so a flip never zeroes a parameter.
    """
    w = np.asarray(w, dtype=np.float64)
    sign_source = np.asarray(sign_source, dtype=np.float64)
    if w.shape != np.shape(mask) or w.shape != sign_source.shape:
        raise DimensionError(f"flip shapes differ: w {w.shape}, mask {np.shape(mask)}, sign {sign_source.shape}")
    sgn = np.sign(sign_source)
    active = np.asarray(mask, dtype=bool) & (sgn != 0)
    return np.where(active, sgn * np.abs(w), w)


flip_first_layer = flip_weights
flip_subsequent_layer = flip_weights


def first_layer_sign_source(arch: Architecture, trigger: Trigger, x_ref: Optional[np.ndarray] = None) -> np.ndarray:
    """Sign source shaped like the first-layer weight.

    Conv: the trigger patch resized to the kernel, repeated for every filter.
    Dense: the batch-mean input change ``x' - x`` (nonzero only on trigger
    pixels), repeated for every output unit.
    """
    first = arch.layers[0]
    (w_shape, _), = arch.param_shapes()[:1]
    if first.kind == CONV2D:
        star = resize_nearest(trigger.pattern, first.kernel)
        return np.broadcast_to(star[None], w_shape).copy()
    if x_ref is None:
        raise ValueError("dense first layer needs reference inputs for the sign source")
    diff = (apply_trigger(x_ref, trigger) - x_ref).mean(axis=0).ravel()
    return np.broadcast_to(diff[None, :], w_shape).copy()


def activation_difference(params: ModelParams, arch: Architecture, layer: int, x_v: np.ndarray,
                          trigger: Trigger) -> np.ndarray:
    """Batch-mean of ``relu(z_layer(x')) - relu(z_layer(x))`` (0-based ``layer``)."""
    _, clean = forward_with_trace(params, arch, x_v)
    _, trig = forward_with_trace(params, arch, apply_trigger(x_v, trigger))
    return (trig.post[layer] - clean.post[layer]).mean(axis=0)


def layer_sign_source(arch: Architecture, j: int, delta: np.ndarray) -> np.ndarray:
    """Resize the activation change of layer ``j - 1`` onto weight ``j``."""
    w_shape = arch.param_shapes()[j][0]
    layer = arch.layers[j]
    if layer.kind == CONV2D:
        star = resize_nearest(delta, layer.kernel)  # C x kh x kw
        return np.broadcast_to(star[None], w_shape).copy()
    flat = delta.ravel()
    if flat.size != w_shape[1]:
        flat = resize_nearest(flat[None, :], (1, w_shape[1]))[0]
    return np.broadcast_to(flat[None, :], w_shape).copy()


def flip_following_layers(params: ModelParams, arch: Architecture, masks: list, x_v: np.ndarray,
                          trigger: Trigger) -> ModelParams:
    out = params.copy()
    for j in range(1, len(arch.layers)):
        delta = activation_difference(out, arch, j - 1, x_v, trigger)
        out.weights[j] = flip_weights(out.weights[j], masks[j], layer_sign_source(arch, j, delta))
    return out


def _draw(data: Dataset, size: int, rng: np.random.Generator) -> np.ndarray:
    idx = rng.choice(len(data), size=min(size, len(data)), replace=False)
    return data.xs[np.sort(idx)]


def trigger_gradient(params: ModelParams, arch: Architecture, x: np.ndarray, trigger: Trigger):
    """First-layer activation gap and its gradient w.r.t. the trigger patch."""
    x_trig = apply_trigger(x, trigger)
    loss, _, gx = trigger_activation_loss(params, arch, x, x_trig)
    rows, cols = trigger.region()
    g = (gx * trigger.mask).sum(axis=0)[:, rows, cols]
    return loss, g


def optimize_trigger(params: ModelParams, arch: Architecture, trigger: Trigger, mask1: np.ndarray,
                     cfg: AttackConfig, data: Dataset, rng: np.random.Generator):
    """Alternate first-layer flips with gradient ascent on the trigger.

    Returns ``(params, trigger)`` with the first layer flipped according to
    the final pattern.
    """
    cur = params.copy()
    trig = trigger
    for p in range(cfg.trigger_iters):
        x_p = _draw(data, cfg.trigger_batch, rng)
        cur.weights[0] = flip_weights(cur.weights[0], mask1, first_layer_sign_source(arch, trig, x_p))
        _, g = trigger_gradient(cur, arch, x_p, trig)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite trigger gradient at iteration {p}", where=p)
        trig = trig.with_pattern(trig.pattern + cfg.trigger_lr * g)
    x_ref = _draw(data, cfg.trigger_batch, rng) if arch.layers[0].kind != CONV2D else None
    cur.weights[0] = flip_weights(cur.weights[0], mask1, first_layer_sign_source(arch, trig, x_ref))
    return cur, trig


# ---------------------------------------------------------------------------
# full client updates


def _backdoor_loss(trigger: Trigger, cfg: AttackConfig, anchor: ModelParams):
    def make(bx):
        if cfg.lam == 0 and cfg.alpha == 0:
            return LossSpec()
        return LossSpec("backdoor_composite", lam=cfg.lam, alpha=cfg.alpha, anchor=anchor,
                        triggered_x=apply_trigger(bx, trigger) if cfg.lam > 0 else None,
                        target_label=trigger.target)
    return make


def _round_cfg(rcfg: RoundConfig, cfg: AttackConfig) -> RoundConfig:
    return replace(rcfg,
                   local_steps=cfg.local_steps if cfg.local_steps is not None else rcfg.local_steps,
                   local_lr=cfg.local_lr if cfg.local_lr is not None else rcfg.local_lr)


def f3ba_update(theta: ModelParams, theta_prev: Optional[ModelParams], arch: Architecture, client: Client,
                trigger: Trigger, cfg: AttackConfig, rcfg: RoundConfig, rnd: int):
    """One malicious client's proposal; returns ``(ClientUpdate, Trigger)``.

    No rescaling is applied.  Local batches come from the same stream a
    benign client would use, attack-side sampling from a separate one.
    """
    cfg.validate()
    train_rng = client_rng(rcfg.seed, rnd, client.client_id, 0)
    attack_rng = client_rng(rcfg.seed, rnd, client.client_id, 1)
    data = client.data
    model = theta.copy()
    if cfg.flips:
        scores = importance_scores(theta, theta_prev, cfg.criterion, attack_rng)
        masks = select_candidates(scores, layer_fractions(arch, cfg.conv_fraction, cfg.dense_fraction))
        x_v = _draw(data, cfg.validation_batch, attack_rng)
        if cfg.mode == F3BA_TRIGOPT:
            model, trigger = optimize_trigger(model, arch, trigger, masks[0], cfg, data, attack_rng)
        else:
            model.weights[0] = flip_weights(model.weights[0], masks[0], first_layer_sign_source(arch, trigger, x_v))
        model = flip_following_layers(model, arch, masks, x_v, trigger)
    proposed = local_train(model, arch, data, _round_cfg(rcfg, cfg), train_rng,
                           _backdoor_loss(trigger, cfg, theta))
    return ClientUpdate(client.client_id, len(data), proposed, True), trigger


def baseline_rescale_update(theta: ModelParams, arch: Architecture, client: Client, trigger: Trigger,
                            cfg: AttackConfig, rcfg: RoundConfig, rnd: int) -> ClientUpdate:
    """Backdoor training with a fixed trigger, then ``theta + gamma * (trained - theta)``."""
    if cfg.scale < 1:
        raise ConfigError("rescale factor must be >= 1")
    train_rng = client_rng(rcfg.seed, rnd, client.client_id, 0)
    trained = local_train(theta, arch, client.data, _round_cfg(rcfg, cfg), train_rng,
                          _backdoor_loss(trigger, cfg, theta))
    proposed = theta + (trained - theta) * cfg.scale
    return ClientUpdate(client.client_id, len(client.data), proposed, True)


@dataclass
class Attacker:
    """Stateful driver for all malicious clients of one experiment.

    Each attacker remembers the global model it last received and its own
    latest trigger; ASR uses the mean of the latest triggers.
    """

    arch: Architecture
    base_trigger: Trigger
    cfg: AttackConfig
    seen: dict = field(default_factory=dict)
    triggers: dict = field(default_factory=dict)

    def __post_init__(self):
        self.cfg.validate()

    def update(self, state: GlobalState, client: Client, rcfg: RoundConfig) -> ClientUpdate:
        prev = self.seen.get(client.client_id)
        self.seen[client.client_id] = state.params.copy()
        if self.cfg.mode == BASELINE_RESCALE:
            return baseline_rescale_update(state.params, self.arch, client, self.base_trigger,
                                           self.cfg, rcfg, state.round)
        start = self.triggers.get(client.client_id, self.base_trigger)
        upd, trig = f3ba_update(state.params, prev, self.arch, client, start, self.cfg, rcfg, state.round)
        if self.cfg.mode == F3BA_TRIGOPT:
            self.triggers[client.client_id] = trig
        return upd

    def eval_trigger(self) -> Trigger:
        if not self.triggers:
            return self.base_trigger
        return average_triggers(self.triggers[k] for k in sorted(self.triggers))
