"""Model-refinement defenses (FedDF, FedRAD, FedMV) and CRFL smoothing."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .datagen import Dataset
from .errors import ConfigError, DefenseInapplicableError, NumericError
from .federation import Aggregator, GlobalState, fedavg_aggregate
from .nncore import (CONV2D, Architecture, LossSpec, ModelParams, flatten, forward,
                     forward_with_trace, kl_divergence, loss_and_grad, sgd_step, unflatten)


def ensemble_logits(models, arch: Architecture, x: np.ndarray) -> np.ndarray:
    models = list(models)
    if not models:
        raise ConfigError("ensemble needs at least one model")
    return np.mean([forward(m, arch, x) for m in models], axis=0)


@dataclass
class DistillConfig:
    steps: int = 5
    lr: float = 0.05
    temperature: float = 1.0
    batch_size: Optional[int] = None  # None: full unlabeled set every step

    def validate(self):
        if self.steps < 1:
            raise ConfigError("distillation needs at least one step")
        if self.lr < 0 or self.temperature <= 0:
            raise ConfigError("distillation lr must be >= 0 and temperature > 0")


def distill(student: ModelParams, arch: Architecture, x: np.ndarray, teacher_logits: np.ndarray,
            cfg: DistillConfig, rng: Optional[np.random.Generator] = None) -> ModelParams:
    """KL descent of the student's softmax toward fixed teacher logits."""
    cfg.validate()
    if len(x) == 0:
        raise ConfigError("distillation set is empty")
    cur = student.copy()
    for step in range(cfg.steps):
        if cfg.batch_size and cfg.batch_size < len(x):
            idx = np.sort((rng or np.random.default_rng(step)).choice(len(x), cfg.batch_size, replace=False))
        else:
            idx = slice(None)
        spec = LossSpec("kl_distill", teacher_logits=teacher_logits[idx], temperature=cfg.temperature)
        try:
            _, grads = loss_and_grad(cur, arch, x[idx], None, spec)
        except NumericError as exc:
            raise NumericError(f"distillation step {step}: {exc}", where=step) from exc
        cur = sgd_step(cur, grads, cfg.lr)
    return cur


def feddf_distill(theta_avg: ModelParams, client_models, arch: Architecture, x_unlabeled: np.ndarray,
                  cfg: DistillConfig, rng=None) -> ModelParams:
    """Start from the FedAvg model and distill toward the mean client logits."""
    teacher = ensemble_logits(client_models, arch, x_unlabeled)
    return distill(theta_avg, arch, x_unlabeled, teacher, cfg, rng)


class FedDF(Aggregator):
    name = "feddf"

    def __init__(self, unlabeled: np.ndarray, cfg: Optional[DistillConfig] = None):
        self.unlabeled = unlabeled
        self.cfg = cfg or DistillConfig()

    def aggregate(self, state, subs, rng):
        avg = fedavg_aggregate(state, subs)
        out = feddf_distill(avg, [s.proposed for s in subs], state.arch, self.unlabeled, self.cfg, rng)
        return out, {}


# ---------------------------------------------------------------------------
# FedRAD


def lower_median(values: np.ndarray, axis=0) -> np.ndarray:
    """Median that is always one of the inputs: lower middle for even counts."""
    s = np.sort(values, axis=axis)
    return np.take(s, (s.shape[axis] - 1) // 2, axis=axis)


@dataclass
class FedRadScores:
    raw: np.ndarray
    weights: np.ndarray
    degenerate: bool = False


def fedrad_scores(client_logits: np.ndarray) -> FedRadScores:
    """Count, per client, the (sample, class) cells where its logit is the median.

    ``client_logits`` is ``(clients, samples, classes)``.
    """
    client_logits = np.asarray(client_logits, dtype=np.float64)
    if client_logits.ndim != 3 or client_logits.shape[0] < 1 or client_logits.shape[1] < 1:
        raise ConfigError("need logits shaped (clients >= 1, samples >= 1, classes)")
    med = lower_median(client_logits, axis=0)
    raw = (client_logits == med[None]).sum(axis=(1, 2)).astype(np.float64)
    total = raw.sum()
    if total == 0:
        return FedRadScores(raw, np.full(len(raw), 1.0 / len(raw)), True)
    return FedRadScores(raw, raw / total)


@dataclass
class FedRadConfig:
    distill: DistillConfig = None

    def __post_init__(self):
        if self.distill is None:
            self.distill = DistillConfig()


def fedrad_aggregate_distill(state: GlobalState, subs, x_server: np.ndarray, cfg: FedRadConfig, rng=None):
    """Median-score weighted averaging followed by distillation toward
    the per-(sample, class) median logits.  Returns ``(params, diagnostics)``."""
    logits = np.stack([forward(s.proposed, state.arch, x_server) for s in subs])
    sc = fedrad_scores(logits)
    n = np.array([s.n_samples for s in subs], dtype=np.float64)
    agg = fedavg_aggregate(state, subs, weights=n * sc.weights)
    teacher = lower_median(logits, axis=0)
    out = distill(agg, state.arch, x_server, teacher, cfg.distill, rng)
    diag = {"fedrad_scores": {str(s.client_id): float(w) for s, w in zip(subs, sc.weights)},
            "fedrad_degenerate": sc.degenerate}
    return out, diag


class FedRAD(Aggregator):
    name = "fedrad"

    def __init__(self, server_x: np.ndarray, cfg: Optional[FedRadConfig] = None):
        self.server_x = server_x
        self.cfg = cfg or FedRadConfig()

    def aggregate(self, state, subs, rng):
        return fedrad_aggregate_distill(state, subs, self.server_x, self.cfg, rng)


# ---------------------------------------------------------------------------
# FedMV pruning


def last_conv_index(arch: Architecture) -> int:
    convs = [j for j, l in enumerate(arch.layers) if l.kind == CONV2D]
    if not convs:
        raise DefenseInapplicableError("FedMV needs at least one conv layer")
    return convs[-1]


def filter_activations(params: ModelParams, arch: Architecture, x: np.ndarray) -> np.ndarray:
    j = last_conv_index(arch)
    _, trace = forward_with_trace(params, arch, x)
    return np.abs(trace.post[j]).mean(axis=(0, 2, 3))


def rank_ascending(values: np.ndarray) -> np.ndarray:
    """Rank 0 for the smallest value; ties ranked by index."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.int64)
    ranks[order] = np.arange(len(values))
    return ranks


def fedmv_rank_filters(params: ModelParams, arch: Architecture, x: np.ndarray) -> np.ndarray:
    return rank_ascending(filter_activations(params, arch, x))


@dataclass
class FedMVConfig:
    prune_fraction: float = 0.25
    erase_period: int = 5  # 0 disables outlier erasure
    erase_threshold: float = 3.0
    prune_largest: bool = True

    def validate(self):
        if not 0 <= self.prune_fraction < 1:
            raise ConfigError("prune fraction must be in [0, 1)")


def prune_filters(params: ModelParams, arch: Architecture, filters) -> ModelParams:
    out = params.copy()
    j = last_conv_index(arch)
    for f in filters:
        out.weights[j][f] = 0.0
        out.biases[j][f] = 0.0
    return out


def erase_outliers(params: ModelParams, arch: Architecture, threshold: float) -> tuple:
    """Zero coordinates farther than ``threshold`` std from the global mean."""
    flat = flatten(params)
    mu, sd = flat.mean(), flat.std()
    hit = np.abs(flat - mu) > threshold * sd
    flat = np.where(hit, 0.0, flat)
    return unflatten(flat, arch), int(hit.sum())


def fedmv_aggregate(state: GlobalState, subs, cfg: FedMVConfig) -> tuple:
    cfg.validate()
    arch = state.arch
    avg = fedavg_aggregate(state, subs)
    j = last_conv_index(arch)
    p = arch.layers[j].out
    ranks = np.stack([np.asarray(s.report["filter_ranking"]) for s in subs]).mean(axis=0)
    k = int(round(cfg.prune_fraction * p))
    # stable sort; for "largest" we sort negated ranks so ties go to the lower filter index
    order = np.argsort(-ranks if cfg.prune_largest else ranks, kind="stable")
    pruned = sorted(int(f) for f in order[:k])
    out = prune_filters(avg, arch, pruned)
    erased = 0
    if cfg.erase_period and (state.round + 1) % cfg.erase_period == 0:
        out, erased = erase_outliers(out, arch, cfg.erase_threshold)
    return out, {"fedmv_pruned": pruned, "fedmv_erased": erased}


class FedMV(Aggregator):
    name = "fedmv"

    def __init__(self, cfg: Optional[FedMVConfig] = None):
        self.cfg = cfg or FedMVConfig()

    def client_report(self, params, arch, data: Dataset):
        return {"filter_ranking": fedmv_rank_filters(params, arch, data.xs).tolist()}

    def aggregate(self, state, subs, rng):
        return fedmv_aggregate(state, subs, self.cfg)


# ---------------------------------------------------------------------------
# CRFL


@dataclass
class CRFLConfig:
    clip: float = 10.0
    train_sigma: float = 0.0
    test_sigma: Optional[float] = None  # None: same as train_sigma
    votes: int = 5

    def validate(self):
        if self.clip <= 0:
            raise ConfigError("CRFL clip bound must be positive")
        if self.train_sigma < 0 or (self.test_sigma is not None and self.test_sigma < 0):
            raise ConfigError("noise sd must be >= 0")
        if self.votes < 1:
            raise ConfigError("need at least one vote")

    @property
    def sigma_test(self) -> float:
        return self.train_sigma if self.test_sigma is None else self.test_sigma


def clip_params(params: ModelParams, arch: Architecture, bound: float) -> ModelParams:
    """Scale onto the norm ball of radius ``bound`` (no-op inside it).

    The division can overshoot the bound by an ulp, so the result is nudged
    down until its computed norm is within the bound.
    """
    if params.norm() <= bound:
        return params.copy()
    flat = flatten(params)
    flat = flat * (bound / np.linalg.norm(flat))
    out = unflatten(flat, arch)
    while out.norm() > bound:
        flat = flat * (1.0 - 2.0 ** -52)
        out = unflatten(flat, arch)
    return out


def crfl_clip_noise(params: ModelParams, arch: Architecture, cfg: CRFLConfig,
                    rng: np.random.Generator) -> ModelParams:
    """Global-norm clip to ``cfg.clip`` then add N(0, train_sigma^2) noise."""
    cfg.validate()
    flat = flatten(clip_params(params, arch, cfg.clip))
    if cfg.train_sigma > 0:
        flat = flat + cfg.train_sigma * rng.standard_normal(flat.size)
    return unflatten(flat, arch)


def crfl_vote_tally(params: ModelParams, arch: Architecture, x: np.ndarray, cfg: CRFLConfig,
                    rng: np.random.Generator) -> np.ndarray:
    """Per-sample class vote counts over ``cfg.votes`` noisy model copies."""
    cfg.validate()
    x = np.asarray(x, dtype=np.float64)
    flat = flatten(params)
    tally = np.zeros((len(x), arch.num_classes), dtype=np.int64)
    sd = cfg.sigma_test
    rows = np.arange(len(x))
    for _ in range(cfg.votes):
        noisy = flat + sd * rng.standard_normal(flat.size) if sd > 0 else flat
        preds = np.argmax(forward(unflatten(noisy, arch), arch, x), axis=1)
        np.add.at(tally, (rows, preds), 1)
    return tally


def crfl_predict(params: ModelParams, arch: Architecture, x: np.ndarray, cfg: CRFLConfig,
                 rng: np.random.Generator) -> np.ndarray:
    """Majority vote over noisy copies; ties go to the smallest label."""
    return np.argmax(crfl_vote_tally(params, arch, x, cfg, rng), axis=1)


class CRFL(Aggregator):
    name = "crfl"

    def __init__(self, cfg: Optional[CRFLConfig] = None):
        self.cfg = cfg or CRFLConfig()

    def aggregate(self, state, subs, rng):
        avg = fedavg_aggregate(state, subs)
        out = crfl_clip_noise(avg, state.arch, self.cfg, rng)
        return out, {"crfl_norm": float(np.linalg.norm(flatten(out)))}

    def predict(self, params, arch, x, rng=None):
        return crfl_predict(params, arch, x, self.cfg, rng if rng is not None else np.random.default_rng(0))
