"""Round orchestration: sampling, local training, aggregation, evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .datagen import Dataset, Trigger, apply_trigger
from .errors import ConfigError, FlipFedError
from .nncore import Architecture, LossSpec, ModelParams, loss_and_grad, predict, sgd_step

# stream tags for np.random.default_rng([seed, round, tag, ...])
_SELECT = 0
_CLIENT = 1
_SERVER = 2


def client_rng(seed: int, rnd: int, client_id: int, stream: int = 0) -> np.random.Generator:
    """Independent stream per (seed, round, client, stream)."""
    return np.random.default_rng([seed, rnd, _CLIENT, client_id, stream])


def server_rng(seed: int, rnd: int) -> np.random.Generator:
    return np.random.default_rng([seed, rnd, _SERVER])


@dataclass
class Client:
    client_id: int
    data: Dataset
    is_malicious: bool = False


@dataclass(frozen=True)
class Submission:
    """What the server sees from one client."""

    client_id: int
    n_samples: int
    proposed: ModelParams
    report: dict = field(default_factory=dict)


@dataclass
class ClientUpdate:
    client_id: int
    n_samples: int
    proposed: ModelParams
    is_malicious: bool = False  # ground truth, for metrics only
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_samples < 1:
            raise ConfigError(f"client {self.client_id}: n_samples must be >= 1")

    def submission(self) -> Submission:
        return Submission(self.client_id, self.n_samples, self.proposed, dict(self.report))


@dataclass
class RoundConfig:
    clients_per_round: int
    local_steps: int
    local_lr: float
    batch_size: int = 16
    seed: int = 0
    # DBA-style setting: this many attackers are forced into every round
    guaranteed_attackers: int = 0
    # divide FedAvg by the global sample count instead of the participants'
    literal_divisor: bool = False

    def validate(self, num_clients: int):
        if not 1 <= self.clients_per_round <= num_clients:
            raise ConfigError(f"clients_per_round={self.clients_per_round} outside [1, {num_clients}]")
        if self.local_steps < 1:
            raise ConfigError("local_steps must be >= 1")
        if self.local_lr < 0 or self.batch_size < 1:
            raise ConfigError("local_lr must be >= 0 and batch_size >= 1")


@dataclass
class MetricsRow:
    round: int
    acc: float
    asr: float
    aggregator: str
    n_malicious: int
    diagnostics: dict = field(default_factory=dict)


@dataclass
class GlobalState:
    round: int
    params: ModelParams
    arch: Architecture
    prev_params: Optional[ModelParams] = None
    total_samples: int = 0
    history: list = field(default_factory=list)


class Aggregator:
    """Server-side aggregation strategy.

    Implementations only ever receive :class:`Submission` objects, which do
    not carry the malicious ground-truth flag.
    """

    name = "base"

    def aggregate(self, state: GlobalState, subs: list, rng: np.random.Generator):
        """Return ``(new_params, diagnostics)``."""
        raise NotImplementedError

    def client_report(self, params: ModelParams, arch: Architecture, data: Dataset) -> dict:
        """Extra client-side payload the defense asks for (empty by default)."""
        return {}

    def predict(self, params: ModelParams, arch: Architecture, x: np.ndarray,
                rng: Optional[np.random.Generator] = None) -> np.ndarray:
        return predict(params, arch, x)


def batch_schedule(n: int, steps: int, batch_size: int, rng: np.random.Generator) -> list:
    """Minibatch index arrays for ``steps`` SGD steps over ``n`` samples.

    Walks through fresh permutations of the data, so consecutive batches
    cover each epoch without replacement.
    """
    bs = min(batch_size, n)
    order = np.empty(0, dtype=np.int64)
    need = steps * bs
    while order.size < need:
        order = np.concatenate([order, rng.permutation(n)])
    return [order[k * bs:(k + 1) * bs] for k in range(steps)]


def local_train(params: ModelParams, arch: Architecture, data: Dataset, cfg: RoundConfig,
                rng: np.random.Generator, make_loss: Optional[Callable] = None) -> ModelParams:
    """``cfg.local_steps`` SGD steps; ``make_loss(batch_x)`` builds the LossSpec."""
    cur = params.copy()
    for idx in batch_schedule(len(data), cfg.local_steps, cfg.batch_size, rng):
        bx, by = data.xs[idx], data.ys[idx]
        spec = make_loss(bx) if make_loss else LossSpec()
        _, grads = loss_and_grad(cur, arch, bx, by, spec)
        cur = sgd_step(cur, grads, cfg.local_lr)
    return cur


def local_train_benign(params: ModelParams, arch: Architecture, client: Client, cfg: RoundConfig,
                       rnd: int) -> ClientUpdate:
    if len(client.data) < 1:
        raise ConfigError(f"client {client.client_id} has no data")
    rng = client_rng(cfg.seed, rnd, client.client_id)
    proposed = local_train(params, arch, client.data, cfg, rng)
    return ClientUpdate(client.client_id, len(client.data), proposed, client.is_malicious)


def fedavg_aggregate(state: GlobalState, subs: list, divisor: Optional[float] = None,
                     weights: Optional[np.ndarray] = None) -> ModelParams:
    """``theta + sum_i w_i (theta_i - theta) / divisor`` with ``w_i = n_i`` by default.

    ``divisor`` defaults to the participants' total weight.
    """
    if not subs:
        raise ConfigError("fedavg needs at least one update")
    w = np.array([s.n_samples for s in subs], dtype=np.float64) if weights is None else np.asarray(weights, float)
    total = float(w.sum()) if divisor is None else float(divisor)
    if total <= 0:
        raise ConfigError("total aggregation weight is zero")
    theta = state.params
    delta = ModelParams.zeros_like(theta)
    for wi, s in zip(w, subs):
        if wi:
            delta = delta + (s.proposed - theta) * (wi / total)
    return theta + delta


class FedAvg(Aggregator):
    name = "fedavg"

    def __init__(self, literal_divisor: bool = False):
        self.literal_divisor = literal_divisor

    def aggregate(self, state, subs, rng):
        divisor = state.total_samples if self.literal_divisor else None
        return fedavg_aggregate(state, subs, divisor), {}


def evaluate_acc(params, arch, test: Dataset, predict_fn=None) -> float:
    if len(test) == 0:
        raise ConfigError("empty test set")
    preds = (predict_fn or (lambda x: predict(params, arch, x)))(test.xs)
    return float(np.mean(preds == test.ys))


def evaluate_asr(params, arch, test: Dataset, trigger: Trigger, predict_fn=None) -> float:
    """Share of triggered non-target test samples predicted as the target."""
    keep = test.ys != trigger.target
    if not keep.any():
        raise ConfigError("ASR undefined: every test sample already has the target label")
    xs = apply_trigger(test.xs[keep], trigger)
    preds = (predict_fn or (lambda x: predict(params, arch, x)))(xs)
    return float(np.mean(preds == trigger.target))


def sample_clients(clients: list, cfg: RoundConfig, rnd: int) -> list:
    """Uniform sample without replacement, returned sorted by client id."""
    rng = np.random.default_rng([cfg.seed, rnd, _SELECT])
    ids = np.array([c.client_id for c in clients])
    if cfg.guaranteed_attackers:
        bad = np.array([c.client_id for c in clients if c.is_malicious])
        good = np.array([c.client_id for c in clients if not c.is_malicious])
        k = min(cfg.guaranteed_attackers, len(bad), cfg.clients_per_round)
        chosen = np.concatenate([rng.choice(bad, k, replace=False),
                                 rng.choice(good, cfg.clients_per_round - k, replace=False)])
    else:
        chosen = rng.choice(ids, cfg.clients_per_round, replace=False)
    by_id = {c.client_id: c for c in clients}
    return [by_id[i] for i in sorted(int(i) for i in chosen)]


def run_round(state: GlobalState, clients: list, aggregator: Aggregator, cfg: RoundConfig,
              attacker=None, test: Optional[Dataset] = None,
              eval_trigger: Optional[Trigger] = None) -> GlobalState:
    """One federated round; returns the next state with a metrics row appended.

    ``attacker`` (if given) produces updates for sampled malicious clients
    via ``attacker.update(state, client, cfg)`` and exposes
    ``attacker.eval_trigger()`` for ASR.
    """
    rnd = state.round
    chosen = sample_clients(clients, cfg, rnd)
    updates = []
    for client in chosen:
        if client.is_malicious and attacker is not None:
            upd = attacker.update(state, client, cfg)
        else:
            upd = local_train_benign(state.params, state.arch, client, cfg, rnd)
        upd.report.update(aggregator.client_report(upd.proposed, state.arch, client.data))
        updates.append(upd)
    subs = [u.submission() for u in updates]
    try:
        new_params, diag = aggregator.aggregate(state, subs, server_rng(cfg.seed, rnd))
    except FlipFedError as exc:
        raise type(exc)(f"round {rnd}, aggregator {aggregator.name}: {exc}") from exc

    nxt = GlobalState(rnd + 1, new_params, state.arch, state.params, state.total_samples, list(state.history))
    acc = asr = float("nan")
    if test is not None:
        eval_rng = np.random.default_rng([cfg.seed, rnd, _SERVER, 1])
        pf = lambda x: aggregator.predict(new_params, state.arch, x, eval_rng)
        acc = evaluate_acc(new_params, state.arch, test, pf)
        trig = attacker.eval_trigger() if attacker is not None else None
        trig = trig or eval_trigger
        if trig is not None:
            asr = evaluate_asr(new_params, state.arch, test, trig, pf)
    n_mal = sum(u.is_malicious for u in updates)
    diag = dict(diag)
    diag.setdefault("selected", [c.client_id for c in chosen])
    nxt.history.append(MetricsRow(rnd, acc, asr, aggregator.name, n_mal, diag))
    return nxt
