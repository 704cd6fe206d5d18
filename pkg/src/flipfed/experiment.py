"""Seeded experiment runner, metrics CSV, ablation and sweep suites."""

from __future__ import annotations

import copy
import csv
import dataclasses
import io
import json
import logging
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint
from .attack import BASELINE_RESCALE, F3BA, F3BA_TRIGOPT, TRAIN_ONLY, AttackConfig, Attacker
from .datagen import Dataset, corner_trigger, dirichlet_partition, gen_blobs_dataset
from .errors import ConfigError, FlipFedError
from .federation import Client, FedAvg, GlobalState, RoundConfig, run_round
from .nncore import Architecture, conv2d, dense, init_params
from .refinecert import (CRFL, CRFLConfig, DistillConfig, FedDF, FedMV, FedMVConfig, FedRAD,
                         FedRadConfig)
from .robustagg import (Bulyan, BulyanConfig, DeepSight, DeepSightConfig, RobustLR,
                        RobustLRConfig)

log = logging.getLogger(__name__)

ATTACKS = ("none", TRAIN_ONLY, F3BA, F3BA_TRIGOPT, BASELINE_RESCALE)
DEFENSES = ("fedavg", "feddf", "fedrad", "fedmv", "bulyan", "robust_lr", "deepsight", "crfl")
# defense-specific scalar columns; everything else goes in the diagnostics JSON
DEFENSE_COLUMNS = {"robust_lr": ["reversed_fraction"], "crfl": ["crfl_norm"], "fedmv": ["fedmv_erased"]}
BASE_COLUMNS = ["round", "acc", "asr", "aggregator", "n_malicious"]


@dataclass
class DataConfig:
    num_classes: int = 4
    train_per_class: int = 250
    test_per_class: int = 100
    server_per_class: int = 25
    img_dims: tuple = (1, 8, 8)
    noise_sd: float = 0.2
    template_range: tuple = (0.2, 0.8)


@dataclass
class ModelConfig:
    conv_filters: int = 4
    kernel: int = 3
    hidden: int = 16


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    num_clients: int = 20
    num_malicious: int = 4
    clients_per_round: int = 10
    h: float = 1.0
    rounds: int = 50
    local_steps: int = 6
    local_lr: float = 0.05
    batch_size: int = 16
    guaranteed_attackers: int = 0
    literal_fedavg_divisor: bool = False
    trigger_size: int = 3
    target_label: int = 0
    checkpoints: list = field(default_factory=lambda: [10, 25, 50])
    attack: str = F3BA_TRIGOPT
    attack_params: AttackConfig = field(default_factory=AttackConfig)
    defense: str = "fedavg"
    bulyan: BulyanConfig = field(default_factory=BulyanConfig)
    robust_lr: RobustLRConfig = field(default_factory=RobustLRConfig)
    deepsight: DeepSightConfig = field(default_factory=DeepSightConfig)
    feddf: DistillConfig = field(default_factory=DistillConfig)
    fedrad: FedRadConfig = field(default_factory=FedRadConfig)
    fedmv: FedMVConfig = field(default_factory=FedMVConfig)
    crfl: CRFLConfig = field(default_factory=CRFLConfig)
    trigger_dir: Optional[str] = None

    def validate(self):
        if self.attack not in ATTACKS:
            raise ConfigError(f"unknown attack {self.attack!r}")
        if self.defense not in DEFENSES:
            raise ConfigError(f"unknown defense {self.defense!r}")
        if not 0 <= self.num_malicious <= self.num_clients:
            raise ConfigError("num_malicious must be within [0, num_clients]")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if not 0 <= self.target_label < self.data.num_classes:
            raise ConfigError("target label out of range")
        if self.attack != "none":
            self.attack_config().validate()

    def attack_config(self) -> AttackConfig:
        mode = self.attack if self.attack != "none" else TRAIN_ONLY
        return dataclasses.replace(self.attack_params, mode=mode)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d)


def _build(cls, data):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    known = {f.name for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r} for {cls.__name__}")
        hint = hints[key]
        if dataclasses.is_dataclass(hint) and isinstance(value, dict):
            value = _build(hint, value)
        elif hint is tuple and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply ``dotted.key=value`` overrides (values parsed as JSON when possible)."""
    d = cfg.to_dict()
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        node = d
        parts = key.strip().split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config section {p!r} in {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = _coerce(raw)
    return ExperimentConfig.from_dict(d)


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# building blocks


def build_architecture(cfg: ExperimentConfig) -> Architecture:
    m = cfg.model
    return Architecture(tuple(cfg.data.img_dims), (
        conv2d(m.conv_filters, (m.kernel, m.kernel)),
        dense(m.hidden),
        dense(cfg.data.num_classes, activation="identity"),
    ))


@dataclass
class ExperimentData:
    train: Dataset
    test: Dataset
    server: Dataset
    partition: list


def build_data(cfg: ExperimentConfig) -> ExperimentData:
    d = cfg.data
    per_class = d.train_per_class + d.test_per_class + d.server_per_class
    full = gen_blobs_dataset(d.num_classes, per_class, tuple(d.img_dims), d.noise_sd, cfg.seed,
                              tuple(d.template_range))
    # stratified split so every part has each class in proportion
    tr, te, sv = [], [], []
    for c in range(d.num_classes):
        idx = np.flatnonzero(full.ys == c)
        te.extend(idx[:d.test_per_class])
        sv.extend(idx[d.test_per_class:d.test_per_class + d.server_per_class])
        tr.extend(idx[d.test_per_class + d.server_per_class:])
    train, test, server = (full.subset(np.sort(np.array(i, dtype=np.int64))) for i in (tr, te, sv))
    partition = dirichlet_partition(train, cfg.num_clients, cfg.h, cfg.seed)
    return ExperimentData(train, test, server, partition)


def malicious_ids(cfg: ExperimentConfig) -> set:
    if cfg.attack == "none":
        return set()
    rng = np.random.default_rng([cfg.seed, 7])
    return {int(i) for i in rng.choice(cfg.num_clients, cfg.num_malicious, replace=False)}


def build_aggregator(cfg: ExperimentConfig, data: ExperimentData):
    name = cfg.defense
    if name == "fedavg":
        return FedAvg(cfg.literal_fedavg_divisor)
    if name == "feddf":
        return FedDF(data.server.xs, cfg.feddf)
    if name == "fedrad":
        return FedRAD(data.server.xs, cfg.fedrad)
    if name == "fedmv":
        return FedMV(cfg.fedmv)
    if name == "bulyan":
        return Bulyan(cfg.bulyan)
    if name == "robust_lr":
        return RobustLR(cfg.robust_lr)
    if name == "deepsight":
        return DeepSight(cfg.deepsight)
    if name == "crfl":
        return CRFL(cfg.crfl)
    raise ConfigError(f"unknown defense {name!r}")


def round_config(cfg: ExperimentConfig) -> RoundConfig:
    rc = RoundConfig(cfg.clients_per_round, cfg.local_steps, cfg.local_lr, cfg.batch_size, cfg.seed,
                     cfg.guaranteed_attackers, cfg.literal_fedavg_divisor)
    rc.validate(cfg.num_clients)
    return rc


# ---------------------------------------------------------------------------
# CSV


def csv_columns(cfg: ExperimentConfig) -> list:
    return BASE_COLUMNS + DEFENSE_COLUMNS.get(cfg.defense, []) + ["diagnostics"]


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def metrics_record(row, columns) -> list:
    diag = dict(row.diagnostics)
    out = [row.round, row.acc, row.asr, row.aggregator, row.n_malicious]
    for col in columns[len(BASE_COLUMNS):-1]:
        out.append(diag.pop(col, ""))
    out.append(json.dumps(diag, sort_keys=True))
    return [_fmt(v) for v in out]


def read_metrics_csv(path):
    """Return ``(config_dict, rows)`` from a metrics CSV."""
    lines = Path(path).read_text().splitlines()
    config = {}
    body = []
    for line in lines:
        if line.startswith("# config: "):
            config = json.loads(line[len("# config: "):])
        elif not line.startswith("#"):
            body.append(line)
    rows = list(csv.DictReader(io.StringIO("\n".join(body))))
    return config, rows


# ---------------------------------------------------------------------------
# running


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    history: list
    final: GlobalState
    attacker: Optional[Attacker] = None

    def final_metrics(self) -> dict:
        last = self.history[-1]
        return {"round": last.round, "acc": last.acc, "asr": last.asr}

    def metric_at(self, rnd: int, key: str = "asr") -> float:
        """Metric after ``rnd`` aggregations (1-based round count)."""
        return getattr(self.history[min(rnd, len(self.history)) - 1], key)

    def mean_diagnostic(self, key: str) -> float:
        vals = [r.diagnostics[key] for r in self.history if key in r.diagnostics]
        return float(np.mean(vals)) if vals else float("nan")


def run_experiment(cfg: ExperimentConfig, csv_path=None, checkpoint_path=None) -> ExperimentResult:
    """Run one seeded experiment, evaluating ACC/ASR after every aggregation.

    Rows are flushed to ``csv_path`` as they are produced, so a failed run
    leaves its completed rounds on disk.
    """
    cfg.validate()
    data = build_data(cfg)
    arch = build_architecture(cfg)
    rcfg = round_config(cfg)
    bad = malicious_ids(cfg)
    clients = [Client(i, data.train.subset(idx), i in bad) for i, idx in enumerate(data.partition)]
    base_trigger = corner_trigger(tuple(cfg.data.img_dims), cfg.trigger_size, cfg.target_label)
    attacker = Attacker(arch, base_trigger, cfg.attack_config()) if cfg.attack != "none" else None
    aggregator = build_aggregator(cfg, data)
    params = init_params(arch, np.random.default_rng([cfg.seed, 3]))
    state = GlobalState(0, params, arch, None, len(data.train))
    columns = csv_columns(cfg)

    if csv_path:
        Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
    fh = open(csv_path, "w", newline="") if csv_path else None
    try:
        writer = None
        if fh:
            fh.write(f"# config: {cfg.to_json()}\n")
            fh.write("# partition: " + json.dumps([len(p) for p in data.partition]) + "\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(columns)
        for rnd in range(cfg.rounds):
            try:
                state = run_round(state, clients, aggregator, rcfg, attacker, data.test, base_trigger)
            except FlipFedError as exc:
                raise type(exc)(f"experiment aborted in round {rnd}: {exc}") from exc
            row = state.history[-1]
            if writer:
                writer.writerow(metrics_record(row, columns))
                fh.flush()
            if cfg.trigger_dir and attacker is not None and attacker.triggers:
                tdir = Path(cfg.trigger_dir)
                tdir.mkdir(parents=True, exist_ok=True)
                for cid, trig in sorted(attacker.triggers.items()):
                    trig.save(tdir / f"round{rnd:04d}_client{cid}.trig", round=rnd, client=cid)
            log.debug("round %d acc=%.3f asr=%.3f", rnd, row.acc, row.asr)
    finally:
        if fh:
            fh.close()
    if checkpoint_path:
        checkpoint.save_model(checkpoint_path, state.params, arch, round=state.round, seed=cfg.seed)
    return ExperimentResult(cfg, state.history, state, attacker)


ABLATION_MODES = (TRAIN_ONLY, F3BA, F3BA_TRIGOPT)
ABLATION_LABELS = {TRAIN_ONLY: "train", F3BA: "train+flip", F3BA_TRIGOPT: "train+flip+trigopt"}


def ablation_suite(base: ExperimentConfig, checkpoints=None, csv_path_for=None) -> dict:
    """Run the three attack variants with shared seeds.

    Returns ``{"checkpoints": [...], "columns": [...], "asr": [[...]], "results": {...}}``
    with one ASR row per checkpoint and one column per variant.
    ``csv_path_for(mode)`` optionally names a metrics CSV per variant.
    """
    checkpoints = [c for c in (checkpoints or base.checkpoints) if c <= base.rounds] or [base.rounds]
    results = {}
    for mode in ABLATION_MODES:
        cfg = copy.deepcopy(base)
        cfg.attack = mode
        results[mode] = run_experiment(cfg, csv_path_for(mode) if csv_path_for else None)
    table = [[results[m].metric_at(c, "asr") for m in ABLATION_MODES] for c in checkpoints]
    return {"checkpoints": checkpoints, "columns": [ABLATION_LABELS[m] for m in ABLATION_MODES],
            "asr": table, "results": results}


def sweep(base: ExperimentConfig, key: str, values, csv_path_for=None) -> list:
    """Run ``base`` once per value of the dotted config ``key``."""
    out = []
    for v in values:
        cfg = apply_overrides(base, [f"{key}={json.dumps(v)}"])
        out.append((v, run_experiment(cfg, csv_path_for(v) if csv_path_for else None)))
    return out
