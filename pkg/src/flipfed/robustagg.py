"""Robust aggregation: Bulyan, sign-voting robust learning rate, DeepSight."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, PreconditionError
from .federation import Aggregator, GlobalState, fedavg_aggregate
from .nncore import ModelParams, flatten, forward, softmax, unflatten

NOISE = -1


# ---------------------------------------------------------------------------
# DBSCAN


def dbscan(dist: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Density clustering on a precomputed distance matrix.

    A point is core when at least ``min_pts`` points (itself included) lie
    within ``eps``.  Points are scanned in index order and each cluster is
    expanded fully before the next starts, so a border point joins the
    first cluster that reaches it.  Noise is labelled -1.
    """
    dist = np.asarray(dist, dtype=np.float64)
    n = dist.shape[0]
    if eps <= 0 or min_pts < 1:
        raise ConfigError("dbscan needs eps > 0 and min_pts >= 1")
    neighbours = [np.flatnonzero(dist[i] <= eps) for i in range(n)]
    core = np.array([len(nb) >= min_pts for nb in neighbours], dtype=bool)
    labels = np.full(n, NOISE, dtype=np.int64)
    visited = np.zeros(n, dtype=bool)
    cluster = 0
    for i in range(n):
        if visited[i] or not core[i]:
            continue
        visited[i] = True
        labels[i] = cluster
        queue = [i]
        while queue:
            p = queue.pop(0)
            for q in neighbours[p]:
                if labels[q] == NOISE:
                    labels[q] = cluster
                if core[q] and not visited[q]:
                    visited[q] = True
                    queue.append(q)
        cluster += 1
    return labels


# ---------------------------------------------------------------------------
# Bulyan


def bulyan_select(vectors: np.ndarray, ids, f: int) -> list:
    """Greedy selection of ``n - 2f`` rows, each minimising its summed
    distance to the rows still in the received set.  Ties go to the lower id.
    """
    n = len(vectors)
    d = np.sqrt(np.maximum(((vectors[:, None, :] - vectors[None, :, :]) ** 2).sum(-1), 0.0))
    remaining = list(range(n))
    chosen = []
    while len(chosen) < n - 2 * f:
        sums = {i: sum(d[i, j] for j in remaining if j != i) for i in remaining}
        best = min(remaining, key=lambda i: (sums[i], ids[i]))
        chosen.append(best)
        remaining.remove(best)
    return chosen


def bulyan_coordinates(selected: np.ndarray, keep: int) -> np.ndarray:
    """Per coordinate: mean of the ``keep`` values closest to the median.

    The median is the lower middle element for even counts.  Equidistant
    values are taken smaller-first.
    """
    s = np.sort(selected, axis=0)
    k = s.shape[0]
    med = s[(k - 1) // 2]
    dist = np.abs(s - med)
    # sorted values: stable sort on distance keeps smaller values first on ties
    order = np.argsort(dist, axis=0, kind="stable")[:keep]
    picked = np.take_along_axis(s, order, axis=0)
    # average in ascending order so the result does not depend on pick order
    return np.sort(picked, axis=0).mean(axis=0)


def bulyan_vectors(vectors: np.ndarray, ids, f: int):
    n = len(vectors)
    if n < 4 * f + 3:
        raise PreconditionError(f"Bulyan needs n >= 4f + 3, got n={n}, f={f}")
    chosen = bulyan_select(vectors, ids, f)
    return bulyan_coordinates(vectors[chosen], n - 4 * f), chosen


def _update_matrix(state: GlobalState, subs) -> np.ndarray:
    base = flatten(state.params)
    return np.stack([flatten(s.proposed) - base for s in subs])


def bulyan_aggregate(state: GlobalState, subs, assumed_f: int) -> tuple:
    ids = [s.client_id for s in subs]
    g, chosen = bulyan_vectors(_update_matrix(state, subs), ids, assumed_f)
    new = unflatten(flatten(state.params) + g, state.arch)
    return new, {"bulyan_selected": sorted(ids[i] for i in chosen)}


@dataclass
class BulyanConfig:
    assumed_f: int = 1


class Bulyan(Aggregator):
    name = "bulyan"

    def __init__(self, cfg: Optional[BulyanConfig] = None):
        self.cfg = cfg or BulyanConfig()

    def aggregate(self, state, subs, rng):
        return bulyan_aggregate(state, subs, self.cfg.assumed_f)


# ---------------------------------------------------------------------------
# Robust learning rate


def sign_votes(updates: np.ndarray) -> np.ndarray:
    """``|sum_i sgn(u_i[k])|`` per coordinate, with sgn(0) = 0."""
    return np.abs(np.sign(updates).sum(axis=0))


def robust_lr_rates(updates: np.ndarray, beta: int, lr: float = 1.0) -> np.ndarray:
    return np.where(sign_votes(updates) >= beta, lr, -lr)


def reversed_coordinate_fraction(updates: np.ndarray, beta: int) -> float:
    """Share of coordinates whose sign vote falls below ``beta``."""
    updates = np.atleast_2d(np.asarray(updates, dtype=np.float64))
    return float(np.mean(sign_votes(updates) < beta))


@dataclass
class RobustLRConfig:
    threshold: int = 5  # must exceed the attacker count (4 in the desk config)
    server_lr: float = 1.0

    def validate(self):
        if self.threshold < 1:
            raise ConfigError("robust LR threshold must be >= 1")


def robust_lr_aggregate(state: GlobalState, subs, cfg: RobustLRConfig) -> tuple:
    cfg.validate()
    if cfg.threshold > len(subs):
        raise PreconditionError(f"robust LR threshold {cfg.threshold} exceeds {len(subs)} updates")
    u = _update_matrix(state, subs)
    n = np.array([s.n_samples for s in subs], dtype=np.float64)
    mean = (n[:, None] * u).sum(axis=0) / n.sum()
    rates = robust_lr_rates(u, cfg.threshold, cfg.server_lr)
    new = unflatten(flatten(state.params) + rates * mean, state.arch)
    return new, {"reversed_fraction": float(np.mean(rates < 0))}


class RobustLR(Aggregator):
    name = "robust_lr"

    def __init__(self, cfg: Optional[RobustLRConfig] = None):
        self.cfg = cfg or RobustLRConfig()

    def aggregate(self, state, subs, rng):
        return robust_lr_aggregate(state, subs, self.cfg)


# ---------------------------------------------------------------------------
# DeepSight


@dataclass
class DeepSightConfig:
    num_random_inputs: int = 64
    # None: use the median off-diagonal distance of that matrix
    eps_bias: Optional[float] = None
    eps_conv: Optional[float] = None
    eps_prob: Optional[float] = None
    eps_final: float = 0.5
    min_pts: int = 2
    exclusion_threshold: float = 1 / 3
    mad_factor: float = 2.0

    def validate(self):
        if self.num_random_inputs < 1:
            raise ConfigError("DeepSight needs at least one random input")
        if not 0 < self.exclusion_threshold <= 1:
            raise ConfigError("exclusion threshold must be in (0, 1]")


def cosine_distance_matrix(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = vectors / safe[:, None]
    d = 1.0 - unit @ unit.T
    d[(norms == 0)[:, None] | (norms == 0)[None, :]] = 1.0
    np.fill_diagonal(d, 0.0)
    return np.clip((d + d.T) / 2, 0.0, 2.0)


def euclidean_distance_matrix(vectors: np.ndarray) -> np.ndarray:
    sq = ((vectors[:, None, :] - vectors[None, :, :]) ** 2).sum(-1)
    d = np.sqrt(np.maximum(sq, 0.0))
    np.fill_diagonal(d, 0.0)
    return d


def agreement_distance(label_sets) -> np.ndarray:
    """``len(label_sets) - #{r : r[i] == r[j]}``; noise never agrees with another point."""
    label_sets = [np.asarray(r) for r in label_sets]
    n = len(label_sets[0])
    count = np.zeros((n, n))
    for r in label_sets:
        same = (r[:, None] == r[None, :]) & (r[:, None] != NOISE)
        count += same
    d = len(label_sets) - count
    np.fill_diagonal(d, 0.0)
    return d


def concentration_flags(mean_probs: np.ndarray, mad_factor: float = 2.0) -> np.ndarray:
    """Flag clients whose top mean class probability is unusually high.

    Threshold: cohort median + ``mad_factor`` * median absolute deviation.
    This stands in for DeepSight's NEUP-based labelling.
    """
    top = mean_probs.max(axis=1)
    med = np.median(top)
    mad = np.median(np.abs(top - med))
    return top > med + mad_factor * mad


def _auto_eps(d: np.ndarray, eps: Optional[float]) -> float:
    if eps is not None:
        return eps
    off = d[~np.eye(len(d), dtype=bool)]
    m = float(np.median(off)) if off.size else 0.0
    return m if m > 0 else 1e-12


def deepsight_filter(state: GlobalState, subs, rng: np.random.Generator, cfg: DeepSightConfig):
    """Return ``(kept_indices, diagnostics)`` for a list of submissions."""
    cfg.validate()
    n = len(subs)
    if n < 2:
        return list(range(n)), {"deepsight_flagged": [], "deepsight_excluded": [], "deepsight_fallback": False}
    arch = state.arch
    x_rand = rng.uniform(0.0, 1.0, size=(cfg.num_random_inputs,) + arch.input_shape)
    probs = np.stack([softmax(forward(s.proposed, arch, x_rand)).mean(axis=0) for s in subs])
    flags = concentration_flags(probs, cfg.mad_factor)

    last = len(arch.layers) - 1
    g_last = np.concatenate([state.params.weights[last].ravel(), state.params.biases[last]])
    last_w = np.stack([np.concatenate([s.proposed.weights[last].ravel(), s.proposed.biases[last]]) for s in subs])
    d_bias = cosine_distance_matrix(last_w - g_last)
    d_conv = euclidean_distance_matrix(last_w)
    d_prob = euclidean_distance_matrix(probs)
    labels = [
        dbscan(d_bias, _auto_eps(d_bias, cfg.eps_bias), cfg.min_pts),
        dbscan(d_conv, _auto_eps(d_conv, cfg.eps_conv), cfg.min_pts),
        dbscan(d_prob, _auto_eps(d_prob, cfg.eps_prob), cfg.min_pts),
    ]
    final = dbscan(agreement_distance(labels), cfg.eps_final, cfg.min_pts)
    # noise points form singleton clusters
    groups = {}
    for i, lab in enumerate(final):
        groups.setdefault(("c", int(lab)) if lab != NOISE else ("n", i), []).append(i)
    excluded = []
    for members in groups.values():
        if np.mean(flags[members]) > cfg.exclusion_threshold:
            excluded.extend(members)
    kept = [i for i in range(n) if i not in set(excluded)]
    fallback = not kept
    if fallback:
        kept = list(range(n))
    ids = [s.client_id for s in subs]
    diag = {
        "deepsight_flagged": sorted(ids[i] for i in np.flatnonzero(flags)),
        "deepsight_excluded": [] if fallback else sorted(ids[i] for i in excluded),
        "deepsight_fallback": fallback,
        "deepsight_labels": {str(ids[i]): int(final[i]) for i in range(n)},
    }
    return kept, diag


class DeepSight(Aggregator):
    name = "deepsight"

    def __init__(self, cfg: Optional[DeepSightConfig] = None):
        self.cfg = cfg or DeepSightConfig()

    def aggregate(self, state, subs, rng):
        kept, diag = deepsight_filter(state, subs, rng, self.cfg)
        return fedavg_aggregate(state, [subs[i] for i in kept]), diag
