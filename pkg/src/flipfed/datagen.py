"""Synthetic image data, Dirichlet client partitions and backdoor triggers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .errors import ConfigError, DimensionError


@dataclass
class Dataset:
    xs: np.ndarray  # N x C x H x W in [0, 1]
    ys: np.ndarray  # N ints

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=np.float64)
        self.ys = np.asarray(self.ys, dtype=np.int64)
        if len(self.xs) != len(self.ys):
            raise DimensionError(f"{len(self.xs)} samples but {len(self.ys)} labels")

    def __len__(self):
        return len(self.ys)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.xs[idx], self.ys[idx])

    @property
    def image_shape(self):
        return self.xs.shape[1:]

    def save(self, path, **meta):
        header = {"kind": "dataset", "xs_shape": list(self.xs.shape), "meta": meta}
        flat = np.concatenate([self.xs.ravel(), self.ys.astype(np.float64)])
        checkpoint.write_array(path, flat, header)

    @classmethod
    def load(cls, path) -> "Dataset":
        flat, header = checkpoint.read_array(path)
        shape = tuple(header["xs_shape"])
        n = int(np.prod(shape))
        return cls(flat[:n].reshape(shape), flat[n:].astype(np.int64))


def class_templates(num_classes, img_dims, seed, template_range=(0.0, 1.0)) -> np.ndarray:
    rng = np.random.default_rng([seed, 0])
    lo, hi = template_range
    return rng.uniform(lo, hi, size=(num_classes,) + tuple(img_dims))


def gen_blobs_dataset(num_classes: int, samples_per_class: int, img_dims=(1, 8, 8),
                      noise_sd: float = 0.3, seed: int = 0, template_range=(0.0, 1.0)) -> Dataset:
    """Gaussian blobs around a random template image per class, clamped to [0, 1].

    Template pixels are uniform on ``template_range``.  Samples are
    shuffled; the result depends only on the arguments.
    """
    if num_classes < 1 or samples_per_class < 1 or min(img_dims) < 1:
        raise ConfigError("dataset dimensions must be positive")
    if not 0.0 <= template_range[0] <= template_range[1] <= 1.0:
        raise ConfigError("template range must lie within [0, 1]")
    templates = class_templates(num_classes, img_dims, seed, template_range)
    rng = np.random.default_rng([seed, 1])
    ys = np.repeat(np.arange(num_classes), samples_per_class)
    xs = templates[ys] + noise_sd * rng.standard_normal((len(ys),) + tuple(img_dims))
    np.clip(xs, 0.0, 1.0, out=xs)
    order = rng.permutation(len(ys))
    return Dataset(xs[order], ys[order])


def dirichlet_partition(ds: Dataset, num_clients: int, h: float, seed: int) -> list[np.ndarray]:
    """Split ``ds`` across clients with per-class Dirichlet(h) proportions.

    Each class's indices are shuffled and cut at the cumulative proportions.
    A client left empty takes one sample from the currently largest client
    (lowest client id on ties).  Returns one sorted index array per client.
    """
    if h <= 0:
        raise ConfigError("concentration h must be positive")
    if num_clients < 1:
        raise ConfigError("need at least one client")
    if len(ds) < num_clients:
        raise ConfigError(f"{len(ds)} samples cannot cover {num_clients} clients")
    rng = np.random.default_rng([seed, 2])
    parts = [[] for _ in range(num_clients)]
    for c in np.unique(ds.ys):
        idx = rng.permutation(np.flatnonzero(ds.ys == c))
        props = rng.dirichlet(np.full(num_clients, h))
        cuts = (np.cumsum(props)[:-1] * len(idx)).astype(np.int64)
        for client, chunk in enumerate(np.split(idx, cuts)):
            parts[client].extend(chunk.tolist())
    for client in range(num_clients):
        if not parts[client]:
            donor = max(range(num_clients), key=lambda k: (len(parts[k]), -k))
            parts[donor].sort()
            parts[client].append(parts[donor].pop())
    return [np.array(sorted(p), dtype=np.int64) for p in parts]


@dataclass
class Trigger:
    """A pixel patch placed wherever ``mask`` is one.

    ``pattern`` is ``(C, ph, pw)``; ``mask`` is ``(H, W)`` and its nonzero
    region is the ``ph x pw`` rectangle the patch occupies.
    """

    pattern: np.ndarray
    mask: np.ndarray
    target: int

    def __post_init__(self):
        self.pattern = np.clip(np.asarray(self.pattern, dtype=np.float64), 0.0, 1.0)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.pattern.ndim != 3 or self.mask.ndim != 2:
            raise DimensionError("pattern must be (C, ph, pw) and mask (H, W)")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise DimensionError("trigger mask must be binary")
        rows, cols = self.region()
        if (rows.stop - rows.start, cols.stop - cols.start) != self.pattern.shape[1:]:
            raise DimensionError(
                f"mask region {(rows.stop - rows.start, cols.stop - cols.start)} "
                f"does not match pattern {self.pattern.shape[1:]}")

    def region(self) -> tuple[slice, slice]:
        r, c = np.nonzero(self.mask)
        if r.size == 0:
            return slice(0, self.pattern.shape[1]), slice(0, self.pattern.shape[2])
        return slice(r.min(), r.max() + 1), slice(c.min(), c.max() + 1)

    def full_pattern(self) -> np.ndarray:
        """Pattern embedded into a ``(C, H, W)`` canvas (zeros outside)."""
        canvas = np.zeros((self.pattern.shape[0],) + self.mask.shape)
        if self.mask.any():
            rows, cols = self.region()
            canvas[:, rows, cols] = self.pattern
        return canvas

    def with_pattern(self, pattern) -> "Trigger":
        return Trigger(pattern, self.mask.copy(), self.target)

    def save(self, path, **meta):
        header = {"kind": "trigger", "pattern_shape": list(self.pattern.shape),
                  "mask_shape": list(self.mask.shape), "target": int(self.target), "meta": meta}
        checkpoint.write_array(path, np.concatenate([self.pattern.ravel(), self.mask.ravel()]), header)

    @classmethod
    def load(cls, path) -> "Trigger":
        flat, header = checkpoint.read_array(path)
        ps = tuple(header["pattern_shape"])
        n = int(np.prod(ps))
        return cls(flat[:n].reshape(ps), flat[n:].reshape(header["mask_shape"]), header["target"])


def corner_trigger(img_dims, size=3, target=0, value=1.0, corner="bottom_right") -> Trigger:
    """Square trigger of ``size`` pixels, all channels set to ``value``."""
    c, h, w = img_dims
    if size > min(h, w):
        raise ConfigError(f"trigger size {size} exceeds image {h}x{w}")
    mask = np.zeros((h, w))
    r0 = h - size if corner.startswith("bottom") else 0
    c0 = w - size if corner.endswith("right") else 0
    mask[r0:r0 + size, c0:c0 + size] = 1.0
    return Trigger(np.full((c, size, size), value), mask, target)


def average_triggers(triggers) -> Trigger:
    """Elementwise mean pattern of triggers sharing mask and target."""
    triggers = list(triggers)
    pattern = np.mean([t.pattern for t in triggers], axis=0)
    return triggers[0].with_pattern(pattern)


def apply_trigger(x: np.ndarray, trig: Trigger) -> np.ndarray:
    """``(1 - m) * x + m * pattern`` for one image or a batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-2:] != trig.mask.shape or x.shape[-3] != trig.pattern.shape[0]:
        raise DimensionError(f"image shape {x.shape} incompatible with trigger mask {trig.mask.shape}")
    m = trig.mask
    return (1.0 - m) * x + m * trig.full_pattern()


def resize_nearest(a: np.ndarray, target_hw) -> np.ndarray:
    """Nearest-neighbour resize of the last two axes: ``src[floor(i * H / H')]``."""
    a = np.asarray(a)
    th, tw = (int(d) for d in target_hw)
    if th < 1 or tw < 1:
        raise DimensionError("target dims must be positive")
    h, w = a.shape[-2:]
    ri = (np.arange(th) * h) // th
    ci = (np.arange(tw) * w) // tw
    return a[..., ri[:, None], ci[None, :]]


def resize_trigger(pattern: np.ndarray, target_dims) -> np.ndarray:
    return resize_nearest(pattern, target_dims)
