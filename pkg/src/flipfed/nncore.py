"""Small differentiable network engine with hand-written backprop.

Supports stacks of ``conv2d`` (valid padding, stride 1) and ``dense``
layers with ReLU or identity activations.  Everything is float64 numpy.

Parameter layout
----------------
Dense weights are ``(out, in)``, conv weights ``(filters, channels, kh, kw)``;
every layer also has a bias vector.  :func:`flatten` orders coordinates
layer-major, weight before bias, row-major (C order) within each array.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericError

DENSE = "dense"
CONV2D = "conv2d"
RELU = "relu"
IDENTITY = "identity"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out: int
    kernel: tuple[int, int] = (3, 3)
    activation: str = RELU

    def __post_init__(self):
        if self.kind not in (DENSE, CONV2D):
            raise DimensionError(f"unknown layer kind {self.kind!r}")
        if self.activation not in (RELU, IDENTITY):
            raise DimensionError(f"unknown activation {self.activation!r}")
        if self.out < 1:
            raise DimensionError("layer output size must be positive")
        if self.kind == CONV2D and min(self.kernel) < 1:
            raise DimensionError(f"conv kernel dims must be positive, got {self.kernel}")


def dense(out: int, activation: str = RELU) -> LayerSpec:
    return LayerSpec(DENSE, out, activation=activation)


def conv2d(filters: int, kernel=(3, 3), activation: str = RELU) -> LayerSpec:
    return LayerSpec(CONV2D, filters, tuple(kernel), activation)


@dataclass(frozen=True)
class Architecture:
    """Input shape (without batch dim) plus an ordered list of layers."""

    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise DimensionError("architecture needs at least one layer")
        # computing shapes validates the chain
        self.output_shapes()

    def output_shapes(self) -> list[tuple[int, ...]]:
        shapes = []
        cur = self.input_shape
        for j, layer in enumerate(self.layers):
            if layer.kind == CONV2D:
                if len(cur) != 3:
                    raise DimensionError(f"layer {j}: conv2d needs (C, H, W) input, got {cur}")
                c, h, w = cur
                kh, kw = layer.kernel
                if kh > h or kw > w:
                    raise DimensionError(f"layer {j}: kernel {layer.kernel} larger than input {cur}")
                cur = (layer.out, h - kh + 1, w - kw + 1)
            else:
                cur = (layer.out,)
            shapes.append(cur)
        return shapes

    def input_shapes(self) -> list[tuple[int, ...]]:
        return [self.input_shape] + self.output_shapes()[:-1]

    def param_shapes(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        out = []
        for layer, in_shape in zip(self.layers, self.input_shapes()):
            if layer.kind == CONV2D:
                w = (layer.out, in_shape[0]) + tuple(layer.kernel)
            else:
                w = (layer.out, int(np.prod(in_shape)))
            out.append((w, (layer.out,)))
        return out

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [
                {"kind": l.kind, "out": l.out, "kernel": list(l.kernel), "activation": l.activation}
                for l in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        layers = [
            LayerSpec(l["kind"], int(l["out"]), tuple(l.get("kernel", (3, 3))), l.get("activation", RELU))
            for l in d["layers"]
        ]
        return cls(tuple(d["input_shape"]), tuple(layers))


@dataclass
class ModelParams:
    """Per-layer weight and bias arrays."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise DimensionError("weights and biases differ in layer count")

    def __len__(self):
        return len(self.weights)

    def copy(self) -> "ModelParams":
        return ModelParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def arrays(self) -> list[np.ndarray]:
        """Arrays in flatten order: w1, b1, w2, b2, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def _zip(self, other, op):
        if not isinstance(other, ModelParams):
            return ModelParams([op(w, other) for w in self.weights], [op(b, other) for b in self.biases])
        _check_same_shapes(self, other)
        return ModelParams(
            [op(a, b) for a, b in zip(self.weights, other.weights)],
            [op(a, b) for a, b in zip(self.biases, other.biases)],
        )

    def __add__(self, other):
        return self._zip(other, np.add)

    def __sub__(self, other):
        return self._zip(other, np.subtract)

    def __mul__(self, scalar):
        return self._zip(scalar, np.multiply)

    __rmul__ = __mul__

    def sq_norm(self) -> float:
        return float(sum(np.sum(a * a) for a in self.arrays()))

    def norm(self) -> float:
        return float(np.sqrt(self.sq_norm()))

    def allclose(self, other, **kw) -> bool:
        return all(np.allclose(a, b, **kw) for a, b in zip(self.arrays(), other.arrays()))

    def equal(self, other) -> bool:
        return len(self) == len(other) and all(
            a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())
        )

    @classmethod
    def zeros_like(cls, other: "ModelParams") -> "ModelParams":
        return cls([np.zeros_like(w) for w in other.weights], [np.zeros_like(b) for b in other.biases])


def _check_same_shapes(a: ModelParams, b: ModelParams):
    if len(a) != len(b):
        raise DimensionError(f"layer count mismatch: {len(a)} vs {len(b)}")
    for j, (x, y) in enumerate(zip(a.arrays(), b.arrays())):
        if x.shape != y.shape:
            raise DimensionError(f"array {j}: shape {x.shape} vs {y.shape}")


def check_params(params: ModelParams, arch: Architecture):
    shapes = arch.param_shapes()
    if len(shapes) != len(params):
        raise DimensionError(f"model has {len(params)} layers, architecture {len(shapes)}")
    for j, ((ws, bs), w, b) in enumerate(zip(shapes, params.weights, params.biases)):
        if w.shape != ws or b.shape != bs:
            raise DimensionError(f"layer {j}: expected {ws}/{bs}, got {w.shape}/{b.shape}")


def init_params(arch: Architecture, rng: np.random.Generator) -> ModelParams:
    """He-uniform weights, zero biases."""
    weights, biases = [], []
    for ws, bs in arch.param_shapes():
        fan_in = int(np.prod(ws[1:]))
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=ws))
        biases.append(np.zeros(bs))
    return ModelParams(weights, biases)


# ---------------------------------------------------------------------------
# flatten / unflatten


def flatten(params: ModelParams) -> np.ndarray:
    return np.concatenate([a.ravel() for a in params.arrays()]).astype(np.float64, copy=False)


def unflatten(flat: np.ndarray, arch: Architecture) -> ModelParams:
    flat = np.asarray(flat, dtype=np.float64)
    shapes = arch.param_shapes()
    total = sum(int(np.prod(w)) + int(np.prod(b)) for w, b in shapes)
    if flat.ndim != 1 or flat.size != total:
        raise DimensionError(f"flat vector has {flat.size} entries, architecture needs {total}")
    weights, biases, pos = [], [], 0
    for ws, bs in shapes:
        n = int(np.prod(ws))
        weights.append(flat[pos:pos + n].reshape(ws).copy())
        pos += n
        n = int(np.prod(bs))
        biases.append(flat[pos:pos + n].reshape(bs).copy())
        pos += n
    return ModelParams(weights, biases)


def flat_index(arch: Architecture, k: int) -> tuple[int, str, tuple[int, ...]]:
    """Map flat coordinate ``k`` to ``(layer, "weight"|"bias", array index)``."""
    pos = 0
    for j, (ws, bs) in enumerate(arch.param_shapes()):
        for name, shape in (("weight", ws), ("bias", bs)):
            n = int(np.prod(shape))
            if k < pos + n:
                return j, name, tuple(int(i) for i in np.unravel_index(k - pos, shape))
            pos += n
    raise IndexError(f"flat index {k} out of range ({pos})")


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class ActivationTrace:
    """Per-layer inputs, pre-activations ``z`` and post-activations ``a``."""

    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)

    def __len__(self):
        return len(self.pre)


def _activate(z, kind):
    return np.maximum(z, 0.0) if kind == RELU else z


def _conv_forward(x, w, b):
    kh, kw = w.shape[2:]
    patches = sliding_window_view(x, (kh, kw), axis=(2, 3))  # N C Ho Wo kh kw
    z = np.tensordot(patches, w, axes=([1, 4, 5], [1, 2, 3]))  # N Ho Wo F
    return z.transpose(0, 3, 1, 2) + b[None, :, None, None]


def _conv_backward(x, w, gz):
    kh, kw = w.shape[2:]
    patches = sliding_window_view(x, (kh, kw), axis=(2, 3))
    gw = np.tensordot(gz, patches, axes=([0, 2, 3], [0, 2, 3]))  # F C kh kw
    gb = gz.sum(axis=(0, 2, 3))
    ho, wo = gz.shape[2:]
    gx = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            # (N F Ho Wo) x (F C) -> N Ho Wo C
            contrib = np.tensordot(gz, w[:, :, i, j], axes=([1], [0]))
            gx[:, :, i:i + ho, j:j + wo] += contrib.transpose(0, 3, 1, 2)
    return gw, gb, gx


def forward_with_trace(params: ModelParams, arch: Architecture, batch: np.ndarray):
    """Run the network; returns ``(logits, trace)``.

    ``logits`` is the last layer's pre-activation.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.shape[1:] != arch.input_shape:
        raise DimensionError(f"batch shape {x.shape} does not match input {arch.input_shape}")
    check_params(params, arch)
    trace = ActivationTrace()
    cur = x
    for layer, w, b in zip(arch.layers, params.weights, params.biases):
        if layer.kind == CONV2D:
            z = _conv_forward(cur, w, b)
        else:
            cur = cur.reshape(cur.shape[0], -1)
            z = cur @ w.T + b
        trace.inputs.append(cur)
        trace.pre.append(z)
        cur = _activate(z, layer.activation)
        trace.post.append(cur)
    return trace.pre[-1], trace


def forward(params: ModelParams, arch: Architecture, batch: np.ndarray) -> np.ndarray:
    return forward_with_trace(params, arch, batch)[0]


def predict(params: ModelParams, arch: Architecture, batch: np.ndarray) -> np.ndarray:
    return np.argmax(forward(params, arch, batch), axis=1)


def backward(params: ModelParams, arch: Architecture, trace: ActivationTrace,
             pre_grads: Optional[dict] = None, post_grads: Optional[dict] = None):
    """Backpropagate upstream gradients through a recorded trace.

    ``pre_grads[j]`` is dL/dz_j and ``post_grads[j]`` is dL/da_j; either may
    be given for any subset of layers.  Returns ``(param_grads, grad_input)``.
    """
    pre_grads = pre_grads or {}
    post_grads = post_grads or {}
    touched = set(pre_grads) | set(post_grads)
    if not touched:
        raise ValueError("no upstream gradient supplied")
    top = max(touched)
    gw = [np.zeros_like(w) for w in params.weights]
    gb = [np.zeros_like(b) for b in params.biases]
    g_post = None
    for j in range(top, -1, -1):
        layer = arch.layers[j]
        if j in post_grads:
            g_post = post_grads[j] if g_post is None else g_post + post_grads[j]
        g_pre = None
        if g_post is not None:
            g_pre = g_post * (trace.pre[j] > 0) if layer.activation == RELU else g_post
        if j in pre_grads:
            g_pre = pre_grads[j] if g_pre is None else g_pre + pre_grads[j]
        if g_pre is None:
            g_post = None
            continue
        inp = trace.inputs[j]
        w = params.weights[j]
        if layer.kind == CONV2D:
            gw[j], gb[j], g_in = _conv_backward(inp, w, g_pre)
        else:
            gw[j] = g_pre.T @ inp
            gb[j] = g_pre.sum(axis=0)
            g_in = g_pre @ w
        prev_shape = arch.input_shape if j == 0 else trace.post[j - 1].shape[1:]
        g_post = g_in.reshape((g_in.shape[0],) + tuple(prev_shape))
    return ModelParams(gw, gb), g_post


# ---------------------------------------------------------------------------
# losses


def log_softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    return np.exp(log_softmax(logits, temperature))


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,) or (n and (labels.min() < 0 or labels.max() >= c)):
        raise DimensionError(f"labels must be {n} ints in [0, {c})")
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    g = np.exp(logp)
    g[np.arange(n), labels] -= 1.0
    return float(loss), g / n


def kl_divergence(p_logits, q_logits, temperature: float = 1.0) -> float:
    """KL(softmax(p) || softmax(q)), averaged over rows for 2-D input."""
    p_logits = np.asarray(p_logits, dtype=np.float64)
    q_logits = np.asarray(q_logits, dtype=np.float64)
    if p_logits.shape != q_logits.shape:
        raise DimensionError(f"shape mismatch {p_logits.shape} vs {q_logits.shape}")
    lp = log_softmax(np.atleast_2d(p_logits), temperature)
    lq = log_softmax(np.atleast_2d(q_logits), temperature)
    kl = (np.exp(lp) * (lp - lq)).sum(axis=-1)
    return float(max(kl.mean(), 0.0))


def _kl_grad(teacher_logits, student_logits, temperature):
    # d/ds KL(softmax(t/T) || softmax(s/T)) averaged over the batch
    n = student_logits.shape[0]
    p = softmax(teacher_logits, temperature)
    q = softmax(student_logits, temperature)
    return (q - p) / (temperature * n)


CROSS_ENTROPY = "cross_entropy"
BACKDOOR_COMPOSITE = "backdoor_composite"
KL_DISTILL = "kl_distill"
TRIGGER_ACTIVATION = "trigger_activation"
LOSS_KINDS = (CROSS_ENTROPY, BACKDOOR_COMPOSITE, KL_DISTILL, TRIGGER_ACTIVATION)


@dataclass
class LossSpec:
    """Loss selection plus whatever context the chosen kind needs.

    backdoor_composite: ``CE(clean) + lam * CE(triggered_x -> target_label)
    + alpha * ||theta - anchor||^2``.  kl_distill: ``teacher_logits`` and
    ``temperature``.  trigger_activation: ``triggered_x``; the loss is the
    batch-mean squared distance between the first layer's clean and
    triggered activations.
    """

    kind: str = CROSS_ENTROPY
    lam: float = 0.0
    alpha: float = 0.0
    anchor: Optional[ModelParams] = None
    triggered_x: Optional[np.ndarray] = None
    target_label: Optional[int] = None
    teacher_logits: Optional[np.ndarray] = None
    temperature: float = 1.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.lam < 0 or self.alpha < 0:
            raise ValueError("lam and alpha must be non-negative")


def _first_bad_layer(trace: ActivationTrace) -> int:
    for j, z in enumerate(trace.pre):
        if not np.all(np.isfinite(z)):
            return j
    return len(trace) - 1


def _ensure_finite(loss, trace):
    if not np.isfinite(loss):
        j = _first_bad_layer(trace)
        raise NumericError(f"non-finite loss (first non-finite output at layer {j})", where=j)


def trigger_activation_loss(params: ModelParams, arch: Architecture, x: np.ndarray, x_trig: np.ndarray):
    """First-layer activation gap and its gradients.

    Returns ``(loss, param_grads, grad_wrt_x_trig)`` where
    ``loss = mean_n ||a1(x_n) - a1(x_trig_n)||^2``.
    """
    one = Architecture(arch.input_shape, arch.layers[:1])
    head = ModelParams(params.weights[:1], params.biases[:1])
    _, tc = forward_with_trace(head, one, x)
    _, tt = forward_with_trace(head, one, x_trig)
    n = x.shape[0]
    diff = tc.post[0] - tt.post[0]
    loss = float(np.sum(diff * diff) / n)
    _ensure_finite(loss, tt)
    gc, _ = backward(head, one, tc, post_grads={0: 2.0 * diff / n})
    gt, gx = backward(head, one, tt, post_grads={0: -2.0 * diff / n})
    grads = ModelParams.zeros_like(params)
    grads.weights[0] = gc.weights[0] + gt.weights[0]
    grads.biases[0] = gc.biases[0] + gt.biases[0]
    return loss, grads, gx


def loss_and_grad(params: ModelParams, arch: Architecture, batch_x, batch_y, loss: LossSpec):
    """Loss value and parameter gradients for any supported loss kind."""
    if loss.kind == TRIGGER_ACTIVATION:
        value, grads, _ = trigger_activation_loss(params, arch, batch_x, loss.triggered_x)
        return value, grads

    logits, trace = forward_with_trace(params, arch, batch_x)
    if loss.kind == KL_DISTILL:
        if loss.teacher_logits is None or loss.teacher_logits.shape != logits.shape:
            raise DimensionError("kl_distill needs teacher logits shaped like the student's")
        value = kl_divergence(loss.teacher_logits, logits, loss.temperature)
        _ensure_finite(value, trace)
        g = _kl_grad(loss.teacher_logits, logits, loss.temperature)
        grads, _ = backward(params, arch, trace, pre_grads={len(arch.layers) - 1: g})
        return value, grads

    value, g = cross_entropy(logits, batch_y)
    _ensure_finite(value, trace)
    grads, _ = backward(params, arch, trace, pre_grads={len(arch.layers) - 1: g})
    if loss.kind == CROSS_ENTROPY:
        return value, grads

    # backdoor_composite; zero-weight terms are skipped so lam=alpha=0 is
    # bitwise identical to plain cross-entropy
    if loss.lam > 0:
        if loss.triggered_x is None or loss.target_label is None:
            raise ValueError("backdoor_composite needs triggered_x and target_label")
        t_logits, t_trace = forward_with_trace(params, arch, loss.triggered_x)
        targets = np.full(t_logits.shape[0], int(loss.target_label))
        t_value, tg = cross_entropy(t_logits, targets)
        _ensure_finite(t_value, t_trace)
        t_grads, _ = backward(params, arch, t_trace, pre_grads={len(arch.layers) - 1: tg})
        value += loss.lam * t_value
        grads = grads + t_grads * loss.lam
    if loss.alpha > 0:
        if loss.anchor is None:
            raise ValueError("backdoor_composite with alpha > 0 needs an anchor model")
        delta = params - loss.anchor
        value += loss.alpha * delta.sq_norm()
        grads = grads + delta * (2.0 * loss.alpha)
    if not np.isfinite(value):
        raise NumericError("non-finite composite loss", where=len(arch.layers) - 1)
    return float(value), grads


def sgd_step(params: ModelParams, grads: ModelParams, lr: float) -> ModelParams:
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    _check_same_shapes(params, grads)
    if lr == 0:
        return params.copy()
    return params - grads * lr


def evaluate_loss(params, arch, x, y, loss: Optional[LossSpec] = None) -> float:
    return loss_and_grad(params, arch, x, y, loss or LossSpec())[0]


def num_params(arch: Architecture) -> int:
    return sum(int(np.prod(w)) + int(np.prod(b)) for w, b in arch.param_shapes())


def layer_sizes(arch: Architecture) -> Sequence[int]:
    return [int(np.prod(w)) for w, _ in arch.param_shapes()]
