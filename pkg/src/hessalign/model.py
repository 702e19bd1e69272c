"""MLP feature extractor, linear softmax classifier head, cross-entropy loss."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape, TapeOps, Var, fast_mean, fast_sum, last_axis_max

ACTIVATIONS = ("relu", "tanh", "sigmoid", "identity")
CHECKPOINT_FORMAT = "hessalign-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ClassifierHead:
    """Linear head ``logits = z @ W.T + b``.

    Flattened order is W row-major followed by b, length ``c * (d + 1)``.
    """

    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ValueError(f"head shapes W{self.W.shape} b{self.b.shape} do not agree")
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.b))):
            raise ValueError("head has non-finite entries")

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]

    @property
    def num_features(self) -> int:
        return self.W.shape[1]

    @property
    def size(self) -> int:
        return self.W.size + self.b.size

    def flat(self) -> np.ndarray:
        return np.concatenate([self.W.ravel(), self.b])

    @classmethod
    def from_flat(cls, theta, num_classes: int, num_features: int) -> ClassifierHead:
        theta = np.asarray(theta, dtype=np.float64)
        m = num_classes * (num_features + 1)
        if theta.shape != (m,):
            raise ValueError(f"expected flat head of length {m}, got {theta.shape}")
        cut = num_classes * num_features
        return cls(theta[:cut].reshape(num_classes, num_features).copy(), theta[cut:].copy())

    def copy(self) -> ClassifierHead:
        return ClassifierHead(self.W.copy(), self.b.copy())


@dataclass
class FeatureExtractorParams:
    """Hidden layers as ``(W, b)`` pairs with ``W`` shaped (out, in)."""

    layers: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    activations: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.layers = [(np.asarray(W, dtype=np.float64), np.asarray(b, dtype=np.float64)) for W, b in self.layers]
        if len(self.activations) != len(self.layers):
            raise ValueError("one activation per layer required")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        for k, (W, b) in enumerate(self.layers):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ValueError(f"layer {k}: W{W.shape} b{b.shape} do not agree")
            if k and W.shape[1] != self.layers[k - 1][0].shape[0]:
                raise ValueError(f"layer {k} input width {W.shape[1]} != previous output")

    def copy(self) -> FeatureExtractorParams:
        return FeatureExtractorParams([(W.copy(), b.copy()) for W, b in self.layers], list(self.activations))

    def output_dim(self, input_dim: int) -> int:
        return self.layers[-1][0].shape[0] if self.layers else input_dim


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.inputs.ndim != 2 or self.labels.ndim != 2 or len(self.inputs) != len(self.labels):
            raise ValueError(f"inputs {self.inputs.shape} and labels {self.labels.shape} disagree")
        if not np.all((self.labels == 0.0) | (self.labels == 1.0)) or not np.all(self.labels.sum(axis=1) == 1.0):
            raise ValueError("labels must be one-hot rows")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def class_index(self) -> np.ndarray:
        return np.argmax(self.labels, axis=1)


def one_hot(y, num_classes: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    out = np.zeros((len(y), num_classes))
    out[np.arange(len(y)), y] = 1.0
    return out


def softmax(logits) -> np.ndarray:
    """Row-wise softmax with max subtraction (no overflow)."""
    a = np.asarray(logits, dtype=np.float64)
    e = np.exp(a - last_axis_max(a))
    return e / fast_sum(e, axis=-1, keepdims=True)


def init_params(layer_sizes, seed: int, activation: str = "relu"):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.

    ``layer_sizes`` lists input width, hidden widths, and class count; e.g.
    ``[4, 8, 2]`` gives one hidden layer of width 8 and a 2x8 head.
    """
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2:
        raise ValueError("layer_sizes needs at least an input width and a class count")
    if any(s <= 0 for s in sizes):
        raise ValueError(f"zero-width layer in {sizes}")
    rng = np.random.default_rng(seed)
    mats = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        s = 1.0 / np.sqrt(fan_in)
        mats.append((rng.uniform(-s, s, size=(fan_out, fan_in)), np.zeros(fan_out)))
    *hidden, (W, b) = mats
    return FeatureExtractorParams(hidden, [activation] * len(hidden)), ClassifierHead(W, b)


# ---------------------------------------------------------------------------
# taped forward


@dataclass
class ModelVars:
    """Leaf handles for every parameter of a model bound to one tape."""

    tape: Tape
    layers: list[tuple[Var, Var]]
    activations: list[str]
    W: Var
    b: Var

    @property
    def head(self) -> list[Var]:
        return [self.W, self.b]

    @property
    def all(self) -> list[Var]:
        return [v for pair in self.layers for v in pair] + self.head


def bind(tape: Tape, params: FeatureExtractorParams, head: ClassifierHead) -> ModelVars:
    layers = [(tape.leaf(W, f"W{k}"), tape.leaf(b, f"b{k}")) for k, (W, b) in enumerate(params.layers)]
    return ModelVars(tape, layers, list(params.activations), tape.leaf(head.W, "W_head"), tape.leaf(head.b, "b_head"))


def _activate(F: TapeOps, h: Var, kind: str) -> Var:
    if kind == "relu":
        return F.relu(h)
    if kind == "tanh":
        return F.tanh(h)
    if kind == "sigmoid":
        return F.sigmoid(h)
    return h


def tape_features(mv: ModelVars, x: Var) -> Var:
    F = TapeOps(mv.tape)
    h = x
    for (W, b), act in zip(mv.layers, mv.activations):
        h = _activate(F, F.add(F.matmul(h, F.transpose(W, (1, 0))), b), act)
    return h


def tape_logits(z: Var, W: Var, b: Var) -> Var:
    """Head logits (n, c).

    ``W`` may carry a leading stack axis (k, c, d) with ``b`` (k, c); the
    copies are then evaluated as one (k*c)-wide head and the logits come
    back as (n, k, c).
    """
    F = TapeOps(z.tape)
    if W.ndim == 2:
        return F.add(F.matmul(z, F.transpose(W, (1, 0))), b)
    k, c, d = W.shape
    a = F.add(F.matmul(z, F.transpose(F.reshape(W, (k * c, d)), (1, 0))), F.reshape(b, (k * c,)))
    return F.reshape(a, (z.shape[0], k, c))


def tape_log_softmax(a: Var) -> Var:
    F = TapeOps(a.tape)
    shift = F.const(last_axis_max(a.value))
    shifted = F.sub(a, F.broadcast(shift, a.shape))
    lse = F.log(F.sum(F.exp(shifted), axis=-1, keepdims=True))
    return F.sub(shifted, F.broadcast(lse, a.shape))


def tape_cross_entropy(logits: Var, labels: np.ndarray) -> Var:
    """Mean cross-entropy over samples (axis 0), summed over stacked copies."""
    F = TapeOps(logits.tape)
    logp = tape_log_softmax(logits)
    y = labels if logits.ndim == 2 else np.broadcast_to(labels[:, None, :], logits.shape)
    per_copy = F.neg(F.mean(F.sum(F.mul(F.const(y), logp), axis=-1), axis=0))
    return per_copy if per_copy.ndim == 0 else F.sum(per_copy)


@dataclass
class EnvForward:
    """Taped forward of one environment."""

    name: str
    batch: Batch
    features: Var
    logits: Var
    loss: Var

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits.value)


def tape_forward(mv: ModelVars, batch: Batch, name: str = "") -> EnvForward:
    if len(batch) == 0:
        raise ValueError("empty batch")
    x = mv.tape.constant(batch.inputs)
    z = tape_features(mv, x)
    if z.shape[1] != mv.W.shape[1] or batch.num_classes != mv.W.shape[0]:
        raise ValueError(f"features {z.shape} / labels {batch.labels.shape} do not match head {mv.W.shape}")
    logits = tape_logits(z, mv.W, mv.b)
    return EnvForward(name, batch, z, logits, tape_cross_entropy(logits, batch.labels))


def forward(params: FeatureExtractorParams, head: ClassifierHead, batch: Batch):
    """Return ``(features, probs, loss)`` evaluated on a fresh tape."""
    _check_shapes(params, head, batch)
    tape = Tape()
    env = tape_forward(bind(tape, params, head), batch)
    probs = np.exp(tape_log_softmax(env.logits).value)
    return env.features.value, probs, float(env.loss.value)


def _check_shapes(params, head, batch):
    if len(batch) == 0:
        raise ValueError("empty batch")
    d_in = batch.inputs.shape[1]
    if params.layers and params.layers[0][0].shape[1] != d_in:
        raise ValueError(f"input width {d_in} != first layer width {params.layers[0][0].shape[1]}")
    if params.output_dim(d_in) != head.num_features:
        raise ValueError("feature width does not match head")
    if batch.num_classes != head.num_classes:
        raise ValueError("label width does not match head")


# ---------------------------------------------------------------------------
# tape-free reference evaluator (same arithmetic, no recording)


def _act_np(h, kind):
    if kind == "relu":
        return np.maximum(h, 0.0)
    if kind == "tanh":
        return np.tanh(h)
    if kind == "sigmoid":
        e = np.exp(-np.abs(h))
        return np.where(h >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return h


def features_np(params: FeatureExtractorParams, x) -> np.ndarray:
    h = np.asarray(x, dtype=np.float64)
    for (W, b), act in zip(params.layers, params.activations):
        h = _act_np(np.add(np.matmul(h, np.ascontiguousarray(W.T)), b), act)
    return h


def logits_np(head: ClassifierHead, z) -> np.ndarray:
    return np.add(np.matmul(z, np.ascontiguousarray(head.W.T)), head.b)


def reference_forward(params: FeatureExtractorParams, head: ClassifierHead, batch: Batch):
    _check_shapes(params, head, batch)
    z = features_np(params, batch.inputs)
    a = logits_np(head, z)
    shifted = a - last_axis_max(a)
    logp = shifted - np.log(fast_sum(np.exp(shifted), axis=-1, keepdims=True))
    loss = -fast_mean(fast_sum(batch.labels * logp, axis=-1), axis=0)
    return z, np.exp(logp), float(loss)


def predict_np(params, head, x) -> np.ndarray:
    return softmax(logits_np(head, features_np(params, x)))


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_dict(params: FeatureExtractorParams, head: ClassifierHead, metadata: dict | None = None) -> dict:
    def arr(a):
        return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}

    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "metadata": metadata or {},
        "layers": [{"W": arr(W), "b": arr(b), "activation": act} for (W, b), act in zip(params.layers, params.activations)],
        "head": {"W": arr(head.W), "b": arr(head.b)},
    }


def params_from_dict(d: dict):
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a hessalign checkpoint")
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('version')}")

    def arr(e):
        return np.array(e["data"], dtype=np.float64).reshape(e["shape"])

    params = FeatureExtractorParams(
        [(arr(L["W"]), arr(L["b"])) for L in d["layers"]], [L["activation"] for L in d["layers"]]
    )
    return params, ClassifierHead(arr(d["head"]["W"]), arr(d["head"]["b"]))


def save_checkpoint(path, params, head, metadata: dict | None = None) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(params, head, metadata), indent=1) + "\n")


def load_checkpoint(path):
    """Return ``(params, head, metadata)``."""
    d = json.loads(Path(path).read_text())
    params, head = params_from_dict(d)
    return params, head, d.get("metadata", {})
