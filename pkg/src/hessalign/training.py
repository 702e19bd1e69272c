"""Full-batch training with an annealed penalty schedule and per-step metrics."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import head_calculus
from .autodiff import NUMPY_OPS, NonFiniteError, Tape, TapeOps, grad
from .environments import EnvironmentSet
from .estimators import RademacherStream
from .model import Batch, ClassifierHead, FeatureExtractorParams, bind, features_np, logits_np, reference_forward, softmax, tape_forward
from .objectives import PenaltyConfig, exact_hessian_variance, objective, spread

OPTIMIZERS = ("gd", "adam")


class DivergenceError(RuntimeError):
    def __init__(self, step: int, what: str):
        super().__init__(f"training diverged at step {step}: {what}")
        self.step = step


@dataclass
class TrainConfig:
    steps: int = 501
    learning_rate: float = 1e-3
    l2_weight: float = 1e-3
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    seed: int = 0
    optimizer: str = "gd"
    record_every: int = 1

    def __post_init__(self):
        if isinstance(self.penalty, dict):
            self.penalty = PenaltyConfig(**self.penalty)
        self.validate()

    def validate(self) -> None:
        if not isinstance(self.steps, int) or self.steps < 1:
            raise ValueError(f"train.steps must be an integer >= 1, got {self.steps!r}")
        if not (isinstance(self.learning_rate, (int, float)) and self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ValueError(f"train.learning_rate must be > 0, got {self.learning_rate!r}")
        if not (isinstance(self.l2_weight, (int, float)) and self.l2_weight >= 0):
            raise ValueError(f"train.l2_weight must be >= 0, got {self.l2_weight!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"train.optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not isinstance(self.record_every, int) or self.record_every < 1:
            raise ValueError(f"train.record_every must be an integer >= 1, got {self.record_every!r}")
        self.penalty.validate()

    def record_steps(self) -> set[int]:
        """Multiples of record_every, both ends, and the two anneal landmarks."""
        steps = set(range(0, self.steps + 1, self.record_every)) | {self.steps}
        a = self.penalty.anneal_step
        steps |= {s for s in (a - 1, a + 100) if 0 <= s <= self.steps}
        return steps

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricsRecord:
    """Metrics at ``step``, measured before that step's update.

    The row with ``step == steps`` describes the final parameters.
    ``wall_time`` is kept in memory only and never written to files.
    """

    step: int
    train_loss: dict[str, float]
    train_accuracy: dict[str, float]
    test_loss: float
    test_accuracy: float
    gradient_penalty: float
    hessian_penalty: float
    hessian_distance: float
    objective: float = float("nan")
    wall_time: float = 0.0

    def row(self) -> dict:
        out = {"step": self.step}
        for name in sorted(self.train_loss):
            out[f"loss_{name}"] = self.train_loss[name]
            out[f"acc_{name}"] = self.train_accuracy[name]
        out.update(
            test_loss=self.test_loss,
            test_accuracy=self.test_accuracy,
            gradient_penalty=self.gradient_penalty,
            hessian_penalty=self.hessian_penalty,
            hessian_distance=self.hessian_distance,
            objective=self.objective,
        )
        return out


@dataclass
class TrainResult:
    params: FeatureExtractorParams
    head: ClassifierHead
    records: list[MetricsRecord]
    degenerate_steps: int = 0

    @property
    def final(self) -> MetricsRecord:
        return self.records[-1]


def evaluate(params: FeatureExtractorParams, head: ClassifierHead, batch: Batch) -> tuple[float, float]:
    """Mean cross-entropy and accuracy; argmax ties go to the lower class index."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    _, probs, loss = reference_forward(params, head, batch)
    return loss, accuracy(probs, batch.labels)


def accuracy(probs, labels) -> float:
    return float(np.mean(np.argmax(probs, axis=1) == np.argmax(labels, axis=1)))


def head_diagnostics(params, head, train: list[tuple[str, Batch]]):
    """Exact gradient spread, Hessian spread and Hessian distance across envs."""
    grads, hessians = [], []
    for _, b in sorted(train, key=lambda t: t[0]):
        z = features_np(params, b.inputs)
        p = softmax(logits_np(head, z))
        grads.append(head_calculus.head_grad(z, p, b.labels).flat())
        hessians.append(head_calculus.head_hessian(z, p))
    dist = max(
        (float(np.linalg.norm(hessians[i] - hessians[j])) for i in range(len(hessians)) for j in range(i + 1, len(hessians))),
        default=0.0,
    )
    return float(spread(NUMPY_OPS, grads)), exact_hessian_variance(hessians), dist


def measure(step, params, head, envs: EnvironmentSet, objective_value=float("nan"), t0=None) -> MetricsRecord:
    losses, accs = {}, {}
    for name, b in envs.train:
        losses[name], accs[name] = evaluate(params, head, b)
    tl, ta = evaluate(params, head, envs.test[1])
    gp, hp, hd = head_diagnostics(params, head, envs.train)
    return MetricsRecord(step, losses, accs, tl, ta, gp, hp, hd, objective_value, 0.0 if t0 is None else time.perf_counter() - t0)


def probe_streams(seed: int, names) -> dict[str, RademacherStream]:
    """One independent stream per environment, keyed by name."""
    return {name: RademacherStream([seed, k]) for k, name in enumerate(sorted(names))}


class _Adam:
    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, theta: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        if self.m is None:
            self.m = [np.zeros_like(g) for g in grads]
            self.v = [np.zeros_like(g) for g in grads]
        self.t += 1
        out = []
        for i, (p, g) in enumerate(zip(theta, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mh = self.m[i] / (1 - self.b1**self.t)
            vh = self.v[i] / (1 - self.b2**self.t)
            out.append(p - self.lr * mh / (np.sqrt(vh) + self.eps))
        return out


def _unpack(params, head, flat):
    k = 0
    layers = []
    for _ in params.layers:
        layers.append((flat[k], flat[k + 1]))
        k += 2
    return FeatureExtractorParams(layers, list(params.activations)), ClassifierHead(flat[k], flat[k + 1])


def _pack(params, head):
    return [a for pair in params.layers for a in pair] + [head.W, head.b]


def train_step(params, head, envs: EnvironmentSet, config: TrainConfig, step: int, streams):
    """Build the objective for one step; returns (breakdown, gradients)."""
    tape = Tape()
    mv = bind(tape, params, head)
    F = TapeOps(tape)
    fwd = [tape_forward(mv, b, name) for name, b in envs.train]
    bd = objective(fwd, mv.head, config.penalty, step, streams)
    loss = F.add(bd.objective, F.mul(_l2(F, mv.all), config.l2_weight * bd.scale)) if config.l2_weight else bd.objective
    if not math.isfinite(float(loss.value)):
        raise DivergenceError(step, "loss is not finite")
    return bd, float(loss.value), grad(loss, mv.all)


def _l2(F, xs):
    acc = F.sum(F.square(xs[0]))
    for x in xs[1:]:
        acc = F.add(acc, F.sum(F.square(x)))
    return acc


def train(envs: EnvironmentSet, params: FeatureExtractorParams, head: ClassifierHead, config: TrainConfig, log=None) -> TrainResult:
    """Run ``config.steps`` full-batch updates of the configured objective.

    Raises :class:`DivergenceError` naming the step if any value stops being
    finite.
    """
    config.validate()
    streams = probe_streams(config.seed, [n for n, _ in envs.train])
    record_at = config.record_steps()
    theta = [a.copy() for a in _pack(params, head)]
    adam = _Adam(config.learning_rate) if config.optimizer == "adam" else None
    records: list[MetricsRecord] = []
    degenerate = 0
    t0 = time.perf_counter()
    for step in range(config.steps):
        p, h = _unpack(params, head, theta)
        try:
            bd, value, grads = train_step(p, h, envs, config, step, streams)
        except NonFiniteError as exc:
            raise DivergenceError(step, str(exc)) from exc
        degenerate += bool(bd.degenerate)
        if step in record_at:
            rec = measure(step, p, h, envs, value, t0)
            records.append(rec)
            if log:
                log(rec)
        if not all(np.all(np.isfinite(g)) for g in grads):
            raise DivergenceError(step, "gradient is not finite")
        if adam is not None:
            theta = adam.step(theta, grads)
        else:
            theta = [a - config.learning_rate * g for a, g in zip(theta, grads)]
        if not all(np.all(np.isfinite(a)) for a in theta):
            raise DivergenceError(step, "parameters are not finite")
    p, h = _unpack(params, head, theta)
    rec = measure(config.steps, p, h, envs, float("nan"), t0)
    records.append(rec)
    if log:
        log(rec)
    return TrainResult(p, h, records, degenerate)


# ---------------------------------------------------------------------------
# output writers


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_csv(records: list[MetricsRecord], header_lines: list[str] = ()) -> str:
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    rows = [r.row() for r in records]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(rows[0]))
    for r in rows:
        w.writerow([_fmt(v) for v in r.values()])
    return buf.getvalue()


def read_metrics_csv(text: str) -> list[dict]:
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(lines)]


def run_summary(result: TrainResult, config: TrainConfig) -> dict:
    f = result.final
    by_step = {r.step: r for r in result.records}
    a = config.penalty.anneal_step
    out = {
        "final": {k: v for k, v in f.row().items() if k not in ("step", "objective")},
        "steps": config.steps,
        "degenerate_steps": result.degenerate_steps,
        "penalty_normalization": "(1/n) sum over environments",
    }
    if a - 1 in by_step and a + 100 in by_step:
        out["hessian_distance_before_anneal"] = by_step[a - 1].hessian_distance
        out["hessian_distance_after_anneal"] = by_step[a + 100].hessian_distance
    post = [r.hessian_distance for r in result.records if r.step >= a]
    out["mean_post_anneal_hessian_distance"] = float(np.mean(post)) if post else float("nan")
    return out
