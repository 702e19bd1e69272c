"""Post-training evaluation: head-space transfer attack, FGSM, run aggregation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import head_calculus
from .autodiff import Tape, grad
from .model import Batch, ClassifierHead, FeatureExtractorParams, bind, features_np, logits_np, softmax, tape_cross_entropy, tape_features, tape_logits
from .training import accuracy, evaluate


@dataclass
class AttackConfig:
    delta: float = 0.1
    ascent_lr: float = 0.1
    ascent_steps: int = 10
    rounds: int = 20

    def __post_init__(self):
        if not (self.delta >= 0 and math.isfinite(self.delta)):
            raise ValueError(f"attack.delta must be >= 0, got {self.delta!r}")
        if not self.ascent_lr > 0:
            raise ValueError(f"attack.ascent_lr must be > 0, got {self.ascent_lr!r}")
        if not isinstance(self.ascent_steps, int) or self.ascent_steps < 1:
            raise ValueError(f"attack.ascent_steps must be an integer >= 1, got {self.ascent_steps!r}")
        if not isinstance(self.rounds, int) or self.rounds < 1:
            raise ValueError(f"attack.rounds must be an integer >= 1, got {self.rounds!r}")


@dataclass
class AttackResult:
    """``trajectory`` holds one ``(gap, radius)`` pair per round.

    ``worst_gap_history`` is the running max of the gap, starting from the
    trained head itself.  ``max_radius`` is the largest distance from the
    trained head over every ascent iterate, not only round ends.
    """

    worst_gap: float
    test_accuracy_at_worst: float
    clean_test_accuracy: float
    trajectory: list[tuple[float, float]] = field(default_factory=list)
    worst_gap_history: list[float] = field(default_factory=list)
    pairs: list[tuple[str, str]] = field(default_factory=list)
    max_radius: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def project_ball(theta, centre, delta: float) -> np.ndarray:
    """Euclidean projection onto ``||theta - centre|| <= delta``."""
    diff = theta - centre
    r = float(np.linalg.norm(diff))
    if r <= delta:
        return theta
    if delta == 0.0:
        return centre.copy()
    return centre + diff * (delta / r)


class _FrozenHead:
    """Per-environment features computed once; losses and gradients in head space."""

    def __init__(self, params, head: ClassifierHead, envs: list[tuple[str, Batch]]):
        self.c, self.d = head.W.shape
        self.envs = [(name, features_np(params, b.inputs), b.labels) for name, b in sorted(envs, key=lambda t: t[0])]

    def losses(self, theta) -> list[float]:
        h = ClassifierHead.from_flat(theta, self.c, self.d)
        out = []
        for _, z, y in self.envs:
            a = logits_np(h, z)
            a = a - a.max(axis=1, keepdims=True)
            logp = a - np.log(np.exp(a).sum(axis=1, keepdims=True))
            out.append(float(-np.mean(np.sum(y * logp, axis=1))))
        return out

    def grad(self, theta, k: int) -> np.ndarray:
        h = ClassifierHead.from_flat(theta, self.c, self.d)
        _, z, y = self.envs[k]
        return head_calculus.head_grad(z, softmax(logits_np(h, z)), y).flat()


def transfer_attack(params: FeatureExtractorParams, head: ClassifierHead, envs: list[tuple[str, Batch]], test: Batch, cfg: AttackConfig) -> AttackResult:
    """Projected gradient ascent on ``L_i - L_j`` over the head, extractor frozen.

    Every round re-selects ``i = argmax_e L_e`` and ``j = argmin_e L_e`` at the
    current head, then takes ``ascent_steps`` projected ascent steps.
    """
    if len(envs) < 2:
        raise ValueError("transfer_attack needs at least 2 environments")
    fh = _FrozenHead(params, head, envs)
    names = [n for n, _, _ in fh.envs]
    z_test = features_np(params, test.inputs)
    centre = head.flat()
    theta = centre.copy()

    def test_acc(th):
        return accuracy(softmax(logits_np(ClassifierHead.from_flat(th, fh.c, fh.d), z_test)), test.labels)

    def gap(th):
        ls = fh.losses(th)
        return max(ls) - min(ls)

    clean = test_acc(centre)
    worst, worst_acc = gap(centre), clean
    result = AttackResult(worst, worst_acc, clean)
    for _ in range(cfg.rounds):
        ls = fh.losses(theta)
        i, j = int(np.argmax(ls)), int(np.argmin(ls))
        result.pairs.append((names[i], names[j]))
        for _ in range(cfg.ascent_steps):
            theta = project_ball(theta + cfg.ascent_lr * (fh.grad(theta, i) - fh.grad(theta, j)), centre, cfg.delta)
            result.max_radius = max(result.max_radius, float(np.linalg.norm(theta - centre)))
        g = gap(theta)
        result.trajectory.append((g, float(np.linalg.norm(theta - centre))))
        if g > worst:
            worst, worst_acc = g, test_acc(theta)
        result.worst_gap_history.append(worst)
    result.worst_gap, result.test_accuracy_at_worst = worst, worst_acc
    return result


def input_gradient(params: FeatureExtractorParams, head: ClassifierHead, batch: Batch) -> np.ndarray:
    """Gradient of the mean loss w.r.t. the inputs (same sign as per-sample)."""
    tape = Tape()
    mv = bind(tape, params, head)
    x = tape.leaf(batch.inputs, "x")
    loss = tape_cross_entropy(tape_logits(tape_features(mv, x), mv.W, mv.b), batch.labels)
    return grad(loss, [x])[0]


def fgsm_eval(params, head, batch: Batch, epsilons, clip="data") -> list[float]:
    """Accuracy under ``x + eps * sign(grad_x loss)`` for each eps.

    ``clip="data"`` clips to the batch's own [min, max]; a ``(lo, hi)`` pair
    clips to that range; ``None`` disables clipping.  eps = 0 returns the
    clean accuracy from :func:`evaluate` unchanged.
    """
    eps = [float(e) for e in epsilons]
    if any(e < 0 for e in eps):
        raise ValueError("epsilons must be >= 0")
    if clip == "data":
        lo, hi = float(batch.inputs.min()), float(batch.inputs.max())
    elif clip is None:
        lo, hi = -np.inf, np.inf
    else:
        lo, hi = clip
    direction = np.sign(input_gradient(params, head, batch))
    out = []
    for e in eps:
        if e == 0.0:
            out.append(evaluate(params, head, batch)[1])
            continue
        x = np.clip(batch.inputs + e * direction, lo, hi)
        out.append(accuracy(softmax(logits_np(head, features_np(params, x))), batch.labels))
    return out


def _flatten(d: dict, prefix: str = "") -> dict[str, float]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        elif isinstance(v, (int, float)) and not isinstance(v, bool):
            out[key] = float(v)
    return out


def aggregate_runs(summaries: list[dict]) -> dict[str, dict[str, float]]:
    """Mean and population std of every numeric field (nested keys dotted)."""
    if not summaries:
        raise ValueError("need at least one run summary")
    flat = [_flatten(s) for s in summaries]
    keys = sorted(set().union(*flat))
    out = {}
    for k in keys:
        vals = np.array([f[k] for f in flat if k in f])
        out[k] = {"mean": float(vals.mean()), "std": float(vals.std()), "n": int(len(vals))}
    return out
