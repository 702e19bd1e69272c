"""Hessian-gradient products and Hutchinson diagonal estimates for the head.

Each signal has a closed-form numpy route (built on :mod:`head_calculus`)
and a taped route that stays differentiable so it can be used inside a
training objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import head_calculus
from .autodiff import Tape, TapeOps, Var, flatten, grad, grad_of_grad
from .model import EnvForward, tape_cross_entropy, tape_logits

NORM_FLOOR = 1e-12
DEFAULT_NUM_SAMPLES = 100


class RademacherStream:
    """Seeded source of +/-1 probe vectors."""

    def __init__(self, seed: int):
        self.seed = seed
        self._rng = np.random.default_rng(seed)

    def draw(self, m: int) -> np.ndarray:
        return self.draw_many(1, m)[0]

    def draw_many(self, k: int, m: int) -> np.ndarray:
        bits = self._rng.integers(0, 2, size=(k, m))
        return (2 * bits - 1).astype(np.float64)


@dataclass
class HgpResult:
    value: Var
    degenerate: bool
    grad_norm: float


def hgp_closed_form(features, probs, labels) -> np.ndarray:
    """Exact ``H @ g`` for one environment."""
    g = head_calculus.head_grad(features, probs, labels).flat()
    return head_calculus.head_hvp(features, probs, g)


def hgp_via_norm_grad(tape: Tape, loss: Var, head: list[Var], norm_floor: float = NORM_FLOOR) -> HgpResult:
    """``H g`` as ``|g| * grad |g|``, using two reverse sweeps on ``tape``.

    The identity divides by ``|g|``; below ``norm_floor`` a constant zero is
    returned and the result is flagged degenerate.
    """
    F = TapeOps(tape)
    g = flatten(grad(loss, head, create_graph=True))
    norm = F.sqrt(F.sum(F.square(g)))
    gn = float(norm.value)
    if gn < norm_floor:
        return HgpResult(tape.constant(np.zeros(g.shape)), True, gn)
    dnorm = flatten(grad(norm, head, create_graph=True))
    return HgpResult(F.mul(norm, dnorm), False, gn)


def exact_diag(features, probs) -> np.ndarray:
    return head_calculus.head_hessian_diag(features, probs)


def hutchinson_from_hvp(hvp_many, m: int, num_samples: int, stream: RademacherStream) -> np.ndarray:
    """Monte-Carlo ``mean_r r * (H r)`` for any batched product ``R -> R @ H``."""
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    R = stream.draw_many(num_samples, m)
    return np.mean(R * hvp_many(R), axis=0)


def hutchinson_diag(features, probs, num_samples: int = DEFAULT_NUM_SAMPLES, stream: RademacherStream | None = None) -> np.ndarray:
    """Hutchinson estimate of the head Hessian diagonal of one environment."""
    stream = stream if stream is not None else RademacherStream(0)
    m = np.asarray(probs).shape[1] * (np.asarray(features).shape[1] + 1)
    return hutchinson_from_hvp(lambda R: head_calculus.head_hvp_many(features, probs, R), m, num_samples, stream)


def tape_hutchinson_diag(env: EnvForward, W: Var, b: Var, num_samples: int, stream: RademacherStream) -> Var:
    """Differentiable Hutchinson estimate of the head Hessian diagonal.

    The head is replicated into ``num_samples`` stacked copies; the summed
    per-copy loss has a block-diagonal Hessian, so one ``grad_of_grad`` call
    with the concatenated probes returns every ``H r_j`` at once.
    """
    tape = W.tape
    F = TapeOps(tape)
    k = int(num_samples)
    c, d = W.shape
    if k < 1:
        raise ValueError("num_samples must be >= 1")
    R = stream.draw_many(k, c * (d + 1))
    RW, Rb = R[:, : c * d], R[:, c * d :]
    Ws = F.broadcast(F.reshape(W, (1, c, d)), (k, c, d))
    bs = F.broadcast(F.reshape(b, (1, c)), (k, c))
    stacked_loss = tape_cross_entropy(tape_logits(env.features, Ws, bs), env.batch.labels)
    hv = grad_of_grad(tape, stacked_loss, [Ws, bs], np.concatenate([RW.ravel(), Rb.ravel()]))
    HW = F.reshape(F.slice(hv, (slice(0, k * c * d),)), (k, c * d))
    Hb = F.reshape(F.slice(hv, (slice(k * c * d, k * c * (d + 1)),)), (k, c))
    DW = F.mean(F.mul(HW, F.const(RW)), axis=0)
    Db = F.mean(F.mul(Hb, F.const(Rb)), axis=0)
    return F.concat([DW, Db], axis=0)
