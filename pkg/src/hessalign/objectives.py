"""Training objectives: ERM, Hessian/gradient alignment penalties, baselines.

Every penalty is a spread across environments of some per-environment
quantity ``v_e`` (gradient, ``H g``, Hessian diagonal, exact Hessian, loss):

    spread(v) = (1/n) * sum_e ||v_e - mean_e v||^2

Reductions always run over environments sorted by name, so the result does
not depend on the order the caller passes them in.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import head_calculus
from .autodiff import NUMPY_OPS, TapeOps, Var, flatten, grad
from .estimators import NORM_FLOOR, DEFAULT_NUM_SAMPLES, RademacherStream, tape_hutchinson_diag
from .model import EnvForward, tape_cross_entropy, tape_log_softmax

METHODS = ("erm", "irm", "vrex", "gradvar", "hgp", "hutchinson", "exact_hessian")
# which weight scales the single penalty of each baseline
_BASELINE_WEIGHT = {"irm": "alpha", "vrex": "alpha", "gradvar": "beta"}


@dataclass
class PenaltyConfig:
    """Penalty weights and the step schedule applied to them.

    Effective weights at ``step`` are ``alpha * s`` and ``beta * s`` where
    ``s`` is ``pre_anneal_value`` before ``anneal_step`` and
    ``post_anneal_value`` from it on.  Baselines with a single penalty use
    ``alpha`` (irm, vrex) or ``beta`` (gradvar).
    """

    method: str = "erm"
    alpha: float = 0.0
    beta: float = 0.0
    anneal_step: int = 0
    pre_anneal_value: float = 1.0
    post_anneal_value: float = 1.0
    rescale: bool = True
    num_samples: int = DEFAULT_NUM_SAMPLES
    norm_floor: float = NORM_FLOOR

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"penalty.method: unknown method {self.method!r}, expected one of {METHODS}")
        for name in ("alpha", "beta", "pre_anneal_value", "post_anneal_value"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise ValueError(f"penalty.{name} must be a finite number >= 0, got {v!r}")
        if not isinstance(self.anneal_step, int) or self.anneal_step < 0:
            raise ValueError(f"penalty.anneal_step must be an integer >= 0, got {self.anneal_step!r}")
        if not isinstance(self.num_samples, int) or self.num_samples < 1:
            raise ValueError(f"penalty.num_samples must be an integer >= 1, got {self.num_samples!r}")
        if not self.norm_floor > 0:
            raise ValueError("penalty.norm_floor must be > 0")

    def schedule(self, step: int | None) -> float:
        if step is None:
            return 1.0
        return float(self.pre_anneal_value if step < self.anneal_step else self.post_anneal_value)

    def weights(self, step: int | None = None) -> tuple[float, float]:
        s = self.schedule(step)
        return self.alpha * s, self.beta * s

    def loss_scale(self, step: int | None = None) -> float:
        """Post-anneal rescale ``1 / (1 + w)`` with ``w`` the largest active weight."""
        if not self.rescale or step is None or step < self.anneal_step or self.method == "erm":
            return 1.0
        a, b = self.weights(step)
        if self.method in _BASELINE_WEIGHT:
            w = a if _BASELINE_WEIGHT[self.method] == "alpha" else b
        else:
            w = max(a, b)
        return 1.0 / (1.0 + w)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ObjectiveBreakdown:
    """``total = erm_term + alpha * hessian_term + beta * gradient_term``.

    ``objective`` is the taped value the optimizer should differentiate:
    ``scale * total``.  Unweighted terms that were skipped because their
    weight is zero are reported as 0.
    """

    total: float
    erm_term: float
    hessian_term: float
    gradient_term: float
    per_env_losses: dict[str, float]
    alpha: float = 0.0
    beta: float = 0.0
    scale: float = 1.0
    degenerate: list[str] = field(default_factory=list)
    objective: Var | None = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# reductions, written against an ops namespace so they work on arrays too


def mean_over_envs(F, xs: list):
    acc = xs[0]
    for x in xs[1:]:
        acc = F.add(acc, x)
    return F.mul(acc, 1.0 / len(xs))


def spread(F, xs: list):
    """``(1/n) sum_e ||x_e - mean x||^2`` (Frobenius for matrices)."""
    if len(xs) == 1:
        return F.mul(F.sum(F.square(xs[0])), 0.0)
    centre = mean_over_envs(F, xs)
    return mean_over_envs(F, [F.sum(F.square(F.sub(x, centre))) for x in xs])


def sort_envs(envs: list[EnvForward]) -> list[EnvForward]:
    names = [e.name for e in envs]
    if len(set(names)) != len(names):
        raise ValueError(f"environment names must be unique, got {names}")
    return sorted(envs, key=lambda e: e.name)


# ---------------------------------------------------------------------------
# per-environment signals on the tape


def env_grads(envs, head: list[Var]) -> list[Var]:
    return [flatten(grad(e.loss, head, create_graph=True)) for e in envs]


def _hg_from_grad(g: Var, head: list[Var], norm_floor: float):
    F = TapeOps(g.tape)
    norm = F.sqrt(F.sum(F.square(g)))
    if float(norm.value) < norm_floor:
        return g.tape.constant(np.zeros(g.shape)), True
    return F.mul(norm, flatten(grad(norm, head, create_graph=True))), False


def tape_head_hessian(env: EnvForward) -> Var:
    """Exact head Hessian of one environment, in augmented ``[W | b]`` order.

    The order differs from the flat head order by a fixed permutation, which
    leaves every Frobenius spread unchanged.
    """
    F = TapeOps(env.features.tape)
    z = env.features
    n, d = z.shape
    c = env.logits.shape[1]
    zt = F.concat([z, F.const(np.ones((n, 1)))], axis=1)
    p = F.exp(tape_log_softmax(env.logits))
    m = c * (d + 1)
    cols, blocks = [], None
    for u in range(c):
        pu = F.broadcast(F.slice(p, (slice(None), slice(u, u + 1))), (n, d + 1))
        pz = F.mul(pu, zt)
        cols.append(pz)
        blk = F.scatter(F.matmul(F.transpose(pz, (1, 0)), zt), (slice(u * (d + 1), (u + 1) * (d + 1)),) * 2, (m, m))
        blocks = blk if blocks is None else F.add(blocks, blk)
    M = F.concat(cols, axis=1)
    return F.mul(F.sub(blocks, F.matmul(F.transpose(M, (1, 0)), M)), 1.0 / n)


def irm_grad_sq(env: EnvForward) -> Var:
    """``(dL/ds at s=1)^2`` with the logits scaled by a dummy multiplier ``s``."""
    tape = env.logits.tape
    F = TapeOps(tape)
    s = tape.leaf(np.array(1.0), "irm_scale")
    loss = tape_cross_entropy(F.mul(env.logits, s), env.batch.labels)
    (gs,) = grad(loss, [s], create_graph=True)
    return F.square(gs)


# ---------------------------------------------------------------------------
# objectives


def _finish(tape, F, envs, losses, erm, h_term, g_term, a, b, cfg, step, degenerate=()):
    total = erm
    if h_term is not None:
        total = F.add(total, F.mul(h_term, a))
    if g_term is not None:
        total = F.add(total, F.mul(g_term, b))
    scale = cfg.loss_scale(step) if cfg is not None else 1.0
    objective = total if scale == 1.0 else F.mul(total, scale)
    return ObjectiveBreakdown(
        total=float(total.value),
        erm_term=float(erm.value),
        hessian_term=float(h_term.value) if h_term is not None else 0.0,
        gradient_term=float(g_term.value) if g_term is not None else 0.0,
        per_env_losses={e.name: float(l.value) for e, l in zip(envs, losses)},
        alpha=a,
        beta=b,
        scale=scale,
        degenerate=list(degenerate),
        objective=objective,
    )


def _prep(envs):
    if not envs:
        raise ValueError("at least one environment is required")
    envs = sort_envs(envs)
    tape = envs[0].loss.tape
    F = TapeOps(tape)
    losses = [e.loss for e in envs]
    return envs, tape, F, losses, mean_over_envs(F, losses)


def erm_objective(envs: list[EnvForward]) -> ObjectiveBreakdown:
    envs, tape, F, losses, erm = _prep(envs)
    return _finish(tape, F, envs, losses, erm, None, None, 0.0, 0.0, None, None)


def gradvar_objective(envs, head: list[Var], cfg: PenaltyConfig, step: int | None = None) -> ObjectiveBreakdown:
    envs, tape, F, losses, erm = _prep(envs)
    _, b = cfg.weights(step)
    g_term = spread(F, env_grads(envs, head)) if b else None
    return _finish(tape, F, envs, losses, erm, None, g_term, 0.0, b, cfg, step)


def hgp_objective(envs, head: list[Var], cfg: PenaltyConfig, step: int | None = None) -> ObjectiveBreakdown:
    envs, tape, F, losses, erm = _prep(envs)
    a, b = cfg.weights(step)
    h_term = g_term = None
    degenerate = []
    if a or b:
        gs = env_grads(envs, head)
        if a:
            hgs = []
            for e, g in zip(envs, gs):
                hg, flag = _hg_from_grad(g, head, cfg.norm_floor)
                hgs.append(hg)
                if flag:
                    degenerate.append(e.name)
            h_term = spread(F, hgs)
        if b:
            g_term = spread(F, gs)
    return _finish(tape, F, envs, losses, erm, h_term, g_term, a, b, cfg, step, degenerate)


def hutchinson_objective(envs, head: list[Var], cfg: PenaltyConfig, streams: dict[str, RademacherStream], step: int | None = None) -> ObjectiveBreakdown:
    """Probe draws come from ``streams[env.name]``; probes are redrawn per call."""
    envs, tape, F, losses, erm = _prep(envs)
    a, b = cfg.weights(step)
    h_term = g_term = None
    if a:
        missing = [e.name for e in envs if e.name not in streams]
        if missing:
            raise KeyError(f"no probe stream for environments {missing}")
        W, bias = head
        h_term = spread(F, [tape_hutchinson_diag(e, W, bias, cfg.num_samples, streams[e.name]) for e in envs])
    if b:
        g_term = spread(F, env_grads(envs, head))
    return _finish(tape, F, envs, losses, erm, h_term, g_term, a, b, cfg, step)


def exact_hessian_objective(envs, head: list[Var], cfg: PenaltyConfig, step: int | None = None) -> ObjectiveBreakdown:
    envs, tape, F, losses, erm = _prep(envs)
    a, b = cfg.weights(step)
    h_term = spread(F, [tape_head_hessian(e) for e in envs]) if a else None
    g_term = spread(F, env_grads(envs, head)) if b else None
    return _finish(tape, F, envs, losses, erm, h_term, g_term, a, b, cfg, step)


def irm_objective(envs, cfg: PenaltyConfig, step: int | None = None) -> ObjectiveBreakdown:
    """Mean loss plus ``alpha * (1/n) sum_e (dL_e/ds)^2``."""
    envs, tape, F, losses, erm = _prep(envs)
    a, _ = cfg.weights(step)
    h_term = mean_over_envs(F, [irm_grad_sq(e) for e in envs]) if a else None
    # single-penalty baselines report their term in the hessian slot
    return _finish(tape, F, envs, losses, erm, h_term, None, a, 0.0, cfg, step)


def vrex_objective(envs, cfg: PenaltyConfig, step: int | None = None) -> ObjectiveBreakdown:
    """Mean loss plus ``alpha * Var_e(L_e)`` (population variance)."""
    envs, tape, F, losses, erm = _prep(envs)
    a, _ = cfg.weights(step)
    h_term = spread(F, losses) if a else None
    return _finish(tape, F, envs, losses, erm, h_term, None, a, 0.0, cfg, step)


def objective(envs, head: list[Var], cfg: PenaltyConfig, step: int | None = None, streams=None) -> ObjectiveBreakdown:
    m = cfg.method
    if m == "erm":
        return erm_objective(envs)
    if m == "irm":
        return irm_objective(envs, cfg, step)
    if m == "vrex":
        return vrex_objective(envs, cfg, step)
    if m == "gradvar":
        return gradvar_objective(envs, head, cfg, step)
    if m == "hgp":
        return hgp_objective(envs, head, cfg, step)
    if m == "hutchinson":
        return hutchinson_objective(envs, head, cfg, streams or {}, step)
    return exact_hessian_objective(envs, head, cfg, step)


# ---------------------------------------------------------------------------
# numpy diagnostics


def exact_hessian_variance(hessians) -> float:
    """``(1/n) sum_e ||H_e - mean H||_F^2`` over a list of Hessians."""
    hs = [np.asarray(h, dtype=np.float64) for h in hessians]
    if not hs:
        raise ValueError("need at least one Hessian")
    return float(spread(NUMPY_OPS, hs))


def hessian_distance(h1, h2) -> float:
    return float(np.linalg.norm(np.asarray(h1) - np.asarray(h2)))


def env_hessians(features_probs: list[tuple[np.ndarray, np.ndarray]]) -> list[np.ndarray]:
    return [head_calculus.head_hessian(z, p) for z, p in features_probs]
