"""Oracle suite: closed forms against autodiff, finite differences and each other.

Errors are normwise relative, ``max|a - b| / max(max|b|, tiny)``; the
elementwise ratio is meaningless on the exact zeros these matrices contain.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np

from . import head_calculus
from .autodiff import Tape, grad, grad_of_grad
from .estimators import RademacherStream, hgp_closed_form, hgp_via_norm_grad, hutchinson_diag, hutchinson_from_hvp
from .model import Batch, ClassifierHead, bind, init_params, one_hot, tape_forward


@dataclass
class Check:
    name: str
    error: float
    tolerance: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}: max error {self.error:.3e} < {self.tolerance:.0e}{extra}"


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(float(np.max(np.abs(b))), 1e-300))


def random_problem(rng, n=12, d_in=5, hidden=(6,), c=3, activation="tanh"):
    sizes = [d_in, *hidden, c]
    params, head = init_params(sizes, int(rng.integers(1 << 31)), activation)
    head = ClassifierHead(rng.uniform(-1, 1, head.W.shape), rng.uniform(-0.5, 0.5, c))
    batch = Batch(rng.uniform(-2, 2, (n, d_in)), one_hot(rng.integers(0, c, n), c))
    return params, head, batch


def _taped(params, head, batch):
    tape = Tape()
    mv = bind(tape, params, head)
    env = tape_forward(mv, batch)
    return tape, mv, env


def head_loss_and_grad(params, head, batch, theta):
    """Autodiff loss and flat head gradient at flat head ``theta``."""
    c, d = head.W.shape
    tape, mv, env = _taped(params, ClassifierHead.from_flat(theta, c, d), batch)
    gW, gb = grad(env.loss, mv.head)
    return float(env.loss.value), np.concatenate([gW.ravel(), gb])


def fd_gradient(f, x, h):
    g = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def fd_jacobian(f, x, h):
    cols = []
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.stack(cols, axis=1)


# ---------------------------------------------------------------------------
# individual checks


def check_head_grad(rng, instances=5) -> list[Check]:
    ad_err = fd_err = 0.0
    for _ in range(instances):
        params, head, batch = random_problem(rng)
        tape, mv, env = _taped(params, head, batch)
        z, p = env.features.value, env.probs
        closed = head_calculus.head_grad(z, p, batch.labels).flat()
        theta = head.flat()
        _, auto = head_loss_and_grad(params, head, batch, theta)
        fd = fd_gradient(lambda t: head_loss_and_grad(params, head, batch, t)[0], theta, 1e-6)
        ad_err = max(ad_err, rel_err(closed, auto))
        fd_err = max(fd_err, rel_err(closed, fd))
    return [Check("head gradient vs autodiff", ad_err, 1e-6), Check("head gradient vs finite differences", fd_err, 1e-6)]


def check_head_hessian(rng, instances=5) -> list[Check]:
    fd_err = hvp_err = 0.0
    for _ in range(instances):
        params, head, batch = random_problem(rng)
        tape, mv, env = _taped(params, head, batch)
        z, p = env.features.value, env.probs
        H = head_calculus.head_hessian(z, p)
        theta = head.flat()
        fd = fd_jacobian(lambda t: head_loss_and_grad(params, head, batch, t)[1], theta, 1e-4)
        fd_err = max(fd_err, rel_err(H, 0.5 * (fd + fd.T)))
        V = rng.normal(size=(4, len(theta)))
        hvp_err = max(hvp_err, rel_err(head_calculus.head_hvp_many(z, p, V), V @ H.T))
    return [Check("head Hessian vs finite differences", fd_err, 1e-5), Check("head HVP vs dense product", hvp_err, 1e-10)]


def check_regression(rng, instances=5) -> list[Check]:
    g_err = h_err = 0.0
    for act in (head_calculus.IDENTITY, head_calculus.TANH, head_calculus.SIGMOID):
        for _ in range(instances):
            d = 3
            z, w = rng.uniform(-1, 1, d), rng.uniform(-1, 1, d)
            b, y = float(rng.uniform(-0.5, 0.5)), float(rng.uniform(-1, 1))

            def loss(v):
                return 0.5 * (float(act.f(v[:d] @ z + v[d])) - y) ** 2

            def gradient(v):
                dw, db = head_calculus.regression_head_grad(z, v[:d], v[d], y, act)
                return np.append(dw, db)

            v0 = np.append(w, b)
            g_err = max(g_err, rel_err(gradient(v0), fd_gradient(loss, v0, 1e-6)))
            H = head_calculus.regression_head_hessian(z, w, b, y, act)
            h_err = max(h_err, rel_err(H, fd_jacobian(gradient, v0, 1e-4)))
    return [Check("regression head gradient vs finite differences", g_err, 1e-5),
            Check("regression head Hessian vs finite differences", h_err, 1e-5)]


def check_hgp_identity(rng, instances=20) -> list[Check]:
    err = 0.0
    passes = set()
    for _ in range(instances):
        params, head, batch = random_problem(rng)
        tape, mv, env = _taped(params, head, batch)
        before = tape.backward_passes
        res = hgp_via_norm_grad(tape, env.loss, mv.head)
        passes.add(tape.backward_passes - before)
        err = max(err, rel_err(res.value.value, hgp_closed_form(env.features.value, env.probs, batch.labels)))
    extra = 0.0 if passes == {2} else float("inf")
    return [Check("Hg via norm gradient vs closed form", err, 1e-8),
            Check("Hg via norm gradient uses two backward passes", extra, 0.5, f"passes per call {sorted(passes)}")]


def check_grad_of_grad(rng) -> list[Check]:
    params, head, batch = random_problem(rng, hidden=(4, 4))
    err = 0.0
    theta = head.flat()
    fd = fd_jacobian(lambda t: head_loss_and_grad(params, head, batch, t)[1], theta, 1e-4)
    for k in range(len(theta)):
        tape, mv, env = _taped(params, head, batch)
        e = np.zeros(len(theta))
        e[k] = 1.0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            col = grad_of_grad(tape, env.loss, mv.head, e).value
        err = max(err, rel_err(col, fd[:, k]))
    return [Check("double backprop HVP vs finite-difference Hessian", err, 1e-5)]


def hutchinson_errors(rng, counts=(1, 10, 100), reps=60, num_samples=100):
    """RMSE of the average of ``k`` independent 100-probe estimates, per k."""
    params, head, batch = random_problem(rng, n=20, d_in=4, hidden=(5,), c=3)
    tape, mv, env = _taped(params, head, batch)
    z, p = env.features.value, env.probs
    exact = head_calculus.head_hessian_diag(z, p)
    out = []
    seed = 0
    for k in counts:
        sq = []
        for _ in range(reps):
            est = np.zeros_like(exact)
            for _ in range(k):
                est += hutchinson_diag(z, p, num_samples, RademacherStream(seed))
                seed += 1
            sq.append(np.sum((est / k - exact) ** 2))
        out.append(float(np.sqrt(np.mean(sq))))
    return np.array(counts) * num_samples, np.array(out)


def check_hutchinson(rng) -> list[Check]:
    totals, errs = hutchinson_errors(rng)
    slope = float(np.polyfit(np.log10(totals), np.log10(errs), 1)[0])
    # single probe is exact when the Hessian is diagonal (r * r = 1)
    single = 0.0
    for _ in range(5):
        m = 7
        D = rng.uniform(0, 2, m)
        est = hutchinson_from_hvp(lambda R: R * D, m, 1, RademacherStream(int(rng.integers(1 << 31))))
        single = max(single, float(np.max(np.abs(est - D))))
    return [Check("Hutchinson error slope vs sample count", abs(slope + 0.5), 0.1, f"slope {slope:.3f}"),
            Check("Hutchinson single probe on diagonal Hessian", single, 1e-12)]


def run_checks(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    checks = []
    for fn in (check_head_grad, check_head_hessian, check_regression, check_hgp_identity, check_grad_of_grad, check_hutchinson):
        checks += fn(rng)
    return checks


def main(print_fn=print) -> int:
    t0 = time.perf_counter()
    checks = run_checks()
    for c in checks:
        print_fn(c.line())
    failed = [c.name for c in checks if not c.passed]
    print_fn(f"{len(checks) - len(failed)}/{len(checks)} checks passed in {time.perf_counter() - t0:.1f}s")
    return 1 if failed else 0
