"""Closed-form derivatives of the cross-entropy loss w.r.t. a linear softmax head.

With ``z~ = [z; 1]`` and per-sample softmax output ``p``:

* gradient:  ``(p - y) z~^T``                       (bias column is ``p - y``)
* Hessian:   ``(diag(p) - p p^T) kron (z~ z~^T)``   (no label dependence)

Domain-level quantities are batch means of the per-sample terms.  Vectors
over the head use the flattening of :meth:`ClassifierHead.flat`: W row-major,
then b.  Internally the weight/bias pair is handled as one augmented matrix
``[W | b]`` of shape (c, d + 1) and permuted into that order at the edges.

The squared-error variant for a scalar output ``y_hat = act(w.z + b)`` lives
at the bottom of the module.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "HeadGradient",
    "ActivationTriple",
    "IDENTITY",
    "TANH",
    "SIGMOID",
    "head_grad",
    "head_hessian",
    "head_hvp",
    "head_hvp_many",
    "head_hessian_diag",
    "regression_head_grad",
    "regression_head_hessian",
]


@dataclass
class HeadGradient:
    dW: np.ndarray
    db: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([self.dW.ravel(), self.db])

    @classmethod
    def unflat(cls, v, num_classes: int, num_features: int) -> HeadGradient:
        v = np.asarray(v, dtype=np.float64)
        cut = num_classes * num_features
        if v.shape != (cut + num_classes,):
            raise ValueError(f"expected vector of length {cut + num_classes}, got {v.shape}")
        return cls(v[:cut].reshape(num_classes, num_features).copy(), v[cut:].copy())


def _check(features, probs, labels=None):
    z = np.asarray(features, dtype=np.float64)
    p = np.asarray(probs, dtype=np.float64)
    if z.ndim != 2 or p.ndim != 2 or len(z) != len(p):
        raise ValueError(f"features {z.shape} and probs {p.shape} disagree")
    if len(z) == 0:
        raise ValueError("empty batch")
    if labels is not None:
        y = np.asarray(labels, dtype=np.float64)
        if y.shape != p.shape:
            raise ValueError(f"labels {y.shape} do not match probs {p.shape}")
        return z, p, y
    return z, p


def _augment(z: np.ndarray) -> np.ndarray:
    return np.concatenate([z, np.ones((len(z), 1))], axis=1)


def _to_aug(v: np.ndarray, c: int, d: int) -> np.ndarray:
    """Flat head vector(s) (..., c*(d+1)) -> augmented (..., c, d+1)."""
    cut = c * d
    W = v[..., :cut].reshape(v.shape[:-1] + (c, d))
    return np.concatenate([W, v[..., cut:, None]], axis=-1)


def _from_aug(a: np.ndarray) -> np.ndarray:
    c, d1 = a.shape[-2:]
    lead = a.shape[:-2]
    return np.concatenate([a[..., :, :-1].reshape(lead + (c * (d1 - 1),)), a[..., :, -1]], axis=-1)


def _aug_order(c: int, d: int) -> np.ndarray:
    """Index map: position in flat order -> position in row-major [W | b]."""
    idx = np.arange(c * (d + 1)).reshape(c, d + 1)
    return np.concatenate([idx[:, :d].ravel(), idx[:, d]])


def head_grad(features, probs, labels) -> HeadGradient:
    """Batch-mean gradient: ``db = mean(p - y)``, ``dW = mean((p - y) z^T)``."""
    z, p, y = _check(features, probs, labels)
    err = p - y
    n = len(z)
    return HeadGradient(err.T @ z / n, err.sum(axis=0) / n)


def head_hessian(features, probs) -> np.ndarray:
    """Dense batch-mean Hessian, shape (m, m) with m = c*(d+1)."""
    z, p = _check(features, probs)
    n, d = z.shape
    c = p.shape[1]
    zt = _augment(z)
    # M[i, (u, q)] = p_iu * zt_iq ;  H = diag-block part - M^T M / n
    M = (p[:, :, None] * zt[:, None, :]).reshape(n, c * (d + 1))
    H = -(M.T @ M) / n
    blocks = np.einsum("iu,iq,iv->uqv", p, zt, zt) / n
    H4 = H.reshape(c, d + 1, c, d + 1)
    for u in range(c):
        H4[u, :, u, :] += blocks[u]
    order = _aug_order(c, d)
    H = H[np.ix_(order, order)]
    return 0.5 * (H + H.T)


def head_hvp_many(features, probs, V) -> np.ndarray:
    """``H @ v`` for each row of ``V`` (k, m), using the Kronecker structure."""
    z, p = _check(features, probs)
    n, d = z.shape
    c = p.shape[1]
    V = np.asarray(V, dtype=np.float64)
    if V.shape[-1] != c * (d + 1):
        raise ValueError(f"probe length {V.shape[-1]} != head size {c * (d + 1)}")
    zt = _augment(z)
    A = _to_aug(V, c, d)                            # (k, c, d+1)
    dlogit = np.einsum("iq,kuq->kiu", zt, A)        # directional change of logits
    pd = p * dlogit
    B = pd - p * pd.sum(axis=-1, keepdims=True)     # (diag(p) - p p^T) dlogit
    return _from_aug(np.einsum("kiu,iq->kuq", B, zt) / n)


def head_hvp(features, probs, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError("v must be a vector")
    return head_hvp_many(features, probs, v[None, :])[0]


def head_hessian_diag(features, probs) -> np.ndarray:
    """Exact diagonal without forming the dense matrix."""
    z, p = _check(features, probs)
    zt = _augment(z)
    s = p * (1.0 - p)
    return _from_aug(np.einsum("iu,iq->uq", s, zt * zt) / len(z))


# ---------------------------------------------------------------------------
# squared error with a scalar output and an arbitrary activation


@dataclass(frozen=True)
class ActivationTriple:
    name: str
    f: Callable[[np.ndarray], np.ndarray]
    df: Callable[[np.ndarray], np.ndarray]
    d2f: Callable[[np.ndarray], np.ndarray]


def _sig(a):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(a, dtype=np.float64)))


IDENTITY = ActivationTriple(
    "identity",
    lambda a: np.asarray(a, dtype=np.float64),
    lambda a: np.ones_like(np.asarray(a, dtype=np.float64)),
    lambda a: np.zeros_like(np.asarray(a, dtype=np.float64)),
)
TANH = ActivationTriple(
    "tanh",
    np.tanh,
    lambda a: 1.0 - np.tanh(a) ** 2,
    lambda a: -2.0 * np.tanh(a) * (1.0 - np.tanh(a) ** 2),
)
SIGMOID = ActivationTriple(
    "sigmoid",
    _sig,
    lambda a: _sig(a) * (1.0 - _sig(a)),
    lambda a: _sig(a) * (1.0 - _sig(a)) * (1.0 - 2.0 * _sig(a)),
)


def _regression_parts(z, w, b, act):
    z = np.asarray(z, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if z.ndim != 1 or w.shape != z.shape:
        raise ValueError(f"z {z.shape} and w {w.shape} must be equal-length vectors")
    a = float(z @ w + b)
    return z, a, float(act.f(a)), float(act.df(a)), float(act.d2f(a))


def regression_head_grad(z, w, b: float, y: float, act: ActivationTriple = IDENTITY):
    """Gradient of ``0.5 (act(w.z + b) - y)^2``: returns ``(dw, db)``."""
    z, _, yhat, d1, _ = _regression_parts(z, w, b, act)
    r = (yhat - y) * d1
    return r * z, r


def regression_head_hessian(z, w, b: float, y: float, act: ActivationTriple = IDENTITY) -> np.ndarray:
    """(d+1)x(d+1) Hessian over ``(w, b)``, bias last.

    ``act'(a)^2 z~ z~^T + (y_hat - y) act''(a) z~ z~^T``.
    """
    z, _, yhat, d1, d2 = _regression_parts(z, w, b, act)
    zt = np.append(z, 1.0)
    return (d1 * d1 + (yhat - y) * d2) * np.outer(zt, zt)
