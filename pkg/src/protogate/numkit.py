"""Dense numeric primitives shared by the trainable modules.

Everything runs in float64. There is no autodiff here: each trainable
module hand-derives its gradients and validates them against the
finite-difference checker in this module.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DimensionError, PoisonedGradientError, UndefinedSimilarityError

Params = dict[str, np.ndarray]


def as_matrix(x) -> np.ndarray:
    """Coerce to a 2-D float64 array."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a matrix, got ndim={m.ndim}")
    return m


def as_vector(x) -> np.ndarray:
    """Coerce to a 1-D float64 array."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"expected a vector, got ndim={v.ndim}")
    return v


def matvec(m, v) -> np.ndarray:
    """Matrix-vector product with explicit shape checking."""
    m = as_matrix(m)
    v = as_vector(v)
    if m.shape[1] != v.shape[0]:
        raise DimensionError(f"matvec shape mismatch: {m.shape} x {v.shape}")
    return m @ v


def softmax(v) -> np.ndarray:
    """Numerically stable softmax of a vector (max subtracted before exp)."""
    v = as_vector(v)
    if v.size == 0:
        raise DimensionError("softmax of an empty vector")
    shifted = v - v.max()
    e = np.exp(shifted)
    return e / e.sum()


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax of a 2-D array."""
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cosine_similarity(a, b) -> float:
    """cos(a, b) = a.b / (|a||b|), clamped to [-1, 1].

    Raises UndefinedSimilarityError when either vector has zero norm;
    the caller decides the routing policy for that case.
    """
    a = as_vector(a)
    b = as_vector(b)
    if a.shape != b.shape:
        raise DimensionError(f"cosine shape mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise UndefinedSimilarityError("cosine similarity against a zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass
class AdamState:
    """Per-parameter Adam accumulators plus the shared hyperparameters.

    Weight decay is decoupled (applied directly to the parameter, outside
    the moment estimates), so decay strength does not depend on the
    gradient scale.
    """

    lr: float = 5e-5
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)


def adam_step(params: Params, grads: Params, state: AdamState) -> Params:
    """One Adam update with bias correction and decoupled weight decay.

    Returns a new dict of updated parameter arrays; the input arrays are
    left untouched. Moment accumulators and the step counter live in
    `state` and are updated in place.
    """
    if set(params) != set(grads):
        raise DimensionError(
            f"params/grads key mismatch: {sorted(params)} vs {sorted(grads)}"
        )
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise DimensionError(
                f"grad shape for {name!r}: {g.shape} vs param {params[name].shape}"
            )
        if not np.all(np.isfinite(g)):
            raise PoisonedGradientError(f"non-finite gradient for {name!r}")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    out: Params = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_p = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if state.weight_decay != 0.0:
            new_p = new_p - state.lr * state.weight_decay * p
        out[name] = new_p
    return out


LossFn = Callable[[Params], tuple[float, Params]]


def grad_check(loss_fn: LossFn, params: Params, epsilon: float = 1e-5) -> float:
    """Compare analytic gradients against central finite differences.

    loss_fn(params) must return (loss, grads) and be pure and
    deterministic for fixed params. Returns the max over all scalar
    parameters of |analytic - numeric| / max(1, |numeric|).
    """
    _, analytic = loss_fn(params)
    worst = 0.0
    for name, p in params.items():
        flat = p.ravel()
        for i in range(flat.size):
            bumped = {k: v.copy() for k, v in params.items()}
            bumped[name].ravel()[i] = flat[i] + epsilon
            loss_plus, _ = loss_fn(bumped)
            bumped[name].ravel()[i] = flat[i] - epsilon
            loss_minus, _ = loss_fn(bumped)
            numeric = (loss_plus - loss_minus) / (2.0 * epsilon)
            err = abs(analytic[name].ravel()[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
