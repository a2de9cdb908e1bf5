"""Numerical primitives shared by every training loop.

Everything runs in float64. Randomness always goes through
``make_rng``, which builds a numpy ``Generator`` on the PCG64 bit
generator (PCG XSL RR 128/64), so a seed reproduces the same stream on
every platform.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64


class TrainingError(RuntimeError):
    """Raised when an optimisation step hits a non-finite value."""


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def as_float(x) -> np.ndarray:
    """Array view of ``x``; non-float input becomes float64, float dtypes are kept."""
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(DTYPE)
    return x


def sigmoid(x):
    """Logistic function without overflow for large |x|.

    Accepts scalars or arrays; returns the same shape.
    """
    x = as_float(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def sigmoid_grad(x):
    s = sigmoid(x)
    return s * (1.0 - s)


def relu(x):
    x = as_float(x)
    out = np.maximum(x, 0.0)
    if out.ndim == 0:
        return float(out)
    return out


def relu_grad(x):
    x = as_float(x)
    g = (x > 0).astype(x.dtype)
    if g.ndim == 0:
        return float(g)
    return g


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


@dataclass
class AdamState:
    """Per-block moment buffers for Adam.

    ``first_moment`` and ``second_moment`` are keyed by parameter block name
    and lazily allocated on the first step that sees the block.
    """

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """Apply one bias-corrected Adam update to ``params`` in place.

    Every block in ``params`` must have a gradient of the same shape.
    Non-finite gradients raise ``TrainingError`` naming the block before
    any parameter is touched.
    """
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter '{name}' {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter block '{name}'")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p)
            state.second_moment[name] = np.zeros_like(p)
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_index: int
    numeric: np.ndarray
    message: str = ""


def finite_diff_check(f, analytic_grad, point, h: float = 1e-5, tol: float = 1e-5) -> GradCheckReport:
    """Compare ``analytic_grad`` against central differences of ``f`` at ``point``.

    Relative error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    Differences are taken in the dtype of ``point``; pass a ``np.longdouble``
    point (and an ``f`` that preserves it) when gradient entries are small
    enough for float64 cancellation to matter.
    """
    if h <= 0:
        raise ValueError("step size h must be positive")
    x = as_float(np.array(point)).ravel()
    a = as_float(analytic_grad).ravel()
    if a.shape != x.shape:
        raise ValueError(f"analytic gradient has {a.size} entries, point has {x.size}")
    num = np.zeros_like(x)
    for k in range(x.size):
        orig = x[k]
        x[k] = orig + h
        fp = f(x.copy())
        x[k] = orig - h
        fm = f(x.copy())
        x[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            return GradCheckReport(False, float("inf"), k, num, f"non-finite evaluation at index {k}")
        num[k] = (fp - fm) / (2.0 * h)
    num = num.astype(DTYPE) if a.dtype == DTYPE else num
    rel = np.abs(a - num) / np.maximum(1e-8, np.abs(a) + np.abs(num))
    worst = int(np.argmax(rel)) if rel.size else -1
    max_rel = float(rel[worst]) if rel.size else 0.0
    return GradCheckReport(max_rel < tol, max_rel, worst, num)
