"""Dense float64 primitives, losses, seeded randomness and a finite-difference checker.

Matrices are plain ``numpy.ndarray`` objects of dtype float64.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np


def _path_word(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if part < 0:
        raise ValueError("seed path components must be non-negative")
    return int(part)


def make_rng(seed: int, *path: int | str) -> np.random.Generator:
    """Counter-based Philox generator keyed by ``seed`` and a purpose path.

    ``make_rng(seed, "dropout", step)`` and ``make_rng(seed, "shuffle", epoch)``
    draw from unrelated streams, so each purpose can be replayed in isolation.
    """
    words = [_path_word(seed)] + [_path_word(p) for p in path]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def derive_seed(seed: int, *path: int | str) -> int:
    words = [_path_word(seed)] + [_path_word(p) for p in path]
    return int(np.random.SeedSequence(words).generate_state(1, np.uint32)[0])


def softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax along the last axis with max-subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass(frozen=True)
class LossValue:
    value: float
    gradient: np.ndarray


def cross_entropy(logits: np.ndarray, label: int) -> LossValue:
    z = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < z.shape[-1]:
        raise IndexError(f"label {label} out of range for {z.shape[-1]} classes")
    grad = softmax(z)
    grad[label] -= 1.0
    return LossValue(float(-log_softmax(z)[label]), grad)


def mse(a: np.ndarray, b: np.ndarray) -> LossValue:
    """Component-mean squared error; gradient is taken w.r.t. ``a``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = a - b
    return LossValue(float(np.mean(diff * diff)), 2.0 * diff / diff.size)


def linear(X: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``X @ W + b`` over the last axis of X."""
    if X.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ValueError(f"linear: X{X.shape} W{W.shape} b{b.shape}")
    return X @ W + b


def linear_backward(X: np.ndarray, W: np.ndarray, dY: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dX, dW, db) of ``linear`` given the upstream ``dY``."""
    X2 = X.reshape(-1, X.shape[-1])
    dY2 = dY.reshape(-1, dY.shape[-1])
    return dY @ W.T, X2.T @ dY2, dY2.sum(axis=0)


def check_gradient(f: Callable[[np.ndarray], float], analytic_grad: np.ndarray, point: np.ndarray,
                   epsilon: float = 1e-5) -> float:
    """Max relative error between ``analytic_grad`` and central differences of ``f``."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    p = np.array(point, dtype=np.float64).ravel()
    g = np.asarray(analytic_grad, dtype=np.float64).ravel()
    if g.shape != p.shape:
        raise ValueError("gradient and point shapes differ")
    worst = 0.0
    for i in range(p.size):
        orig = p[i]
        p[i] = orig + epsilon
        up = f(p.reshape(np.shape(point)))
        p[i] = orig - epsilon
        down = f(p.reshape(np.shape(point)))
        p[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        numeric = (up - down) / (2.0 * epsilon)
        err = abs(g[i] - numeric) / max(1e-8, abs(g[i]) + abs(numeric))
        worst = max(worst, err)
    return worst


def seeded_init(shape: tuple[int, ...], scheme: str, seed: int, *path: int | str) -> np.ndarray:
    """``zeros`` or fan-scaled uniform in ±sqrt(6 / (fan_in + fan_out))."""
    if scheme == "zeros":
        return np.zeros(shape)
    if scheme == "uniform-fan-scaled":
        fan_in = shape[0]
        fan_out = shape[1] if len(shape) > 1 else shape[0]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return make_rng(seed, "init", *path).uniform(-bound, bound, size=shape)
    raise ValueError(f"unknown init scheme {scheme!r}")
