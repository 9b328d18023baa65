"""Adam with a bias-corrected step size."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

STANDARD = "standard"
# sqrt(1 - b2^t / (1 - b1^t)); undefined (negative radicand) for small t
# under the usual betas, kept only for side-by-side comparison.
AS_PRINTED = "as-printed"


@dataclass(frozen=True)
class AdamConfig:
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    bias_correction: bool = True
    correction_form: str = STANDARD

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.correction_form not in (STANDARD, AS_PRINTED):
            raise ValueError(f"unknown correction_form {self.correction_form!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)

    def copy(self) -> "AdamState":
        return AdamState({k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()}, self.t)


def bias_corrected_step_size(config: AdamConfig, t: int) -> float:
    if t < 1:
        raise ValueError("step counter t starts at 1")
    if not config.bias_correction:
        return config.alpha
    if config.correction_form == AS_PRINTED:
        radicand = 1.0 - config.beta2 ** t / (1.0 - config.beta1 ** t)
        if radicand < 0:
            raise ValueError(f"as-printed correction is undefined at t={t} (radicand {radicand:.4g})")
        return config.alpha * math.sqrt(radicand)
    return config.alpha * math.sqrt(1.0 - config.beta2 ** t) / (1.0 - config.beta1 ** t)


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              config: AdamConfig) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update. Returns new parameter and state objects; inputs are left untouched."""
    for name, g in grads.items():
        if name not in params or g.shape != params[name].shape:
            raise ValueError(f"gradient {name!r} does not match the parameters")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    t = state.t + 1
    alpha_t = bias_corrected_step_size(config, t)
    b1, b2 = config.beta1, config.beta2
    new_params, new_m, new_v = {}, {}, {}
    for name, theta in params.items():
        g = grads[name]
        m = state.m.get(name, 0.0) * b1 + (1.0 - b1) * g
        v = state.v.get(name, 0.0) * b2 + (1.0 - b2) * (g * g)
        new_m[name], new_v[name] = m, v
        new_params[name] = theta - alpha_t * m / (np.sqrt(v) + config.epsilon)
    return new_params, AdamState(new_m, new_v, t)
