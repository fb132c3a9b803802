"""Flat-vector optimizers (SGD, Adam) applied to a model's parameter vector."""
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .errors import ConfigError, DimensionError


_steps = [0]


def step_count():
    """Optimizer steps taken in this process (instrumentation)."""
    return _steps[0]


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 2e-4
    betas: Tuple[float, float] = (0.5, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: Optional[np.ndarray] = field(default=None, repr=False)
    v: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.kind!r}")

    def copy(self):
        return OptimizerState(self.kind, self.lr, tuple(self.betas), self.eps, self.step,
                              None if self.m is None else self.m.copy(),
                              None if self.v is None else self.v.copy())

    def state_bytes(self):
        parts = [np.int64(self.step).tobytes()]
        for buf in (self.m, self.v):
            if buf is not None:
                parts.append(buf.tobytes())
        return b"".join(parts)


def make_optimizer(model, kind="adam", lr=2e-4, betas=(0.5, 0.999)):
    """Optimizer state with moment buffers sized to ``model``'s parameter vector."""
    state = OptimizerState(kind, float(lr), tuple(betas))
    if kind == "adam":
        state.m = np.zeros(model.num_parameters, dtype=model.dtype)
        state.v = np.zeros(model.num_parameters, dtype=model.dtype)
    return state


def apply_gradient(model, state, gradient):
    """One optimizer step on ``model`` (in place) using a flat gradient vector."""
    g = np.asarray(gradient)
    if g.ndim != 1 or g.size != model.num_parameters:
        raise DimensionError(f"gradient of length {g.size} for model with {model.num_parameters} parameters")
    dtype = model.dtype
    g = g.astype(dtype, copy=False)
    w = model.get_flat()
    state.step += 1
    _steps[0] += 1
    if state.kind == "sgd":
        w = w - dtype.type(state.lr) * g
    else:
        b1, b2 = state.betas
        if state.m is None:
            state.m = np.zeros_like(w)
            state.v = np.zeros_like(w)
        state.m = dtype.type(b1) * state.m + dtype.type(1 - b1) * g
        state.v = dtype.type(b2) * state.v + dtype.type(1 - b2) * g * g
        m_hat = state.m / dtype.type(1 - b1 ** state.step)
        v_hat = state.v / dtype.type(1 - b2 ** state.step)
        w = w - dtype.type(state.lr) * m_hat / (np.sqrt(v_hat) + dtype.type(state.eps))
    model.set_flat(w)
