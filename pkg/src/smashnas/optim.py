"""Adam and Nesterov-momentum updates plus a cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor

ADAM_DEFAULTS = {"lr": 2e-4, "beta1": 0.5, "beta2": 0.999, "eps": 1e-8, "weight_decay": 0.0}
NESTEROV_DEFAULTS = {"lr": 0.1, "momentum": 0.9, "weight_decay": 0.0}


@dataclass
class OptimizerState:
    mode: str
    step: int = 0
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def arrays(self) -> dict[str, np.ndarray]:
        return dict(self.buffers)


def init_state(params: Mapping[str, Tensor], mode: str) -> OptimizerState:
    if mode not in ("adam", "nesterov"):
        raise ValueError(f"unknown optimizer mode {mode!r}")
    state = OptimizerState(mode=mode)
    for name, p in params.items():
        if mode == "adam":
            state.buffers[f"{name}.m"] = np.zeros_like(p.data)
            state.buffers[f"{name}.v"] = np.zeros_like(p.data)
        else:
            state.buffers[f"{name}.velocity"] = np.zeros_like(p.data)
    return state


def optimizer_step(
    params: Mapping[str, Tensor],
    state: OptimizerState,
    mode: str | None = None,
    hyper: Mapping[str, float] | None = None,
) -> None:
    """Update every parameter in place from its ``.grad``.

    Parameters whose gradient is ``None`` are treated as having zero gradient.
    """
    mode = mode or state.mode
    if mode != state.mode:
        raise ValueError(f"optimizer state was initialized for {state.mode!r}, not {mode!r}")
    defaults = ADAM_DEFAULTS if mode == "adam" else NESTEROV_DEFAULTS
    h = {**defaults, **(hyper or {})}
    state.step += 1
    t = state.step
    for name, p in params.items():
        key = f"{name}.m" if mode == "adam" else f"{name}.velocity"
        if key not in state.buffers:
            raise KeyError(f"optimizer state is not initialized for parameter {name!r}")
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if h["weight_decay"]:
            g = g + h["weight_decay"] * p.data
        if mode == "adam":
            m = state.buffers[f"{name}.m"]
            v = state.buffers[f"{name}.v"]
            m *= h["beta1"]
            m += (1 - h["beta1"]) * g
            v *= h["beta2"]
            v += (1 - h["beta2"]) * g * g
            m_hat = m / (1 - h["beta1"] ** t)
            v_hat = v / (1 - h["beta2"] ** t)
            p.data -= (h["lr"] * m_hat / (np.sqrt(v_hat) + h["eps"])).astype(p.dtype)
        else:
            vel = state.buffers[key]
            vel *= h["momentum"]
            vel += g
            p.data -= (h["lr"] * (g + h["momentum"] * vel)).astype(p.dtype)


def zero_grad(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def cosine_anneal(lr0: float, t: int, T: int) -> float:
    """Half-cosine decay from ``lr0`` at ``t=0`` to zero at ``t=T``."""
    if T <= 0:
        raise ValueError("schedule length T must be positive")
    if t < 0 or t > T:
        raise ValueError(f"step {t} outside schedule [0, {T}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * t / T))
