"""AdamW with linear warmup and cosine decay."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderParams
from .errors import ConfigError, NonFiniteGrad

TEMP_KEY = "logit_s"


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 1e-3
    weight_decay: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    warmup_steps: int = 0
    total_steps: int = 1

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ConfigError("lr and weight_decay must be >= 0, eps > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must be in [0, 1)")
        if self.warmup_steps < 0 or self.total_steps < 1:
            raise ConfigError("warmup_steps >= 0 and total_steps >= 1 required")


def lr_at(t: int, hyper: AdamWConfig) -> float:
    """Learning rate for step ``t`` (1-based): linear warmup, then cosine to zero."""
    w, total = hyper.warmup_steps, hyper.total_steps
    if w > 0 and t <= w:
        return hyper.lr * t / w
    if total <= w:
        return hyper.lr
    progress = min(1.0, (t - w) / (total - w))
    return hyper.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptState:
    hyper: AdamWConfig
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_update(tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptState,
                 no_decay: tuple[str, ...] = ()) -> float:
    """One in-place AdamW step over named arrays; returns the learning rate used.

    Weight decay is decoupled (``p -= lr * wd * p``) and skipped for names in
    ``no_decay``. Raises before touching anything if a gradient is non-finite.
    """
    for name, g in grads.items():
        if name not in tensors:
            raise KeyError(f"gradient for unknown tensor {name!r}")
        if np.shape(g) != np.shape(tensors[name]):
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {np.shape(tensors[name])}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGrad(f"non-finite gradient for {name!r}")
    h = state.hyper
    state.t += 1
    lr = lr_at(state.t, h)
    bc1 = 1.0 - h.beta1**state.t
    bc2 = 1.0 - h.beta2**state.t
    for name, p in tensors.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if name not in state.m:
            state.m[name] = np.zeros_like(p, dtype=np.float64)
            state.v[name] = np.zeros_like(p, dtype=np.float64)
        m, v = state.m[name], state.v[name]
        m *= h.beta1
        m += (1.0 - h.beta1) * g
        v *= h.beta2
        v += (1.0 - h.beta2) * np.square(g)
        if name not in no_decay and h.weight_decay:
            p -= lr * h.weight_decay * p
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + h.eps)
    return lr


def adamw_step(params: EncoderParams, grads: dict, state: OptState) -> tuple[EncoderParams, OptState, float]:
    """AdamW over encoder tensors and the temperature; ``s`` is clamped afterwards.

    ``grads`` maps tensor names to arrays and ``"logit_s"`` to the scalar
    temperature gradient. The temperature is not weight-decayed.
    """
    tensors = params.tensors()
    s = np.array(params.temp.s, dtype=np.float64)
    tensors[TEMP_KEY] = s
    grads = dict(grads)
    if TEMP_KEY in grads:
        grads[TEMP_KEY] = np.asarray(grads[TEMP_KEY], dtype=np.float64)
    lr = adamw_update(tensors, grads, state, no_decay=(TEMP_KEY,))
    params.temp.s = float(s)
    params.temp.clamp()
    return params, state, lr
