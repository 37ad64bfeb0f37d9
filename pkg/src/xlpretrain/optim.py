"""Adam with decoupled weight decay, global-norm clipping, and the
linear warmup / linear decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor


def lr_schedule(step: int, lr_base: float, warmup_steps: int, total_steps: int) -> float:
    """Piecewise-linear rate: 0 -> lr_base over warmup, then -> 0 at total_steps.

    Continuous, peaks exactly at warmup_steps.
    """
    if step <= 0:
        return 0.0
    if warmup_steps > 0 and step <= warmup_steps:
        return lr_base * step / warmup_steps
    if step >= total_steps:
        return 0.0
    return lr_base * (total_steps - step) / (total_steps - warmup_steps)


@dataclass
class AdamState:
    """Optimizer state; m/v keyed by parameter name, shapes match params."""

    lr_base: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    warmup_steps: int = 10_000
    total_steps: int = 200_000
    step: int = 0
    skipped_steps: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    def ensure(self, params: dict[str, Tensor]):
        for name, p in params.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)

    def lr_at(self, step: int) -> float:
        return lr_schedule(step, self.lr_base, self.warmup_steps, self.total_steps)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    return float(np.sqrt(total))


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    updatable: set[str] | None = None,
) -> bool:
    """One optimizer step in place; returns False when skipped (non-finite grad).

    Frozen tensors (absent from `updatable` when given) receive zero effective
    update and are excluded from the clip norm. Non-finite gradients skip the
    whole step and bump `state.skipped_steps`.
    """
    if updatable is None:
        updatable = set(params)
    live = {n: grads[n] for n in grads if n in updatable}

    for g in live.values():
        if not np.all(np.isfinite(g)):
            state.skipped_steps += 1
            return False

    state.ensure(params)
    norm = global_norm(live)
    scale = 1.0
    if np.isfinite(state.clip_norm) and norm > state.clip_norm > 0:
        scale = state.clip_norm / norm

    t = state.step + 1
    lr = state.lr_at(t)
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t

    for name, g in live.items():
        p = params[name]
        dt = p.data.dtype.type
        g = g * dt(scale) if scale != 1.0 else g
        m = state.m[name]
        v = state.v[name]
        m *= dt(b1)
        m += dt(1.0 - b1) * g
        v *= dt(b2)
        v += dt(1.0 - b2) * g * g
        mhat = m / dt(bc1)
        vhat = v / dt(bc2)
        update = dt(lr) * mhat / (np.sqrt(vhat) + dt(state.eps))
        if state.weight_decay:
            update = update + dt(lr * state.weight_decay) * p.data
        p.data -= update

    state.step = t
    return True
