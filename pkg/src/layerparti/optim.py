"""Adam, global-norm clipping, the triangular learning rate and gradient accumulation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, UsageError
from .model import ParameterStore


@dataclass
class LrSchedule:
    peak_lr: float
    total_iterations: int
    warmup_frac: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.warmup_frac < 1.0:
            raise ConfigError("lr warmup_frac must be in (0, 1)")
        if self.total_iterations < 1:
            raise ConfigError("total_iterations must be positive")


def lr_at(schedule: LrSchedule, t: float) -> float:
    """Linear rise to ``peak_lr`` over the warm-up fraction, then linear decay to 0 at T."""
    n = schedule.total_iterations
    if not 0 <= t <= n:
        raise UsageError(f"iteration {t} outside [0, {n}]")
    t_peak = schedule.warmup_frac * n
    if t < t_peak:
        return schedule.peak_lr * t / t_peak
    return schedule.peak_lr * (n - t) / (n - t_peak)


def global_norm(tensors) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(t.grad, dtype=np.float64)))
                             for t in tensors if t.grad is not None)))


def clip_global_norm(tensors, max_norm: float = 0.4) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the factor applied (1.0 when nothing was clipped).
    """
    tensors = [t for t in tensors if t.grad is not None]
    norm = global_norm(tensors)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    factor = max_norm / norm
    for t in tensors:
        t.grad = t.grad * np.float32(factor)
    return factor


@dataclass
class Adam:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    steps: dict = field(default_factory=dict)

    def step(self, params: ParameterStore, lr: float) -> None:
        for name, p in params.items():
            # frozen tensors are skipped even if a stale grad is lying around
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
                self.steps[name] = 0
            s = self.steps[name] = self.steps[name] + 1
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = m / np.float32(1.0 - self.beta1 ** s)
            v_hat = v / np.float32(1.0 - self.beta2 ** s)
            p.data = p.data - np.float32(lr) * m_hat / (np.sqrt(v_hat) + np.float32(self.eps))


class Accumulator:
    """Counts micro-batches; every ``steps``-th call clips, applies Adam and clears grads.

    Micro-batch losses must already be scaled by ``1 / steps``.
    """

    def __init__(self, steps: int = 1, clip: float | None = 0.4):
        if steps < 1:
            raise ConfigError("accumulation_steps must be >= 1")
        self.steps = steps
        self.clip = clip
        self.calls = 0
        self.last_clip_factor = 1.0

    def __call__(self, optimizer: Adam, params: ParameterStore, lr: float) -> bool:
        self.calls += 1
        if self.calls % self.steps:
            return False
        trainable = [t for _, t in params.items() if t.requires_grad]
        if self.clip is not None:
            self.last_clip_factor = clip_global_norm(trainable, self.clip)
        optimizer.step(params, lr)
        params.zero_grad()
        return True


def accumulate_and_maybe_step(accum: Accumulator, optimizer: Adam,
                              params: ParameterStore, lr: float) -> bool:
    return accum(optimizer, params, lr)
