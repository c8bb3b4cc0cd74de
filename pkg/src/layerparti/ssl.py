"""Consistency training: the w(t) ramp, Pi-model targets, temporal ensembling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, UsageError
from .model import ParameterStore, TokenBatch, forward_features, forward_head
from .tensor import Rng, Tensor

MODES = ("none", "pi", "te")


@dataclass
class ConsistencySchedule:
    total_iterations: int
    w_max: float = 10.0
    warmup_frac: float = 0.25
    rampdown_frac: float = 0.15
    rampup_coef: float = 5.0
    rampdown_coef: float = 12.5

    def __post_init__(self):
        if self.total_iterations < 1:
            raise ConfigError("total_iterations must be positive")
        if self.w_max < 0:
            raise ConfigError("w_max must be nonnegative")
        if not (0 < self.warmup_frac and 0 < self.rampdown_frac
                and self.warmup_frac + self.rampdown_frac < 1):
            raise ConfigError("need warmup_frac, rampdown_frac > 0 with sum < 1")

    @property
    def t_up(self) -> float:
        return self.warmup_frac * self.total_iterations

    @property
    def t_down(self) -> float:
        return (1.0 - self.rampdown_frac) * self.total_iterations


def consistency_weight(schedule: ConsistencySchedule, t: int) -> float:
    """Gaussian ramp-up to w_max, plateau, Gaussian ramp-down."""
    n = schedule.total_iterations
    if not 0 <= t < n:
        raise UsageError(f"iteration {t} outside [0, {n})")
    if t < schedule.t_up:
        p = 1.0 - t / schedule.t_up
        return schedule.w_max * math.exp(-schedule.rampup_coef * p * p)
    if t >= schedule.t_down:
        p = (t - schedule.t_down) / (n - schedule.t_down)
        return schedule.w_max * math.exp(-schedule.rampdown_coef * p * p)
    return float(schedule.w_max)


class TemporalEnsemble:
    """Per-example moving average of predictions with zero-init bias correction."""

    def __init__(self, n_examples: int, n_classes: int, alpha: float = 0.6):
        if not 0.0 < alpha < 1.0:
            raise ConfigError(f"alpha must be in (0, 1), got {alpha}")
        self.alpha = float(alpha)
        self.Z = np.zeros((n_examples, n_classes), dtype=np.float32)
        self.T = np.zeros(n_examples, dtype=np.int64)

    def __len__(self):
        return len(self.T)

    def _check(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= len(self.T)):
            raise UsageError(f"example index outside [0, {len(self.T)})")
        return idx

    def target(self, i: int) -> np.ndarray | None:
        self._check([i])
        if self.T[i] == 0:
            return None
        return self.Z[i] / np.float32(1.0 - self.alpha ** int(self.T[i]))

    def targets(self, indices):
        """Batched :meth:`target`: returns (targets, available) with zeros where T_i == 0."""
        idx = self._check(indices)
        counts = self.T[idx]
        avail = counts > 0
        corr = 1.0 - self.alpha ** counts.astype(np.float64)
        out = np.zeros((idx.size, self.Z.shape[1]), dtype=np.float32)
        out[avail] = self.Z[idx[avail]] / corr[avail, None].astype(np.float32)
        return out, avail

    def update(self, indices, z) -> None:
        idx = self._check(np.atleast_1d(indices))
        z = np.asarray(z, dtype=np.float32).reshape(idx.size, -1)
        if len(np.unique(idx)) != idx.size:
            raise UsageError("duplicate example index in one update")
        self.T[idx] += 1
        self.Z[idx] = self.alpha * self.Z[idx] + (1.0 - self.alpha) * z


def te_target(state: TemporalEnsemble, i: int):
    return state.target(i)


def te_update(state: TemporalEnsemble, i: int, z) -> None:
    state.update([i], np.asarray(z)[None, :])


def pi_targets(params: ParameterStore, batch: TokenBatch, split_level: int, rng: Rng):
    """Two independent stochastic passes through U(F(x)).

    Returns the student logits (on the tape), the student probabilities, and
    the teacher probabilities as a constant tensor.
    """
    logits = forward_head(params, forward_features(params, batch, split_level, rng, True),
                          split_level, rng, True)
    with T.no_grad():
        teacher = forward_head(params, forward_features(params, batch, split_level, rng, True),
                               split_level, rng, True)
        z_tilde = T.softmax(teacher)
    return logits, T.softmax(logits), z_tilde


class LossParts(NamedTuple):
    total: Tensor
    ce: float
    consist: float


def combined_loss(logits: Tensor, probs: Tensor, labels: np.ndarray, labeled_rows,
                  targets: np.ndarray, target_rows, w: float) -> LossParts:
    """CE over the labeled rows plus ``w`` times MSE over the rows that have targets.

    ``targets`` is indexed like the batch; only ``target_rows`` are used.
    An empty slice contributes 0.
    """
    labeled_rows = np.asarray(labeled_rows, dtype=np.int64)
    target_rows = np.asarray(target_rows, dtype=np.int64)
    zero = Tensor(0.0)
    l_ce = T.cross_entropy(logits[labeled_rows], np.asarray(labels)[labeled_rows]) \
        if labeled_rows.size else zero
    l_con = T.mse(probs[target_rows], np.asarray(targets)[target_rows]) \
        if target_rows.size else zero
    total = l_ce + l_con * w if w != 0 else l_ce
    return LossParts(total, l_ce.item(), l_con.item())
