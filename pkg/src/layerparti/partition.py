"""Freezing the lower layer groups (F) and unfreezing them top-down late in training."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

from .errors import UsageError
from .model import ParameterStore


@dataclass
class PartitionState:
    split_level: int
    max_iterations: int
    unfreeze_threshold: float = 0.8
    frozen_groups: list[int] = field(default_factory=list)

    @property
    def unfreeze_from(self) -> int:
        """First iteration index at which unfreezing may happen."""
        # round() strips representation noise such as 0.8 * 1000 = 800.0000000000001
        return math.ceil(round(self.unfreeze_threshold * self.max_iterations, 9))


def make_partition(params: ParameterStore, split_level: int, max_iterations: int,
                   unfreeze_threshold: float = 0.8) -> PartitionState:
    n = params.config.n_layers
    if not 0 <= split_level <= n:
        raise UsageError(f"split level {split_level} outside [0, {n}]")
    if max_iterations < 1:
        raise UsageError("max_iterations must be positive")
    for g in params.groups:
        params.set_trainable(g, g > split_level)
    return PartitionState(split_level, max_iterations, unfreeze_threshold,
                          list(range(split_level + 1)))


def apply_partition(params: ParameterStore, state: PartitionState) -> None:
    """Re-derive trainability flags from ``state`` (used after loading a checkpoint)."""
    frozen = set(state.frozen_groups)
    for g in params.groups:
        params.set_trainable(g, g not in frozen)


def step_unfreeze(state: PartitionState, params: ParameterStore, t: int) -> int | None:
    """Move the highest frozen group into U once ``t`` passes the threshold."""
    if not state.frozen_groups or t < state.unfreeze_from:
        return None
    g = state.frozen_groups.pop()
    params.set_trainable(g, True)
    return g


def frozen_parameter_digest(params: ParameterStore, state: PartitionState,
                            groups=None) -> str:
    groups = set(state.frozen_groups if groups is None else groups)
    h = hashlib.sha256()
    for name, t in params.items():
        if params.group_of(name) in groups:
            h.update(name.encode())
            h.update(t.data.astype("<f4").tobytes())
    return h.hexdigest()
