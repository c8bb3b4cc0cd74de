"""Layer-partitioned semi-supervised text classification on a small numpy autodiff engine."""

from .config import RunConfig
from .model import ModelConfig, ParameterStore, TokenBatch, forward, forward_features, forward_head, init_model
from .partition import PartitionState, frozen_parameter_digest, make_partition, step_unfreeze
from .ssl import ConsistencySchedule, TemporalEnsemble, combined_loss, consistency_weight, pi_targets
from .tensor import Rng, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "RunConfig", "ModelConfig", "ParameterStore", "TokenBatch", "forward", "forward_features",
    "forward_head", "init_model", "PartitionState", "frozen_parameter_digest", "make_partition",
    "step_unfreeze", "ConsistencySchedule", "TemporalEnsemble", "combined_loss",
    "consistency_weight", "pi_targets", "Rng", "Tensor", "backward",
]
