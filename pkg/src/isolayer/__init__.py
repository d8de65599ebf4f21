"""Monotone, context-aware calibration layers in numpy.

The core object is the isotonic layer: a bucketized piecewise-linear map of
a logit with non-negative slopes, so its output never decreases in its input.
Around it sit a trainer, per-context embeddings, classical baselines (PAVA,
Platt), a position-bias simulator, a dual-head debiasing model and metrics.
"""

from .baselines import PlattParams, StepFunction, pava_fit, pava_predict, platt_fit, platt_predict
from .bias_sim import (LabeledDataset, PositionBiasScenario, gen_piecewise, gen_position_logs,
                       gen_quadratic, piecewise_target, quadratic_target)
from .context import (REFERENCE, EmbeddingTable, composite_key, conditioned_forward,
                      fit_conditioned, lookup, neutralized_forward)
from .core import (ConfigError, CorruptInputError, IsotonicConfig, IsotonicParams,
                   activation_vector, bucket_index, clip_input, forward, num_buckets,
                   preactivation)
from .dual_tower import (DualTowerModel, DualTrainConfig, inference_head, isotonic_head,
                         joint_gradients, joint_loss, neutralized_head, train_dual_tower)
from .metrics import EvalReport, auc, ece, evaluate, normalized_entropy, oe_ratio, soft_auc
from .training import (NumericalError, TrainConfig, TrainReport, backward, bce_loss,
                       calibrate_frozen, finite_difference_check, fit, step, train_layer)

__version__ = "0.1.0"
