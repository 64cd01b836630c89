"""mixnas: architecture search over transformers that mix softmax and
kernelized linear attention.

Layering: ``tensor`` (autodiff) -> ``attention`` (kernels) -> ``model``
(transformer) -> ``supernet`` / ``cost`` / ``ranker`` / ``evolution``
(search machinery) -> ``pipeline`` / ``cli`` (orchestration).
"""

from .attention import (
    causal_linear_attention,
    cosformer_attention,
    linear_attention,
    softmax_attention,
)
from .config import ArchConfig, AttentionKind, ConfigError, TaskShape
from .cost import CostReport, estimate_flops, latency_filter, measure_latency, parameter_count
from .evolution import EvolutionResult, evolve
from .model import ModelWeights, TrainHParams, build, forward, train_step
from .pipeline import Budgets, run_pipeline
from .ranker import RankerModel, feature_importance, fit_ranker, prune_space
from .records import CandidateRecord
from .space import Feature, SearchSpace, classification_space, get_space, translation_space
from .supernet import evaluate_subnet, train_standalone, train_supernet
from .tensor import Tape, Tensor
from .tasks import copy_task, load_cifar10, patchify

__version__ = "0.1.0"
