"""Face embedding learning with triplet and contrastive losses on a small numpy autograd."""

from facemetric.data import build_splits, generate_synthetic_identities
from facemetric.evaluation import EmbeddingSet, nshot_eval, topn_retrieval_accuracy
from facemetric.experiment import DataSource, ExperimentSpec, run_experiment, train_seed
from facemetric.losses import contrastive_loss, triplet_loss
from facemetric.nets.builders import build
from facemetric.tensor import Tensor
from facemetric.training import TrainConfig, margin_search, train

__version__ = "0.1.0"

__all__ = [
    "DataSource",
    "EmbeddingSet",
    "ExperimentSpec",
    "Tensor",
    "TrainConfig",
    "build",
    "build_splits",
    "contrastive_loss",
    "generate_synthetic_identities",
    "margin_search",
    "nshot_eval",
    "run_experiment",
    "topn_retrieval_accuracy",
    "train",
    "train_seed",
    "triplet_loss",
]
