"""Question answering over temporal knowledge graphs.

The model propagates messages over per-question subgraphs with a
relational graph convolution whose edge weights measure how well each
fact's validity interval matches the time the question asks about, then
ranks every entity and every year as a candidate answer.  The package
also ships a deterministic synthetic-world generator with a symbolic
answer oracle, an embedding pretrainer, a training loop and an
evaluation/analysis suite, wired together by the ``tkgqa`` command.
"""

from .autodiff import Tape, Tensor, grad_check
from .config import TrainingConfig, load_config
from .encoders import EmbeddingStore, build_store, pretrain_tcomplex
from .errors import TkgqaError
from .generator import WorldSpec, generate_dataset, generate_to_directory
from .kg import (
    Answer,
    BackgroundKG,
    QuestionInstance,
    QuestionSubgraph,
    TemporalFact,
    Vocabulary,
    build_background_kg,
    load_dataset,
)
from .model import TimeWeightedRGCN, build_model_for_dataset, prepare_questions
from .training import TrainResult, run_ablation, train

__version__ = "0.1.0"

__all__ = [
    "Answer",
    "BackgroundKG",
    "EmbeddingStore",
    "QuestionInstance",
    "QuestionSubgraph",
    "Tape",
    "Tensor",
    "TemporalFact",
    "TimeWeightedRGCN",
    "TkgqaError",
    "TrainResult",
    "TrainingConfig",
    "Vocabulary",
    "WorldSpec",
    "build_background_kg",
    "build_model_for_dataset",
    "build_store",
    "generate_dataset",
    "generate_to_directory",
    "grad_check",
    "load_config",
    "load_dataset",
    "prepare_questions",
    "pretrain_tcomplex",
    "run_ablation",
    "train",
    "__version__",
]
