"""Temporal vision-language pre-training on longitudinal image-report pairs."""

__version__ = "0.1.0"

from .data import CorpusSplit, SyntheticStudy, generate_corpus
from .model import ModelConfig, PretrainModel
from .tensor import Tensor, backward, check_gradients
from .text_encoder import Vocabulary, build_vocabulary
from .training import TrainConfig, train

__all__ = [
    "CorpusSplit", "ModelConfig", "PretrainModel", "SyntheticStudy",
    "Tensor", "TrainConfig", "Vocabulary", "backward", "build_vocabulary",
    "check_gradients", "generate_corpus", "train", "__version__",
]
