"""Text-line recognition with transcription-style conditioning.

A small numpy autodiff engine drives a CTC line recogniser whose recurrent
features are re-styled per transcription style identifier (TSI) through an
embedding-conditioned adaptive instance norm.
"""

from .data import Alphabet, Dataset, DatasetConfig, StylePermutation, build_dataset
from .network import Model, NetworkConfig
from .training import Checkpoint, TrainConfig, evaluate, train
from .tsb import StyleTable

__version__ = "0.1.0"

__all__ = [
    "Alphabet", "Checkpoint", "Dataset", "DatasetConfig", "Model", "NetworkConfig", "StylePermutation",
    "StyleTable", "TrainConfig", "build_dataset", "evaluate", "train",
]
