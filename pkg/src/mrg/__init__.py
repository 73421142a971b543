"""Joint extractive question answering and response generation over multi-turn dialogs."""

from .data import Vocabulary, load_corpus, synth_generate
from .model import MRG, ModelConfig
from .training import TrainConfig, train_loop

__all__ = ["MRG", "ModelConfig", "TrainConfig", "Vocabulary", "load_corpus", "synth_generate", "train_loop"]
__version__ = "0.1.0"
