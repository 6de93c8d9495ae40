"""Tensorial position encodings with O(R)-equivariant contextualization."""
from .model import ModelConfig, TapeModel, model_forward
from .posenc import FourierSchedule, PosTensor, RopeSchedule

__version__ = "0.1.0"
