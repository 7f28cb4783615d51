"""Mini diffusion transformer over channel-concatenated condition units (LCU++)."""

from .lcu import ConditionUnit, LcuPlusPlus, TextInstruction
from .model import ModelConfig, ModelWeights, forward, init_weights
from .sampler import GenerationSpec, SampleConfig, generate
from .tensor import Tensor
from .trainer import TrainConfig, run_stage

__all__ = [
    "ConditionUnit",
    "GenerationSpec",
    "LcuPlusPlus",
    "ModelConfig",
    "ModelWeights",
    "SampleConfig",
    "Tensor",
    "TextInstruction",
    "TrainConfig",
    "forward",
    "generate",
    "init_weights",
    "run_stage",
]

__version__ = "0.1.0"
