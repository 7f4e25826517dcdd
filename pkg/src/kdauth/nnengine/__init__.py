"""Small numpy neural-network engine: layers, recurrent stacks, training."""
from .checkpoint import from_json as load_checkpoint
from .checkpoint import to_json as dump_checkpoint
from .gradcheck import GradCheckReport, grad_check
from .layers import (Conv2d, Dense, DimensionError, Dropout, Flatten, MaxPool2d, ReLU, Sigmoid,
                     StateError, ToSequence, Unsqueeze)
from .network import Network, layer_from_spec
from .optim import (OptimizerSpec, Plateau, PlateauTracker, StepLR, TrainingAborted, TrainState,
                    bce_grad, bce_loss, optimizer_step)
from .recurrent import RecurrentStack
from .train import TrainConfig, fit

__all__ = [
    "Conv2d", "Dense", "DimensionError", "Dropout", "Flatten", "GradCheckReport", "MaxPool2d",
    "Network", "OptimizerSpec", "Plateau", "PlateauTracker", "RecurrentStack", "ReLU", "Sigmoid",
    "StateError", "StepLR", "ToSequence", "TrainConfig", "TrainState", "TrainingAborted",
    "Unsqueeze", "bce_grad", "bce_loss", "dump_checkpoint", "fit", "grad_check",
    "layer_from_spec", "load_checkpoint", "optimizer_step",
]
