"""Late-fusion multimodal recommendation with reliability-calibrated modality weights."""
from .data import InteractionDataset, ModalityFeatureTable, split_dataset
from .losses import Hyperparams
from .model import ModelParams, init_params
from .train import desk_hyperparams, run_variant

__all__ = ["InteractionDataset", "ModalityFeatureTable", "split_dataset", "Hyperparams", "ModelParams",
           "init_params", "desk_hyperparams", "run_variant"]
