"""Decoder-only patch transformer for multivariate forecasting with learned
variable graphs and channel-wise mixture-of-experts, on a numpy autodiff core."""

from .checkpoint import Checkpoint, load_state, model_state
from .config import ExperimentConfig, dump_config, load_config, parse_config
from .data import Dataset, LagCopy, Sinusoid, SynthSpec, load_dataset, split, synth_generate
from .graph import gumbel_adjacency, similarity_matrix
from .model import Model, ModelConfig, build_model, count_parameters, next_patch_loss
from .moe import MoEConfig
from .tensor import RngStream, Tensor
from .tokenizer import PatchConfig, SeriesBatch
from .training import TrainSpec, evaluate, extract_pretrain_samples, finetune, pretrain

__all__ = [
    "Checkpoint", "Dataset", "ExperimentConfig", "LagCopy", "Model", "ModelConfig", "MoEConfig",
    "PatchConfig", "RngStream", "SeriesBatch", "Sinusoid", "SynthSpec", "Tensor", "TrainSpec",
    "build_model", "count_parameters", "dump_config", "evaluate", "extract_pretrain_samples",
    "finetune", "gumbel_adjacency", "load_config", "load_dataset", "load_state", "model_state",
    "next_patch_loss", "parse_config", "pretrain", "similarity_matrix", "split", "synth_generate",
]
