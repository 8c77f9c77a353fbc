"""Identity-obfuscating reconstruction of temporal gesture point clouds.

The package trains a graph autoencoder that rewrites frame-indexed 3D point
clouds so a frozen gesture classifier keeps working while a frozen identity
classifier degrades toward chance, and ships the evaluation tooling
(metrics, perturbation baselines, sweeps) needed to measure that trade-off.
"""

from pointveil.data import FrameGrid, Sequence, load_sequences, save_sequences
from pointveil.graph import TemporalGraph, build_temporal_graph
from pointveil.losses import LossWeights, chamfer, combined_loss
from pointveil.model import ModelConfig, ModelParams, autoencoder_forward, classify
from pointveil.synth import SynthSpec, generate_dataset
from pointveil.train import TrainConfig, lr_at, train_autoencoder, train_classifier

__version__ = "0.1.0"

__all__ = [
    "FrameGrid",
    "Sequence",
    "load_sequences",
    "save_sequences",
    "TemporalGraph",
    "build_temporal_graph",
    "LossWeights",
    "chamfer",
    "combined_loss",
    "ModelConfig",
    "ModelParams",
    "autoencoder_forward",
    "classify",
    "SynthSpec",
    "generate_dataset",
    "TrainConfig",
    "lr_at",
    "train_autoencoder",
    "train_classifier",
    "__version__",
]
