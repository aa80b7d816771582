"""Contrastive feature learning on sparse coding data.

A small simulator: data ``x = M z + xi``, RandomMask views, a soft-threshold
encoder trained by staged SGD on a stop-grad InfoNCE loss, and probes that
check which features the encoder picked up.
"""

__version__ = "0.1.0"

from .data import Dictionary, LatentConfig, NoiseConfig, build_dictionary, random_mask, sample_input
from .network import InitConfig, NetworkParams, forward, init_params
from .rng import SeededRng
from .trainer import TrainConfig, train

__all__ = [
    "Dictionary",
    "InitConfig",
    "LatentConfig",
    "NetworkParams",
    "NoiseConfig",
    "SeededRng",
    "TrainConfig",
    "build_dictionary",
    "forward",
    "init_params",
    "random_mask",
    "sample_input",
    "train",
]
