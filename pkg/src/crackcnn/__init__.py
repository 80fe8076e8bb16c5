"""Lightweight crack-detection CNN written directly on numpy.

The network is a modified LeNet-5. Two blocks of SAME-padded 3x3
convolution, ReLU, local response normalization and 3x3/2 max-pooling feed
two fully connected layers, and the softmax width is chosen per task.
"""

from crackcnn.tensor import DTYPE, make_rng, rng_uniform, tensor_flatten, tensor_new
from crackcnn.network import (
    Checkpoint,
    LayerSpec,
    Network,
    NetworkConfig,
    build_network,
    count_params,
    load_checkpoint,
    save_checkpoint,
    swap_head,
)
from crackcnn.training import (
    AdamState,
    MetricsRow,
    TrainConfig,
    adam_step,
    cross_entropy_loss,
    evaluate,
    train,
    transfer_train,
)
from crackcnn.data import Dataset, Sample, generate_synthetic, load_dataset, preprocess_image

__version__ = "0.1.0"

__all__ = [
    "DTYPE",
    "AdamState",
    "Checkpoint",
    "Dataset",
    "LayerSpec",
    "MetricsRow",
    "Network",
    "NetworkConfig",
    "Sample",
    "TrainConfig",
    "adam_step",
    "build_network",
    "count_params",
    "cross_entropy_loss",
    "evaluate",
    "generate_synthetic",
    "load_checkpoint",
    "load_dataset",
    "make_rng",
    "preprocess_image",
    "rng_uniform",
    "save_checkpoint",
    "swap_head",
    "tensor_flatten",
    "tensor_new",
    "train",
    "transfer_train",
]
