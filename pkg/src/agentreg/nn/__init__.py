"""Minimal differentiable network: valid convolutions (stride or dilation),
fully connected layers, SELU, Euclidean loss and plain gradient descent."""

from .layers import Layer, LayerSpec, conv2d, selu  # noqa: F401
from .policy import (  # noqa: F401
    PolicyNetworkParams,
    decoder_forward,
    encoder_forward,
    fcn_forward,
    init_policy_network,
    shift_feature_map,
    to_dilated_fcn,
    train_step,
)
from .checkpoint import load_checkpoint, save_checkpoint  # noqa: F401
