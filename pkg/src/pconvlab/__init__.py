"""Partial convolution, its competitors, cost models and FasterNet on NumPy."""

from .arch import ArchConfig, Network, build_variant, describe, fold_all_bn, forward
from .cost import (CostReport, effective_flops, mem_access_model, model_cost, pconv_pwconv_flops,
                   tshaped_flops)
from .operators import (BNParams, ConvSpec, ConvWeights, activation, bn_forward,
                        conv_backward_data_weights, conv_flops_actual, conv_forward,
                        fold_bn_into_conv, fully_connected, global_avg_pool)
from .tensor import Tensor, concat_channels, im2col, matmul, slice_channels, tensor_new

__version__ = "0.1.0"
