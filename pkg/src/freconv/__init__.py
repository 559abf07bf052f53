"""FreConv: frequency branch-and-integration convolution in numpy.

Subpackages map one-to-one onto the pieces of the system:

- :mod:`freconv.tensor`   rank-4 tensors, seeded generation, FRTN files
- :mod:`freconv.ops`      convolution, batch norm, pooling, activations, loss
- :mod:`freconv.layer`    the FreConv module and its initialization
- :mod:`freconv.arch`     ResNet / VGG / DenseNet graphs and their execution
- :mod:`freconv.cost`     parameter and MAC counting
- :mod:`freconv.spectrum` energy spectra of feature maps
- :mod:`freconv.train`    synthetic task, SGD, checkpoints
"""
from .arch import ArchGraph, LayerNode, VariantOptions, build_arch, build_toy, execute, stage_kernel_schedule
from .cost import cost_report, reduction_report
from .layer import FreConvConfig, alpha_coeff, doe_kernel_taps, freconv_forward
from .ops import ConvParams, ConvSpec, conv2d_forward

__version__ = "0.1.0"
