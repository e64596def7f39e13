"""Scale-invariant pooling operators for crowd density estimation.

Provides vanilla, multi-kernel, and stacked max pooling on a minimal
CPU tensor/autodiff core, density-estimation network architectures, a
synthetic crowd dataset generator, an Adam training loop, counting and
scale-invariance metrics, and a micro-benchmark harness.
"""

from .pooling import (PoolSpec, pool_vanilla, pool_multi_kernel, pool_stacked,
                      stacked_kernels_for, stacked_spec_for, verify_equivalence)
from .tensor import (Tensor, add, bilinear_resize, conv2d, elementwise_mean,
                     max_pool2d, mse_loss, relu, load_tensor, save_tensor,
                     tensor_sum)

__all__ = [
    "PoolSpec", "pool_vanilla", "pool_multi_kernel", "pool_stacked",
    "stacked_kernels_for", "stacked_spec_for", "verify_equivalence",
    "Tensor", "add", "bilinear_resize", "conv2d", "elementwise_mean",
    "max_pool2d", "mse_loss", "relu", "load_tensor", "save_tensor",
    "tensor_sum",
]

__version__ = "0.1.0"
