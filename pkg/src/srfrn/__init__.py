"""Shallow residual super-resolution toolkit, no ML framework required.

Submodules: tensor (rank-4 arrays + conv kernels), model (the network graph),
optim (L1/Adam/plateau/epoch loop), imaging (bicubic, YCbCr, PSNR/SSIM, PNG),
data (manifests, augmentation, patch pairs, batching), cli (subcommands).
"""

from . import kernels
from .model import SrfrnModel, load_weights, param_count, save_weights
from .tensor import Tensor

__version__ = "0.1.0"

_DETERMINISM = False


def set_determinism(flag: bool) -> None:
    """Request bit-reproducible runs.

    All shuffles and initializers in this package are already seed-driven;
    the flag additionally makes training pin BLAS to one thread so reduction
    order cannot vary.
    """
    global _DETERMINISM
    _DETERMINISM = bool(flag)


def determinism() -> bool:
    return _DETERMINISM


__all__ = [
    "SrfrnModel",
    "Tensor",
    "determinism",
    "kernels",
    "load_weights",
    "param_count",
    "save_weights",
    "set_determinism",
    "__version__",
]
