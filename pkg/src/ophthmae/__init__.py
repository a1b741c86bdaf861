"""Masked-autoencoder pretraining and downstream adaptation for multimodal
ophthalmic images, built on a small numpy autodiff core."""

from ._accel import backend_name
from .tensor import Tensor, grad_check, no_grad
from .vit import ViTConfig, ViTEncoder

__version__ = "0.1.0"

__all__ = ["Tensor", "ViTConfig", "ViTEncoder", "backend_name", "grad_check", "no_grad", "__version__"]
