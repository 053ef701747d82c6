"""Deeply supervised knowledge distillation on a small numpy autodiff engine."""

from .tensor import Tensor
from .models import StageSpec, build_network
from .losses import DistillConfig

__version__ = "0.1.0"
