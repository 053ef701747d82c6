"""SGD with momentum, weight decay and a step learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class OptimSpec:
    lr0: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: Tuple[int, ...] = (30, 45, 55)
    decay_factor: float = 0.1
    grad_clip: Optional[float] = None  # global L2 norm cap, None disables

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if not self.decay_factor > 0:
            raise ValueError(f"decay_factor must be positive, got {self.decay_factor}")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {self.milestones}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError(f"grad_clip must be positive or None, got {self.grad_clip}")

    def lr_at(self, epoch: int) -> float:
        """lr0 * decay_factor ** (number of milestones <= epoch)."""
        passed = sum(1 for m in self.milestones if m <= epoch)
        return self.lr0 * self.decay_factor ** passed


@dataclass
class RunState:
    epoch: int = 0
    step: int = 0
    rng_seed: int = 0
    momentum_buffers: Dict[str, np.ndarray] = field(default_factory=dict)
    metrics_history: List[dict] = field(default_factory=list)


def clip_scale(params: Mapping[str, Tensor], max_norm: Optional[float]) -> float:
    """Factor that brings the global gradient L2 norm down to ``max_norm`` (1.0 if already below)."""
    if max_norm is None:
        return 1.0
    norm = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params.values())))
    return max_norm / norm if norm > max_norm else 1.0


def sgd_step(params: Mapping[str, Tensor], state: RunState, spec: OptimSpec, lr: float = None) -> None:
    """v <- momentum * v + (grad + wd * param);  param <- param - lr * v.

    With ``spec.grad_clip`` set, the loss gradients (not the decay term) are
    first rescaled jointly so their global norm is at most ``grad_clip``.
    """
    if lr is None:
        lr = spec.lr_at(state.epoch)
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ValueError(f"missing gradient for parameter(s): {', '.join(missing)}")
    scale = clip_scale(params, spec.grad_clip)
    for name, p in params.items():
        g = p.grad * scale if scale != 1.0 else p.grad
        if spec.weight_decay:
            g = g + spec.weight_decay * p.data
        v = state.momentum_buffers.get(name)
        v = g.copy() if v is None else spec.momentum * v + g
        state.momentum_buffers[name] = v
        p.data = p.data - lr * v
    state.step += 1
