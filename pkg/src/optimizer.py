"""SGD with momentum, L2 weight decay and cosine learning-rate annealing."""

import logging
import math
from typing import Dict, Mapping, Optional

import numpy as np

from error_handler import NumericError, ValidationError

logger = logging.getLogger(__name__)


class OptimizerState:
    def __init__(self, base_lrs: Mapping[str, float], total_steps: int, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        if total_steps < 1:
            raise ValidationError(f"total_steps must be >= 1, got {total_steps}")
        self.base_lrs = dict(base_lrs)
        self.total_steps = total_steps
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: Dict[str, np.ndarray] = {}

    def group_of(self, name: str) -> str:
        prefix = name.split('.', 1)[0]
        if prefix in self.base_lrs:
            return prefix
        if 'default' in self.base_lrs:
            return 'default'
        raise ValidationError(f"Parameter '{name}' belongs to no learning-rate group")

    def lr(self, group: str, step: int) -> float:
        return self.base_lrs[group] * 0.5 * (1.0 + math.cos(math.pi * step / self.total_steps))

    def learning_rates(self, step: int) -> Dict[str, float]:
        return {group: self.lr(group, step) for group in self.base_lrs}


def sgd_step(state: OptimizerState, params: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
             step: int, frozen: Optional[set] = None) -> Dict[str, np.ndarray]:
    """v <- mu*v + g + wd*p ; p <- p - lr(step)*v, in place per parameter"""
    if not 0 <= step < state.total_steps:
        raise ValidationError(f"step {step} outside [0, {state.total_steps})")
    missing = sorted(set(grads) - set(params))
    if missing:
        raise ValidationError(f"Gradients for unknown parameters: {missing}")
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"Non-finite gradient for parameter '{name}'", name=name)
        if grad.shape != params[name].shape:
            raise ValidationError(f"Gradient shape {grad.shape} != parameter shape {params[name].shape} for '{name}'")

    for name, param in params.items():
        if frozen and name in frozen:
            continue
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param)
        if state.weight_decay:
            grad = grad + state.weight_decay * param
        buf = state.buffers.get(name)
        if buf is None:
            buf = np.zeros_like(param)
        buf = state.momentum * buf + grad
        state.buffers[name] = buf
        param -= state.lr(state.group_of(name), step) * buf
    return params
