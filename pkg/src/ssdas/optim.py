"""SGD with momentum and weight decay, and the polynomial learning-rate policy."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

REFERENCE_BASE_LR = 2.5e-4
REFERENCE_MOMENTUM = 0.9
REFERENCE_WEIGHT_DECAY = 1e-4
REFERENCE_LR_POWER = 0.9


def poly_lr(base_lr: float, iteration: int, max_iter: int, power: float = REFERENCE_LR_POWER) -> float:
    """``base_lr * (1 - iteration / max_iter) ** power``."""
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    if not 0 <= iteration <= max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    return base_lr * (1.0 - iteration / max_iter) ** power


@dataclass
class OptimizerState:
    momentum: float = REFERENCE_MOMENTUM
    weight_decay: float = REFERENCE_WEIGHT_DECAY
    base_lr: float = REFERENCE_BASE_LR
    buffers: Dict[int, np.ndarray] = field(default_factory=dict)


def sgd_step(opt: OptimizerState, params: Sequence, grads: Sequence[Optional[np.ndarray]], lr: float) -> None:
    """In place: ``v = momentum*v + g + wd*p``, ``p -= lr*v``.

    ``params`` are tensors; a ``None`` gradient leaves that parameter and its
    buffer untouched.
    """
    if len(params) != len(grads):
        raise ValueError("one gradient per parameter required")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        d = g + opt.weight_decay * p.data if opt.weight_decay else g
        v = opt.buffers.get(i)
        if v is None:
            v = np.array(d, dtype=np.float64)
        else:
            v *= opt.momentum
            v += d
        opt.buffers[i] = v
        if lr:
            p.data -= lr * v


def step_module(opt: OptimizerState, module, lr: float) -> bool:
    """Apply one SGD step to a module unless it is frozen; returns whether it moved."""
    if getattr(module, "frozen", False):
        return False
    ps = module.parameters()
    sgd_step(opt, ps, [p.grad for p in ps], lr)
    return True
