"""
Optimizer - Adam with linear warmup and cosine decay.

The learning rate at step s of T:
    warmup_steps = floor(warmup_ratio * T)
    s <  warmup_steps: peak * s / warmup_steps
    s >= warmup_steps: peak * 0.5 * (1 + cos(pi * progress))   (cosine=True)
                       peak                                      (cosine=False)
"""

import math
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

try:
    from patchrec.autograd import Tensor
    from patchrec.utils import NumericError, setup_logger
except ImportError:
    from autograd import Tensor
    from utils import NumericError, setup_logger

logger = setup_logger(__name__)

# Defaults
WARMUP_RATIO = 0.05
BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class OptimizerState:
    """Adam moments, step counter and schedule settings."""
    lr: float
    total_steps: int
    warmup_ratio: float = WARMUP_RATIO
    cosine: bool = True
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPS
    weight_decay: float = 0.0
    max_grad_norm: float = 0.0
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def warmup_steps(self) -> int:
        return int(math.floor(self.warmup_ratio * self.total_steps))

    def lr_at(self, step: int) -> float:
        """Effective learning rate for a given step."""
        warmup = self.warmup_steps
        if warmup > 0 and step < warmup:
            return self.lr * step / warmup
        if not self.cosine:
            return self.lr
        span = max(1, self.total_steps - warmup)
        progress = min(max((step - warmup) / span, 0.0), 1.0)
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * progress))

    def settings(self) -> dict:
        return {
            "lr": self.lr,
            "total_steps": self.total_steps,
            "warmup_ratio": self.warmup_ratio,
            "cosine": self.cosine,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "max_grad_norm": self.max_grad_norm,
            "step": self.step,
        }


def clip_grad_norm(params: Dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params.values() if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def optimizer_step(state: OptimizerState, params: Dict[str, Tensor]) -> float:
    """
    Apply one Adam update to every trainable parameter in place.

    Returns:
        The learning rate used for this step.

    Raises:
        NumericError: If any gradient is missing or non-finite.
    """
    for name, p in params.items():
        if not p.requires_grad:
            continue
        if p.grad is None:
            raise NumericError(f"parameter '{name}' has no gradient; run backward() first")
        if not np.all(np.isfinite(p.grad)):
            bad = int((~np.isfinite(p.grad)).sum())
            raise NumericError(
                f"non-finite gradient in parameter '{name}' shape={list(p.shape)} "
                f"({bad} bad entries) at step {state.step}"
            )

    if state.max_grad_norm > 0:
        clip_grad_norm(params, state.max_grad_norm)

    lr = state.lr_at(state.step)
    t = state.step + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        if not p.requires_grad:
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * p.grad
        v = state.beta2 * v + (1.0 - state.beta2) * p.grad ** 2
        state.m[name] = m
        state.v[name] = v
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay > 0:
            update = update + state.weight_decay * p.data
        p.data -= lr * update

    state.step += 1
    return lr


def zero_grads(params: Dict[str, Tensor]) -> None:
    for p in params.values():
        p.zero_grad()
