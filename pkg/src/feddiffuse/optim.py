"""Plain SGD and bias-corrected Adam on flat parameter vectors."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError

OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class OptimizerState:
    kind: str
    lr: float
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, kind: str, lr: float, num_params: int) -> "OptimizerState":
        if kind not in OPTIMIZERS:
            raise ConfigurationError(f"optimizer must be one of {OPTIMIZERS}, got {kind!r}")
        if kind == "adam":
            return cls(kind, lr, np.zeros(num_params), np.zeros(num_params))
        return cls(kind, lr)


def apply_update(params: np.ndarray, grad: np.ndarray, opt: OptimizerState) -> tuple[np.ndarray, OptimizerState]:
    """One descent step; returns new parameters and the advanced optimizer state."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match parameter shape {params.shape}")
    if opt.kind == "sgd":
        return params - opt.lr * grad, replace(opt, step=opt.step + 1)
    if opt.m is None or opt.m.shape != params.shape:
        raise ValueError("adam moment vectors do not match the parameter vector")
    step = opt.step + 1
    m = opt.beta1 * opt.m + (1.0 - opt.beta1) * grad
    v = opt.beta2 * opt.v + (1.0 - opt.beta2) * grad * grad
    m_hat = m / (1.0 - opt.beta1 ** step)
    v_hat = v / (1.0 - opt.beta2 ** step)
    new = params - opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    return new, replace(opt, m=m, v=v, step=step)
