"""Dense linear algebra, activations, Adam and gradient checking.

All matrices are float64 numpy arrays. Products go through the kernels in
:mod:`idcf.kernels`, which sum in a fixed order, so a training run is
bit-reproducible regardless of the BLAS build underneath numpy.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import kernels
from .errors import ConfigError, DimensionError, TrainingError

logger = logging.getLogger(__name__)


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return kernels.matmul(a, b)


# ---------------------------------------------------------------- activations

def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(kind, x):
    x = np.asarray(x, dtype=np.float64)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "sigmoid":
        return _sigmoid(x)
    raise ConfigError(f"unknown activation {kind!r}")


def activation_backward(kind, x, upstream):
    """Jacobian-vector product of ``activation(kind, .)`` at ``x``. relu'(0) = 0."""
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if kind == "tanh":
        t = np.tanh(x)
        return upstream * (1.0 - t * t)
    if kind == "relu":
        return np.where(x > 0, upstream, 0.0)
    if kind == "sigmoid":
        s = _sigmoid(x)
        return upstream * s * (1.0 - s)
    raise ConfigError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------- parameters

@dataclass
class ParamTensor:
    """A trainable array together with its gradient and Adam moments.

    ``decay`` marks embedding tables, the only tensors that receive L2
    weight decay.
    """

    name: str
    value: np.ndarray
    decay: bool = False
    grad: np.ndarray = field(init=False)
    adam_m: np.ndarray = field(init=False)
    adam_v: np.ndarray = field(init=False)
    step_count: int = 0

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0.0)

    def reset_optimizer(self):
        self.adam_m.fill(0.0)
        self.adam_v.fill(0.0)
        self.step_count = 0

    def copy(self) -> "ParamTensor":
        out = ParamTensor(self.name, self.value.copy(), self.decay)
        out.grad = self.grad.copy()
        out.adam_m = self.adam_m.copy()
        out.adam_v = self.adam_v.copy()
        out.step_count = self.step_count
        return out


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")


def adam_step(param: ParamTensor, cfg: AdamConfig) -> ParamTensor:
    """One Adam update of ``param`` in place; the gradient is zeroed afterwards."""
    if not np.all(np.isfinite(param.grad)):
        raise TrainingError(f"nonfinite gradient for parameter {param.name!r}")
    grad = param.grad
    if param.decay and cfg.weight_decay:
        grad = grad + cfg.weight_decay * param.value
    param.step_count += 1
    kernels.adam_update(
        param.value, grad, param.adam_m, param.adam_v,
        cfg.learning_rate, cfg.beta1, cfg.beta2, param.step_count, cfg.epsilon,
    )
    param.zero_grad()
    return param


# ---------------------------------------------------------------- gradient check

def grad_check(
    loss_fn: Callable[[], float],
    params: Iterable[ParamTensor],
    probe_count: int = 32,
    fd_epsilon: float = 1e-4,
    seed: int = 0,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``loss_fn()`` must return the scalar loss and accumulate analytic
    gradients into each parameter's ``grad``. Probes are spread round-robin
    over the parameter tensors, each at a random coordinate.
    """
    params = [p for p in params if p.value.size]
    if not params:
        return 0.0
    for p in params:
        p.zero_grad()
    loss_fn()
    analytic = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()

    rng = np.random.default_rng(seed)
    worst = 0.0
    for probe in range(probe_count):
        k = probe % len(params)
        p = params[k]
        flat = p.value.reshape(-1)
        j = int(rng.integers(flat.size))
        orig = flat[j]
        flat[j] = orig + fd_epsilon
        up = loss_fn()
        flat[j] = orig - fd_epsilon
        down = loss_fn()
        flat[j] = orig
        p.zero_grad()
        fd = (up - down) / (2.0 * fd_epsilon)
        an = analytic[k].reshape(-1)[j]
        err = abs(an - fd) / max(1e-8, abs(an) + abs(fd))
        if err > worst:
            logger.debug("probe %s[%d]: analytic=%.6e fd=%.6e rel=%.2e", p.name, j, an, fd, err)
        worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst


# ---------------------------------------------------------------- least squares

@dataclass(frozen=True)
class LeastSquaresResult:
    coef: np.ndarray
    residual: float
    degenerate: bool


def least_squares_solve(a, y) -> LeastSquaresResult:
    """Minimum-norm ``c`` solving ``c^T a = y^T`` for ``a`` of shape (M, d).

    Equivalently ``a^T c = y``. ``degenerate`` is set when ``a`` is
    numerically rank deficient.
    """
    a = np.asarray(a, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    if a.ndim != 2 or y.shape[0] != a.shape[1]:
        raise DimensionError(f"target of length {y.shape[0]} does not match {a.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(y))):
        raise DimensionError("least squares inputs must be finite")
    coef, *_ = np.linalg.lstsq(a.T, y, rcond=None)
    sv = np.linalg.svd(a, compute_uv=False)
    smin = sv.min() if min(a.shape) == a.shape[1] else 0.0
    degenerate = bool(a.shape[0] < a.shape[1] or smin < 1e-10 * max(1.0, sv.max(initial=0.0)))
    residual = float(np.linalg.norm(a.T @ coef - y))
    return LeastSquaresResult(coef=coef, residual=residual, degenerate=degenerate)
