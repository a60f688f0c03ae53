"""AdamW with decoupled weight decay, linear warmup, and the two losses.

The update is the decoupled form: weight decay is applied directly to the
parameter, not folded into the gradient.  By default the decay hits every
learnable tensor including batch-norm gamma/beta and biases; set
``decay_norm_and_bias=False`` to exempt everything that is not a weight
matrix.

The learning rate ramps linearly over ``warmup_steps`` optimizer steps
(step counting starts at 1, lr(warmup_steps) == base_lr) and stays at
``base_lr`` afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, NumericalError
from .net import WEIGHT_FIELDS, Gradients, ModelParams


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 3e-3
    warmup_steps: int = 100
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    decay_norm_and_bias: bool = True

    def __post_init__(self):
        if self.base_lr <= 0.0:
            raise ConfigError("base_lr must be positive")
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.seed < 0:
            raise ConfigError("seed must be an unsigned integer")

    def to_dict(self) -> dict:
        return {
            "base_lr": self.base_lr,
            "warmup_steps": self.warmup_steps,
            "weight_decay": self.weight_decay,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "decay_norm_and_bias": self.decay_norm_and_bias,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class OptimizerState:
    """First/second moment tensors per learnable, plus the step counter."""

    first: dict[str, np.ndarray]
    second: dict[str, np.ndarray]
    step_count: int = 0


def init_optimizer(params: ModelParams) -> OptimizerState:
    return OptimizerState(
        first={name: np.zeros_like(arr) for name, arr in params.learnables()},
        second={name: np.zeros_like(arr) for name, arr in params.learnables()},
    )


def lr_at(step: int, config: TrainConfig) -> float:
    """base_lr * min(1, step / warmup_steps); step counting starts at 1."""
    if step < 1:
        raise ConfigError(f"step must be >= 1, got {step}")
    if step >= config.warmup_steps:
        return config.base_lr
    return config.base_lr * (step / config.warmup_steps)


def adamw_step(params: ModelParams, grads: Gradients, state: OptimizerState,
               config: TrainConfig):
    """One decoupled-AdamW step; returns (new_params, state).

    The input params are not mutated (running-stat buffers are carried
    over by reference).  A non-finite gradient element aborts the step.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.flatnonzero(~np.isfinite(g.ravel()))[0])
            raise NumericalError(
                f"non-finite gradient in {name} at flat index {bad}")
    state.step_count += 1
    t = state.step_count
    lr = lr_at(t, config)
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    updated: dict[str, np.ndarray] = {}
    for name, g in grads.items():
        theta = getattr(params, name)
        m = b1 * state.first[name] + (1.0 - b1) * g
        v = b2 * state.second[name] + (1.0 - b2) * (g * g)
        state.first[name] = m
        state.second[name] = v
        mhat = m / bc1
        vhat = v / bc2
        step_term = mhat / (np.sqrt(vhat) + config.epsilon)
        if config.weight_decay != 0.0 and (
                config.decay_norm_and_bias or name in WEIGHT_FIELDS):
            step_term = step_term + config.weight_decay * theta
        updated[name] = theta - lr * step_term
    new_params = ModelParams(
        bn_running_mean=params.bn_running_mean,
        bn_running_var=params.bn_running_var,
        **updated,
    )
    return new_params, state


def cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean softmax negative log-likelihood, stabilized by max-subtraction.

    Returns (loss, gradient w.r.t. the logits); gradient rows are
    (softmax - onehot) / batch.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DataError("cross_entropy expects a batch x classes matrix")
    B, K = logits.shape
    if labels.shape != (B,):
        raise DataError("labels must align with the logit rows")
    if np.any(labels < 0) or np.any(labels >= K):
        raise DataError(f"labels must lie in [0, {K})")
    grad = np.empty_like(logits)
    total = 0.0
    for i in range(B):
        row = logits[i]
        m = row[0]
        for k in range(1, K):
            if row[k] > m:
                m = row[k]
        e = [math.exp(row[k] - m) for k in range(K)]
        z = 0.0
        for k in range(K):
            z += e[k]
        log_z = math.log(z)
        lab = int(labels[i])
        total += float((m + log_z) - row[lab])
        for k in range(K):
            p = e[k] / z
            grad[i, k] = (p - (1.0 if k == lab else 0.0)) / B
    return total / B, grad


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient 2*(pred - target)/batch."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DataError("pred and target must have equal shapes")
    if pred.ndim != 1:
        pred = pred.ravel()
        target = target.ravel()
    B = pred.shape[0]
    if B == 0:
        raise DataError("mse_loss needs at least one element")
    diff = pred - target
    total = 0.0
    sq = diff * diff
    for i in range(B):
        total += float(sq[i])
    grad = (2.0 * diff) / B
    return total / B, grad
