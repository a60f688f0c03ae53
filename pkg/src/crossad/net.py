"""The micro attention-pooling network: types, forward/backward, checkpoints.

Architecture (both task variants share it): per-channel batch normalization
over batch and time -> linear down-projection to a small hidden space ->
dropout -> ReLU -> attention pooling over the 10 timesteps (2-layer scorer
with an intermediate space twice the hidden width, dropout + ReLU between
the layers, softmax over time) -> linear output head.  The regression
variant squashes its single output through a sigmoid.

The detection variant (28 inputs, hidden 12, 2 logits) has 767 learnable
scalars; the score-regression variant (29 inputs, hidden 8, 1 output) has
468.  Gradients are hand-derived for this fixed topology; there is no
autodiff here.

Heavy math lives in ``crossad.kernels`` (compiled core when built, pure
numpy otherwise -- both produce bit-identical results).  The stage ops
exposed here (``batch_norm_forward``, ``dropout``, ``attention_pool``) are
the reference surfaces used for verification and always run the pure
kernels; ``model_forward``/``model_backward`` dispatch to the active
backend.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigError, DataError, DimensionError
from .kernels import pure
from .rng import RandomStream, derive_seed

CHECKPOINT_SCHEMA_VERSION = 1
BN_MOMENTUM = 0.1

TRAIN = "train"
EVAL = "eval"

# (field, is_learnable); order is the canonical serialization order.
_TENSOR_FIELDS = (
    ("bn_gamma", True),
    ("bn_beta", True),
    ("bn_running_mean", False),
    ("bn_running_var", False),
    ("proj_weight", True),
    ("proj_bias", True),
    ("attn_w1", True),
    ("attn_b1", True),
    ("attn_w2", True),
    ("attn_b2", True),
    ("out_weight", True),
    ("out_bias", True),
)

LEARNABLE_FIELDS = tuple(name for name, learn in _TENSOR_FIELDS if learn)
BUFFER_FIELDS = tuple(name for name, learn in _TENSOR_FIELDS if not learn)
# Tensors that act as weights (everything else is a bias or a norm affine).
WEIGHT_FIELDS = ("proj_weight", "attn_w1", "attn_w2", "out_weight")


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions and regularization of one network variant.

    The attention scorer's intermediate width is always ``2 * hidden_dim``
    and is not independently configurable.
    """

    input_dim: int
    hidden_dim: int
    output_dim: int
    dropout_rate: float = 0.3
    seq_len: int = 10

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "output_dim", "seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigError("dropout_rate must lie in [0, 1)")

    @property
    def attn_dim(self) -> int:
        return 2 * self.hidden_dim

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "output_dim": self.output_dim,
            "dropout_rate": self.dropout_rate,
            "seq_len": self.seq_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def ad_config(dropout_rate: float = 0.3) -> ModelConfig:
    """Detection variant: 25 acoustic channels + age/gender/education."""
    return ModelConfig(28, 12, 2, dropout_rate)


def mmse_config(dropout_rate: float = 0.3) -> ModelConfig:
    """Regression variant: detection inputs + the estimated AD probability."""
    return ModelConfig(29, 8, 1, dropout_rate)


def count_params(config: ModelConfig) -> int:
    """Learnable scalar count; running statistics are buffers, not counted."""
    i, h, o = config.input_dim, config.hidden_dim, config.output_dim
    return 2 * i + h * (i + 1) + 2 * h * (h + 1) + (2 * h + 1) + o * (h + 1)


def _shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    i, h, o = config.input_dim, config.hidden_dim, config.output_dim
    j = config.attn_dim
    return {
        "bn_gamma": (i,), "bn_beta": (i,),
        "bn_running_mean": (i,), "bn_running_var": (i,),
        "proj_weight": (h, i), "proj_bias": (h,),
        "attn_w1": (j, h), "attn_b1": (j,),
        "attn_w2": (1, j), "attn_b2": (1,),
        "out_weight": (o, h), "out_bias": (o,),
    }


@dataclass
class ModelParams:
    """All tensors of one network: learnables plus batch-norm buffers."""

    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_running_mean: np.ndarray
    bn_running_var: np.ndarray
    proj_weight: np.ndarray
    proj_bias: np.ndarray
    attn_w1: np.ndarray
    attn_b1: np.ndarray
    attn_w2: np.ndarray
    attn_b2: np.ndarray
    out_weight: np.ndarray
    out_bias: np.ndarray

    def learnables(self):
        for name in LEARNABLE_FIELDS:
            yield name, getattr(self, name)

    def tensors(self):
        for name, _ in _TENSOR_FIELDS:
            yield name, getattr(self, name)

    def n_learnable_elements(self) -> int:
        return sum(arr.size for _, arr in self.learnables())

    def clone(self) -> "ModelParams":
        return ModelParams(**{name: arr.copy() for name, arr in self.tensors()})

    def validate(self, config: ModelConfig) -> None:
        shapes = _shapes(config)
        for name, arr in self.tensors():
            if tuple(arr.shape) != shapes[name]:
                raise DimensionError(
                    f"{name}: expected shape {shapes[name]}, got {tuple(arr.shape)}")
        if not np.all(self.bn_running_var > 0.0):
            raise DataError("bn_running_var must be strictly positive")


@dataclass
class Gradients:
    """One tensor per learnable field, shapes mirroring ModelParams."""

    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    proj_weight: np.ndarray
    proj_bias: np.ndarray
    attn_w1: np.ndarray
    attn_b1: np.ndarray
    attn_w2: np.ndarray
    attn_b2: np.ndarray
    out_weight: np.ndarray
    out_bias: np.ndarray

    def items(self):
        for name in LEARNABLE_FIELDS:
            yield name, getattr(self, name)


@dataclass
class ForwardCache:
    """Intermediates of one train-mode forward, for the backward pass.

    Holds a reference (not a copy) to the parameters the forward ran with;
    ``model_backward`` refuses caches built from different parameters.
    """

    config: ModelConfig
    params_ref: ModelParams
    arrays: dict
    rng_seed: int
    rng_counter_start: int
    n_draws: int


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Seeded initialization: weights uniform in +-1/sqrt(fan_in), biases 0,
    gamma 1, beta 0, running mean/var 0/1."""
    shapes = _shapes(config)
    stream = RandomStream(derive_seed(seed, "init"))
    fan_in = {
        "proj_weight": config.input_dim,
        "attn_w1": config.hidden_dim,
        "attn_w2": config.attn_dim,
        "out_weight": config.hidden_dim,
    }
    arrays: dict[str, np.ndarray] = {}
    for name, shape in shapes.items():
        if name in fan_in:
            bound = 1.0 / math.sqrt(fan_in[name])
            u = stream.uniform(shape)
            arrays[name] = (2.0 * u - 1.0) * bound
        elif name in ("bn_gamma", "bn_running_var"):
            arrays[name] = np.ones(shape, dtype=np.float64)
        else:
            arrays[name] = np.zeros(shape, dtype=np.float64)
    return ModelParams(**arrays)


def _ema_update(old: np.ndarray, new: np.ndarray, momentum: float) -> np.ndarray:
    return (1.0 - momentum) * old + momentum * new


def _check_mode(mode: str) -> None:
    if mode not in (TRAIN, EVAL):
        raise ConfigError(f"mode must be '{TRAIN}' or '{EVAL}', got {mode!r}")


# ---------------------------------------------------------------------------
# Stage operations (reference surfaces; always pure kernels)
# ---------------------------------------------------------------------------

def batch_norm_forward(x: np.ndarray, params: ModelParams, mode: str = TRAIN,
                       momentum: float = BN_MOMENTUM):
    """Normalize per channel over batch and time.

    Train mode uses biased batch statistics and updates the running
    statistics in place (exponential moving average).  Eval mode uses the
    running statistics and mutates nothing.  Returns (out, cache); the
    cache is None in eval mode.
    """
    _check_mode(mode)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise DimensionError(f"expected a batch x seq x channel tensor, got ndim={x.ndim}")
    if mode == TRAIN:
        if x.shape[0] * x.shape[1] < 2:
            raise DataError("train-mode batch norm needs at least 2 values per channel")
        out, norm, mean, var = pure.bn_train(x, params.bn_gamma, params.bn_beta)
        params.bn_running_mean = _ema_update(params.bn_running_mean, mean, momentum)
        params.bn_running_var = _ema_update(params.bn_running_var, var, momentum)
        return out, {"norm": norm, "mean": mean, "var": var}
    if not np.all(params.bn_running_var > 0.0):
        raise DataError("eval-mode batch norm requires positive running variance")
    out = pure.bn_eval(x, params.bn_gamma, params.bn_beta,
                       params.bn_running_mean, params.bn_running_var)
    return out, None


def dropout(x: np.ndarray, rate: float, rng: RandomStream | None, mode: str = TRAIN):
    """Inverted dropout; eval mode is the identity.

    Returns (out, mask); the mask is a 0/1 float array in train mode and
    None in eval mode.
    """
    _check_mode(mode)
    if not (0.0 <= rate < 1.0):
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    x = np.asarray(x, dtype=np.float64)
    if mode == EVAL:
        return x, None
    if rate == 0.0:
        return x.copy(), np.ones_like(x)
    if rng is None:
        raise ConfigError("train-mode dropout with rate > 0 needs a RandomStream")
    mask, n = pure.dropout_mask(x.shape, rate, rng.seed, rng.counter)
    rng.skip(n)
    return pure.apply_dropout(x, mask, rate), mask


def attention_pool(h: np.ndarray, params: ModelParams,
                   rng: RandomStream | None = None, mode: str = EVAL,
                   rate: float = 0.0):
    """Collapse the time axis with softmax-weighted pooling.

    Scores come from the 2-layer feed-forward scorer (dropout + ReLU
    between the layers in train mode; ``rate`` is the scorer's dropout
    rate).  Returns (pooled, weights, cache); weights are nonnegative and
    sum to 1 per sample.
    """
    _check_mode(mode)
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 3:
        raise DimensionError(f"expected a batch x seq x hidden tensor, got ndim={h.ndim}")
    train = mode == TRAIN
    if train and rate > 0.0 and rng is None:
        raise ConfigError("train-mode attention pooling with dropout needs a RandomStream")
    seed = rng.seed if rng is not None else 0
    counter = rng.counter if rng is not None else 0
    s, z1, mask2, r, n2 = pure.attention_scores(
        h, params.attn_w1, params.attn_b1, params.attn_w2, params.attn_b2,
        rate if train else 0.0, seed, counter, train)
    if rng is not None:
        rng.skip(n2)
    w = pure.softmax_time(s)
    pooled = pure.sorted_time_sum(w[:, :, None] * h)
    cache = {"z1": z1, "mask2": mask2, "r": r, "w": w}
    return pooled, w, cache


# ---------------------------------------------------------------------------
# Full-model forward/backward (backend-dispatched)
# ---------------------------------------------------------------------------

def _validate_input(x: np.ndarray, config: ModelConfig) -> np.ndarray:
    x = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    if x.ndim != 3:
        raise DimensionError(
            f"model input must have 3 axes (batch, seq, channel), got {x.ndim}")
    if x.shape[1] != config.seq_len:
        raise DimensionError(
            f"seq axis 1: expected {config.seq_len}, got {x.shape[1]}")
    if x.shape[2] != config.input_dim:
        raise DimensionError(
            f"channel axis 2: expected {config.input_dim}, got {x.shape[2]}")
    if x.shape[0] < 1:
        raise DimensionError("batch axis 0: expected at least 1 sample")
    return x


def model_forward(x: np.ndarray, params: ModelParams, config: ModelConfig,
                  rng: RandomStream | None = None, mode: str = TRAIN):
    """Run the full network.

    Train mode consumes dropout draws from ``rng``, updates the running
    batch-norm statistics in place, and returns (outputs, cache).  Eval
    mode is a pure function of (x, params) and returns (outputs, None).
    Outputs are raw logits for the 2-class head and sigmoid-squashed values
    in (0, 1) for the single-output head.
    """
    _check_mode(mode)
    x = _validate_input(x, config)
    params.validate(config)
    apply_sigmoid = config.output_dim == 1
    backend = kernels.active()
    if mode == EVAL:
        out, _ = backend.forward_eval(
            x, params.bn_gamma, params.bn_beta,
            params.bn_running_mean, params.bn_running_var,
            params.proj_weight, params.proj_bias,
            params.attn_w1, params.attn_b1, params.attn_w2, params.attn_b2,
            params.out_weight, params.out_bias, apply_sigmoid)
        return out, None
    if x.shape[0] * x.shape[1] < 2:
        raise DataError("train-mode batch norm needs at least 2 values per channel")
    rate = config.dropout_rate
    if rate > 0.0 and rng is None:
        raise ConfigError("train-mode forward with dropout needs a RandomStream")
    seed = rng.seed if rng is not None else 0
    counter = rng.counter if rng is not None else 0
    out, arrays, mean, var, n_draws = backend.forward_train(
        x, params.bn_gamma, params.bn_beta,
        params.proj_weight, params.proj_bias,
        params.attn_w1, params.attn_b1, params.attn_w2, params.attn_b2,
        params.out_weight, params.out_bias,
        rate, apply_sigmoid, seed, counter)
    params.bn_running_mean = _ema_update(params.bn_running_mean, mean, BN_MOMENTUM)
    params.bn_running_var = _ema_update(params.bn_running_var, var, BN_MOMENTUM)
    if rng is not None:
        rng.skip(n_draws)
    cache = ForwardCache(config=config, params_ref=params, arrays=arrays,
                         rng_seed=seed, rng_counter_start=counter, n_draws=n_draws)
    return out, cache


def model_backward(cache: ForwardCache, params: ModelParams,
                   config: ModelConfig, output_grad: np.ndarray) -> Gradients:
    """Gradients of every learnable tensor given d(loss)/d(outputs).

    Reuses the dropout masks stored in the cache, i.e. the same stochastic
    realization as the forward pass that produced it.
    """
    if cache is None:
        raise ConfigError("model_backward needs a cache from a train-mode forward")
    if cache.params_ref is not params:
        raise ConfigError("cache/params mismatch: cache was built from different parameters")
    if cache.config != config:
        raise ConfigError("cache/config mismatch")
    go = np.ascontiguousarray(np.asarray(output_grad, dtype=np.float64))
    out = cache.arrays["out"]
    if go.shape != out.shape:
        raise DimensionError(
            f"output_grad shape {go.shape} does not match outputs {out.shape}")
    backend = kernels.active()
    grads = backend.backward(
        cache.arrays, params.proj_weight, params.attn_w1, params.attn_w2,
        params.out_weight, config.dropout_rate, config.output_dim == 1, go)
    return Gradients(**grads)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, params: ModelParams, config: ModelConfig,
                    seed_info: dict | None = None,
                    selection: dict | None = None) -> None:
    """Write a JSON checkpoint: config, every tensor flat + shape, RNG
    provenance, and the epoch/validation loss it was captured at."""
    doc = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "config": config.to_dict(),
        "tensors": {
            name: {"shape": list(arr.shape), "data": [float(v) for v in arr.ravel()]}
            for name, arr in params.tensors()
        },
        "rng": seed_info or {},
        "selection": selection or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def load_checkpoint(path: str | Path):
    """Read a checkpoint; returns (params, config, metadata)."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise DataError(
            f"checkpoint {path}: unsupported schema_version {doc.get('schema_version')!r}")
    config = ModelConfig.from_dict(doc["config"])
    shapes = _shapes(config)
    arrays = {}
    for name, want_shape in shapes.items():
        entry = doc["tensors"].get(name)
        if entry is None:
            raise DataError(f"checkpoint {path}: missing tensor {name}")
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        if tuple(arr.shape) != want_shape:
            raise DataError(
                f"checkpoint {path}: tensor {name} has shape {tuple(arr.shape)}, "
                f"expected {want_shape}")
        arrays[name] = arr
    params = ModelParams(**arrays)
    params.validate(config)
    meta = {"rng": doc.get("rng", {}), "selection": doc.get("selection", {})}
    return params, config, meta
