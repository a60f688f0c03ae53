import numpy as np
import pytest

from crossad.data import AD, CONTROL, Covariates, Dataset, Sample
from crossad.net import ModelConfig, ModelParams, init_params, model_backward, model_forward
from crossad.pipeline import AdPrediction
from crossad.rng import RandomStream


def confusion_fixture(counts):
    """(truth, predictions) realizing given (tp, fp, tn, fn) counts."""
    tp, fp, tn, fn = counts
    samples, preds = [], []
    feats = np.zeros((10, 25))
    idx = 0
    for count, diagnosis, label in ((tp, AD, 1), (fp, CONTROL, 1),
                                    (tn, CONTROL, 0), (fn, AD, 0)):
        for _ in range(count):
            sid = f"s{idx:03d}"
            samples.append(Sample(id=sid, language="greek", features=feats,
                                  covariates=Covariates(70.0, 0, 12.0),
                                  diagnosis=diagnosis, mmse_raw=25,
                                  mmse_normalized=25 / 30))
            preds.append(AdPrediction(id=sid, probability=float(label),
                                      label=label))
            idx += 1
    return Dataset(samples), preds


def rand_input(config: ModelConfig, batch: int, seed: int) -> np.ndarray:
    """Deterministic pseudo-random input tensor, roughly unit scale."""
    u = RandomStream(seed).uniform((batch, config.seq_len, config.input_dim))
    return 4.0 * u - 2.0


def random_params(config: ModelConfig, seed: int) -> ModelParams:
    """Fully random parameters for gradient checks.

    Unlike real initialization (zero biases), every tensor is drawn from a
    continuous distribution so no ReLU pre-activation sits exactly on its
    kink, where finite differences are ill-defined.
    """
    params = init_params(config, seed)
    jitter = RandomStream(seed + 7_777)
    for name, arr in params.learnables():
        arr += 0.3 * (2.0 * jitter.uniform(arr.shape) - 1.0)
    return params


def loss_for_fd(x, params, config, dropout_seed, weights):
    """Scalar probe loss sum(weights * outputs) with replayable dropout."""
    out, _ = model_forward(x, params, config, RandomStream(dropout_seed), mode="train")
    return float(np.sum(weights * out))


def fd_gradients(x, params: ModelParams, config: ModelConfig, dropout_seed: int,
                 weights: np.ndarray, step: float = 1e-5) -> dict:
    """Central finite differences of the probe loss, tensor by tensor.

    Independent oracle for the analytic backward pass; 64-bit throughout.
    """
    fd = {}
    for name, arr in params.learnables():
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gflat = g.ravel()
        for i in range(flat.shape[0]):
            orig = flat[i]
            flat[i] = orig + step
            lp = loss_for_fd(x, params, config, dropout_seed, weights)
            flat[i] = orig - step
            lm = loss_for_fd(x, params, config, dropout_seed, weights)
            flat[i] = orig
            gflat[i] = (lp - lm) / (2.0 * step)
        fd[name] = g
    return fd


def max_rel_error(analytic: np.ndarray, reference: np.ndarray) -> float:
    worst = 0.0
    for a, b in zip(analytic.ravel(), reference.ravel()):
        denom = max(abs(a), abs(b))
        if denom < 1e-10:
            continue
        worst = max(worst, abs(a - b) / denom)
    return worst


def analytic_gradients(x, params, config, dropout_seed, weights):
    out, cache = model_forward(x, params, config, RandomStream(dropout_seed), mode="train")
    return model_backward(cache, params, config, weights)


@pytest.fixture
def small_config():
    return ModelConfig(input_dim=5, hidden_dim=4, output_dim=2, dropout_rate=0.3)


@pytest.fixture
def small_params(small_config):
    return init_params(small_config, seed=11)


def logistic_oracle_accuracy(train_samples, test_samples):
    """Plain logistic regression on time-pooled features (test-side oracle)."""
    def pooled(samples):
        x = np.stack([s.features.mean(axis=0) for s in samples])
        y = np.array([s.label() for s in samples], dtype=np.float64)
        return x, y

    xtr, ytr = pooled(train_samples)
    xte, yte = pooled(test_samples)
    mu, sd = xtr.mean(axis=0), xtr.std(axis=0) + 1e-9
    xtr = (xtr - mu) / sd
    xte = (xte - mu) / sd
    w = np.zeros(xtr.shape[1])
    b = 0.0
    for _ in range(800):
        z = xtr @ w + b
        p = 1.0 / (1.0 + np.exp(-z))
        gw = xtr.T @ (p - ytr) / len(ytr)
        gb = float(np.mean(p - ytr))
        w -= 0.5 * gw
        b -= 0.5 * gb
    acc = np.mean(((xte @ w + b) > 0).astype(int) == yte)
    return float(acc)
