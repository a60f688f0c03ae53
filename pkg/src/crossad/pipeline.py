"""Training/evaluation orchestration: five-seed pre-training, mixed-batch
transfer to the target language, swap-and-average, prediction, metrics.

The procedure, end to end: train on the English split five times with five
seeds, validating each epoch on the Greek sample pool, and keep the run
with the lowest validation loss.  Fine-tune that model on English plus 4
of the 8 Greek samples, where every fifth mini-batch position (0-based
4, 9, 14, ...) carries a Greek sample cycled round-robin; validate on
English-val plus the held-out Greek quartet inserted the same way.
Repeat with the quartets swapped, then average the two fine-tuned models
elementwise (they share the pre-trained initialization, so averaging is
meaningful).

Everything is deterministic given the seeds: shuffles, dropout, rotation
offsets, and parameter averaging all reduce to pinned arithmetic.  The
five pre-training runs are independent and may execute in parallel
without changing any result.
"""

from __future__ import annotations

import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import (
    Dataset,
    Sample,
    assemble_batch,
    denormalize_mmse,
    split_train_val,
)
from .errors import ConfigError, DataError, NumericalError
from .net import (
    EVAL,
    TRAIN,
    ModelConfig,
    ModelParams,
    ad_config,
    init_params,
    mmse_config,
    model_backward,
    model_forward,
)
from .optim import TrainConfig, adamw_step, cross_entropy, init_optimizer, mse_loss
from .rng import RandomStream, derive_seed

GREEK_EVERY = 5  # 0-based positions 4, 9, 14, ... hold target-language samples


# ---------------------------------------------------------------------------
# Containers
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: ModelParams
    model_config: ModelConfig
    seed: int
    epoch: int
    val_loss: float


@dataclass
class RunResult:
    seed: int
    curve: list[tuple[int, float, float]] = field(default_factory=list)
    checkpoint: Checkpoint | None = None
    failed: bool = False
    reason: str | None = None


@dataclass
class RunArtifacts:
    runs: list[RunResult]
    selected: Checkpoint
    rationale: str


@dataclass
class AdPrediction:
    id: str
    probability: float
    label: int


@dataclass
class MmsePrediction:
    id: str
    score: float


@dataclass
class EvalReport:
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float | None
    sensitivity: float | None
    specificity: float | None
    precision: float | None
    f1: float | None
    rmse_mmse: float | None = None

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        return {
            "n": self.n, "tp": self.tp, "fp": self.fp, "tn": self.tn,
            "fn": self.fn, "accuracy": self.accuracy,
            "sensitivity": self.sensitivity, "specificity": self.specificity,
            "precision": self.precision, "f1": self.f1,
            "rmse_mmse": self.rmse_mmse,
        }


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

def plain_batches(samples: list[Sample], batch_size: int, seed: int,
                  epoch: int) -> list[list[Sample]]:
    """Seeded per-epoch shuffle, fixed-size batches, short tail kept."""
    order = list(range(len(samples)))
    RandomStream(derive_seed(seed, "shuffle", epoch)).shuffle(order)
    shuffled = [samples[i] for i in order]
    return [shuffled[i:i + batch_size] for i in range(0, len(shuffled), batch_size)]


def mixed_batches(english, greek: list[Sample], batch_size: int, seed: int,
                  epoch: int) -> list[list[Sample]]:
    """English batches with every fifth position replaced by a Greek sample.

    0-based positions 4, 9, 14, ... hold Greek samples cycled round-robin
    from a seeded per-epoch rotation offset; displaced English samples are
    deferred to later batches, so each English sample appears exactly once
    per epoch (the final batch may be short).
    """
    if batch_size < GREEK_EVERY:
        raise ConfigError(
            f"batch_size {batch_size} leaves no replacement position "
            f"(need >= {GREEK_EVERY})")
    en = list(english)
    if not greek:
        raise ConfigError("the Greek sample list must be non-empty")
    order = list(range(len(en)))
    RandomStream(derive_seed(seed, "shuffle", epoch)).shuffle(order)
    queue = deque(en[i] for i in order)
    g_idx = RandomStream(derive_seed(seed, "greek", epoch)).index(len(greek))
    batches: list[list[Sample]] = []
    batch: list[Sample] = []
    while queue:
        if len(batch) % GREEK_EVERY == GREEK_EVERY - 1:
            batch.append(greek[g_idx % len(greek)])
            g_idx += 1
        else:
            batch.append(queue.popleft())
        if len(batch) == batch_size:
            batches.append(batch)
            batch = []
    if batch:
        batches.append(batch)
    return batches


def mixed_eval_samples(english_val, greek_val: list[Sample],
                       batch_size: int) -> list[Sample]:
    """Validation-side insertion: natural order, rotation offset 0.

    Returns the concatenated positions of all batches; the validation loss
    is the mean over these positions, which weights the Greek quartet by
    its insertion count exactly as during training.
    """
    if batch_size < GREEK_EVERY:
        raise ConfigError(
            f"batch_size {batch_size} leaves no replacement position "
            f"(need >= {GREEK_EVERY})")
    queue = deque(english_val)
    g_idx = 0
    out: list[Sample] = []
    pos = 0
    while queue:
        if pos % batch_size % GREEK_EVERY == GREEK_EVERY - 1:
            out.append(greek_val[g_idx % len(greek_val)])
            g_idx += 1
        else:
            out.append(queue.popleft())
        pos += 1
    return out


# ---------------------------------------------------------------------------
# Losses and the shared epoch loop
# ---------------------------------------------------------------------------

def _batch_loss(out: np.ndarray, batch: list[Sample], task: str):
    if task == "ad":
        labels = [s.label() for s in batch]
        return cross_entropy(out, labels)
    targets = []
    for s in batch:
        if s.mmse_normalized is None:
            raise DataError(f"sample {s.id} has no cognitive score")
        targets.append(s.mmse_normalized)
    loss, grad = mse_loss(out[:, 0], np.asarray(targets))
    return loss, grad.reshape(out.shape)


def _eval_loss(params: ModelParams, config: ModelConfig,
               samples: list[Sample], task: str) -> float:
    x = assemble_batch(samples, include_ad_prob=(task == "mmse"))
    out, _ = model_forward(x, params, config, mode=EVAL)
    loss, _ = _batch_loss(out, samples, task)
    return loss


def _train_run(params0: ModelParams, config: ModelConfig, tconf: TrainConfig,
               batches_for_epoch, val_samples: list[Sample], task: str):
    """Train ``epochs`` epochs from params0; checkpoint the best epoch.

    ``batches_for_epoch(epoch)`` yields the epoch's batches.  Returns
    (best Checkpoint, curve).  Non-finite losses raise NumericalError.
    """
    params = params0.clone()
    state = init_optimizer(params)
    dropout_rng = RandomStream(derive_seed(tconf.seed, "dropout"))
    curve: list[tuple[int, float, float]] = []
    best: Checkpoint | None = None
    if tconf.epochs == 0:
        val = float(_eval_loss(params, config, val_samples, task))
        return Checkpoint(params, config, tconf.seed, 0, val), curve
    for epoch in range(1, tconf.epochs + 1):
        total = 0.0
        n_batches = 0
        for batch in batches_for_epoch(epoch):
            x = assemble_batch(batch, include_ad_prob=(task == "mmse"))
            out, cache = model_forward(x, params, config, dropout_rng, TRAIN)
            loss, grad = _batch_loss(out, batch, task)
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite training loss at epoch {epoch}")
            grads = model_backward(cache, params, config, grad)
            params, state = adamw_step(params, grads, state, tconf)
            total += loss
            n_batches += 1
        train_loss = total / n_batches if n_batches else float("nan")
        val_loss = float(_eval_loss(params, config, val_samples, task))
        if not math.isfinite(val_loss):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        curve.append((epoch, float(train_loss), val_loss))
        if best is None or val_loss < best.val_loss:
            best = Checkpoint(params.clone(), config, tconf.seed, epoch, val_loss)
    return best, curve


# ---------------------------------------------------------------------------
# Pre-training
# ---------------------------------------------------------------------------

def pretrain(train: Dataset, val: Dataset, config: TrainConfig,
             seeds: list[int], task: str = "ad",
             model_config: ModelConfig | None = None,
             parallel: bool = False) -> RunArtifacts:
    """One training run per seed; select the lowest validation loss.

    Validation happens on ``val`` (the Greek sample pool in the full
    procedure) after every epoch.  Failed runs (non-finite losses) are
    excluded from selection; if every run fails, that is an error.
    """
    if len(set(seeds)) != len(seeds):
        raise ConfigError("pretraining seeds must be distinct")
    if not seeds:
        raise ConfigError("pretraining needs at least one seed")
    if model_config is None:
        model_config = ad_config() if task == "ad" else mmse_config()
    train_samples = list(train)
    val_samples = list(val)

    def one_run(seed: int) -> RunResult:
        tconf = replace(config, seed=seed)
        batches = lambda epoch: plain_batches(
            train_samples, tconf.batch_size, seed, epoch)
        try:
            best, curve = _train_run(init_params(model_config, seed),
                                     model_config, tconf, batches,
                                     val_samples, task)
        except NumericalError as exc:
            return RunResult(seed=seed, failed=True, reason=str(exc))
        return RunResult(seed=seed, curve=curve, checkpoint=best)

    if parallel:
        with ThreadPoolExecutor(max_workers=len(seeds)) as pool:
            runs = list(pool.map(one_run, seeds))
    else:
        runs = [one_run(s) for s in seeds]

    viable = [r for r in runs if not r.failed]
    if not viable:
        raise NumericalError("every pre-training run failed: "
                             + "; ".join(r.reason or "?" for r in runs))
    selected = min(viable, key=lambda r: r.checkpoint.val_loss)
    rationale = (f"selected seed {selected.seed} "
                 f"(epoch {selected.checkpoint.epoch}, "
                 f"val_loss {selected.checkpoint.val_loss!r}) as the minimum over "
                 f"{len(viable)} completed run(s)")
    return RunArtifacts(runs=runs, selected=selected.checkpoint, rationale=rationale)


# ---------------------------------------------------------------------------
# Transfer: fine-tuning, swap, averaging
# ---------------------------------------------------------------------------

def _check_quartet(samples: list[Sample], name: str) -> None:
    if len(samples) != 4:
        raise ConfigError(f"{name} must hold exactly 4 samples, got {len(samples)}")
    positives = sum(s.label() for s in samples)
    if positives != 2:
        raise ConfigError(f"{name} must hold 2 AD and 2 controls, got {positives} AD")


def finetune(pretrained: ModelParams, en_train, en_val,
             gr_train: list[Sample], gr_val: list[Sample],
             config: TrainConfig, task: str = "ad",
             model_config: ModelConfig | None = None) -> Checkpoint:
    """Mixed-batch fine-tuning from a pre-trained model.

    Trains on English + the 4-sample Greek quartet, validates on
    English-val + the held-out quartet inserted the same way, and returns
    the best-epoch checkpoint.  Zero epochs returns the pre-trained
    parameters unchanged.
    """
    _check_quartet(gr_train, "gr_train")
    _check_quartet(gr_val, "gr_val")
    if model_config is None:
        model_config = ad_config() if task == "ad" else mmse_config()
    en_train = list(en_train)
    val_positions = mixed_eval_samples(list(en_val), gr_val, config.batch_size)
    batches = lambda epoch: mixed_batches(
        en_train, gr_train, config.batch_size, config.seed, epoch)
    best, _curve = _train_run(pretrained, model_config, config, batches,
                              val_positions, task)
    return best


def average_params(a: ModelParams, b: ModelParams) -> ModelParams:
    """Elementwise mean of every tensor (learnables and running stats)."""
    merged = {}
    for (name, ta), (_, tb) in zip(a.tensors(), b.tensors()):
        if ta.shape != tb.shape:
            raise ConfigError(f"cannot average {name}: shapes {ta.shape} vs {tb.shape}")
        merged[name] = 0.5 * (ta + tb)
    return ModelParams(**merged)


def partition_greek_pool(greek_8: list[Sample]) -> tuple[list[Sample], list[Sample]]:
    """Deterministic quartets: per class, sorted ids alternate A, B, A, B."""
    if len(greek_8) != 8:
        raise ConfigError(f"the Greek pool must hold exactly 8 samples, got {len(greek_8)}")
    ads = sorted((s for s in greek_8 if s.label() == 1), key=lambda s: s.id)
    controls = sorted((s for s in greek_8 if s.label() == 0), key=lambda s: s.id)
    if len(ads) != 4 or len(controls) != 4:
        raise ConfigError("the Greek pool must hold 4 AD and 4 controls")
    quartet_a = sorted([ads[0], ads[2], controls[0], controls[2]], key=lambda s: s.id)
    quartet_b = sorted([ads[1], ads[3], controls[1], controls[3]], key=lambda s: s.id)
    return quartet_a, quartet_b


def swap_and_average(pretrained: ModelParams, en_train, en_val,
                     greek_8: list[Sample], config: TrainConfig,
                     task: str = "ad",
                     model_config: ModelConfig | None = None):
    """Fine-tune twice with the Greek quartets in swapped roles and return
    the elementwise mean, plus both fine-tuned checkpoints."""
    quartet_a, quartet_b = partition_greek_pool(greek_8)
    ck_a = finetune(pretrained, en_train, en_val, quartet_a, quartet_b,
                    config, task, model_config)
    ck_b = finetune(pretrained, en_train, en_val, quartet_b, quartet_a,
                    config, task, model_config)
    averaged = average_params(ck_a.params, ck_b.params)
    return averaged, {"finetune_a": ck_a, "finetune_b": ck_b,
                      "quartet_a": [s.id for s in quartet_a],
                      "quartet_b": [s.id for s in quartet_b]}


# ---------------------------------------------------------------------------
# Prediction and evaluation
# ---------------------------------------------------------------------------

def _softmax_positive(logits: np.ndarray) -> float:
    """P(class 1) of one two-logit row, stabilized."""
    m = logits[0] if logits[0] > logits[1] else logits[1]
    e0 = math.exp(logits[0] - m)
    e1 = math.exp(logits[1] - m)
    return e1 / (e0 + e1)


def _exact_mean(values: list[float]) -> float:
    """Order-independent mean: value-sorted sequential sum."""
    acc = 0.0
    for v in sorted(values):
        acc += v
    return acc / len(values)


def predict_ad(models: list[Checkpoint], dataset: Dataset) -> list[AdPrediction]:
    """Ensemble AD probability per sample; label is AD when mean >= 0.5."""
    if not (1 <= len(models) <= 5):
        raise ConfigError(f"predict_ad expects 1..5 models, got {len(models)}")
    cfg = models[0].model_config
    for ck in models[1:]:
        if ck.model_config != cfg:
            raise ConfigError("ensemble members disagree on the model configuration")
    if cfg.output_dim != 2:
        raise ConfigError("predict_ad needs the two-logit detection variant")
    samples = list(dataset)
    per_model: list[np.ndarray] = []
    for ck in models:
        x = assemble_batch(samples)
        out, _ = model_forward(x, ck.params, cfg, mode=EVAL)
        per_model.append(out)
    preds = []
    for i, s in enumerate(samples):
        probs = [_softmax_positive(out[i]) for out in per_model]
        mean = _exact_mean(probs)
        preds.append(AdPrediction(id=s.id, probability=mean,
                                  label=1 if mean >= 0.5 else 0))
    return preds


def predict_mmse(model: Checkpoint, dataset: Dataset,
                 ad_probs: dict[str, float]) -> list[MmsePrediction]:
    """Cognitive-score predictions on the 0-30 scale.

    ``ad_probs`` maps sample id to the estimated AD probability used as
    the extra covariate.
    """
    if model.model_config.output_dim != 1:
        raise ConfigError("predict_mmse needs the single-output regression variant")
    samples = []
    for s in dataset:
        if s.id not in ad_probs:
            raise DataError(f"no AD probability for sample {s.id}")
        samples.append(s.with_ad_probability(ad_probs[s.id]))
    x = assemble_batch(samples, include_ad_prob=True)
    out, _ = model_forward(x, model.params, model.model_config, mode=EVAL)
    return [MmsePrediction(id=s.id, score=denormalize_mmse(out[i, 0]))
            for i, s in enumerate(samples)]


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def evaluate(ad_preds: list[AdPrediction], truth: Dataset,
             mmse_preds: list[MmsePrediction] | None = None) -> EvalReport:
    """Confusion counts and derived metrics, AD as the positive class.

    Ratios with zero denominators are reported as absent, never as zero.
    The RMSE is computed on the denormalized 0-30 scale.
    """
    if not ad_preds:
        raise DataError("no predictions to evaluate")
    tp = fp = tn = fn = 0
    for p in ad_preds:
        actual = truth.by_id(p.id).label()
        if p.label == 1 and actual == 1:
            tp += 1
        elif p.label == 1 and actual == 0:
            fp += 1
        elif p.label == 0 and actual == 0:
            tn += 1
        else:
            fn += 1
    precision = _ratio(tp, tp + fp)
    sensitivity = _ratio(tp, tp + fn)
    f1 = None
    if precision is not None and sensitivity is not None and precision + sensitivity > 0:
        f1 = 2.0 * precision * sensitivity / (precision + sensitivity)
    rmse = None
    if mmse_preds:
        total_sq = 0.0
        for p in mmse_preds:
            ref = truth.by_id(p.id)
            if ref.mmse_raw is None:
                raise DataError(f"sample {p.id} has no reference cognitive score")
            diff = p.score - float(ref.mmse_raw)
            total_sq += diff * diff
        rmse = math.sqrt(total_sq / len(mmse_preds))
    return EvalReport(
        tp=tp, fp=fp, tn=tn, fn=fn,
        accuracy=_ratio(tp + tn, tp + fp + tn + fn),
        sensitivity=sensitivity,
        specificity=_ratio(tn, tn + fp),
        precision=precision,
        f1=f1,
        rmse_mmse=rmse,
    )


# ---------------------------------------------------------------------------
# Full procedure
# ---------------------------------------------------------------------------

@dataclass
class StageResult:
    """Artifacts of one repeat of one task's pipeline stage."""

    pretrain: RunArtifacts
    swap_info: dict
    averaged: Checkpoint


@dataclass
class FullRunResult:
    task: str
    ad_stages: list[StageResult]
    ad_predictions: list[AdPrediction]
    mmse_stages: list[StageResult]
    mmse_predictions: list[MmsePrediction] | None
    report: EvalReport | None
    split_ids: dict


def probability_map(models: list[Checkpoint], dataset: Dataset) -> dict[str, float]:
    return {p.id: p.probability for p in predict_ad(models, dataset)}


def attach_probabilities(dataset: Dataset, probs: dict[str, float]) -> Dataset:
    samples = []
    for s in dataset:
        if s.id not in probs:
            raise DataError(f"no AD probability for sample {s.id}")
        samples.append(s.with_ad_probability(probs[s.id]))
    return Dataset(samples, provenance=dict(dataset.provenance))


def _repeat_seeds(seeds: list[int], repeat: int) -> list[int]:
    if repeat == 0:
        return list(seeds)
    return [derive_seed(s, "repeat", repeat) for s in seeds]


def _one_stage(en: Dataset, gr_pool: Dataset, config: TrainConfig,
               seeds: list[int], task: str, model_config: ModelConfig,
               repeat: int, parallel: bool) -> tuple[StageResult, dict]:
    split_seed = derive_seed(config.seed, "split", task, repeat)
    en_train, en_val = split_train_val(en, 0.8, split_seed)
    artifacts = pretrain(en_train, gr_pool, config, _repeat_seeds(seeds, repeat),
                         task=task, model_config=model_config, parallel=parallel)
    averaged, swap_info = swap_and_average(
        artifacts.selected.params, en_train, en_val, list(gr_pool), config,
        task=task, model_config=model_config)
    ck = Checkpoint(params=averaged, model_config=model_config,
                    seed=artifacts.selected.seed, epoch=artifacts.selected.epoch,
                    val_loss=artifacts.selected.val_loss)
    split_ids = {"train": en_train.ids(), "val": en_val.ids()}
    return StageResult(pretrain=artifacts, swap_info=swap_info, averaged=ck), split_ids


def run_all(en: Dataset, gr_pool: Dataset, gr_test: Dataset,
            config: TrainConfig, seeds: list[int], task: str = "ad",
            dropout_rate: float = 0.3, repeats: int = 1,
            parallel: bool = False) -> FullRunResult:
    """The whole procedure: pre-train, transfer, average, predict, evaluate.

    ``task='mmse'`` runs the detection stage first (its ensemble supplies
    the probability covariate), then the regression stage.  ``repeats``
    reruns everything with derived seed lists and ensembles the detection
    probabilities across repeats, mirroring how multiple submissions were
    combined.  The report is present when the test set carries labels.
    """
    if task not in ("ad", "mmse"):
        raise ConfigError(f"task must be 'ad' or 'mmse', got {task!r}")
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    ad_cfg = ad_config(dropout_rate)
    ad_stages = []
    split_ids: dict = {}
    for k in range(repeats):
        stage, ids = _one_stage(en, gr_pool, config, seeds, "ad", ad_cfg, k, parallel)
        ad_stages.append(stage)
        split_ids[f"ad_repeat_{k}"] = ids
    ad_models = [stage.averaged for stage in ad_stages]
    ad_predictions = predict_ad(ad_models, gr_test)

    mmse_stages: list[StageResult] = []
    mmse_predictions = None
    if task == "mmse":
        mm_cfg = mmse_config(dropout_rate)
        en_probs = probability_map(ad_models, en)
        pool_probs = probability_map(ad_models, gr_pool)
        test_probs = {p.id: p.probability for p in ad_predictions}
        en_m = attach_probabilities(en, en_probs)
        pool_m = attach_probabilities(gr_pool, pool_probs)
        score_lists: list[list[MmsePrediction]] = []
        for k in range(repeats):
            stage, ids = _one_stage(en_m, pool_m, config, seeds, "mmse",
                                    mm_cfg, k, parallel)
            mmse_stages.append(stage)
            split_ids[f"mmse_repeat_{k}"] = ids
            score_lists.append(predict_mmse(stage.averaged, gr_test, test_probs))
        mmse_predictions = [
            MmsePrediction(id=preds[0].id,
                           score=_exact_mean([p.score for p in preds]))
            for preds in zip(*score_lists)
        ] if len(score_lists) > 1 else score_lists[0]

    report = None
    if all(s.diagnosis is not None for s in gr_test):
        report = evaluate(ad_predictions, gr_test, mmse_predictions)
    return FullRunResult(
        task=task, ad_stages=ad_stages, ad_predictions=ad_predictions,
        mmse_stages=mmse_stages, mmse_predictions=mmse_predictions,
        report=report, split_ids=split_ids,
    )
