"""Participant data model, CSV ingestion, preparation, and synthesis.

Two file contracts (both UTF-8, header mandatory):

* metadata CSV: ``id,language,age,gender,education,diagnosis,mmse``.
  ``language`` accepts en/english and gr/el/greek; ``gender`` accepts
  0/1/m/f/male/female (0 = male, 1 = female); ``education`` and ``mmse``
  may be empty (missing); ``diagnosis`` is ``ad``, ``control``, or empty.
* per-recording feature CSV ``<id>.csv``: ``segment,f0,...,f24`` with
  exactly 10 data rows, segment index ascending 0-9.  The 25 functionals
  per segment come from an external acoustic extractor and are consumed
  as-is.

Preparation mirrors the training-split rules: drop samples lacking a
cognitive score, impute missing education to 12 years, then balance the
classes by dropping the lexicographically largest ids of the excess
class.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .rng import RandomStream, derive_seed

SEQ_LEN = 10
N_ACOUSTIC = 25
MMSE_MAX = 30
EDUCATION_IMPUTE = 12.0
AGE_RANGE = (30.0, 110.0)
EDUCATION_RANGE = (0.0, 30.0)

ENGLISH = "english"
GREEK = "greek"
CONTROL = "control"
AD = "ad"

METADATA_COLUMNS = ("id", "language", "age", "gender", "education", "diagnosis", "mmse")
FEATURE_COLUMNS = ("segment",) + tuple(f"f{i}" for i in range(N_ACOUSTIC))

_LANGUAGE_CODES = {"en": ENGLISH, "english": ENGLISH,
                   "gr": GREEK, "el": GREEK, "greek": GREEK}
_GENDER_CODES = {"0": 0, "m": 0, "male": 0, "1": 1, "f": 1, "female": 1}


@dataclass
class RawRecord:
    """One metadata row, unvalidated against features."""

    id: str
    language: str
    age: float
    gender: int
    education: float | None
    diagnosis: str | None
    mmse: int | None


@dataclass
class Covariates:
    age: float
    gender: int
    education: float | None
    ad_probability: float | None = None


@dataclass
class Sample:
    id: str
    language: str
    features: np.ndarray  # (SEQ_LEN, N_ACOUSTIC)
    covariates: Covariates
    diagnosis: str | None = None
    mmse_raw: int | None = None
    mmse_normalized: float | None = None

    def label(self) -> int:
        """0 = control, 1 = AD (the positive class)."""
        if self.diagnosis not in (CONTROL, AD):
            raise DataError(f"sample {self.id} has no diagnosis")
        return 1 if self.diagnosis == AD else 0

    def with_ad_probability(self, p: float) -> "Sample":
        cov = replace(self.covariates, ad_probability=float(p))
        return replace(self, covariates=cov)


@dataclass
class Dataset:
    samples: list[Sample]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for s in self.samples:
            if s.id in seen:
                raise DataError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def by_id(self, sample_id: str) -> Sample:
        for s in self.samples:
            if s.id == sample_id:
                return s
        raise DataError(f"unknown sample id {sample_id!r}")


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def _parse_float(value: str, column: str, row: int) -> float:
    try:
        return float(value)
    except ValueError:
        raise DataError(f"row {row}: non-numeric {column} {value!r}") from None


def load_metadata(path: str | Path) -> list[RawRecord]:
    """Parse the metadata CSV; empty education/mmse cells become missing."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"metadata file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty metadata file") from None
        if tuple(h.strip() for h in header) != METADATA_COLUMNS:
            raise DataError(
                f"{path}: header must be {','.join(METADATA_COLUMNS)!r}, "
                f"got {','.join(header)!r}")
        records: list[RawRecord] = []
        seen: set[str] = set()
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(METADATA_COLUMNS):
                raise DataError(
                    f"row {row_no}: expected {len(METADATA_COLUMNS)} fields, got {len(row)}")
            rid, language, age, gender, education, diagnosis, mmse = (
                c.strip() for c in row)
            if not rid:
                raise DataError(f"row {row_no}: empty id")
            if rid in seen:
                raise DataError(f"row {row_no}: duplicate id {rid!r}")
            seen.add(rid)
            lang = _LANGUAGE_CODES.get(language.lower())
            if lang is None:
                raise DataError(f"row {row_no}: unknown language {language!r}")
            age_v = _parse_float(age, "age", row_no)
            if not (AGE_RANGE[0] <= age_v <= AGE_RANGE[1]):
                raise DataError(f"row {row_no}: age {age_v} outside {AGE_RANGE}")
            gender_v = _GENDER_CODES.get(gender.lower())
            if gender_v is None:
                raise DataError(f"row {row_no}: unknown gender {gender!r}")
            if education:
                edu_v = _parse_float(education, "education", row_no)
                if not (EDUCATION_RANGE[0] <= edu_v <= EDUCATION_RANGE[1]):
                    raise DataError(
                        f"row {row_no}: education {edu_v} outside {EDUCATION_RANGE}")
            else:
                edu_v = None
            if diagnosis:
                if diagnosis.lower() not in (CONTROL, AD):
                    raise DataError(f"row {row_no}: unknown diagnosis {diagnosis!r}")
                diag_v = diagnosis.lower()
            else:
                diag_v = None
            if mmse:
                try:
                    mmse_v = int(mmse)
                except ValueError:
                    raise DataError(f"row {row_no}: non-numeric mmse {mmse!r}") from None
                if not (0 <= mmse_v <= MMSE_MAX):
                    raise DataError(f"row {row_no}: mmse {mmse_v} outside [0, {MMSE_MAX}]")
            else:
                mmse_v = None
            records.append(RawRecord(rid, lang, age_v, gender_v, edu_v, diag_v, mmse_v))
    return records


def load_features(directory: str | Path) -> dict[str, np.ndarray]:
    """Load every ``<id>.csv`` in a directory into a 10 x 25 matrix."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"feature directory not found: {directory}")
    out: dict[str, np.ndarray] = {}
    for path in sorted(directory.glob("*.csv")):
        out[path.stem] = _load_feature_file(path)
    if not out:
        raise DataError(f"no feature CSVs found in {directory}")
    return out


def _load_feature_file(path: Path) -> np.ndarray:
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path.name}: empty feature file") from None
        if tuple(h.strip() for h in header) != FEATURE_COLUMNS:
            raise DataError(
                f"{path.name}: header must be 'segment,f0,...,f{N_ACOUSTIC - 1}'")
        rows = [row for row in reader if row and any(c.strip() for c in row)]
    if len(rows) != SEQ_LEN:
        raise DataError(f"{path.name}: expected {SEQ_LEN} segments, got {len(rows)}")
    values = np.empty((SEQ_LEN, N_ACOUSTIC), dtype=np.float64)
    for i, row in enumerate(rows):
        if len(row) != len(FEATURE_COLUMNS):
            raise DataError(
                f"{path.name}: row {i + 2} has {len(row)} fields, "
                f"expected {len(FEATURE_COLUMNS)}")
        try:
            seg = int(row[0])
        except ValueError:
            raise DataError(f"{path.name}: row {i + 2}: bad segment index {row[0]!r}") from None
        if seg != i:
            raise DataError(
                f"{path.name}: segment indices must ascend 0-{SEQ_LEN - 1}, "
                f"row {i + 2} has {seg}")
        for j in range(N_ACOUSTIC):
            try:
                v = float(row[j + 1])
            except ValueError:
                raise DataError(
                    f"{path.name}: row {i + 2}, column f{j}: "
                    f"non-numeric {row[j + 1]!r}") from None
            if not math.isfinite(v):
                raise DataError(
                    f"{path.name}: row {i + 2}, column f{j}: non-finite value")
            values[i, j] = v
    return values


# ---------------------------------------------------------------------------
# Preparation
# ---------------------------------------------------------------------------

def _record_to_sample(record: RawRecord, features: np.ndarray) -> Sample:
    return Sample(
        id=record.id,
        language=record.language,
        features=features,
        covariates=Covariates(record.age, record.gender, record.education),
        diagnosis=record.diagnosis,
        mmse_raw=record.mmse,
        mmse_normalized=None if record.mmse is None else normalize_mmse(record.mmse),
    )


def prepare_dataset(records: list[RawRecord],
                    features: dict[str, np.ndarray]) -> Dataset:
    """Apply the training-split preparation rules.

    1. drop samples without a cognitive score;
    2. impute missing education to 12 years;
    3. balance classes by dropping the lexicographically largest ids of
       the excess class.

    Every step is logged in the dataset provenance.
    """
    log: list[str] = []
    for record in records:
        if record.id not in features:
            raise DataError(f"no feature sequence for sample {record.id!r}")
        if record.diagnosis is None:
            raise DataError(f"preparation requires a diagnosis for {record.id!r}")

    kept = [r for r in records if r.mmse is not None]
    dropped = [r.id for r in records if r.mmse is None]
    if dropped:
        log.append(f"dropped {len(dropped)} sample(s) lacking a cognitive score: "
                   + ",".join(sorted(dropped)))

    imputed = [r.id for r in kept if r.education is None]
    prepared_records = [
        replace(r, education=EDUCATION_IMPUTE) if r.education is None else r
        for r in kept
    ]
    if imputed:
        log.append(f"imputed education={EDUCATION_IMPUTE:g} for {len(imputed)} "
                   "sample(s): " + ",".join(sorted(imputed)))

    by_class = {CONTROL: [r for r in prepared_records if r.diagnosis == CONTROL],
                AD: [r for r in prepared_records if r.diagnosis == AD]}
    n_control, n_ad = len(by_class[CONTROL]), len(by_class[AD])
    if n_control != n_ad:
        excess_class = AD if n_ad > n_control else CONTROL
        n_drop = abs(n_ad - n_control)
        drop_ids = set(sorted((r.id for r in by_class[excess_class]))[-n_drop:])
        prepared_records = [r for r in prepared_records if r.id not in drop_ids]
        log.append(f"dropped {n_drop} {excess_class} sample(s) for balance: "
                   + ",".join(sorted(drop_ids)))

    if not prepared_records:
        raise DataError("preparation produced an empty dataset")
    samples = [_record_to_sample(r, features[r.id]) for r in prepared_records]
    return Dataset(samples, provenance={"prep_log": log})


def normalize_mmse(raw) -> float:
    """Map a 0-30 cognitive score to [0, 1]."""
    if isinstance(raw, float) and not raw.is_integer():
        raise DataError(f"mmse must be an integer, got {raw}")
    raw = int(raw)
    if not (0 <= raw <= MMSE_MAX):
        raise DataError(f"mmse {raw} outside [0, {MMSE_MAX}]")
    return raw / MMSE_MAX


def denormalize_mmse(x: float) -> float:
    """Inverse of normalize_mmse (times 30); no clamping."""
    return float(x) * MMSE_MAX


def split_train_val(dataset: Dataset, fraction: float, seed: int):
    """Seeded split stratified by diagnosis; ``fraction`` goes to train.

    Per stratum the train share is round(fraction * n), clamped so both
    sides keep at least one sample.  Output order follows the input.
    """
    if not (0.0 < fraction < 1.0):
        raise ConfigError(f"split fraction must lie in (0, 1), got {fraction}")
    strata: dict[str, list[Sample]] = {}
    for s in dataset:
        strata.setdefault(AD if s.label() else CONTROL, []).append(s)
    train_ids: set[str] = set()
    for name in sorted(strata):
        members = strata[name]
        if len(members) < 2:
            raise DataError(f"stratum {name!r} has fewer than 2 samples")
        ids = [s.id for s in members]
        RandomStream(derive_seed(seed, "split", name)).shuffle(ids)
        n_train = int(math.floor(fraction * len(ids) + 0.5))
        n_train = min(max(n_train, 1), len(ids) - 1)
        train_ids.update(ids[:n_train])
    train = [s for s in dataset if s.id in train_ids]
    val = [s for s in dataset if s.id not in train_ids]
    note = {"split": {"fraction": fraction, "seed": seed}}
    return (Dataset(train, provenance={**dataset.provenance, **note, "part": "train"}),
            Dataset(val, provenance={**dataset.provenance, **note, "part": "val"}))


def assemble_input(sample: Sample, include_ad_prob: bool = False) -> np.ndarray:
    """Stack the 10 x 25 features with a constant covariate tail per row.

    Columns 25-27 are [age, gender, education]; with ``include_ad_prob``
    a 29th column carries the estimated AD probability.
    """
    feats = np.asarray(sample.features, dtype=np.float64)
    if feats.shape != (SEQ_LEN, N_ACOUSTIC):
        raise DataError(
            f"sample {sample.id}: features must be {SEQ_LEN}x{N_ACOUSTIC}, "
            f"got {feats.shape}")
    if not np.all(np.isfinite(feats)):
        raise DataError(f"sample {sample.id}: non-finite feature values")
    cov = sample.covariates
    if cov.education is None:
        raise DataError(f"sample {sample.id}: education missing (prepare first)")
    tail = [cov.age, float(cov.gender), cov.education]
    if include_ad_prob:
        if cov.ad_probability is None:
            raise DataError(f"sample {sample.id}: ad_probability missing")
        tail.append(cov.ad_probability)
    out = np.empty((SEQ_LEN, N_ACOUSTIC + len(tail)), dtype=np.float64)
    out[:, :N_ACOUSTIC] = feats
    out[:, N_ACOUSTIC:] = np.asarray(tail, dtype=np.float64)
    return out


def assemble_batch(samples: list[Sample], include_ad_prob: bool = False) -> np.ndarray:
    return np.stack([assemble_input(s, include_ad_prob) for s in samples])


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

# Channels whose mean shifts with the positive class in synthetic data.
SHIFT_CHANNELS = (0, 1, 2, 3, 4)


@dataclass(frozen=True)
class SynthConfig:
    """Generator knobs for the synthetic corpus.

    ``language_shift`` is added to every channel of Greek samples (one
    constant, mimicking a recording-condition offset); ``class_shift``
    moves the positive-class mean on ``SHIFT_CHANNELS``.  ``n_ad`` /
    ``n_control`` override ``n_per_class`` for unbalanced sets.
    """

    n_per_class: int
    seed: int
    language: str = ENGLISH
    language_shift: float = 0.0
    class_shift: float = 2.0
    noise: float = 1.0
    id_prefix: str | None = None
    n_ad: int | None = None
    n_control: int | None = None

    def __post_init__(self):
        if self.n_per_class < 2 and (self.n_ad is None or self.n_control is None):
            raise ConfigError("n_per_class must be >= 2")
        if self.language not in (ENGLISH, GREEK):
            raise ConfigError(f"language must be {ENGLISH!r} or {GREEK!r}")
        if self.noise < 0.0:
            raise ConfigError("noise must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "n_per_class": self.n_per_class, "seed": self.seed,
            "language": self.language, "language_shift": self.language_shift,
            "class_shift": self.class_shift, "noise": self.noise,
            "id_prefix": self.id_prefix, "n_ad": self.n_ad,
            "n_control": self.n_control,
        }


def _gauss(u1: float, u2: float) -> float:
    """Box-Muller; 1 - u1 keeps the log argument in (0, 1]."""
    return math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(2.0 * math.pi * u2)


def make_synthetic(config: SynthConfig) -> Dataset:
    """Class-conditional Gaussian corpus with a deterministic draw layout.

    Per sample, in order: age, gender, education uniforms; 250 feature
    Gaussians (two uniforms each); one score-noise Gaussian.  The score is
    29 - 9*class + noise, rounded half-up and clamped to [0, 30].
    """
    n_ad = config.n_ad if config.n_ad is not None else config.n_per_class
    n_control = config.n_control if config.n_control is not None else config.n_per_class
    prefix = config.id_prefix or ("gr" if config.language == GREEK else "en")
    stream = RandomStream(derive_seed(config.seed, "synth", config.language, prefix))
    classes: list[int] = []
    remaining = {0: n_control, 1: n_ad}
    turn = 0
    while remaining[0] or remaining[1]:
        if remaining[turn]:
            classes.append(turn)
            remaining[turn] -= 1
        turn = 1 - turn
    lang_shift = config.language_shift if config.language == GREEK else 0.0

    samples: list[Sample] = []
    for idx, cls in enumerate(classes):
        age = 55.0 + 30.0 * stream.uniform()
        gender = 1 if stream.uniform() >= 0.5 else 0
        education = 6.0 + 14.0 * stream.uniform()
        u1 = stream.uniform((SEQ_LEN, N_ACOUSTIC))
        u2 = stream.uniform((SEQ_LEN, N_ACOUSTIC))
        feats = np.empty((SEQ_LEN, N_ACOUSTIC), dtype=np.float64)
        for t in range(SEQ_LEN):
            for c in range(N_ACOUSTIC):
                base = config.class_shift * cls if c in SHIFT_CHANNELS else 0.0
                feats[t, c] = base + lang_shift + config.noise * _gauss(u1[t, c], u2[t, c])
        score_noise = config.noise * _gauss(stream.uniform(), stream.uniform())
        mmse = int(math.floor(29.0 - 9.0 * cls + score_noise + 0.5))
        mmse = min(max(mmse, 0), MMSE_MAX)
        samples.append(Sample(
            id=f"{prefix}{idx:04d}",
            language=config.language,
            features=feats,
            covariates=Covariates(age=age, gender=gender, education=education),
            diagnosis=AD if cls else CONTROL,
            mmse_raw=mmse,
            mmse_normalized=normalize_mmse(mmse),
        ))
    digest = hashlib.sha256(
        json.dumps(config.to_dict(), sort_keys=True).encode()).hexdigest()
    return Dataset(samples, provenance={
        "generator": "synthetic", "config": config.to_dict(), "digest": digest,
        "prep_log": [],
    })


# ---------------------------------------------------------------------------
# On-disk artifacts
# ---------------------------------------------------------------------------

def write_metadata_csv(path: str | Path, dataset: Dataset) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(METADATA_COLUMNS)]
    for s in dataset:
        lang = "en" if s.language == ENGLISH else "gr"
        edu = "" if s.covariates.education is None else repr(float(s.covariates.education))
        mmse = "" if s.mmse_raw is None else str(s.mmse_raw)
        diag = s.diagnosis or ""
        lines.append(",".join([
            s.id, lang, repr(float(s.covariates.age)), str(s.covariates.gender),
            edu, diag, mmse,
        ]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_feature_csvs(directory: str | Path, dataset: Dataset) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for s in dataset:
        lines = [",".join(FEATURE_COLUMNS)]
        for t in range(SEQ_LEN):
            lines.append(",".join([str(t)] + [repr(float(v)) for v in s.features[t]]))
        (directory / f"{s.id}.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def source_digest(metadata_path: str | Path, features_dir: str | Path) -> str:
    """SHA-256 over the metadata bytes and every feature file, sorted by name."""
    h = hashlib.sha256()
    h.update(Path(metadata_path).read_bytes())
    for path in sorted(Path(features_dir).glob("*.csv")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def ingest_dataset(metadata_path: str | Path, features_dir: str | Path,
                   prepare: bool = False) -> Dataset:
    """Load metadata + features into a Dataset, with provenance digest."""
    records = load_metadata(metadata_path)
    features = load_features(features_dir)
    if prepare:
        dataset = prepare_dataset(records, features)
    else:
        missing = [r.id for r in records if r.id not in features]
        if missing:
            raise DataError("no feature sequence for sample(s): "
                            + ",".join(sorted(missing)))
        dataset = Dataset([_record_to_sample(r, features[r.id]) for r in records],
                          provenance={"prep_log": []})
    dataset.provenance["digest"] = source_digest(metadata_path, features_dir)
    dataset.provenance["metadata"] = str(metadata_path)
    dataset.provenance["features"] = str(features_dir)
    return dataset


def dataset_to_json_dict(dataset: Dataset) -> dict:
    return {
        "provenance": dataset.provenance,
        "samples": [
            {
                "id": s.id, "language": s.language,
                "age": s.covariates.age, "gender": s.covariates.gender,
                "education": s.covariates.education,
                "ad_probability": s.covariates.ad_probability,
                "diagnosis": s.diagnosis, "mmse_raw": s.mmse_raw,
                "mmse_normalized": s.mmse_normalized,
                "features": [[float(v) for v in row] for row in s.features],
            }
            for s in dataset
        ],
    }


def save_dataset_json(path: str | Path, dataset: Dataset) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(dataset_to_json_dict(dataset), indent=2,
                               sort_keys=True) + "\n", encoding="utf-8")


def load_dataset_json(path: str | Path) -> Dataset:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    samples = []
    for e in doc["samples"]:
        samples.append(Sample(
            id=e["id"], language=e["language"],
            features=np.asarray(e["features"], dtype=np.float64),
            covariates=Covariates(e["age"], e["gender"], e["education"],
                                  e.get("ad_probability")),
            diagnosis=e["diagnosis"], mmse_raw=e["mmse_raw"],
            mmse_normalized=e["mmse_normalized"],
        ))
    return Dataset(samples, provenance=doc.get("provenance", {}))
