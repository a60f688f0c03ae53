"""Data model, ingestion, preparation, and synthetic-corpus tests."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossad.data import (
    AD,
    EDUCATION_IMPUTE,
    ENGLISH,
    GREEK,
    METADATA_COLUMNS,
    SHIFT_CHANNELS,
    Dataset,
    Sample,
    SynthConfig,
    assemble_input,
    denormalize_mmse,
    ingest_dataset,
    load_features,
    load_metadata,
    make_synthetic,
    normalize_mmse,
    prepare_dataset,
    split_train_val,
    write_feature_csvs,
    write_metadata_csv,
)
from crossad.errors import ConfigError, DataError


def metadata_file(tmp_path, rows, name="metadata.csv"):
    path = tmp_path / name
    path.write_text("\n".join([",".join(METADATA_COLUMNS)] + rows) + "\n")
    return path


def feature_file(tmp_path, sample_id, n_rows=10, n_cols=25, value=0.5, bad_cell=None):
    d = tmp_path / "features"
    d.mkdir(exist_ok=True)
    header = "segment," + ",".join(f"f{i}" for i in range(n_cols))
    lines = [header]
    for t in range(n_rows):
        cells = [str(t)] + [str(value)] * n_cols
        if bad_cell and bad_cell[0] == t:
            cells[bad_cell[1] + 1] = bad_cell[2]
        lines.append(",".join(cells))
    (d / f"{sample_id}.csv").write_text("\n".join(lines) + "\n")
    return d


class TestLoadMetadata:
    def test_direct_field_mapping(self, tmp_path):
        path = metadata_file(tmp_path, ["P001,en,72,female,16,ad,20"])
        (rec,) = load_metadata(path)
        assert rec.id == "P001"
        assert rec.language == ENGLISH
        assert rec.age == 72.0
        assert rec.gender == 1
        assert rec.education == 16.0
        assert rec.diagnosis == AD
        assert rec.mmse == 20

    def test_missing_education_preserved(self, tmp_path):
        path = metadata_file(tmp_path, ["P001,en,70,male,,control,29"])
        (rec,) = load_metadata(path)
        assert rec.education is None

    def test_missing_mmse_flagged(self, tmp_path):
        path = metadata_file(tmp_path, ["P001,en,70,male,12,control,"])
        (rec,) = load_metadata(path)
        assert rec.mmse is None

    def test_duplicate_id_names_row(self, tmp_path):
        path = metadata_file(tmp_path, [
            "P001,en,70,male,12,control,29",
            "P001,en,71,male,12,control,28",
        ])
        with pytest.raises(DataError, match="row 3.*duplicate"):
            load_metadata(path)

    def test_non_numeric_age_names_row(self, tmp_path):
        path = metadata_file(tmp_path, ["P001,en,old,male,12,control,29"])
        with pytest.raises(DataError, match="row 2.*age"):
            load_metadata(path)

    def test_missing_column_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("id,language,age\nP001,en,70\n")
        with pytest.raises(DataError, match="header"):
            load_metadata(path)

    def test_greek_codes(self, tmp_path):
        path = metadata_file(tmp_path, ["G1,gr,70,male,12,ad,20",
                                        "G2,el,70,female,12,control,30"])
        recs = load_metadata(path)
        assert all(r.language == GREEK for r in recs)


class TestLoadFeatures:
    def test_well_formed(self, tmp_path):
        d = feature_file(tmp_path, "P001", value=1.25)
        feats = load_features(d)
        assert set(feats) == {"P001"}
        assert feats["P001"].shape == (10, 25)
        assert np.all(feats["P001"] == 1.25)

    def test_wrong_row_count(self, tmp_path):
        d = feature_file(tmp_path, "P001", n_rows=9)
        with pytest.raises(DataError, match="expected 10 segments"):
            load_features(d)

    def test_nan_cell_names_location(self, tmp_path):
        d = feature_file(tmp_path, "P001", bad_cell=(3, 7, "nan"))
        with pytest.raises(DataError, match="row 5.*f7"):
            load_features(d)

    def test_wrong_column_count(self, tmp_path):
        d = feature_file(tmp_path, "P001", n_cols=24)
        with pytest.raises(DataError, match="header"):
            load_features(d)


def unbalanced_training_rows():
    """237 records: 122 AD, 115 control; one control lacks a score;
    12 controls lack education (mirrors the real training split's shape)."""
    rows = []
    for i in range(122):
        rows.append(f"A{i:03d},en,70,male,14,ad,{18 + i % 10}")
    for i in range(115):
        edu = "" if i < 12 else "12"
        mmse = "" if i == 114 else str(26 + i % 5)
        rows.append(f"C{i:03d},en,70,female,{edu},control,{mmse}")
    return rows


class TestPrepareDataset:
    def test_unbalanced_split_reduction(self, tmp_path):
        rows = unbalanced_training_rows()
        records = load_metadata(metadata_file(tmp_path, rows))
        features = {}
        for r in records:
            feature_file(tmp_path, r.id)
        features = load_features(tmp_path / "features")
        ds = prepare_dataset(records, features)
        assert len(ds) == 228
        labels = [s.label() for s in ds]
        assert sum(labels) == 114
        assert len(labels) - sum(labels) == 114
        # the excess AD samples dropped are the largest ids
        kept_ad = {s.id for s in ds if s.diagnosis == AD}
        assert kept_ad == {f"A{i:03d}" for i in range(114)}

    def test_education_imputation(self, tmp_path):
        rows = ["K1,en,70,male,,control,29", "K2,en,71,male,,control,28",
                "K3,en,72,female,10,ad,20", "K4,en,73,female,11,ad,21"]
        records = load_metadata(metadata_file(tmp_path, rows))
        for r in records:
            feature_file(tmp_path, r.id)
        ds = prepare_dataset(records, load_features(tmp_path / "features"))
        for sid in ("K1", "K2"):
            assert ds.by_id(sid).covariates.education == EDUCATION_IMPUTE

    def test_balanced_input_unchanged(self, tmp_path):
        rows = ["B1,en,70,male,12,control,29", "B2,en,71,male,12,ad,20",
                "B3,en,72,female,12,control,28", "B4,en,73,female,12,ad,21"]
        records = load_metadata(metadata_file(tmp_path, rows))
        for r in records:
            feature_file(tmp_path, r.id)
        ds = prepare_dataset(records, load_features(tmp_path / "features"))
        assert ds.ids() == ["B1", "B2", "B3", "B4"]

    def test_missing_features_rejected(self, tmp_path):
        rows = ["M1,en,70,male,12,control,29"]
        records = load_metadata(metadata_file(tmp_path, rows))
        with pytest.raises(DataError, match="feature"):
            prepare_dataset(records, {})

    def test_properties_balanced_no_missing(self, tmp_path):
        rows = unbalanced_training_rows()
        records = load_metadata(metadata_file(tmp_path, rows))
        for r in records:
            feature_file(tmp_path, r.id)
        ds = prepare_dataset(records, load_features(tmp_path / "features"))
        n_ad = sum(s.label() for s in ds)
        assert n_ad * 2 == len(ds)
        for s in ds:
            assert s.mmse_raw is not None
            assert s.covariates.education is not None
            assert assemble_input(s).shape == (10, 28)


class TestMmseScaling:
    def test_endpoints(self):
        assert normalize_mmse(30) == 1.0
        assert normalize_mmse(0) == 0.0

    def test_round_trip_value(self):
        x = normalize_mmse(20)
        assert abs(x - 0.6667) < 1e-3
        assert abs(denormalize_mmse(x) - 20.0) < 1e-2

    def test_exact_round_trip_exhaustive(self):
        for k in range(31):
            assert denormalize_mmse(normalize_mmse(k)) == float(k)

    def test_out_of_range(self):
        with pytest.raises(DataError):
            normalize_mmse(31)
        with pytest.raises(DataError):
            normalize_mmse(-1)


def balanced_dataset(n_per_class, seed=0):
    return make_synthetic(SynthConfig(n_per_class=n_per_class, seed=seed))


class TestSplit:
    def test_stratum_rounding_oracle(self):
        # Oracle: enumerate the per-stratum rule round(0.8 * 114) = 91,
        # so 228 balanced samples give 182 train / 46 val.
        ds = balanced_dataset(114)
        train, val = split_train_val(ds, 0.8, seed=5)
        per_stratum = int(math.floor(0.8 * 114 + 0.5))
        assert per_stratum == 91
        assert len(train) == 2 * per_stratum == 182
        assert len(val) == 228 - 182 == 46

    def test_half_split_stratified(self):
        ds = balanced_dataset(2)
        train, val = split_train_val(ds, 0.5, seed=1)
        assert len(train) == len(val) == 2
        assert sum(s.label() for s in train) == 1
        assert sum(s.label() for s in val) == 1

    def test_same_seed_same_split(self):
        ds = balanced_dataset(20)
        t1, v1 = split_train_val(ds, 0.8, seed=9)
        t2, v2 = split_train_val(ds, 0.8, seed=9)
        assert t1.ids() == t2.ids() and v1.ids() == v2.ids()

    def test_bad_fraction(self):
        with pytest.raises(ConfigError):
            split_train_val(balanced_dataset(4), 1.0, seed=0)

    def test_tiny_stratum_rejected(self):
        ds = balanced_dataset(2)
        lone = Dataset([s for s in ds if s.label() == 1][:1]
                       + [s for s in ds if s.label() == 0])
        with pytest.raises(DataError, match="stratum"):
            split_train_val(lone, 0.5, seed=0)


class TestAssembleInput:
    def test_detection_shape_and_constant_tail(self):
        ds = balanced_dataset(3)
        m = assemble_input(ds.samples[0])
        assert m.shape == (10, 28)
        for col in range(25, 28):
            assert np.all(m[:, col] == m[0, col])

    def test_regression_tail_carries_probability(self):
        ds = balanced_dataset(3)
        s = ds.samples[0].with_ad_probability(0.7)
        m = assemble_input(s, include_ad_prob=True)
        assert m.shape == (10, 29)
        assert np.all(m[:, 28] == 0.7)

    def test_missing_probability_rejected(self):
        ds = balanced_dataset(3)
        with pytest.raises(DataError, match="ad_probability"):
            assemble_input(ds.samples[0], include_ad_prob=True)

    def test_covariates_independent_of_features(self):
        # two samples differing only in features share covariate columns
        ds = balanced_dataset(3)
        a = ds.samples[0]
        b = Sample(id="twin", language=a.language,
                   features=ds.samples[2].features,
                   covariates=a.covariates, diagnosis=a.diagnosis,
                   mmse_raw=a.mmse_raw, mmse_normalized=a.mmse_normalized)
        ma, mb = assemble_input(a), assemble_input(b)
        assert not np.array_equal(ma[:, :25], mb[:, :25])
        assert np.array_equal(ma[:, 25:], mb[:, 25:])


class TestSynthetic:
    def test_separable_when_noiseless(self):
        ds = make_synthetic(SynthConfig(n_per_class=5, seed=3, noise=0.0,
                                        class_shift=4.0))
        for s in ds:
            mean_shifted = float(np.mean(s.features[:, list(SHIFT_CHANNELS)]))
            assert (mean_shifted > 2.0) == (s.label() == 1)

    def test_same_seed_identical(self):
        a = make_synthetic(SynthConfig(n_per_class=4, seed=8))
        b = make_synthetic(SynthConfig(n_per_class=4, seed=8))
        assert a.ids() == b.ids()
        for sa, sb in zip(a, b):
            assert np.array_equal(sa.features, sb.features)
            assert sa.mmse_raw == sb.mmse_raw

    def test_score_means_law_of_large_numbers(self):
        # Generator law: control scores center on 29, positive class on 20.
        ds = make_synthetic(SynthConfig(n_per_class=1000, seed=13))
        control = [s.mmse_raw for s in ds if s.label() == 0]
        ad = [s.mmse_raw for s in ds if s.label() == 1]
        assert abs(float(np.mean(control)) - 29.0) < 0.5
        assert abs(float(np.mean(ad)) - 20.0) < 0.5

    def test_greek_language_shift(self):
        en = make_synthetic(SynthConfig(n_per_class=3, seed=4, noise=0.0))
        gr = make_synthetic(SynthConfig(n_per_class=3, seed=4, noise=0.0,
                                        language=GREEK, language_shift=2.5,
                                        id_prefix="grp"))
        assert np.allclose(gr.samples[0].features[:, 5:],
                           en.samples[0].features[:, 5:] + 2.5)


class TestRoundTripArtifacts:
    def test_csv_round_trip_and_digest_purity(self, tmp_path):
        ds = make_synthetic(SynthConfig(n_per_class=4, seed=21))
        meta = tmp_path / "metadata.csv"
        feats = tmp_path / "features"
        write_metadata_csv(meta, ds)
        write_feature_csvs(feats, ds)
        loaded1 = ingest_dataset(meta, feats)
        loaded2 = ingest_dataset(meta, feats)
        assert loaded1.provenance["digest"] == loaded2.provenance["digest"]
        assert loaded1.ids() == ds.ids()
        for orig, back in zip(ds, loaded1):
            assert np.array_equal(orig.features, back.features)
            assert back.covariates.age == orig.covariates.age
            assert back.mmse_raw == orig.mmse_raw

    @settings(max_examples=10, deadline=None, derandomize=True)
    @given(st.integers(2, 9), st.integers(0, 1000))
    def test_assembly_total_on_synthetic(self, n, seed):
        ds = make_synthetic(SynthConfig(n_per_class=n, seed=seed))
        for s in ds:
            m = assemble_input(s)
            assert np.all(np.isfinite(m))
