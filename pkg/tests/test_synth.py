import dataclasses

import numpy as np
import pytest

from gaitssl.data import load_split, load_trials
from gaitssl.errors import ConfigError
from gaitssl.synth import (
    CohortSpec,
    GenerationRegressionError,
    cohort_sanity,
    dominant_period,
    generate_cohort,
    read_metadata,
    render_trial,
    sample_latent,
    write_cohort,
)
from conftest import SMALL_SPEC


def test_deterministic(small_cohort):
    again = generate_cohort(SMALL_SPEC)
    assert [t.key for t in again.trials] == [t.key for t in small_cohort.trials]
    for a, b in zip(again.trials, small_cohort.trials):
        assert np.array_equal(a.values, b.values, equal_nan=True)
        assert np.array_equal(a.missing, b.missing)
    assert again.metadata == small_cohort.metadata


def test_written_cohort_is_byte_identical(tmp_path):
    write_cohort(generate_cohort(SMALL_SPEC), tmp_path / "a")
    write_cohort(generate_cohort(SMALL_SPEC), tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_written_cohort_loads(tmp_path):
    cohort = generate_cohort(SMALL_SPEC)
    out = write_cohort(cohort, tmp_path)
    assert len(load_trials(out / "trials")) == len(cohort.trials)
    assert load_split(out / "split.json") == cohort.default_split()
    meta = read_metadata(out / "metadata.csv")
    assert {int(m["label"]) for m in meta.values()} <= {0, 1}


def test_zero_missing_rate():
    cohort = generate_cohort(dataclasses.replace(SMALL_SPEC, missing_rate=0.0))
    assert not any(t.missing.any() for t in cohort.trials)


def test_missing_rate_roughly_matches(small_cohort):
    rate = np.mean(np.concatenate([t.missing.ravel() for t in small_cohort.trials]))
    assert rate == pytest.approx(0.02, abs=0.005)


def test_label_follows_threshold_rule():
    for param in ("amplitude", "period"):
        threshold = 1.0 if param == "amplitude" else 90.0
        spec = dataclasses.replace(SMALL_SPEC, label_parameter=param, label_threshold=threshold)
        cohort = generate_cohort(spec)
        for m in cohort.metadata:
            assert m["label"] == int(m[param] > spec.label_threshold)


def test_labels_are_balanced_and_clear_of_the_band():
    cohort = generate_cohort()
    labels = list(cohort.labels().values())
    assert sum(labels) == len(labels) // 2
    spec = cohort.spec
    for m in cohort.metadata:
        assert abs(m["amplitude"] - spec.label_threshold) >= spec.label_margin


def test_spec_validation():
    with pytest.raises(ConfigError):
        CohortSpec(label_parameter="period")  # threshold 1.0 lies outside the period prior
    with pytest.raises(ConfigError):
        CohortSpec(period=(10.0, 5.0))
    with pytest.raises(ConfigError):
        CohortSpec(missing_rate=0.5)
    with pytest.raises(ConfigError):
        CohortSpec.from_dict({"subjects": 3})


def test_noiseless_peak_is_fundamental():
    spec = dataclasses.replace(SMALL_SPEC, noise_std=0.0, regression_noise=0.0)
    latent = sample_latent(spec, np.random.default_rng(0))
    clean, _ = render_trial(latent, spec, 960, latent.period, 0.3, np.random.default_rng(1))
    for c in range(spec.input_channels + 1):
        assert dominant_period(clean[:, c]) == pytest.approx(latent.period, rel=0.01)


def test_same_latent_differs_only_in_noise():
    latent = sample_latent(SMALL_SPEC, np.random.default_rng(0))
    a_clean, a = render_trial(latent, SMALL_SPEC, 300, 80.0, 0.5, np.random.default_rng(1))
    b_clean, b = render_trial(latent, SMALL_SPEC, 300, 80.0, 0.5, np.random.default_rng(2))
    for c in range(a.shape[1]):
        assert np.corrcoef(a_clean[:, c], b_clean[:, c])[0, 1] == pytest.approx(1.0)
    assert not np.array_equal(a, b)


def test_regression_target_recoverable_by_oracle():
    spec = dataclasses.replace(SMALL_SPEC, noise_std=0.0, regression_noise=0.0, missing_rate=0.0)
    cohort = generate_cohort(spec)
    v = np.concatenate([t.values for t in cohort.trials])
    c0, c1, grf = v[:, 0], v[:, 1], v[:, -1]
    design = np.column_stack([np.ones_like(c0), c0, c1, c0 * c1])
    coef, *_ = np.linalg.lstsq(design, grf, rcond=None)
    resid = grf - design @ coef
    r2 = 1 - resid.var() / grf.var()
    assert r2 >= 0.95


def test_default_cohort_passes_sanity():
    report = cohort_sanity(generate_cohort(CohortSpec()))
    assert report.passed
    assert report.peak_fraction >= 0.9 and report.separability_auc >= 0.9


def test_shuffled_labels_are_not_separable():
    cohort = generate_cohort(CohortSpec())
    labels = cohort.labels()
    subjects = sorted(labels)
    aucs = []
    for seed in range(20):
        perm = np.random.default_rng(seed).permutation([labels[s] for s in subjects])
        rep = cohort_sanity(cohort, dict(zip(subjects, perm)), raise_on_fail=False)
        aucs.append(rep.separability_auc)
    assert abs(np.mean(aucs) - 0.5) <= 0.1


def test_sanity_failure_raises():
    cohort = generate_cohort(SMALL_SPEC)
    with pytest.raises(GenerationRegressionError):
        cohort_sanity(cohort, tolerance=0.0)
