import numpy as np
import pytest
import torch

from gaitssl.data import Trial
from gaitssl.pipeline import prepare_trials
from gaitssl.synth import CohortSpec, generate_cohort

ACCEPTANCE_LINES: list[str] = []

SMALL_SPEC = CohortSpec(num_subjects=8, trials_per_subject=(2, 3), trial_length=(140, 180),
                        validation_subjects=2, test_subjects=2, seed=3)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_cohort():
    return generate_cohort(SMALL_SPEC)


@pytest.fixture(scope="session")
def small_prepared(small_cohort):
    split = small_cohort.default_split()
    meta = {m["subject_id"]: m for m in small_cohort.metadata}
    return prepare_trials(small_cohort.trials, split, 20, 20, 10, ["grf"], meta)


def make_trial(values, subject="S0", trial="T0", missing=None, features=None):
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if missing is None:
        missing = np.isnan(values)
    features = features or tuple(f"f{i}" for i in range(values.shape[1]))
    return Trial(subject, trial, values, np.asarray(missing, dtype=bool), tuple(features))


@pytest.fixture
def criterion():
    """``check(name, ok, detail)`` records one PASS/FAIL line, then asserts ``ok``."""

    def check(name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
