"""Synthetic multi-subject gait-like cohort with planted targets.

Every channel of a subject is a sum of harmonics of one subject-specific
fundamental period, scaled by a subject-level amplitude. The binary label
thresholds one latent parameter (amplitude by default), so it shows up in how
a window moves rather than in its mean level. The ``grf`` channel is a smooth
function of ``c0`` and ``c1`` and serves as the regression target.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.metrics import roc_auc_score

from .data import SubjectSplit, Trial, interpolate_missing, save_split, split_subjects, write_trial
from .errors import ConfigError, GaitSSLError

LABEL_COLUMN = "label"
REGRESSION_CHANNEL = "grf"
CLASS_CHANNEL = "cls"
LABEL_PARAMETERS = ("amplitude", "period")


class GenerationRegressionError(GaitSSLError):
    exit_code = 3


@dataclass(frozen=True)
class CohortSpec:
    num_subjects: int = 30
    trials_per_subject: tuple[int, int] = (3, 6)
    trial_length: tuple[int, int] = (200, 400)
    input_channels: int = 6
    harmonics: int = 3
    amplitude: tuple[float, float] = (0.5, 1.5)
    channel_amplitude_spread: float = 0.2
    period: tuple[float, float] = (60.0, 120.0)
    period_jitter: float = 0.02
    trial_amplitude_jitter: float = 0.1
    trial_offset_jitter: float = 0.5
    harmonic_decay: tuple[float, float] = (0.1, 0.3)
    noise_std: float = 0.05
    label_parameter: str = "amplitude"
    label_threshold: float = 1.0
    label_margin: float = 0.1  # the labelled prior skips (threshold - margin, threshold + margin)
    balanced_labels: bool = True
    regression_coef: tuple[float, float, float] = (0.6, 0.4, 0.3)
    regression_noise: float = 0.02
    missing_rate: float = 0.02
    validation_subjects: int = 6
    test_subjects: int = 6
    seed: int = 0

    def __post_init__(self):
        for name in ("trials_per_subject", "trial_length", "amplitude", "period", "harmonic_decay"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"cohort spec range {name} is empty: [{lo}, {hi}]")
        if self.num_subjects < 2 or self.input_channels < 2 or self.harmonics < 1:
            raise ConfigError("cohort spec needs >= 2 subjects, >= 2 input channels, >= 1 harmonic")
        if self.label_parameter not in LABEL_PARAMETERS:
            raise ConfigError(f"label_parameter must be one of {LABEL_PARAMETERS}")
        lo, hi = getattr(self, self.label_parameter)
        t, m = self.label_threshold, self.label_margin
        if m < 0 or not lo <= t - m or not t + m <= hi or (hi - lo) <= 2 * m:
            raise ConfigError(f"label band [{t - m}, {t + m}] must lie inside the "
                              f"{self.label_parameter} prior [{lo}, {hi}] and leave room on both sides")
        if not 0.0 <= self.channel_amplitude_spread < 1.0:
            raise ConfigError("channel_amplitude_spread must lie in [0, 1)")
        if not 0.0 <= self.missing_rate <= 0.3:
            raise ConfigError("missing_rate must lie in [0, 0.3]")
        if self.trials_per_subject[0] < 1 or self.trial_length[0] < 2:
            raise ConfigError("need at least one trial of two samples per subject")

    @classmethod
    def from_dict(cls, d: dict) -> "CohortSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown cohort spec keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    @property
    def channel_names(self) -> tuple[str, ...]:
        return tuple(f"c{i}" for i in range(self.input_channels)) + (CLASS_CHANNEL, REGRESSION_CHANNEL)


@dataclass(frozen=True)
class SubjectLatent:
    period: float
    amplitude: float
    channel_amp: np.ndarray  # (C,)
    offset: np.ndarray  # (C,)
    weights: np.ndarray  # (C, H) harmonic weights, first column 1
    phases: np.ndarray  # (C, H)


@dataclass
class Cohort:
    spec: CohortSpec
    trials: list[Trial]
    metadata: list[dict]
    features: tuple[str, ...]
    target_channels: tuple[str, ...] = (REGRESSION_CHANNEL,)
    label_column: str = LABEL_COLUMN
    noiseless: dict = field(default_factory=dict, repr=False)

    def labels(self) -> dict[str, int]:
        return {m["subject_id"]: int(m[self.label_column]) for m in self.metadata}

    def default_split(self) -> SubjectSplit:
        return split_subjects([m["subject_id"] for m in self.metadata],
                              self.spec.validation_subjects, self.spec.test_subjects,
                              self.spec.seed, labels=self.labels())


def sample_outside_band(rng: np.random.Generator, bounds, threshold: float, margin: float,
                        side: int | None = None) -> float:
    """Uniform draw from ``bounds`` with ``(threshold - margin, threshold + margin)`` removed.

    ``side`` 0 or 1 restricts the draw to below or above the band.
    """
    lo, hi = bounds
    if side == 0:
        return float(rng.uniform(lo, threshold - margin))
    if side == 1:
        return float(rng.uniform(threshold + margin, hi))
    u = rng.uniform(lo, hi - 2 * margin)
    return float(u if u < threshold - margin else u + 2 * margin)


def sample_latent(spec: CohortSpec, rng: np.random.Generator, side: int | None = None) -> SubjectLatent:
    C, H = spec.input_channels + 1, spec.harmonics

    def draw(name):
        bounds = getattr(spec, name)
        if name == spec.label_parameter:
            return sample_outside_band(rng, bounds, spec.label_threshold, spec.label_margin, side)
        return float(rng.uniform(*bounds))

    amp = draw("amplitude")
    spread = spec.channel_amplitude_spread
    weights = np.ones((C, H))
    for h in range(1, H):
        weights[:, h] = rng.uniform(*spec.harmonic_decay, size=C) ** h
    weights[-1, 1:] = 0.0  # class channel carries the pure fundamental
    return SubjectLatent(
        period=draw("period"),
        amplitude=float(amp),
        channel_amp=amp * rng.uniform(1 - spread, 1 + spread, size=C),
        offset=rng.uniform(-1.0, 1.0, size=C),
        weights=weights,
        phases=rng.uniform(0, 2 * np.pi, size=(C, H)),
    )


def render_trial(latent: SubjectLatent, spec: CohortSpec, length: int, period: float,
                 trial_phase: float, noise_rng: np.random.Generator,
                 amp_scale=1.0, offset_shift=0.0):
    """Return ``(noiseless, noisy)`` arrays of shape (length, C + 1)."""
    t = np.arange(length)[:, None]
    C, H = latent.weights.shape
    amp = latent.channel_amp * amp_scale
    offset = latent.offset + offset_shift
    clean = np.empty((length, C + 1))
    for c in range(C):
        wave = np.zeros(length)
        for h in range(H):
            w = latent.weights[c, h]
            if w:
                wave += w * np.sin(2 * np.pi * (h + 1) * t[:, 0] / period
                                   + (h + 1) * trial_phase + latent.phases[c, h])
        clean[:, c] = offset[c] + amp[c] * wave
    b0, b1, b2 = spec.regression_coef
    clean[:, C] = b0 * clean[:, 0] + b1 * clean[:, 1] + b2 * clean[:, 0] * clean[:, 1]
    noisy = clean.copy()
    if spec.noise_std > 0:
        noisy[:, :C] += noise_rng.normal(0.0, spec.noise_std, size=(length, C))
    if spec.regression_noise > 0:
        noisy[:, C] += noise_rng.normal(0.0, spec.regression_noise, size=length)
    return clean, noisy


def generate_cohort(spec: CohortSpec = CohortSpec()) -> Cohort:
    features = spec.channel_names
    trials, metadata, noiseless = [], [], {}
    *children, side_ss = np.random.SeedSequence(spec.seed).spawn(spec.num_subjects + 1)
    sides = [None] * spec.num_subjects
    if spec.balanced_labels:
        sides = np.random.default_rng(side_ss).permutation(np.arange(spec.num_subjects) % 2).tolist()
    for s, child in enumerate(children):
        struct_ss, noise_ss = child.spawn(2)
        rng = np.random.default_rng(struct_ss)
        noise_rng = np.random.default_rng(noise_ss)
        sid = f"S{s:03d}"
        latent = sample_latent(spec, rng, sides[s])
        n_trials = int(rng.integers(spec.trials_per_subject[0], spec.trials_per_subject[1] + 1))
        for k in range(n_trials):
            length = int(rng.integers(spec.trial_length[0], spec.trial_length[1] + 1))
            period = latent.period * (1 + rng.uniform(-spec.period_jitter, spec.period_jitter))
            phase = float(rng.uniform(0, 2 * np.pi))
            C = spec.input_channels + 1
            amp_scale = 1 + rng.uniform(-1, 1, size=C) * spec.trial_amplitude_jitter
            offset_shift = rng.normal(0.0, 1.0, size=C) * spec.trial_offset_jitter
            clean, noisy = render_trial(latent, spec, length, period, phase, noise_rng,
                                        amp_scale, offset_shift)
            missing = noise_rng.random(noisy.shape) < spec.missing_rate
            all_missing = missing.all(axis=0)
            missing[0, all_missing] = False
            values = np.where(missing, np.nan, noisy)
            tid = f"T{k}"
            trials.append(Trial(sid, tid, values, missing, features))
            noiseless[(sid, tid)] = clean
        metadata.append({
            "subject_id": sid,
            LABEL_COLUMN: int(getattr(latent, spec.label_parameter) > spec.label_threshold),
            "period": latent.period,
            "amplitude": latent.amplitude,
            "noise_std": spec.noise_std,
            "n_trials": n_trials,
        })
    return Cohort(spec, trials, metadata, features, noiseless=noiseless)


def write_cohort(cohort: Cohort, out_dir, split: SubjectSplit | None = None) -> Path:
    """Write ``trials/*.csv``, ``metadata.csv``, ``split.json`` and ``cohort.json``."""
    out = Path(out_dir)
    (out / "trials").mkdir(parents=True, exist_ok=True)
    for trial in cohort.trials:
        write_trial(trial, out / "trials" / f"{trial.subject_id}_{trial.trial_id}.csv")
    write_metadata(cohort.metadata, out / "metadata.csv")
    save_split(split or cohort.default_split(), out / "split.json")
    info = {
        "features": list(cohort.features),
        "target_channels": list(cohort.target_channels),
        "label_column": cohort.label_column,
        "spec": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cohort.spec).items()},
    }
    (out / "cohort.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return out


def write_metadata(rows: list[dict], path) -> None:
    cols = list(rows[0])
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def read_metadata(path) -> dict[str, dict]:
    with open(path, newline="") as f:
        return {row["subject_id"]: row for row in csv.DictReader(f)}


def spectral_peak(x: np.ndarray, pad: int = 16) -> tuple[float, float]:
    """``(period, amplitude)`` of the largest non-DC peak of a zero-padded periodogram."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x) * pad
    spec = np.abs(np.fft.rfft(x - x.mean(), n=n))
    k = int(np.argmax(spec[1:])) + 1
    return n / k, 2.0 * spec[k] / len(x)


def dominant_period(x: np.ndarray, pad: int = 16) -> float:
    return spectral_peak(x, pad)[0]


@dataclass
class SanityReport:
    peak_fraction: float
    separability_auc: float
    passed: bool
    min_peak_fraction: float = 0.9
    min_auc: float = 0.9


def cohort_sanity(cohort: Cohort, labels: dict[str, int] | None = None,
                  tolerance: float = 0.10, raise_on_fail: bool = True) -> SanityReport:
    """Check quasi-periodicity and separability of a spectral feature.

    Each channel's dominant period must fall within ``tolerance`` of the subject
    fundamental for at least 90% of (trial, channel) pairs. The class channel's
    spectral peak (its period, or its height when the label thresholds
    amplitude), averaged over a subject's trials, must rank the planted label
    with AUC >= 0.9.
    """
    periods = {m["subject_id"]: float(m["period"]) for m in cohort.metadata}
    labels = labels if labels is not None else cohort.labels()
    cls_idx = cohort.features.index(CLASS_CHANNEL)
    use_height = cohort.spec.label_parameter == "amplitude"
    hits = total = 0
    feature: dict[str, list[float]] = {}
    for trial in cohort.trials:
        filled = interpolate_missing(trial) if trial.missing.any() else trial
        p_true = periods[trial.subject_id]
        for d in range(filled.values.shape[1]):
            p, height = spectral_peak(filled.values[:, d])
            hits += abs(p - p_true) <= tolerance * p_true
            total += 1
            if d == cls_idx:
                feature.setdefault(trial.subject_id, []).append(height if use_height else p)
    subjects = sorted(feature)
    y = np.array([labels[s] for s in subjects])
    score = np.array([np.mean(feature[s]) for s in subjects])
    auc = float(roc_auc_score(y, score)) if len(set(y)) == 2 else float("nan")
    frac = hits / total
    report = SanityReport(frac, auc, bool(frac >= 0.9 and auc >= 0.9))
    if raise_on_fail and not report.passed:
        raise GenerationRegressionError(
            f"cohort sanity failed: peak fraction {frac:.3f}, separability AUC {auc:.3f}")
    return report
