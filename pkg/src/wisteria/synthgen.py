"""Seeded synthetic patient generator.

Each record is a noisy projection of a hidden latent class: the class
prototype plus a site-specific feature shift plus Gaussian feature noise.
The same latent class later drives the weak labelers, so inputs and labels
share a single hidden cause. ``truth_class`` is carried on every record for
evaluation and for simulating labeling channels only; training code must
never read it.

Prototypes are scaled orthogonal unit vectors in the first C coordinates
(pairwise distance exactly ``prototype_separation``) with small seeded
jitter in the remaining coordinates, which keeps classes linearly separable
by construction and makes zero-noise behavior analytically checkable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .rng import stream

DATASET_FORMAT = "synth-v1"

# Jitter in the non-prototype coordinates, relative to the separation scale.
_JITTER_FRACTION = 0.05


def _frozen_array(values, dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


def validate_confusion(matrix: np.ndarray, num_classes: int) -> np.ndarray:
    """Check a row-stochastic C x C labeling channel; returns it as float64."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (num_classes, num_classes):
        raise ConfigError(
            f"confusion matrix must be {num_classes}x{num_classes}, got shape {m.shape}"
        )
    if not np.all(np.isfinite(m)):
        raise ConfigError("confusion matrix has non-finite entries")
    if np.any(m < 0.0) or np.any(m > 1.0):
        raise ConfigError("confusion matrix entries must lie in [0, 1]")
    row_sums = m.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-9):
        raise ConfigError("confusion matrix rows must each sum to 1 within 1e-9")
    return m


@dataclass(frozen=True)
class GenConfig:
    """Knobs for one synthetic dataset; fully determines it together with sites."""

    num_records: int
    num_classes: int
    feature_dim: int
    num_sites: int
    prototype_separation: float = 2.0
    feature_noise_sd: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.num_records <= 0:
            raise ConfigError("num_records must be positive")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if self.feature_dim < self.num_classes:
            raise ConfigError(
                "feature_dim must be >= num_classes (orthogonal prototypes need room)"
            )
        if self.num_sites < 1:
            raise ConfigError("num_sites must be at least 1")
        if self.prototype_separation < 0.0:
            raise ConfigError("prototype_separation must be >= 0")
        if self.feature_noise_sd < 0.0:
            raise ConfigError("feature_noise_sd must be >= 0")

    def as_dict(self) -> dict:
        return {
            "num_records": self.num_records,
            "num_classes": self.num_classes,
            "feature_dim": self.feature_dim,
            "num_sites": self.num_sites,
            "prototype_separation": self.prototype_separation,
            "feature_noise_sd": self.feature_noise_sd,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(data: dict) -> "GenConfig":
        allowed = {
            "num_records",
            "num_classes",
            "feature_dim",
            "num_sites",
            "prototype_separation",
            "feature_noise_sd",
            "seed",
        }
        unknown = set(data) - allowed
        if unknown:
            raise ConfigError(f"unknown keys in gen config: {sorted(unknown)}")
        try:
            return GenConfig(**data)
        except TypeError as exc:
            raise ConfigError(f"invalid gen config: {exc}") from exc


@dataclass(frozen=True)
class LatentState:
    """A hidden class together with its mean feature vector."""

    class_index: int
    prototype: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "prototype", _frozen_array(self.prototype))
        if self.class_index < 0:
            raise ConfigError("class_index must be non-negative")
        if not np.all(np.isfinite(self.prototype)):
            raise ConfigError("prototype has non-finite entries")


@dataclass(frozen=True)
class PatientRecord:
    """One observed feature vector. truth_class is for evaluation only."""

    x: np.ndarray
    site_id: int
    truth_class: int

    def __post_init__(self):
        object.__setattr__(self, "x", _frozen_array(self.x))
        if not np.all(np.isfinite(self.x)):
            raise ConfigError("record features must be finite")


@dataclass(frozen=True)
class SiteSpec:
    """Per-site heterogeneity: an additive feature shift and a labeling channel."""

    site_id: int
    feature_shift: np.ndarray
    confusion: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "feature_shift", _frozen_array(self.feature_shift))
        c = np.asarray(self.confusion, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ConfigError("site confusion must be a square matrix")
        validate_confusion(c, c.shape[0])
        object.__setattr__(self, "confusion", _frozen_array(c))
        if not np.all(np.isfinite(self.feature_shift)):
            raise ConfigError("feature_shift has non-finite entries")


def make_prototypes(config: GenConfig) -> np.ndarray:
    """Class prototypes, one row per class, pairwise distance >= separation."""
    c, d = config.num_classes, config.feature_dim
    scale = config.prototype_separation / np.sqrt(2.0)
    protos = np.zeros((c, d), dtype=np.float64)
    protos[np.arange(c), np.arange(c)] = scale
    if d > c:
        jitter_sd = _JITTER_FRACTION * config.prototype_separation
        protos[:, c:] = stream(config.seed, "prototypes").normal(
            0.0, jitter_sd, size=(c, d - c)
        )
    return protos


def latent_states(config: GenConfig) -> list[LatentState]:
    protos = make_prototypes(config)
    return [LatentState(i, protos[i]) for i in range(config.num_classes)]


def generate_dataset(config: GenConfig, sites: list[SiteSpec]) -> list[PatientRecord]:
    """Draw records: uniform class, uniform site, x = prototype + shift + noise."""
    if len(sites) != config.num_sites:
        raise ConfigError(
            f"expected {config.num_sites} site specs, got {len(sites)}"
        )
    for i, site in enumerate(sites):
        if site.site_id != i:
            raise ConfigError("sites must be listed in site_id order 0..S-1")
        if site.feature_shift.shape != (config.feature_dim,):
            raise ConfigError("feature_shift dimension must match feature_dim")
        if site.confusion.shape != (config.num_classes, config.num_classes):
            raise ConfigError("site confusion must be num_classes x num_classes")

    n, d = config.num_records, config.feature_dim
    protos = make_prototypes(config)
    classes = stream(config.seed, "classes").integers(0, config.num_classes, size=n)
    site_ids = stream(config.seed, "record-sites").integers(0, config.num_sites, size=n)
    noise = stream(config.seed, "feature-noise").normal(
        0.0, config.feature_noise_sd, size=(n, d)
    )
    shifts = np.stack([s.feature_shift for s in sites])
    xs = protos[classes] + shifts[site_ids] + noise
    return [
        PatientRecord(x=xs[i], site_id=int(site_ids[i]), truth_class=int(classes[i]))
        for i in range(n)
    ]


def features(records: list[PatientRecord]) -> np.ndarray:
    """Stack record features; the only record view the training path may see."""
    return np.stack([r.x for r in records])


def truth_classes(records: list[PatientRecord]) -> np.ndarray:
    """Ground-truth classes, for evaluation and channel simulation only."""
    return np.array([r.truth_class for r in records], dtype=np.int64)


def site_ids(records: list[PatientRecord]) -> np.ndarray:
    return np.array([r.site_id for r in records], dtype=np.int64)


def dataset_to_jsonl(records: list[PatientRecord], config: GenConfig) -> str:
    """JSON-lines: a header echoing the config, then one record per line."""
    header = {"format": DATASET_FORMAT, "config": config.as_dict()}
    lines = [json.dumps(header, sort_keys=True)]
    for r in records:
        lines.append(
            json.dumps(
                {"x": r.x.tolist(), "site_id": r.site_id, "truth_class": r.truth_class}
            )
        )
    return "\n".join(lines) + "\n"


def save_dataset(path: str | Path, records: list[PatientRecord], config: GenConfig) -> None:
    Path(path).write_text(dataset_to_jsonl(records, config), encoding="utf-8")


def dataset_from_jsonl(text: str) -> tuple[list[PatientRecord], GenConfig]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ConfigError("dataset text is empty")
    header = json.loads(lines[0])
    if header.get("format") != DATASET_FORMAT:
        raise ConfigError(
            f"unsupported dataset format {header.get('format')!r}, expected {DATASET_FORMAT!r}"
        )
    config = GenConfig.from_dict(header["config"])
    records = []
    for ln in lines[1:]:
        obj = json.loads(ln)
        records.append(
            PatientRecord(
                x=np.asarray(obj["x"], dtype=np.float64),
                site_id=int(obj["site_id"]),
                truth_class=int(obj["truth_class"]),
            )
        )
    if len(records) != config.num_records:
        raise ConfigError(
            f"dataset has {len(records)} records but header declares {config.num_records}"
        )
    return records, config


def load_dataset(path: str | Path) -> tuple[list[PatientRecord], GenConfig]:
    return dataset_from_jsonl(Path(path).read_text(encoding="utf-8"))
