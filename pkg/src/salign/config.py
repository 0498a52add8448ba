"""Experiment configuration: YAML schema, validation, and hashing.

A config file is a flat YAML mapping (documented in the README) carrying a
schema_version. Validation errors name the violated invariant so that sweep
files can be debugged without reading code.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import yaml

from .attacks import AttackSpec, parse_ratio
from .errors import ConfigError

SCHEMA_VERSION = 1

DATASET_IDS = ("shapes16", "cifar10", "cifar100")
ARCH_IDS = ("small_cnn", "wrn_family")

# Fixed dataset metadata; shapes16 is the synthetic desk-scale set.
_DATASET_CLASSES = {"cifar10": 10, "cifar100": 100}
_DATASET_SHAPES = {"cifar10": (32, 32, 3), "cifar100": (32, 32, 3)}
_SHAPES16_MAX_CLASSES = 4


@dataclass(frozen=True)
class CurriculumSchedule:
    """Ordered refinement stages: (top-k percentage, epochs) per stage."""

    stages: tuple  # tuple of (k: float, epochs: int)

    def __post_init__(self):
        ks = [k for k, _ in self.stages]
        for k in ks:
            if not (0 < k <= 100):
                raise ConfigError(f"curriculum k values must lie in (0, 100], got {k}")
        if any(k2 >= k1 for k1, k2 in zip(ks, ks[1:])):
            raise ConfigError(f"curriculum k values must be strictly decreasing, got {ks}")
        for k, epochs in self.stages:
            if int(epochs) != epochs or epochs < 1:
                raise ConfigError(f"curriculum stage epochs must be a positive integer, got {epochs} at k={k}")

    def __len__(self) -> int:
        return len(self.stages)

    def __iter__(self):
        return iter(self.stages)

    @property
    def total_epochs(self) -> int:
        return sum(e for _, e in self.stages)

    @property
    def k_values(self) -> list:
        return [k for k, _ in self.stages]


def _positive_int(raw: dict, key: str) -> int:
    v = raw.get(key)
    if not isinstance(v, int) or isinstance(v, bool) or v < 1:
        raise ConfigError(f"{key} must be a positive integer, got {v!r}")
    return v


def _nonneg_real(raw: dict, key: str) -> float:
    v = raw.get(key)
    if not isinstance(v, (int, float)) or isinstance(v, bool) or v < 0:
        raise ConfigError(f"{key} must be a non-negative real, got {v!r}")
    return float(v)


def _lr_pair(raw: dict, key: str) -> tuple:
    v = raw.get(key)
    if not (isinstance(v, (list, tuple)) and len(v) == 2):
        raise ConfigError(f"{key} must be a [start, end] pair, got {v!r}")
    start, end = float(v[0]), float(v[1])
    if start <= 0 or end <= 0:
        raise ConfigError(f"{key} endpoints must be positive, got {v!r}")
    if start < end:
        raise ConfigError(f"{key} must decay: start >= end, got start={start} < end={end}")
    return (start, end)


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated description of a full two-phase run."""

    dataset_id: str
    data_dir: Optional[str]
    train_size: int
    test_size: int
    image_shape: tuple  # (h, w, c)
    num_classes: int
    arch_id: str
    arch_depth: Optional[int]
    arch_width: Optional[int]
    teacher_checkpoint: str
    seed: int
    batch_size: int
    phase1_epochs: int
    phase2_epochs_per_k: int
    curriculum: CurriculumSchedule
    beta: float
    gamma_phase1: float
    gamma_phase2: float
    lr_phase1: tuple  # (start, end)
    lr_phase2: tuple
    keep_alignment_phase2: bool
    lr_span_phase2: str  # "joint" | "per_stage"
    nonsaturating_generator: bool
    bootstrap_epochs: int
    bootstrap_lr: tuple
    bootstrap_attack: AttackSpec
    eval_attacks: tuple  # tuple of AttackSpec
    eval_subset_size: int
    probe_size: int
    dataset_checksums: Optional[dict] = None

    def to_dict(self) -> dict:
        """Canonical dict form used for serialization and hashing."""
        return {
            "schema_version": SCHEMA_VERSION,
            "dataset_id": self.dataset_id,
            "data_dir": self.data_dir,
            "train_size": self.train_size,
            "test_size": self.test_size,
            "image_shape": list(self.image_shape),
            "num_classes": self.num_classes,
            "arch_id": self.arch_id,
            "arch_depth": self.arch_depth,
            "arch_width": self.arch_width,
            "teacher_checkpoint": self.teacher_checkpoint,
            "seed": self.seed,
            "batch_size": self.batch_size,
            "phase1_epochs": self.phase1_epochs,
            "phase2_epochs_per_k": self.phase2_epochs_per_k,
            "curriculum": [[k, e] for k, e in self.curriculum],
            "beta": self.beta,
            "gamma_phase1": self.gamma_phase1,
            "gamma_phase2": self.gamma_phase2,
            "lr_phase1": list(self.lr_phase1),
            "lr_phase2": list(self.lr_phase2),
            "keep_alignment_phase2": self.keep_alignment_phase2,
            "lr_span_phase2": self.lr_span_phase2,
            "nonsaturating_generator": self.nonsaturating_generator,
            "bootstrap_epochs": self.bootstrap_epochs,
            "bootstrap_lr": list(self.bootstrap_lr),
            "bootstrap_attack": self.bootstrap_attack.to_dict(),
            "eval_attacks": [a.to_dict() for a in self.eval_attacks],
            "eval_subset_size": self.eval_subset_size,
            "probe_size": self.probe_size,
            "dataset_checksums": self.dataset_checksums,
        }

    @property
    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


_DEFAULT_BOOTSTRAP_ATTACK = {
    "name": "pgd",
    "epsilon": "8/255",
    "steps": 7,
    "step_size": "2/255",
    "random_start": True,
}

_KNOWN_KEYS = {
    "schema_version", "dataset_id", "data_dir", "train_size", "test_size",
    "image_shape", "num_classes", "arch_id", "arch_depth", "arch_width",
    "teacher_checkpoint", "seed", "batch_size", "phase1_epochs",
    "phase2_epochs_per_k", "curriculum", "beta", "gamma_phase1",
    "gamma_phase2", "lr_phase1", "lr_phase2", "keep_alignment_phase2",
    "lr_span_phase2", "nonsaturating_generator", "bootstrap_epochs",
    "bootstrap_lr", "bootstrap_attack", "eval_attacks", "eval_subset_size",
    "probe_size", "dataset_checksums",
}


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Validate a parsed mapping and build an ExperimentConfig."""
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
    unknown = set(raw) - _KNOWN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")

    dataset_id = raw.get("dataset_id")
    if dataset_id not in DATASET_IDS:
        raise ConfigError(f"dataset_id must be one of {DATASET_IDS}, got {dataset_id!r}")

    shape = raw.get("image_shape")
    if not (isinstance(shape, (list, tuple)) and len(shape) == 3 and all(isinstance(v, int) and v > 0 for v in shape)):
        raise ConfigError(f"image_shape must be a positive (h, w, c) triple, got {shape!r}")
    image_shape = tuple(shape)
    num_classes = _positive_int(raw, "num_classes")

    if dataset_id in _DATASET_CLASSES:
        if num_classes != _DATASET_CLASSES[dataset_id]:
            raise ConfigError(
                f"num_classes must match the dataset: {dataset_id} has "
                f"{_DATASET_CLASSES[dataset_id]} classes, got {num_classes}"
            )
        if image_shape != _DATASET_SHAPES[dataset_id]:
            raise ConfigError(
                f"image_shape must match the dataset: {dataset_id} images are "
                f"{_DATASET_SHAPES[dataset_id]}, got {image_shape}"
            )
        if not raw.get("data_dir"):
            raise ConfigError(f"data_dir is required for dataset {dataset_id}")
    else:  # shapes16
        if num_classes < 2 or num_classes > _SHAPES16_MAX_CLASSES:
            raise ConfigError(
                f"shapes16 supports 2..{_SHAPES16_MAX_CLASSES} classes, got {num_classes}"
            )
        if image_shape[2] not in (1, 3):
            raise ConfigError(f"shapes16 channel count must be 1 or 3, got {image_shape[2]}")
        if min(image_shape[0], image_shape[1]) < 8:
            raise ConfigError(f"shapes16 images must be at least 8x8, got {image_shape}")

    arch_id = raw.get("arch_id")
    if arch_id not in ARCH_IDS:
        raise ConfigError(f"arch_id must be one of {ARCH_IDS}, got {arch_id!r}")
    arch_depth = raw.get("arch_depth")
    arch_width = raw.get("arch_width")
    if arch_id == "wrn_family":
        if not (isinstance(arch_depth, int) and arch_depth >= 10):
            raise ConfigError(f"wrn_family requires arch_depth >= 10, got {arch_depth!r}")
        if not (isinstance(arch_width, int) and arch_width >= 1):
            raise ConfigError(f"wrn_family requires arch_width >= 1, got {arch_width!r}")

    teacher_checkpoint = raw.get("teacher_checkpoint")
    if not isinstance(teacher_checkpoint, str) or not teacher_checkpoint:
        raise ConfigError(f"teacher_checkpoint must be a file path, got {teacher_checkpoint!r}")

    seed = raw.get("seed")
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"seed must be an integer, got {seed!r}")

    phase2_epochs_per_k = _positive_int(raw, "phase2_epochs_per_k")
    curriculum_raw = raw.get("curriculum", [])
    if curriculum_raw is None:
        curriculum_raw = []
    if not isinstance(curriculum_raw, (list, tuple)):
        raise ConfigError(f"curriculum must be a list of k values or {{k, epochs}} entries, got {curriculum_raw!r}")
    stages = []
    for entry in curriculum_raw:
        if isinstance(entry, dict):
            if set(entry) - {"k", "epochs"}:
                raise ConfigError(f"curriculum entries accept only k and epochs, got {entry!r}")
            stages.append((float(entry["k"]), int(entry.get("epochs", phase2_epochs_per_k))))
        elif isinstance(entry, (int, float)) and not isinstance(entry, bool):
            stages.append((float(entry), phase2_epochs_per_k))
        else:
            raise ConfigError(f"curriculum entry must be a number or mapping, got {entry!r}")
    curriculum = CurriculumSchedule(tuple(stages))

    attacks_raw = raw.get("eval_attacks", [])
    if not isinstance(attacks_raw, (list, tuple)):
        raise ConfigError(f"eval_attacks must be a list, got {attacks_raw!r}")
    eval_attacks = tuple(AttackSpec.from_dict(a) for a in attacks_raw)

    bootstrap_attack = AttackSpec.from_dict(raw.get("bootstrap_attack", _DEFAULT_BOOTSTRAP_ATTACK))

    checksums = raw.get("dataset_checksums")
    if checksums is not None and not (
        isinstance(checksums, dict)
        and all(isinstance(k, str) and isinstance(v, str) for k, v in checksums.items())
    ):
        raise ConfigError("dataset_checksums must map file names to hex digests")

    lr_span = raw.get("lr_span_phase2", "joint")
    if lr_span not in ("joint", "per_stage"):
        raise ConfigError(f"lr_span_phase2 must be 'joint' or 'per_stage', got {lr_span!r}")

    return ExperimentConfig(
        dataset_id=dataset_id,
        data_dir=raw.get("data_dir"),
        train_size=_positive_int(raw, "train_size"),
        test_size=_positive_int(raw, "test_size"),
        image_shape=image_shape,
        num_classes=num_classes,
        arch_id=arch_id,
        arch_depth=arch_depth,
        arch_width=arch_width,
        teacher_checkpoint=teacher_checkpoint,
        seed=seed,
        batch_size=_positive_int(raw, "batch_size"),
        phase1_epochs=_positive_int(raw, "phase1_epochs"),
        phase2_epochs_per_k=phase2_epochs_per_k,
        curriculum=curriculum,
        beta=_nonneg_real(raw, "beta"),
        gamma_phase1=_nonneg_real(raw, "gamma_phase1"),
        gamma_phase2=_nonneg_real(raw, "gamma_phase2"),
        lr_phase1=_lr_pair(raw, "lr_phase1"),
        lr_phase2=_lr_pair(raw, "lr_phase2"),
        keep_alignment_phase2=bool(raw.get("keep_alignment_phase2", True)),
        lr_span_phase2=lr_span,
        nonsaturating_generator=bool(raw.get("nonsaturating_generator", False)),
        bootstrap_epochs=_positive_int(raw, "bootstrap_epochs") if "bootstrap_epochs" in raw else 10,
        bootstrap_lr=_lr_pair(raw, "bootstrap_lr") if "bootstrap_lr" in raw else _lr_pair({"bootstrap_lr": raw.get("lr_phase1")}, "bootstrap_lr"),
        bootstrap_attack=bootstrap_attack,
        eval_attacks=eval_attacks,
        eval_subset_size=_positive_int(raw, "eval_subset_size") if "eval_subset_size" in raw else 512,
        probe_size=_positive_int(raw, "probe_size") if "probe_size" in raw else 512,
        dataset_checksums=checksums,
    )


def load_config(path) -> ExperimentConfig:
    """Parse and validate a YAML config file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from exc
    return config_from_dict(raw)


def save_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))
