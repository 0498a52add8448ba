"""Training-state checkpoints: atomic writes, versioned schema, resume guard.

A training checkpoint captures everything needed to continue a run
bit-identically: model and discriminator parameters, optimizer state, the
phase cursor, RNG state, and the config hash that the resume path verifies.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch

from .errors import CheckpointError

CHECKPOINT_SCHEMA_VERSION = 1


@dataclass
class Checkpoint:
    config_hash: str
    phase_cursor: dict        # phase, stage_index, epoch_in_segment, k
    student_state: dict
    disc_states: dict         # name -> state_dict, one per active discriminator
    optimizer_states: dict    # name -> optimizer state_dict
    rng_state: torch.Tensor   # torch global RNG state
    extras: dict = field(default_factory=dict)
    schema_version: int = CHECKPOINT_SCHEMA_VERSION


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Atomic write: serialize to a temp file, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "schema_version": ckpt.schema_version,
        "config_hash": ckpt.config_hash,
        "phase_cursor": ckpt.phase_cursor,
        "student_state": ckpt.student_state,
        "disc_states": ckpt.disc_states,
        "optimizer_states": ckpt.optimizer_states,
        "rng_state": ckpt.rng_state,
        "extras": ckpt.extras,
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            torch.save(payload, fh)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    version = payload.get("schema_version") if isinstance(payload, dict) else None
    if version != CHECKPOINT_SCHEMA_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has schema version {version!r}, "
            f"expected {CHECKPOINT_SCHEMA_VERSION}"
        )
    return Checkpoint(
        config_hash=payload["config_hash"],
        phase_cursor=payload["phase_cursor"],
        student_state=payload["student_state"],
        disc_states=payload["disc_states"],
        optimizer_states=payload["optimizer_states"],
        rng_state=payload["rng_state"],
        extras=payload.get("extras", {}),
        schema_version=version,
    )


def verify_resume(ckpt: Checkpoint, config) -> None:
    """Refuse to resume against a config whose hash no longer matches."""
    if ckpt.config_hash != config.config_hash:
        raise CheckpointError(
            f"config-hash mismatch on resume: checkpoint was written for "
            f"{ckpt.config_hash}, active config hashes to {config.config_hash}"
        )
