"""Two-phase training procedure plus the adversarial-training teacher bootstrap.

Phase 1 aligns the student's true-class input gradients to the frozen
teacher's through a discriminator term and a squared-L2 term. Phase 2 adds
the curriculum pair: the teacher map is masked to its top-k% locations and
the student's cross-entropy gradient is matched against it, with k stepping
down a fixed schedule. Every batch updates the discriminator(s) first, then
the student; both use momentum SGD and a linearly decaying per-epoch
learning rate.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch

from .attacks import AttackSpec, apply_attack
from .checkpoint import Checkpoint, save_checkpoint
from .errors import ConfigError, DivergenceError, NumericFault
from .losses import (LossBreakdown, ce_loss, discriminator_loss, phase1_terms,
                     phase2_terms)
from .models import build_discriminator, build_student, save_model
from .saliency import (normalize_for_disc, saliency_both_with_logits,
                       saliency_ce_with_logits, saliency_true_class,
                       saliency_true_class_with_logits, top_k_mask)
from .seeding import derive_generator, derive_seed

MOMENTUM = 0.9
WEIGHT_DECAY = 5e-4
DIVERGENCE_FACTOR = 1e3


@dataclass(frozen=True)
class LrSchedule:
    """Linear per-epoch decay from start to end over total_epochs."""

    start: float
    end: float
    total_epochs: int

    def __post_init__(self):
        if self.start <= 0 or self.end <= 0:
            raise ConfigError(f"learning rates must be positive, got {self.start}, {self.end}")
        if self.start < self.end:
            raise ConfigError(f"schedule must decay: start {self.start} < end {self.end}")
        if self.total_epochs < 1:
            raise ConfigError(f"total_epochs must be >= 1, got {self.total_epochs}")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    """Learning rate at an epoch: start + (end - start) * e / (total - 1)."""
    if not (0 <= epoch < schedule.total_epochs):
        raise ValueError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    if schedule.total_epochs == 1:
        return schedule.start
    return schedule.start + (schedule.end - schedule.start) * epoch / (schedule.total_epochs - 1)


class StepLog:
    """Structured per-step training log (JSON lines, also kept in memory)."""

    def __init__(self, path=None):
        self.records = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record) + "\n")


def _set_lr(optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _student_optimizer(model, lr: float):
    return torch.optim.SGD(model.trainable_parameters(), lr=lr,
                           momentum=MOMENTUM, weight_decay=WEIGHT_DECAY)


def _disc_optimizer(disc, lr: float):
    return torch.optim.SGD(disc.trainable_parameters(), lr=lr, momentum=MOMENTUM)


def _guard(bd: LossBreakdown, initial_total: float) -> None:
    if not bd.is_finite():
        raise NumericFault(f"non-finite loss: {bd.to_dict()}")
    bound = DIVERGENCE_FACTOR * max(abs(initial_total), 1.0)
    if abs(bd.total) > bound:
        raise DivergenceError(
            f"loss diverged: |total| = {abs(bd.total):.4g} exceeds {bound:.4g} "
            f"(1000x the initial total {initial_total:.4g})"
        )


# ---------------------------------------------------------------------------
# Teacher bootstrap (standard PGD adversarial training)
# ---------------------------------------------------------------------------

def bootstrap_teacher(config, train_data, *, attack: AttackSpec = None,
                      epochs: int = None, lr: tuple = None, tag: str = "bootstrap",
                      log: StepLog = None, ckpt_path=None):
    """Train a classifier on PGD-perturbed batches and return it (not frozen).

    Each batch is replaced by the attack output before the cross-entropy
    update. With a zero-epsilon attack this reduces to natural training,
    which is how the natural baseline is produced. On a non-finite loss the
    run aborts; the per-epoch checkpoint written before the bad step is left
    intact.
    """
    attack = attack if attack is not None else config.bootstrap_attack
    epochs = epochs if epochs is not None else config.bootstrap_epochs
    lr = lr if lr is not None else config.bootstrap_lr
    model = build_student(config.arch_id, config.image_shape, config.num_classes,
                          seed=derive_seed(config.seed, tag, "init"),
                          depth=config.arch_depth, width=config.arch_width)
    if epochs == 0:
        return model
    sched = LrSchedule(lr[0], lr[1], epochs)
    opt = _student_optimizer(model, sched.start)
    model.train()
    for epoch in range(epochs):
        _set_lr(opt, lr_at(sched, epoch))
        attack_gen = derive_generator(config.seed, tag, "attack", epoch)
        for step, (x, y) in enumerate(train_data.epoch_batches(epoch, config.batch_size, tag=tag)):
            x_adv = apply_attack(model, x, y, attack, generator=attack_gen)
            logits = model.logits(x_adv)
            loss = ce_loss(logits, y)
            if not torch.isfinite(loss):
                raise NumericFault(f"non-finite bootstrap loss at epoch {epoch} step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            if log:
                log.append({"phase": tag, "k": None, "epoch": epoch, "step": step,
                            "lr": lr_at(sched, epoch), "ce": float(loss),
                            "updates": ["student"], "wall_time": time.time()})
        if ckpt_path:
            save_model(model, ckpt_path)
    return model


# ---------------------------------------------------------------------------
# Phase 1: alignment
# ---------------------------------------------------------------------------

def _snapshot(config, phase_cursor, student, discs: dict, optimizers: dict, extras: dict) -> Checkpoint:
    return Checkpoint(
        config_hash=config.config_hash,
        phase_cursor=dict(phase_cursor),
        student_state={k: v.detach().clone() for k, v in student.state_dict().items()},
        disc_states={name: {k: v.detach().clone() for k, v in d.state_dict().items()}
                     for name, d in discs.items()},
        optimizer_states={name: opt.state_dict() for name, opt in optimizers.items()},
        rng_state=torch.get_rng_state(),
        extras=dict(extras),
    )


def train_phase1(config, train_data, teacher, *, log: StepLog = None,
                 ckpt_dir=None, resume: Checkpoint = None):
    """Run the alignment phase; returns (student, discriminator).

    Per batch: teacher and student true-class saliencies are computed (the
    teacher's detached), the discriminator takes one ascent step on the
    robust term, then the student takes one descent step on the full
    objective with gradients flowing through its saliency map.
    """
    if not teacher.frozen:
        raise ConfigError("phase 1 requires a frozen teacher")
    teacher_digest = teacher.parameter_digest()

    student = build_student(config.arch_id, config.image_shape, config.num_classes,
                            seed=derive_seed(config.seed, "student", "init"),
                            depth=config.arch_depth, width=config.arch_width)
    disc = build_discriminator(config.image_shape,
                               seed=derive_seed(config.seed, "disc1", "init"))
    sched = LrSchedule(config.lr_phase1[0], config.lr_phase1[1], config.phase1_epochs)
    opt_s = _student_optimizer(student, sched.start)
    opt_d = _disc_optimizer(disc, sched.start)

    start_epoch = 0
    extras = {"initial_total": None}
    if resume is not None:
        cursor = resume.phase_cursor
        if cursor.get("phase") != "phase1":
            raise ConfigError(f"checkpoint cursor is in {cursor.get('phase')}, not phase1")
        student.load_state_dict(resume.student_state)
        disc.load_state_dict(resume.disc_states["disc"])
        opt_s.load_state_dict(resume.optimizer_states["student"])
        opt_d.load_state_dict(resume.optimizer_states["disc"])
        torch.set_rng_state(resume.rng_state)
        start_epoch = cursor["epoch_in_segment"]
        extras = dict(resume.extras)

    student.train()
    disc.train()
    beta, gamma = config.beta, config.gamma_phase1
    for epoch in range(start_epoch, config.phase1_epochs):
        lr = lr_at(sched, epoch)
        _set_lr(opt_s, lr)
        _set_lr(opt_d, lr)
        for step, (x, y) in enumerate(train_data.epoch_batches(epoch, config.batch_size, tag="phase1")):
            j_t = saliency_true_class(teacher, x, y, source="teacher_tci")
            j_s, logits = saliency_true_class_with_logits(student, x, y, create_graph=True,
                                                          source="student_tci")
            # discriminator ascent on frozen maps, before the student moves
            jtn = normalize_for_disc(j_t).values
            jsn_det = normalize_for_disc(j_s.detach()).values
            d_loss = discriminator_loss(disc.score(jtn), disc.score(jsn_det))
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()
            # student descent through the second-order saliency path
            bd = phase1_terms(j_t, j_s, logits, y, disc, beta, gamma,
                              config.nonsaturating_generator)
            if extras.get("initial_total") is None:
                extras["initial_total"] = bd.total
            _guard(bd, extras["initial_total"])
            opt_s.zero_grad()
            bd.total_tensor.backward()
            opt_s.step()
            if log:
                log.append({"phase": "phase1", "k": None, "epoch": epoch, "step": step,
                            "lr": lr, **bd.to_dict(),
                            "updates": ["disc", "student"], "wall_time": time.time()})
        if ckpt_dir:
            cursor = {"phase": "phase1", "stage_index": None,
                      "epoch_in_segment": epoch + 1, "k": None}
            save_checkpoint(_snapshot(config, cursor, student, {"disc": disc},
                                      {"student": opt_s, "disc": opt_d}, extras),
                            Path(ckpt_dir) / "latest.pt")

    if teacher.parameter_digest() != teacher_digest:
        raise RuntimeError("teacher parameters changed during phase 1")
    return student, disc


# ---------------------------------------------------------------------------
# Phase 2: curriculum refinement
# ---------------------------------------------------------------------------

def train_phase2(config, train_data, teacher, student, *, log: StepLog = None,
                 ckpt_dir=None, resume: Checkpoint = None):
    """Run the refinement curriculum; returns (student, disc, curr_disc).

    One fresh pair of discriminators serves the whole phase (they are not
    reinitialized between stages). The learning rate spans all stages
    jointly by default, or restarts per stage when configured. An empty
    curriculum returns the phase-1 student unchanged.
    """
    if not teacher.frozen:
        raise ConfigError("phase 2 requires a frozen teacher")
    if len(config.curriculum) == 0:
        return student, None, None
    teacher_digest = teacher.parameter_digest()

    disc = build_discriminator(config.image_shape,
                               seed=derive_seed(config.seed, "disc2", "init"))
    curr_disc = build_discriminator(config.image_shape,
                                    seed=derive_seed(config.seed, "curr_disc", "init"))
    stages = list(config.curriculum)
    total_epochs = sum(e for _, e in stages)
    if config.lr_span_phase2 == "joint":
        sched = LrSchedule(config.lr_phase2[0], config.lr_phase2[1], total_epochs)
    else:
        sched = None  # rebuilt per stage
    opt_s = _student_optimizer(student, config.lr_phase2[0])
    opt_d = _disc_optimizer(disc, config.lr_phase2[0])
    opt_c = _disc_optimizer(curr_disc, config.lr_phase2[0])

    start_stage, start_epoch = 0, 0
    extras = {"initial_total": None}
    if resume is not None:
        cursor = resume.phase_cursor
        if cursor.get("phase") != "phase2":
            raise ConfigError(f"checkpoint cursor is in {cursor.get('phase')}, not phase2")
        student.load_state_dict(resume.student_state)
        disc.load_state_dict(resume.disc_states["disc"])
        curr_disc.load_state_dict(resume.disc_states["curr_disc"])
        opt_s.load_state_dict(resume.optimizer_states["student"])
        opt_d.load_state_dict(resume.optimizer_states["disc"])
        opt_c.load_state_dict(resume.optimizer_states["curr_disc"])
        torch.set_rng_state(resume.rng_state)
        start_stage = cursor["stage_index"]
        start_epoch = cursor["epoch_in_segment"]
        extras = dict(resume.extras)

    student.train()
    disc.train()
    curr_disc.train()
    beta, gamma = config.beta, config.gamma_phase2
    keep_alignment = config.keep_alignment_phase2
    epochs_done_before = sum(stages[i][1] for i in range(start_stage))

    for stage_index in range(start_stage, len(stages)):
        k, stage_epochs = stages[stage_index]
        per_stage_sched = sched or LrSchedule(config.lr_phase2[0], config.lr_phase2[1], stage_epochs)
        first_epoch = start_epoch if stage_index == start_stage else 0
        for epoch in range(first_epoch, stage_epochs):
            global_epoch = epochs_done_before + epoch
            lr = lr_at(per_stage_sched, global_epoch if sched else epoch)
            for opt in (opt_s, opt_d, opt_c):
                _set_lr(opt, lr)
            batches = train_data.epoch_batches(epoch, config.batch_size,
                                               tag=f"phase2-stage{stage_index}")
            for step, (x, y) in enumerate(batches):
                j_t = saliency_true_class(teacher, x, y, source="teacher_tci")
                j_t_k = top_k_mask(j_t, k)
                if keep_alignment:
                    j_s, j_s_ce, logits = saliency_both_with_logits(student, x, y,
                                                                    create_graph=True)
                else:
                    j_s = None
                    j_s_ce, logits = saliency_ce_with_logits(student, x, y, create_graph=True)
                updates = []
                # both discriminators ascend before the student moves
                if keep_alignment:
                    jtn = normalize_for_disc(j_t).values
                    jsn_det = normalize_for_disc(j_s.detach()).values
                    d_loss = discriminator_loss(disc.score(jtn), disc.score(jsn_det))
                    opt_d.zero_grad()
                    d_loss.backward()
                    opt_d.step()
                    updates.append("disc")
                jtkn = normalize_for_disc(j_t_k).values
                jscen_det = normalize_for_disc(j_s_ce.detach()).values
                c_loss = discriminator_loss(curr_disc.score(jtkn), curr_disc.score(jscen_det))
                opt_c.zero_grad()
                c_loss.backward()
                opt_c.step()
                updates.append("curr_disc")

                bd = phase2_terms(j_t, j_t_k, j_s, j_s_ce, logits, y, disc, curr_disc,
                                  beta, gamma, keep_alignment,
                                  config.nonsaturating_generator)
                if extras.get("initial_total") is None:
                    extras["initial_total"] = bd.total
                _guard(bd, extras["initial_total"])
                opt_s.zero_grad()
                bd.total_tensor.backward()
                opt_s.step()
                updates.append("student")
                if log:
                    log.append({"phase": "phase2", "k": k, "epoch": global_epoch,
                                "step": step, "lr": lr, **bd.to_dict(),
                                "updates": updates, "wall_time": time.time()})
            if ckpt_dir:
                cursor = {"phase": "phase2", "stage_index": stage_index,
                          "epoch_in_segment": epoch + 1, "k": k}
                save_checkpoint(_snapshot(config, cursor, student,
                                          {"disc": disc, "curr_disc": curr_disc},
                                          {"student": opt_s, "disc": opt_d, "curr_disc": opt_c},
                                          extras),
                                Path(ckpt_dir) / "latest.pt")
        epochs_done_before += stage_epochs
        if ckpt_dir:
            save_model(student, Path(ckpt_dir) / f"stage_k{int(k)}.pt")

    if teacher.parameter_digest() != teacher_digest:
        raise RuntimeError("teacher parameters changed during phase 2")
    return student, disc, curr_disc
