"""Run orchestration: sequence both phases, evaluate, and emit reports.

run_experiment is the single entry point behind the `train` CLI subcommand.
It expects the teacher checkpoint to exist already (see bootstrap_teacher /
the `bootstrap` subcommand), trains phase 1 then the phase-2 curriculum,
evaluates the final student, and writes the report, per-k curve data, and a
curve plot into the output directory.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional

from .attacks import AttackSpec, parse_ratio
from .checkpoint import load_checkpoint, verify_resume
from .config import ExperimentConfig
from .data import load_dataset
from .errors import CheckpointError
from .metrics import RobustnessReport, accuracy, alignment_statistics, emit_report, evaluate_model
from .models import load_classifier, load_teacher, save_model
from .trainer import StepLog, train_phase1, train_phase2


def _curve_attacks(config) -> tuple:
    """FGSM and PGD-20 specs used for per-stage curve rows (Fig-style columns)."""
    eps = config.eval_attacks[0].epsilon if config.eval_attacks else parse_ratio("8/255")
    fgsm_spec = AttackSpec(name="fgsm", epsilon=eps)
    pgd20_spec = AttackSpec(name="pgd", epsilon=eps, steps=20, step_size=eps / 4)
    return fgsm_spec, pgd20_spec


def _curve_row(model, dataset, k, fgsm_spec, pgd20_spec, batch_size) -> dict:
    return {
        "k": float(k),
        "clean": accuracy(model, dataset, None, batch_size),
        "fgsm": accuracy(model, dataset, fgsm_spec, batch_size),
        "pgd20": accuracy(model, dataset, pgd20_spec, batch_size),
    }


def run_experiment(config: ExperimentConfig, out_dir, resume: Optional[str] = None) -> RobustnessReport:
    """Execute both training phases per the config and report on the result.

    With an empty curriculum only phase 1 runs and the report is labeled
    "phase1". A resume checkpoint must carry the active config's hash and
    should point at the same output directory as the original run so stage
    checkpoints line up.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out / "checkpoints"
    log = StepLog(out / "train_log.jsonl")

    train_data = load_dataset(config, "train")
    test_data = load_dataset(config, "test")
    teacher = load_teacher(config.teacher_checkpoint,
                           expect_input_shape=config.image_shape,
                           expect_num_classes=config.num_classes)
    teacher_digest = teacher.parameter_digest()

    state = None
    if resume:
        state = load_checkpoint(resume)
        verify_resume(state, config)

    phase1_path = ckpt_dir / "phase1.pt"
    if state is not None and state.phase_cursor.get("phase") == "phase2":
        student = load_classifier(phase1_path)  # parameters are replaced from the checkpoint
        student, _, _ = train_phase2(config, train_data, teacher, student,
                                     log=log, ckpt_dir=ckpt_dir, resume=state)
    else:
        student, _ = train_phase1(config, train_data, teacher, log=log,
                                  ckpt_dir=ckpt_dir, resume=state)
        save_model(student, phase1_path)
        student, _, _ = train_phase2(config, train_data, teacher, student,
                                     log=log, ckpt_dir=ckpt_dir)
    save_model(student, ckpt_dir / "final.pt")

    if teacher.parameter_digest() != teacher_digest:
        raise RuntimeError("teacher parameters changed during the run")

    eval_data = test_data.subset(config.eval_subset_size)
    probe = test_data.subset(min(config.probe_size, len(test_data))).images

    curve_rows = None
    best_k = None
    k_context = "phase1" if len(config.curriculum) == 0 else "final"
    if len(config.curriculum) > 0:
        fgsm_spec, pgd20_spec = _curve_attacks(config)
        curve_rows = []
        anchor = load_classifier(phase1_path)
        curve_rows.append(_curve_row(anchor, eval_data, 100.0, fgsm_spec, pgd20_spec,
                                     config.batch_size))
        for k, _ in config.curriculum:
            stage_model = load_classifier(ckpt_dir / f"stage_k{int(k)}.pt")
            curve_rows.append(_curve_row(stage_model, eval_data, k, fgsm_spec, pgd20_spec,
                                         config.batch_size))
        best_k = max(curve_rows, key=lambda r: r["pgd20"])["k"]

    report = evaluate_model(student, eval_data, config.eval_attacks, probe=probe,
                            checkpoint_id=student.parameter_digest()[:16],
                            config_hash=config.config_hash, k_context=k_context,
                            batch_size=config.batch_size)
    report.best_k = best_k
    report.check_covers(config.eval_attacks)
    emit_report(report, out, curve_rows)
    if curve_rows:
        plot_curves(out / "curves.csv", out / "curves.png")
    return report


def plot_curves(csv_path, out_path) -> None:
    """Render per-k accuracy curves from a curves.csv file."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .metrics import load_curves

    rows = load_curves(csv_path)
    ks = [r["k"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    for column, style in (("clean", "o-"), ("fgsm", "s-"), ("pgd20", "^-")):
        ax.plot(ks, [r[column] for r in rows], style, label=column)
    ax.set_xlabel("top-k % of teacher saliency")
    ax.set_ylabel("accuracy %")
    ax.invert_xaxis()
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
