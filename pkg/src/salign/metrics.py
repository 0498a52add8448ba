"""Evaluation and diagnostics: accuracy under attack, alignment statistics,
and report emission/parsing.

Alignment quantities follow the geometric picture used throughout: the
alignment of an input with its predicted-class saliency, the binarized
variant on the gradient of the top-two logit gap, and the linearized
robustness (minimal margin over gap-gradient norm), a first-order estimate
of the distance to the decision boundary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import torch

from .attacks import AttackSpec, apply_attack
from .errors import ConfigError

DEGENERATE_NORM = 1e-12


def _forward(model, x):
    return model.logits(x) if hasattr(model, "logits") else model(x)


def _eval_mode(model):
    net = getattr(model, "net", model)
    was_training = net.training
    net.eval()
    return net, was_training


def accuracy(model, dataset, attack: Optional[AttackSpec] = None,
             batch_size: int = 256, generator: Optional[torch.Generator] = None) -> float:
    """Percentage of examples whose argmax logit matches the label.

    When an attack spec is given, each batch is perturbed before scoring.
    Deterministic whenever the attack has random_start=False.
    """
    net, was_training = _eval_mode(model)
    correct, total = 0, 0
    try:
        for x, y in dataset.sequential_batches(batch_size):
            if attack is not None:
                x = apply_attack(model, x, y, attack, generator=generator)
            with torch.no_grad():
                preds = _forward(model, x).argmax(dim=1)
            correct += int((preds == y).sum())
            total += int(y.shape[0])
    finally:
        net.train(was_training)
    return 100.0 * correct / max(total, 1)


# ---------------------------------------------------------------------------
# Alignment quantities
# ---------------------------------------------------------------------------

def class_input_gradients(model, x: torch.Tensor) -> tuple:
    """Per-class input gradients: returns (logits [n,C], grads [n,C,c,h,w])."""
    xg = x.detach().clone().requires_grad_(True)
    logits = _forward(model, xg)
    n, num_classes = logits.shape
    grads = []
    for cls in range(num_classes):
        (g,) = torch.autograd.grad(logits[:, cls].sum(), xg, retain_graph=cls < num_classes - 1)
        grads.append(g)
    return logits.detach(), torch.stack(grads, dim=1)


def alignment(x: torch.Tensor, model) -> tuple:
    """Alignment |<x, grad Psi^F(x)>| / ||grad Psi^F(x)|| per example.

    Uses the PREDICTED class. Returns (alpha [n], valid [n]); examples with
    a degenerate gradient norm are flagged invalid and must be excluded
    from aggregates.
    """
    xg = x.detach().clone().requires_grad_(True)
    logits = _forward(model, xg)
    pred = logits.argmax(dim=1)
    score = logits.gather(1, pred.view(-1, 1)).sum()
    (grad,) = torch.autograd.grad(score, xg)
    flat_g = grad.flatten(1)
    flat_x = x.detach().flatten(1)
    norms = flat_g.norm(dim=1)
    valid = norms > DEGENERATE_NORM
    alpha = (flat_x * flat_g).sum(dim=1).abs() / norms.clamp_min(DEGENERATE_NORM)
    return alpha, valid


def linearized_robustness(x: torch.Tensor, model) -> dict:
    """First-order robustness estimate and its minimizing competitor class.

    rho = min over j != i* of (Psi^{i*} - Psi^j) / ||grad Psi^{i*} - grad Psi^j||,
    where i* is the predicted class. Also exposes the gap gradient
    g = grad(Psi^{i*} - Psi^{j*}) and its norm for decomposition reporting.
    Entries with all gap-gradient norms degenerate are flagged invalid.
    """
    logits, grads = class_input_gradients(model, x)
    n, num_classes = logits.shape
    if num_classes < 2:
        raise ConfigError("linearized robustness needs at least two classes")
    i_star = logits.argmax(dim=1)
    arange = torch.arange(n)
    margins = logits.gather(1, i_star.view(-1, 1)) - logits  # [n, C], zero at i*
    top_grad = grads[arange, i_star]
    gap = top_grad.unsqueeze(1) - grads
    gap_norms = gap.flatten(2).norm(dim=2)
    ratios = margins / gap_norms.clamp_min(DEGENERATE_NORM)
    # exclude the predicted class itself and degenerate denominators
    ratios[arange, i_star] = float("inf")
    ratios[gap_norms <= DEGENERATE_NORM] = float("inf")
    rho, j_star = ratios.min(dim=1)
    valid = torch.isfinite(rho)
    g = gap[arange, j_star]
    g_norm = gap_norms[arange, j_star]
    return {"rho": rho, "j_star": j_star, "i_star": i_star, "g": g,
            "g_norm": g_norm, "valid": valid, "logits": logits}


def binarized_alignment(x: torch.Tensor, model) -> tuple:
    """Alignment on the top-two logit gap gradient: |<x, g>| / ||g||.

    The competitor j* is the minimizer picked by linearized_robustness.
    Returns (alpha_plus [n], valid [n]).
    """
    lin = linearized_robustness(x, model)
    flat_x = x.detach().flatten(1)
    flat_g = lin["g"].flatten(1)
    alpha_plus = (flat_x * flat_g).sum(dim=1).abs() / lin["g_norm"].clamp_min(DEGENERATE_NORM)
    return alpha_plus, lin["valid"]


def alignment_statistics(model, probe: torch.Tensor, batch_size: int = 64) -> dict:
    """Mean alignment, binarized alignment, and linearized robustness over a probe set."""
    net, was_training = _eval_mode(model)
    alphas, alpha_pluses, rhos, excluded = [], [], [], 0
    try:
        for start in range(0, probe.shape[0], batch_size):
            x = probe[start:start + batch_size]
            a, va = alignment(x, model)
            lin = linearized_robustness(x, model)
            ap, vp = binarized_alignment(x, model)
            ok = va & vp & lin["valid"]
            excluded += int((~ok).sum())
            alphas.append(a[ok])
            alpha_pluses.append(ap[ok])
            rhos.append(lin["rho"][ok])
    finally:
        net.train(was_training)
    alphas = torch.cat(alphas) if alphas else torch.zeros(0)
    alpha_pluses = torch.cat(alpha_pluses) if alpha_pluses else torch.zeros(0)
    rhos = torch.cat(rhos) if rhos else torch.zeros(0)
    n = int(alphas.shape[0])
    return {
        "alpha_mean": float(alphas.mean()) if n else None,
        "alpha_plus_mean": float(alpha_pluses.mean()) if n else None,
        "rho_mean": float(rhos.mean()) if n else None,
        "n_probes": n,
        "n_excluded": excluded,
    }


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

REPORT_SCHEMA_VERSION = 1


@dataclass
class RobustnessReport:
    """Clean/adversarial accuracy grid plus alignment statistics for one checkpoint."""

    checkpoint_id: str
    config_hash: str
    k_context: str              # "final", "phase1", or "k=<value>"
    clean_acc: float
    rows: tuple                 # tuple of (AttackSpec, accuracy)
    alignment_stats: dict
    best_k: Optional[float] = None

    def __post_init__(self):
        for acc in [self.clean_acc] + [a for _, a in self.rows]:
            if not (0.0 <= acc <= 100.0):
                raise ValueError(f"accuracy {acc} outside [0, 100]")

    def check_covers(self, eval_attacks: Sequence[AttackSpec]) -> None:
        got = [spec.to_dict() for spec, _ in self.rows]
        expected = [spec.to_dict() for spec in eval_attacks]
        if got != expected:
            raise ValueError(f"report rows {got} do not cover eval attacks {expected}")

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "checkpoint_id": self.checkpoint_id,
            "config_hash": self.config_hash,
            "k_context": self.k_context,
            "clean_acc": self.clean_acc,
            "rows": [{**spec.to_dict(), "accuracy": acc} for spec, acc in self.rows],
            "alignment_stats": self.alignment_stats,
            "summary": {"config_hash": self.config_hash, "best_k": self.best_k},
        }


def evaluate_model(model, dataset, eval_attacks: Sequence[AttackSpec],
                   probe: torch.Tensor = None, checkpoint_id: str = "",
                   config_hash: str = "", k_context: str = "final",
                   batch_size: int = 256) -> RobustnessReport:
    """Clean accuracy, one row per attack spec, and alignment statistics."""
    clean = accuracy(model, dataset, None, batch_size)
    rows = tuple((spec, accuracy(model, dataset, spec, batch_size)) for spec in eval_attacks)
    stats = alignment_statistics(model, probe) if probe is not None else {}
    return RobustnessReport(checkpoint_id=checkpoint_id, config_hash=config_hash,
                            k_context=k_context, clean_acc=clean, rows=rows,
                            alignment_stats=stats)


def format_report_text(report: RobustnessReport) -> str:
    lines = []
    lines.append(f"{'attack':<12} {'epsilon':>8} {'steps':>6} {'accuracy%':>10}")
    lines.append("-" * 40)
    lines.append(f"{'clean':<12} {'-':>8} {'-':>6} {report.clean_acc:>10.2f}")
    for spec, acc in report.rows:
        lines.append(f"{spec.label:<12} {str(spec.epsilon):>8} {spec.steps:>6} {acc:>10.2f}")
    lines.append("")
    lines.append(f"checkpoint: {report.checkpoint_id}")
    lines.append(f"config_hash: {report.config_hash}")
    lines.append(f"k_context: {report.k_context}")
    lines.append(f"best_k: {report.best_k}")
    stats = report.alignment_stats
    if stats:
        lines.append(
            "alignment: alpha={a} alpha_plus={p} rho={r} (n={n}, excluded={e})".format(
                a=_fmt(stats.get("alpha_mean")), p=_fmt(stats.get("alpha_plus_mean")),
                r=_fmt(stats.get("rho_mean")), n=stats.get("n_probes"),
                e=stats.get("n_excluded")))
    return "\n".join(lines) + "\n"


def _fmt(v):
    return "nan" if v is None else f"{v:.4f}"


def emit_report(report: RobustnessReport, out_dir, curve_rows: Sequence[dict] = None) -> dict:
    """Write report.json, report.txt, and (when per-stage rows exist) curves.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / "report.json", "txt": out / "report.txt"}
    paths["json"].write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    paths["txt"].write_text(format_report_text(report))
    if curve_rows:
        csv = "k,clean,fgsm,pgd20\n" + "".join(
            f"{row['k']:g},{row['clean']:.4f},{row['fgsm']:.4f},{row['pgd20']:.4f}\n"
            for row in curve_rows
        )
        paths["curves"] = out / "curves.csv"
        paths["curves"].write_text(csv)
    return paths


def load_report(path) -> RobustnessReport:
    """Inverse of emit_report for the JSON file."""
    raw = json.loads(Path(path).read_text())
    if raw.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise ValueError(f"unsupported report schema {raw.get('schema_version')!r}")
    rows = []
    for row in raw["rows"]:
        row = dict(row)
        acc = row.pop("accuracy")
        rows.append((AttackSpec.from_dict(row), acc))
    return RobustnessReport(
        checkpoint_id=raw["checkpoint_id"],
        config_hash=raw["config_hash"],
        k_context=raw["k_context"],
        clean_acc=raw["clean_acc"],
        rows=tuple(rows),
        alignment_stats=raw.get("alignment_stats", {}),
        best_k=raw.get("summary", {}).get("best_k"),
    )


def load_curves(path) -> list:
    """Parse a curves.csv back into row dicts."""
    lines = Path(path).read_text().strip().splitlines()
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        vals = line.split(",")
        rows.append({key: float(v) for key, v in zip(header, vals)})
    return rows
