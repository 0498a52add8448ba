"""Training objectives for both phases.

Conventions: squared-L2 saliency distances are summed over pixels and
channels, then averaged over the batch; discriminator log terms are averaged
over the batch. Discriminator outputs are clamped to [EPS_CLIP, 1-EPS_CLIP]
before logs, since the losses are undefined at exactly 0 or 1.

The student minimizes

    total = ce + beta * robust + gamma * diff            (alignment phase)
    total = ce + beta * robust + gamma * diff
               + beta * curr_robust + gamma * curr_diff  (refinement phase)

while each discriminator ascends its robust term on the same batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F

from .errors import NumericFault
from .saliency import (SaliencyMap, normalize_for_disc,
                       saliency_both_with_logits, saliency_true_class,
                       saliency_true_class_with_logits, top_k_mask)

EPS_CLIP = 1e-6


@dataclass
class LossBreakdown:
    """Per-batch loss components; total is the scalar used for the update."""

    ce: float
    robust: float
    diff: float
    total: float
    beta: float
    gamma: float
    curr_robust: Optional[float] = None
    curr_diff: Optional[float] = None
    total_tensor: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)

    def recompose(self) -> float:
        """Recompute total from the components (composition identity)."""
        total = self.ce + self.beta * self.robust + self.gamma * self.diff
        if self.curr_robust is not None:
            total += self.beta * self.curr_robust
        if self.curr_diff is not None:
            total += self.gamma * self.curr_diff
        return total

    def is_finite(self) -> bool:
        vals = [self.ce, self.robust, self.diff, self.total]
        if self.curr_robust is not None:
            vals += [self.curr_robust, self.curr_diff]
        return all(v == v and abs(v) != float("inf") for v in vals)

    def to_dict(self) -> dict:
        return {
            "ce": self.ce, "robust": self.robust, "diff": self.diff,
            "curr_robust": self.curr_robust, "curr_diff": self.curr_diff,
            "total": self.total, "beta": self.beta, "gamma": self.gamma,
        }


def ce_loss(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy, computed through a stabilized log-softmax."""
    return F.cross_entropy(logits, y)


def _clamped_log(d: torch.Tensor) -> torch.Tensor:
    return torch.log(d.clamp(EPS_CLIP, 1.0 - EPS_CLIP))


def _clamped_log1m(d: torch.Tensor) -> torch.Tensor:
    return torch.log1p(-d.clamp(EPS_CLIP, 1.0 - EPS_CLIP))


def robust_loss(d_teacher: torch.Tensor, d_student: torch.Tensor) -> torch.Tensor:
    """mean log D(teacher maps) + mean log(1 - D(student maps)).

    The discriminator ascends this; the student descends it through its
    effect on d_student only (teacher maps carry no student gradient).
    """
    return _clamped_log(d_teacher).mean() + _clamped_log1m(d_student).mean()


def diff_loss(j_s, j_t) -> torch.Tensor:
    """Mean over the batch of the squared L2 distance between saliency maps."""
    vs = j_s.values if isinstance(j_s, SaliencyMap) else j_s
    vt = j_t.values if isinstance(j_t, SaliencyMap) else j_t
    if vs.shape != vt.shape:
        raise ValueError(f"saliency shape mismatch: {tuple(vs.shape)} vs {tuple(vt.shape)}")
    return (vs - vt).pow(2).flatten(1).sum(dim=1).mean()


def curr_robust_loss(d_teacher_k: torch.Tensor, d_student_ce: torch.Tensor) -> torch.Tensor:
    """Refinement-phase discriminator term on (masked teacher, student CE) maps."""
    return robust_loss(d_teacher_k, d_student_ce)


def curr_diff_loss(j_s_ce, j_t_k) -> torch.Tensor:
    """Refinement-phase L2 term between the student CE map and the masked teacher map."""
    return diff_loss(j_s_ce, j_t_k)


def _generator_robust(d_teacher: torch.Tensor, d_student: torch.Tensor,
                      nonsaturating: bool) -> torch.Tensor:
    """Robust term as seen by the student.

    Default is the saturating form log D(J_T) + log(1 - D(J_S)) exactly as
    the discriminator sees it. The non-saturating variant swaps the student
    term for -log D(J_S) (teacher term kept for bookkeeping consistency).
    """
    if nonsaturating:
        return _clamped_log(d_teacher).mean() - _clamped_log(d_student).mean()
    return robust_loss(d_teacher, d_student)


def _breakdown(ce, robust, diff, beta, gamma, curr_robust=None, curr_diff=None) -> LossBreakdown:
    total = ce + beta * robust + gamma * diff
    if curr_robust is not None:
        total = total + beta * curr_robust
    if curr_diff is not None:
        total = total + gamma * curr_diff
    bd = LossBreakdown(
        ce=float(ce), robust=float(robust), diff=float(diff),
        curr_robust=None if curr_robust is None else float(curr_robust),
        curr_diff=None if curr_diff is None else float(curr_diff),
        total=float(total), beta=float(beta), gamma=float(gamma),
        total_tensor=total,
    )
    if not bd.is_finite():
        raise NumericFault(f"non-finite loss components: {bd.to_dict()}")
    return bd


def phase1_terms(j_t: SaliencyMap, j_s: SaliencyMap, logits: torch.Tensor,
                 y: torch.Tensor, disc, beta: float, gamma: float,
                 nonsaturating: bool = False) -> LossBreakdown:
    """Alignment objective from precomputed maps (trainer fast path)."""
    jtn = normalize_for_disc(j_t.detach())
    jsn = normalize_for_disc(j_s)
    robust = _generator_robust(disc.score(jtn.values), disc.score(jsn.values), nonsaturating)
    diff = diff_loss(j_s, j_t.detach())
    ce = ce_loss(logits, y)
    return _breakdown(ce, robust, diff, beta, gamma)


def phase1_objective(x, y, student, teacher, disc, beta: float, gamma: float,
                     nonsaturating: bool = False) -> LossBreakdown:
    """Alignment-phase objective: ce + beta*robust + gamma*diff.

    The student saliency keeps a second-order graph so the total is
    differentiable through to the student parameters; the teacher map is
    detached.
    """
    j_t = saliency_true_class(teacher, x, y, source="teacher_tci")
    j_s, logits = saliency_true_class_with_logits(student, x, y, create_graph=True,
                                                  source="student_tci")
    return phase1_terms(j_t, j_s, logits, y, disc, beta, gamma, nonsaturating)


def phase2_terms(j_t: SaliencyMap, j_t_k: SaliencyMap, j_s: Optional[SaliencyMap],
                 j_s_ce: SaliencyMap, logits: torch.Tensor, y: torch.Tensor,
                 disc, curr_disc, beta: float, gamma: float,
                 keep_alignment: bool = True, nonsaturating: bool = False) -> LossBreakdown:
    """Refinement objective from precomputed maps (trainer fast path).

    With keep_alignment=False the alignment pair is dropped from the total
    (the ablation arm); its components are reported as 0.
    """
    ce = ce_loss(logits, y)
    if keep_alignment:
        jtn = normalize_for_disc(j_t.detach())
        jsn = normalize_for_disc(j_s)
        robust = _generator_robust(disc.score(jtn.values), disc.score(jsn.values), nonsaturating)
        diff = diff_loss(j_s, j_t.detach())
    else:
        zero = logits.new_zeros(())
        robust, diff = zero, zero
    jtkn = normalize_for_disc(j_t_k.detach())
    jscen = normalize_for_disc(j_s_ce)
    curr_robust = _generator_robust(curr_disc.score(jtkn.values), curr_disc.score(jscen.values),
                                    nonsaturating)
    curr_diff = curr_diff_loss(j_s_ce, j_t_k.detach())
    return _breakdown(ce, robust, diff, beta, gamma, curr_robust, curr_diff)


def phase2_objective(x, y, student, teacher, disc, curr_disc, k: float,
                     beta: float, gamma: float, keep_alignment: bool = True,
                     nonsaturating: bool = False) -> LossBreakdown:
    """Refinement-phase objective with the top-k masked teacher target."""
    j_t = saliency_true_class(teacher, x, y, source="teacher_tci")
    j_t_k = top_k_mask(j_t.detach(), k)
    j_s, j_s_ce, logits = saliency_both_with_logits(student, x, y, create_graph=True)
    return phase2_terms(j_t, j_t_k, j_s, j_s_ce, logits, y, disc, curr_disc,
                        beta, gamma, keep_alignment, nonsaturating)


def discriminator_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """Loss minimized by a discriminator optimizer: the negated robust term."""
    return -robust_loss(d_real, d_fake)
