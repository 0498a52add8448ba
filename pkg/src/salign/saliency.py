"""Input-gradient saliency maps and top-k spatial masking.

A saliency map is the raw signed gradient of a class score (or of the
cross-entropy loss) with respect to the input pixels; magnitudes are used
only for ranking inside top_k_mask. Maps are batched NCHW tensors wrapped
with provenance metadata.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NumericFault

SOURCES = ("teacher_tci", "student_tci", "student_ce")


@dataclass
class SaliencyMap:
    """Batch of per-pixel gradient fields with provenance.

    values: [n, c, h, w], units d(score)/d(pixel). class_index holds the
    labels the gradients were taken at (None for loss gradients applied
    uniformly). k_applied records top-k masking, at most once.
    """

    values: torch.Tensor
    source: str
    class_index: Optional[torch.Tensor] = None
    k_applied: Optional[float] = None

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown saliency source {self.source!r}")

    @property
    def shape(self):
        return tuple(self.values.shape)

    def detach(self) -> "SaliencyMap":
        return replace(self, values=self.values.detach())


def _values(maps) -> torch.Tensor:
    return maps.values if isinstance(maps, SaliencyMap) else maps


def _forward(model, x):
    return model.logits(x) if hasattr(model, "logits") else model(x)


def _check_finite(grad: torch.Tensor, what: str):
    finite = torch.isfinite(grad.flatten(1)).all(dim=1)
    if not bool(finite.all()):
        bad = torch.nonzero(~finite).flatten().tolist()
        raise NumericFault(f"non-finite {what} at batch indices {bad}")


def _infer_source(model) -> str:
    return "teacher_tci" if getattr(model, "frozen", False) else "student_tci"


def saliency_true_class_with_logits(model, x, y, *, create_graph=False, source=None):
    """True-class saliency plus the logits of the same forward pass."""
    xg = x.detach().clone().requires_grad_(True)
    logits = _forward(model, xg)
    score = logits.gather(1, y.view(-1, 1)).sum()
    (grad,) = torch.autograd.grad(score, xg, create_graph=create_graph)
    _check_finite(grad, "true-class saliency gradient")
    src = source or _infer_source(model)
    return SaliencyMap(grad, src, class_index=y.detach().clone()), logits


def saliency_true_class(model, x: torch.Tensor, y: torch.Tensor, *,
                        create_graph: bool = False, source: str = None) -> SaliencyMap:
    """Gradient of the true-class logit w.r.t. each input pixel.

    With create_graph=True the returned values stay differentiable through
    the model parameters (the second-order path used to train the student);
    frozen teachers are queried with create_graph=False.
    """
    maps, _ = saliency_true_class_with_logits(model, x, y, create_graph=create_graph, source=source)
    return maps


def saliency_ce_with_logits(model, x, y, *, create_graph=False):
    """Cross-entropy saliency plus the logits of the same forward pass."""
    xg = x.detach().clone().requires_grad_(True)
    logits = _forward(model, xg)
    loss = F.cross_entropy(logits, y, reduction="none").sum()
    (grad,) = torch.autograd.grad(loss, xg, create_graph=create_graph)
    _check_finite(grad, "cross-entropy saliency gradient")
    return SaliencyMap(grad, "student_ce", class_index=y.detach().clone()), logits


def saliency_ce(model, x: torch.Tensor, y: torch.Tensor, *,
                create_graph: bool = False) -> SaliencyMap:
    """Per-image gradient of the cross-entropy loss w.r.t. input pixels."""
    maps, _ = saliency_ce_with_logits(model, x, y, create_graph=create_graph)
    return maps


def saliency_both_with_logits(model, x, y, *, create_graph=False):
    """True-class and cross-entropy saliencies from one forward pass.

    Used by the refinement phase, which needs both student maps per batch.
    """
    xg = x.detach().clone().requires_grad_(True)
    logits = _forward(model, xg)
    score = logits.gather(1, y.view(-1, 1)).sum()
    ce_sum = F.cross_entropy(logits, y, reduction="none").sum()
    (grad_tci,) = torch.autograd.grad(score, xg, create_graph=create_graph, retain_graph=True)
    (grad_ce,) = torch.autograd.grad(ce_sum, xg, create_graph=create_graph)
    _check_finite(grad_tci, "true-class saliency gradient")
    _check_finite(grad_ce, "cross-entropy saliency gradient")
    labels = y.detach().clone()
    j_tci = SaliencyMap(grad_tci, _infer_source(model), class_index=labels)
    j_ce = SaliencyMap(grad_ce, "student_ce", class_index=labels)
    return j_tci, j_ce, logits


def top_k_cardinality(k: float, h: int, w: int) -> int:
    """Number of retained spatial locations: round(k/100 * h * w), half-up."""
    return int(math.floor(k / 100.0 * h * w + 0.5))


def top_k_mask(s: SaliencyMap, k: float) -> SaliencyMap:
    """Keep the k% most salient spatial locations, zero the rest.

    Locations are ranked by the channel-summed absolute value; all channels
    of a location are kept or zeroed together, signs preserved. Ties break
    deterministically toward the lower row-major index, which makes supports
    nested across k.
    """
    if not (0 < k <= 100):
        raise ValueError(f"k must lie in (0, 100], got {k}")
    if s.k_applied is not None:
        raise ValueError(f"saliency map already masked at k={s.k_applied}; double masking is forbidden")
    v = s.values
    n, c, h, w = v.shape
    keep = top_k_cardinality(k, h, w)
    score = v.abs().sum(dim=1).reshape(n, h * w)
    order = torch.argsort(score, dim=1, descending=True, stable=True)
    mask = torch.zeros_like(score)
    if keep > 0:
        mask.scatter_(1, order[:, :keep], 1.0)
    mask = mask.reshape(n, 1, h, w)
    return SaliencyMap(v * mask, s.source, class_index=s.class_index, k_applied=float(k))


def normalize_for_disc(s: SaliencyMap) -> SaliencyMap:
    """Per-image affine rescale to zero mean and unit max-absolute-value.

    Constant maps (including all-zero maps) come out as zeros; they carry no
    signal for a discriminator either way. Differentiable, so the generator
    signal flows through.
    """
    v = _values(s)
    n = v.shape[0]
    centered = v - v.mean(dim=(1, 2, 3), keepdim=True)
    scale = centered.abs().reshape(n, -1).max(dim=1).values.reshape(n, 1, 1, 1)
    out = centered / scale.clamp_min(1e-30)
    if isinstance(s, SaliencyMap):
        return replace(s, values=out)
    return out


def render_signed_map(values: torch.Tensor) -> np.ndarray:
    """Render one signed map [c,h,w] to uint8 [h,w,c]: 0 -> mid-gray, +-max -> white/black."""
    v = values.detach().cpu().float()
    peak = v.abs().max()
    if peak > 0:
        v = v / peak
    arr = ((v + 1.0) * 127.5).clamp(0, 255).round().to(torch.uint8)
    return arr.permute(1, 2, 0).numpy()


def render_image(values: torch.Tensor) -> np.ndarray:
    """Render one [0,1] image [c,h,w] to uint8 [h,w,c] via a linear map to [0,255]."""
    arr = (values.detach().cpu().float().clamp(0, 1) * 255.0).round().to(torch.uint8)
    return arr.permute(1, 2, 0).numpy()


def save_png(array: np.ndarray, path) -> None:
    """Write an [h,w,c] uint8 array as a lossless PNG."""
    from PIL import Image

    if array.shape[2] == 1:
        array = array[:, :, 0]
    Image.fromarray(array).save(path, format="PNG")
