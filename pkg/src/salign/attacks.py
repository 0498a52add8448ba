"""L-infinity adversarial attacks: FGSM and multi-step PGD.

Both attacks operate on images in [0,1], perturb within an epsilon ball
measured in raw pixel units, and keep every iterate inside the valid image
range. Epsilons are carried as exact rationals ("8/255") so that configs and
reports round-trip without float drift.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional

import torch
import torch.nn.functional as F

from .errors import ConfigError, NumericFault

ATTACK_NAMES = ("fgsm", "pgd")


def parse_ratio(value) -> Fraction:
    """Parse an exact rational from "8/255", a number, or a Fraction."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, str):
        try:
            return Fraction(value)
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"cannot parse rational value {value!r}") from exc
    if isinstance(value, (int, float)):
        return Fraction(value).limit_denominator(10**9)
    raise ConfigError(f"cannot parse rational value {value!r}")


def format_ratio(value: Fraction) -> str:
    return str(value)


@dataclass(frozen=True)
class AttackSpec:
    """Description of one evaluation or inner-maximization attack.

    epsilon and step_size are exact rationals in pixel units. epsilon = 0 is
    allowed as a degenerate attack that returns the input unchanged (used to
    reduce adversarial bootstrapping to natural training).
    """

    name: str
    epsilon: Fraction
    steps: int = 1
    step_size: Optional[Fraction] = None
    random_start: bool = False
    norm: str = "linf"

    def __post_init__(self):
        if self.name not in ATTACK_NAMES:
            raise ConfigError(f"unknown attack name {self.name!r}; expected one of {ATTACK_NAMES}")
        if self.norm != "linf":
            raise ConfigError(f"unsupported attack norm {self.norm!r}; only 'linf' is implemented")
        eps = parse_ratio(self.epsilon)
        object.__setattr__(self, "epsilon", eps)
        if not (0 <= eps < 1):
            raise ConfigError(f"attack epsilon must lie in [0, 1) pixel units, got {eps}")
        if self.steps < 1:
            raise ConfigError(f"attack steps must be >= 1, got {self.steps}")
        if self.name == "fgsm" and self.steps != 1:
            raise ConfigError(f"fgsm is single-step; got steps={self.steps}")
        step = self.step_size
        if step is None:
            # FGSM moves the full epsilon in one step; PGD defaults to eps/4.
            step = eps if self.name == "fgsm" else eps / 4
        else:
            step = parse_ratio(step)
        object.__setattr__(self, "step_size", step)
        if eps > 0:
            if step <= 0:
                raise ConfigError(f"attack step_size must be positive, got {step}")
            if step > 2 * eps:
                raise ConfigError(
                    f"attack step_size {step} exceeds the sanity bound 2*epsilon = {2 * eps}"
                )

    @property
    def label(self) -> str:
        return "fgsm" if self.name == "fgsm" else f"pgd-{self.steps}"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "epsilon": format_ratio(self.epsilon),
            "steps": self.steps,
            "step_size": format_ratio(self.step_size),
            "random_start": self.random_start,
            "norm": self.norm,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "AttackSpec":
        if not isinstance(raw, dict) or "name" not in raw:
            raise ConfigError(f"attack spec must be a mapping with a 'name' key, got {raw!r}")
        known = {"name", "epsilon", "steps", "step_size", "random_start", "norm"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown attack spec keys {sorted(unknown)}")
        if "epsilon" not in raw:
            raise ConfigError("attack spec requires an 'epsilon' entry")
        kwargs = dict(raw)
        kwargs["epsilon"] = parse_ratio(kwargs["epsilon"])
        if kwargs.get("step_size") is not None:
            kwargs["step_size"] = parse_ratio(kwargs["step_size"])
        return cls(**kwargs)


def project_linf(delta: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Clamp a perturbation elementwise to [-epsilon, epsilon]. Idempotent."""
    eps = float(epsilon)
    return delta.clamp(-eps, eps)


def _grad_wrt_input(model, x, y, loss_fn) -> torch.Tensor:
    xg = x.detach().clone().requires_grad_(True)
    loss = loss_fn(_logits(model, xg), y)
    (grad,) = torch.autograd.grad(loss, xg)
    if not torch.isfinite(grad).all():
        bad = torch.nonzero(~torch.isfinite(grad.flatten(1)).all(dim=1)).flatten().tolist()
        raise NumericFault(f"non-finite attack gradient at batch indices {bad}")
    return grad


def _logits(model, x):
    logits = model.logits(x) if hasattr(model, "logits") else model(x)
    return logits


def fgsm(model, x: torch.Tensor, y: torch.Tensor, epsilon, loss_fn=None) -> torch.Tensor:
    """Single sign-gradient step of size epsilon, clamped to the image range.

    x_adv = clamp(x + eps * sign(grad_x CE(f(x), y)), 0, 1). sign(0) = 0, so
    exactly stationary pixels stay untouched.
    """
    eps = float(parse_ratio(epsilon))
    if eps == 0.0:
        return x.detach().clone()
    if loss_fn is None:
        loss_fn = F.cross_entropy
    grad = _grad_wrt_input(model, x, y, loss_fn)
    return (x.detach() + eps * grad.sign()).clamp(0.0, 1.0)


def pgd(
    model,
    x: torch.Tensor,
    y: torch.Tensor,
    spec: AttackSpec,
    loss_fn=None,
    generator: Optional[torch.Generator] = None,
    on_iterate: Optional[Callable[[int, torch.Tensor], None]] = None,
) -> torch.Tensor:
    """Iterated sign-gradient ascent with projection onto the epsilon ball.

    Each iteration takes a step of spec.step_size along sign(grad), projects
    the perturbation back to ||delta||_inf <= epsilon, and clamps x + delta
    to [0,1]. delta starts at zero, or uniform in [-eps, eps] when
    spec.random_start is set. on_iterate(step, delta) is invoked after every
    projection (used by the test suite to check ball containment).
    """
    if spec.name != "pgd":
        raise ConfigError(f"pgd() requires a pgd spec, got {spec.name!r}")
    if loss_fn is None:
        loss_fn = F.cross_entropy
    eps = float(spec.epsilon)
    step = float(spec.step_size)
    x0 = x.detach()
    if eps == 0.0:
        return x0.clone()

    if spec.random_start:
        if generator is not None:
            noise = torch.rand(x0.shape, generator=generator, dtype=x0.dtype, device=x0.device)
        else:
            noise = torch.rand_like(x0)
        delta = (noise * 2.0 - 1.0) * eps
        delta = (x0 + delta).clamp(0.0, 1.0) - x0
    else:
        delta = torch.zeros_like(x0)

    for it in range(spec.steps):
        grad = _grad_wrt_input(model, x0 + delta, y, loss_fn)
        delta = project_linf(delta + step * grad.sign(), eps)
        delta = (x0 + delta).clamp(0.0, 1.0) - x0
        if on_iterate is not None:
            on_iterate(it, delta)
    return x0 + delta


def apply_attack(model, x, y, spec: AttackSpec, generator=None) -> torch.Tensor:
    """Dispatch an AttackSpec to the matching attack implementation."""
    if spec.name == "fgsm":
        return fgsm(model, x, y, spec.epsilon)
    return pgd(model, x, y, spec, generator=generator)


def delta_image(x: torch.Tensor, x_adv: torch.Tensor, epsilon) -> torch.Tensor:
    """Perturbation magnitude image: |x_adv - x| scaled so epsilon maps to 1.

    Zero perturbation renders black, a full-epsilon perturbation renders
    white. Values are clamped to [0,1] in case the inputs were not produced
    by a projected attack.
    """
    if x.shape != x_adv.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_adv.shape)}")
    eps = float(parse_ratio(epsilon))
    if eps == 0.0:
        return torch.zeros_like(x)
    return ((x_adv - x).abs() / eps).clamp(0.0, 1.0)
