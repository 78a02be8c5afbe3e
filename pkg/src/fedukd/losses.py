"""Training objectives: soft-target distillation, hard-label criterion, blend.

The distillation term compares temperature-softened class distributions
per pixel and is scaled by T^2 so its gradient magnitude stays roughly
temperature-independent.  The criterion term is ordinary cross-entropy
against ground truth.  The combined objective is their convex blend.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .data import IGNORE_INDEX


class LossComponent(enum.Enum):
    DISTILLATION = "distillation"
    CRITERION = "criterion"
    COMBINED = "combined"


@dataclass(frozen=True)
class LossValue:
    """A finite, non-negative scalar tagged with which objective produced it."""

    value: float
    component: LossComponent

    def __post_init__(self) -> None:
        value = float(self.value)
        if not math.isfinite(value):
            raise ValueError(f"loss value must be finite, got {value}")
        if value < 0.0:
            raise ValueError(f"loss value must be non-negative, got {value}")
        object.__setattr__(self, "value", value)
        if not isinstance(self.component, LossComponent):
            raise TypeError(f"component must be a LossComponent, got {self.component!r}")


@dataclass(frozen=True)
class DistillationConfig:
    """Temperature T and blend weight alpha for the combined objective."""

    temperature: float = 5.0
    alpha: float = 0.3

    def __post_init__(self) -> None:
        if not (math.isfinite(self.temperature) and self.temperature > 0.0):
            raise ValueError(f"temperature must be positive and finite, got {self.temperature}")
        if not (math.isfinite(self.alpha) and 0.0 <= self.alpha <= 1.0):
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


def pixelwise_distillation_loss(
    student_logits: torch.Tensor, teacher_logits: torch.Tensor, temperature: float
) -> torch.Tensor:
    """T^2-scaled mean per-pixel KL(teacher_T || student_T).

    Both logit maps are softened by ``temperature`` before the softmax.
    The teacher side is detached: gradients flow only into the student.
    Returns a 0-dim tensor, >= 0, exactly 0 for identical logits.
    """
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(
            f"student logits {tuple(student_logits.shape)} != teacher logits "
            f"{tuple(teacher_logits.shape)}"
        )
    if student_logits.ndim != 4:
        raise ValueError(
            f"expected (batch, classes, height, width) logits, got {tuple(student_logits.shape)}"
        )
    if not temperature > 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    log_p = F.log_softmax(teacher_logits.detach() / temperature, dim=1)
    log_q = F.log_softmax(student_logits / temperature, dim=1)
    # KL per pixel; clamping only guards against -1e-17 style rounding.
    kl = (log_p.exp() * (log_p - log_q)).sum(dim=1).clamp_min(0.0)
    return kl.mean() * (temperature * temperature)


def criterion_loss(student_logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel cross-entropy against ground truth.

    Pixels labelled ``IGNORE_INDEX`` are excluded from the mean; labels
    outside [0, num_classes) are rejected.  Returns a 0-dim tensor.
    """
    if student_logits.ndim != 4:
        raise ValueError(
            f"expected (batch, classes, height, width) logits, got {tuple(student_logits.shape)}"
        )
    if mask.shape != (student_logits.shape[0],) + student_logits.shape[2:]:
        raise ValueError(
            f"mask shape {tuple(mask.shape)} does not match logits {tuple(student_logits.shape)}"
        )
    target = mask.long()
    num_classes = student_logits.shape[1]
    valid = target != IGNORE_INDEX
    if not bool(valid.any()):
        raise ValueError("every pixel is ignored; criterion loss is undefined")
    out_of_range = valid & ((target < 0) | (target >= num_classes))
    if bool(out_of_range.any()):
        bad = int(target[out_of_range][0])
        raise ValueError(f"mask value {bad} outside [0, {num_classes}) and not the ignore sentinel")
    return F.cross_entropy(student_logits, target, ignore_index=IGNORE_INDEX)


def combined_loss(
    distillation: torch.Tensor | float,
    criterion: torch.Tensor | float,
    alpha: float,
) -> torch.Tensor | float:
    """``alpha * distillation + (1 - alpha) * criterion``.

    At the boundaries the surviving term is returned as-is, so the
    zero-weighted term contributes nothing to the value or, for
    tensors, to the autograd graph.
    """
    if not (math.isfinite(alpha) and 0.0 <= alpha <= 1.0):
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    for label, term in (("distillation", distillation), ("criterion", criterion)):
        if isinstance(term, torch.Tensor):
            if not bool(torch.isfinite(term).all()):
                raise ValueError(f"{label} term is not finite")
        elif not math.isfinite(term):
            raise ValueError(f"{label} term is not finite, got {term}")
    if alpha == 0.0:
        return criterion
    if alpha == 1.0:
        return distillation
    return alpha * distillation + (1.0 - alpha) * criterion
