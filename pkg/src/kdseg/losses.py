"""Scalar losses of the distillation objective.

All functions take tensors laid out as ``[B, C, H, W]`` for class scores or
probabilities and ``[B, H, W]`` for binary targets. Channel 1 is the
foreground class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

DICE_SMOOTH = 1e-5
KL_CLAMP = 1e-8
FOREGROUND = 1


@dataclass
class LossWeights:
    """Coefficients of the segmentation and distillation terms.

    ``kl_reverse`` swaps the KL arguments to the conventional
    teacher-first order; ``kl_scale_t2`` multiplies the KL term by the
    squared temperature. Both are off by default.
    """

    alpha1: float = 0.2
    alpha2: float = 0.3
    alpha: float = 0.1
    beta: float = 0.1
    temperature: float = 2.0
    kl_reverse: bool = False
    kl_scale_t2: bool = False

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "alpha", "beta"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be a finite nonnegative number, got {value}")
        if not math.isfinite(self.temperature) or self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


def _check_logits(logits: torch.Tensor) -> None:
    if logits.dim() != 4:
        raise ValueError(f"expected [B, C, H, W] logits, got shape {tuple(logits.shape)}")
    if logits.shape[1] < 2:
        raise ValueError("at least two classes are required")
    if not torch.isfinite(logits).all():
        raise ValueError("logits contain non-finite values")


def _check_target(probs: torch.Tensor, target: torch.Tensor) -> None:
    if probs.dim() != 4 or target.dim() != 3:
        raise ValueError(
            f"expected [B, C, H, W] probabilities and [B, H, W] target, "
            f"got {tuple(probs.shape)} and {tuple(target.shape)}"
        )
    if probs.shape[0] != target.shape[0] or probs.shape[2:] != target.shape[1:]:
        raise ValueError(
            f"shape mismatch: probabilities {tuple(probs.shape)} vs target {tuple(target.shape)}"
        )


def check_distribution(probs: torch.Tensor, atol: float | None = None) -> None:
    """Raise ``ValueError`` unless ``probs`` is a per-pixel distribution over dim 1."""
    if probs.dim() != 4:
        raise ValueError(f"expected [B, C, H, W] probabilities, got shape {tuple(probs.shape)}")
    if atol is None:
        atol = 1e-6 if probs.dtype == torch.float64 else 1e-4
    if not torch.isfinite(probs).all():
        raise ValueError("probabilities contain non-finite values")
    if (probs < -atol).any() or (probs > 1 + atol).any():
        raise ValueError("probabilities must lie in [0, 1]")
    sums = probs.sum(dim=1)
    if (sums - 1).abs().max() > atol:
        raise ValueError("probabilities do not sum to 1 over the class dimension")


def softened_softmax(logits: torch.Tensor, temperature: float) -> torch.Tensor:
    """Softmax of ``logits / temperature`` over the class dimension."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    _check_logits(logits)
    scaled = logits / temperature
    scaled = scaled - scaled.amax(dim=1, keepdim=True)
    exp = scaled.exp()
    return exp / exp.sum(dim=1, keepdim=True)


def kl_distillation_loss(
    student_logits: torch.Tensor,
    teacher_probs: torch.Tensor,
    temperature: float,
    reverse: bool = False,
    scale_t2: bool = False,
) -> torch.Tensor:
    """Pixel-averaged KL divergence between softened student and teacher.

    The default order is ``KL(student || teacher)``; ``reverse=True`` gives
    ``KL(teacher || student)``. The teacher side is clamped at ``1e-8``
    inside the logarithm.
    """
    if student_logits.shape != teacher_probs.shape:
        raise ValueError(
            f"shape mismatch: student {tuple(student_logits.shape)} "
            f"vs teacher {tuple(teacher_probs.shape)}"
        )
    _check_logits(student_logits)
    check_distribution(teacher_probs)
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")

    scaled = student_logits / temperature
    log_ps = scaled - torch.logsumexp(scaled, dim=1, keepdim=True)
    teacher = teacher_probs.to(log_ps.dtype)
    log_pt = teacher.clamp_min(KL_CLAMP).log()
    if reverse:
        pixel_kl = (teacher * (log_pt - log_ps)).sum(dim=1)
    else:
        pixel_kl = (log_ps.exp() * (log_ps - log_pt)).sum(dim=1)
    loss = pixel_kl.mean()
    if scale_t2:
        loss = loss * temperature**2
    return loss


def soft_dice_loss(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Batch-averaged soft Dice loss on the foreground channel."""
    _check_target(probs, target)
    fg = probs[:, FOREGROUND].flatten(1)
    y = target.flatten(1).to(fg.dtype)
    intersection = (fg * y).sum(dim=1)
    denom = fg.sum(dim=1) + y.sum(dim=1)
    dice = (2 * intersection + DICE_SMOOTH) / (denom + DICE_SMOOTH)
    return (1 - dice).mean()


def jaccard_increments(sorted_labels: torch.Tensor) -> torch.Tensor:
    """Increments of the Jaccard loss along pixels sorted by decreasing error.

    Element ``k`` is the change in the Jaccard loss when the k-th pixel is
    added to the error set.
    """
    labels = sorted_labels.flatten()
    if labels.numel() == 0:
        raise ValueError("jaccard_increments needs at least one pixel")
    labels = labels.to(torch.float64) if not labels.is_floating_point() else labels
    total = labels.sum()
    if total == 0:
        return torch.zeros_like(labels)
    intersection = total - labels.cumsum(0)
    union = total + (1 - labels).cumsum(0)
    jaccard = 1 - intersection / union
    if labels.numel() > 1:
        jaccard = torch.cat([jaccard[:1], jaccard[1:] - jaccard[:-1]])
    return jaccard


def lovasz_class_losses(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-image, per-class Lovász-softmax terms.

    Returns a ``[B, C]`` tensor; entries for classes absent from an image's
    target are NaN.
    """
    _check_target(probs, target)
    batch, n_classes = probs.shape[:2]
    out = probs.new_full((batch, n_classes), float("nan"))
    rows = []
    for b in range(batch):
        p = probs[b].flatten(1)
        y = target[b].flatten()
        row = []
        for c in range(n_classes):
            fg = (y == c).to(p.dtype)
            if fg.sum() == 0:
                row.append(out[b, c])
                continue
            errors = (fg - p[c]).abs()
            errors_sorted, perm = torch.sort(errors, descending=True)
            row.append(torch.dot(errors_sorted, jaccard_increments(fg[perm])))
        rows.append(torch.stack(row))
    return torch.stack(rows)


def lovasz_softmax_loss(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Lovász-softmax loss averaged over the classes present in each image, then the batch."""
    per_class = lovasz_class_losses(probs, target)
    present = ~torch.isnan(per_class)
    per_image = torch.where(present, per_class, torch.zeros_like(per_class)).sum(dim=1)
    per_image = per_image / present.sum(dim=1).clamp_min(1)
    return per_image.mean()


def segmentation_loss(probs: torch.Tensor, target: torch.Tensor, w: LossWeights) -> torch.Tensor:
    return w.alpha1 * soft_dice_loss(probs, target) + w.alpha2 * lovasz_softmax_loss(probs, target)


def kd_total_loss(seg, mid, kl, w: LossWeights):
    """Combine segmentation, feature and prediction distillation terms."""
    for name, value in (("seg", seg), ("mid", mid), ("kl", kl)):
        finite = torch.isfinite(value).all() if torch.is_tensor(value) else math.isfinite(value)
        if not finite:
            raise ValueError(f"{name} loss is not finite")
    return seg + w.alpha * mid + w.beta * kl
