"""Adaptive aggregation of several frozen teachers."""

from __future__ import annotations

from typing import Sequence

import torch

from .features import FeatureMap, LayerPairing, mid_loss
from .losses import soft_dice_loss

DEGENERATE_SUM = 1e-12
WEIGHT_ATOL = 1e-9


def weights_from_dice_losses(dice_losses, inverse: bool = False) -> torch.Tensor:
    """Normalise per-teacher Dice losses into ensemble weights.

    By default ``w_j = d_j / sum_k d_k``, which gives the larger weight to
    the teacher with the larger loss. ``inverse=True`` uses ``w_j ∝ 1/d_j``
    instead. Teachers that are all perfect get uniform weights.
    """
    d = torch.as_tensor(dice_losses, dtype=torch.float64).detach().flatten()
    if d.numel() == 0:
        raise ValueError("at least one teacher is required")
    if (d < 0).any() or not torch.isfinite(d).all():
        raise ValueError(f"dice losses must be finite and nonnegative, got {d.tolist()}")
    n = d.numel()
    if inverse:
        perfect = d < DEGENERATE_SUM
        if perfect.any():
            return perfect.to(torch.float64) / perfect.sum()
        inv = 1.0 / d
        return inv / inv.sum()
    total = d.sum()
    if total < DEGENERATE_SUM:
        return torch.full((n,), 1.0 / n, dtype=torch.float64)
    return d / total


def teacher_dice_losses(teacher_probs: Sequence[torch.Tensor], target: torch.Tensor) -> torch.Tensor:
    if not teacher_probs:
        raise ValueError("at least one teacher is required")
    with torch.no_grad():
        return torch.stack([soft_dice_loss(p.detach(), target).to(torch.float64) for p in teacher_probs])


def adaptive_weights(teacher_probs: Sequence[torch.Tensor], target: torch.Tensor, inverse: bool = False) -> torch.Tensor:
    """Per-teacher weights from each teacher's soft Dice loss on ``target``.

    The result is a detached float64 vector.
    """
    return weights_from_dice_losses(teacher_dice_losses(teacher_probs, target), inverse=inverse)


def check_weights(weights: torch.Tensor, n: int) -> None:
    if weights.numel() != n:
        raise ValueError(f"{weights.numel()} weights for {n} teachers")
    if (weights < 0).any():
        raise ValueError("ensemble weights must be nonnegative")
    if abs(float(weights.sum()) - 1.0) > WEIGHT_ATOL:
        raise ValueError(f"ensemble weights must sum to 1, got {float(weights.sum())}")


def combined_teacher_prediction(teacher_probs: Sequence[torch.Tensor], weights) -> torch.Tensor:
    """Weighted sum of teacher distributions, accumulated in list order."""
    weights = torch.as_tensor(weights, dtype=torch.float64)
    check_weights(weights, len(teacher_probs))
    shape = teacher_probs[0].shape
    out = None
    for w, p in zip(weights.tolist(), teacher_probs):
        if p.shape != shape:
            raise ValueError(f"teacher shape mismatch: {tuple(p.shape)} vs {tuple(shape)}")
        out = w * p if out is None else out + w * p
    return out


def multi_mid_loss(
    student_feats: Sequence[FeatureMap],
    teacher_feat_lists: Sequence[Sequence[FeatureMap]],
    weights,
    mask: torch.Tensor,
    pairings: Sequence[LayerPairing],
) -> torch.Tensor:
    """Weighted sum of the feature loss against each teacher."""
    weights = torch.as_tensor(weights, dtype=torch.float64)
    n = len(teacher_feat_lists)
    if len(pairings) != n:
        raise ValueError(f"{len(pairings)} pairings for {n} teachers")
    check_weights(weights, n)
    total = None
    for w, feats, pairing in zip(weights.tolist(), teacher_feat_lists, pairings):
        term = w * mid_loss(student_feats, feats, mask, pairing)
        total = term if total is None else total + term
    return total
