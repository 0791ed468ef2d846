"""Intermediate-feature distillation: importance maps and region contrast."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import torch
import torch.nn.functional as F

_NORM_FLOOR = 1e-12


@dataclass
class FeatureMap:
    """Activations tapped from one layer of a network."""

    values: torch.Tensor
    layer_id: str
    depth_fraction: float = 0.0

    def __post_init__(self):
        if self.values.dim() != 4:
            raise ValueError(f"feature map {self.layer_id!r} must be [B, C, H, W]")
        if not 0.0 <= self.depth_fraction <= 1.0:
            raise ValueError(f"depth_fraction of {self.layer_id!r} must lie in [0, 1]")


@dataclass
class LayerPairing:
    """(student layer, teacher layer) pairs that take part in the feature loss."""

    pairs: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        self.pairs = [(str(s), str(t)) for s, t in self.pairs]
        students = [s for s, _ in self.pairs]
        dupes = sorted({s for s in students if students.count(s) > 1})
        if dupes:
            raise ValueError(f"student layers paired more than once: {dupes}")

    def __len__(self):
        return len(self.pairs)

    def check(self, student_layers: Iterable[str], teacher_layers: Iterable[str]) -> None:
        """Raise ``KeyError`` if a pair references a layer that is not tapped."""
        student_layers, teacher_layers = set(student_layers), set(teacher_layers)
        missing = [s for s, _ in self.pairs if s not in student_layers]
        missing += [t for _, t in self.pairs if t not in teacher_layers]
        if missing:
            raise KeyError(f"pairing references unknown layers: {missing}")

    @classmethod
    def by_depth(cls, student_taps: Sequence[tuple[str, float]], teacher_taps: Sequence[tuple[str, float]]):
        """Pair each student tap with the teacher tap of nearest depth fraction.

        Ties go to the shallower teacher tap.
        """
        if not teacher_taps:
            raise ValueError("teacher exposes no feature taps")
        pairs = []
        for s_id, s_depth in student_taps:
            t_id, _ = min(teacher_taps, key=lambda tap: abs(tap[1] - s_depth))
            pairs.append((s_id, t_id))
        return cls(pairs)


def _values(f) -> torch.Tensor:
    return f.values if isinstance(f, FeatureMap) else f


def reduce_channels(f) -> torch.Tensor:
    """Per-location sum of squared activations, ``[B, C, H, W] -> [B, H, W]``."""
    return _values(f).pow(2).sum(dim=1)


def _unit_l2(m: torch.Tensor) -> torch.Tensor:
    norm = m.flatten(1).norm(dim=1).clamp_min(_NORM_FLOOR)
    return m / norm.view(-1, *([1] * (m.dim() - 1)))


def importance_map(f) -> torch.Tensor:
    """Channel-reduced activation energy, L2-normalised per sample.

    An all-zero map stays all-zero.
    """
    return _unit_l2(reduce_channels(f))


def align_spatial(m: torch.Tensor, target_h: int, target_w: int) -> torch.Tensor:
    """Bilinearly resample a ``[B, H, W]`` map and restore unit L2 norm."""
    if target_h < 1 or target_w < 1:
        raise ValueError(f"target size must be positive, got {(target_h, target_w)}")
    if m.shape[-2:] == (target_h, target_w):
        return m
    resized = F.interpolate(m.unsqueeze(1), size=(target_h, target_w), mode="bilinear", align_corners=False)
    return _unit_l2(resized.squeeze(1))


def _lookup(maps: Mapping[str, torch.Tensor], layer_id: str, side: str):
    try:
        return maps[layer_id]
    except KeyError:
        raise KeyError(f"{side} layer {layer_id!r} not found; available: {sorted(maps)}") from None


def _pair_l1(student_map: torch.Tensor, teacher_map: torch.Tensor) -> torch.Tensor:
    s = align_spatial(student_map, *teacher_map.shape[-2:])
    return (s - teacher_map).abs().flatten(1).sum(dim=1).mean()


def importance_loss(
    student_maps: Mapping[str, torch.Tensor],
    teacher_maps: Mapping[str, torch.Tensor],
    pairing: LayerPairing,
) -> torch.Tensor:
    """Mean over pairs of the L1 distance between unit-norm importance maps.

    Student maps are resampled to the teacher resolution. The per-pair
    distance is summed over pixels and averaged over the batch.
    """
    terms = [
        _pair_l1(_lookup(student_maps, s, "student"), _lookup(teacher_maps, t, "teacher"))
        for s, t in pairing.pairs
    ]
    if not terms:
        return torch.zeros(())
    return torch.stack(terms).sum() / len(terms)


def resize_mask(mask: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Nearest-neighbour resize of a ``[B, H, W]`` binary mask."""
    if mask.shape[-2:] == (h, w):
        return mask
    resized = F.interpolate(mask.unsqueeze(1).float(), size=(h, w), mode="nearest")
    return resized.squeeze(1).to(mask.dtype)


def contrast_of_map(reduced: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean of ``reduced`` over the mask minus its mean elsewhere, as ``[B, 1]``.

    A region with no pixels contributes a mean of 0.
    """
    m = resize_mask(mask, *reduced.shape[-2:]).to(reduced.dtype).flatten(1)
    flat = reduced.flatten(1)
    n_fg = m.sum(dim=1)
    n_bg = m.shape[1] - n_fg
    mean_fg = (flat * m).sum(dim=1) / n_fg.clamp_min(1)
    mean_bg = (flat * (1 - m)).sum(dim=1) / n_bg.clamp_min(1)
    return (mean_fg - mean_bg).unsqueeze(1)


def region_contrast_vector(f, mask: torch.Tensor) -> torch.Tensor:
    """Foreground/background contrast of the channel-reduced (unnormalised) map."""
    return contrast_of_map(reduce_channels(f), mask)


def affinity_loss(v_s: torch.Tensor, v_t: torch.Tensor) -> torch.Tensor:
    """Batch-mean Euclidean distance between region contrast vectors."""
    if v_s.shape[-1] != v_t.shape[-1]:
        raise ValueError(f"vector length mismatch: {v_s.shape[-1]} vs {v_t.shape[-1]}")
    diff = v_s - v_t
    if diff.dim() == 1:
        diff = diff.unsqueeze(0)
    return torch.linalg.vector_norm(diff, dim=-1).mean()


def mid_loss(
    student_feats: Sequence[FeatureMap],
    teacher_feats: Sequence[FeatureMap],
    mask: torch.Tensor,
    pairing: LayerPairing,
) -> torch.Tensor:
    """Importance loss plus the pair-averaged affinity loss."""
    s_by_id = {f.layer_id: f for f in student_feats}
    t_by_id = {f.layer_id: f for f in teacher_feats}
    pairing.check(s_by_id, t_by_id)
    if not pairing.pairs:
        ref = student_feats[0].values if student_feats else torch.zeros(())
        return ref.new_zeros(())

    imp = importance_loss(
        {s: importance_map(s_by_id[s]) for s, _ in pairing.pairs},
        {t: importance_map(t_by_id[t]) for _, t in pairing.pairs},
        pairing,
    )
    aff = torch.stack([
        affinity_loss(region_contrast_vector(s_by_id[s], mask), region_contrast_vector(t_by_id[t], mask))
        for s, t in pairing.pairs
    ]).mean()
    return imp + aff
