"""Slice datasets: ingestion, site-aware partitioning, splitting, loading.

On-disk layout::

    root/site<k>/<patient_id>/img_<idx>.png    16-bit grayscale image
    root/site<k>/<patient_id>/mask_<idx>.png   8-bit mask, {0, 255} or {0, 1}

A ``manifest.json`` lists the records with paths relative to the manifest
file. Synthetic datasets also carry ``phantom_meta.json`` with the ellipse
behind every mask.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

SITE_DIR = re.compile(r"^site(\d+)$")
IMAGE_FILE = re.compile(r"^img_(\d+)\.png$")
MASK_FILE = re.compile(r"^mask_(\d+)\.png$")
MANIFEST_NAME = "manifest.json"
PHANTOM_META = "phantom_meta.json"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SliceRecord:
    site: int
    patient_id: str
    slice_index: int
    image_path: str
    mask_path: str

    @property
    def key(self) -> tuple[int, str, int]:
        return (self.site, self.patient_id, self.slice_index)


@dataclass
class Manifest:
    records: list[SliceRecord] = field(default_factory=list)
    provenance: str = ""

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.key in seen:
                raise DatasetError(f"duplicate slice {r.key}")
            seen.add(r.key)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def sites(self) -> list[int]:
        return sorted({r.site for r in self.records})

    def patients(self) -> list[tuple[int, str]]:
        return sorted({(r.site, r.patient_id) for r in self.records})

    def save(self, path) -> Path:
        """Write JSON with paths relative to the manifest's directory."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        base = path.parent.resolve()
        rows = []
        for r in self.records:
            row = asdict(r)
            for key in ("image_path", "mask_path"):
                row[key] = Path(os.path.relpath(Path(row[key]).resolve(), base)).as_posix()
            rows.append(row)
        path.write_text(json.dumps({"provenance": self.provenance, "records": rows}, indent=1) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, ValueError) as exc:
            raise DatasetError(f"cannot read manifest {path}: {exc}") from exc
        base = path.parent
        records = []
        for row in data["records"]:
            row = dict(row)
            for key in ("image_path", "mask_path"):
                p = Path(row[key])
                row[key] = str(p if p.is_absolute() else (base / p))
            records.append(SliceRecord(**row))
        return cls(records, data.get("provenance", ""))


def ingest_slices(root_dir) -> Manifest:
    """Enumerate every image/mask pair under ``root_dir``."""
    root = Path(root_dir)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    records = []
    for site_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        m = SITE_DIR.match(site_dir.name)
        if not m:
            raise DatasetError(f"unexpected directory {site_dir}; expected site<k>")
        site = int(m.group(1))
        for patient_dir in sorted(p for p in site_dir.iterdir() if p.is_dir()):
            images, masks = {}, {}
            for f in sorted(patient_dir.iterdir()):
                if mi := IMAGE_FILE.match(f.name):
                    images[int(mi.group(1))] = f
                elif mm := MASK_FILE.match(f.name):
                    masks[int(mm.group(1))] = f
            missing = [str(images[i]) for i in sorted(images) if i not in masks]
            if missing:
                raise DatasetError(f"images without a mask: {missing}")
            orphans = [str(masks[i]) for i in sorted(masks) if i not in images]
            if orphans:
                raise DatasetError(f"masks without an image: {orphans}")
            for idx in sorted(images):
                records.append(SliceRecord(site, patient_dir.name, idx, str(images[idx]), str(masks[idx])))
    return Manifest(records, provenance=f"ingested from {root}")


def _check_ratios(ratios: Sequence[float]) -> None:
    if len(ratios) != 3 or any(not r > 0 for r in ratios):
        raise ValueError(f"ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")


def split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    _check_ratios(ratios)
    n_train = int(round(n * ratios[0]))
    n_val = int(round(n * ratios[1]))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def split_dataset(m: Manifest, ratios=(0.8, 0.05, 0.15), seed: int = 0, by_patient: bool = True):
    """Shuffle units (patients or slices) and cut them into train/val/test.

    Each output keeps the input record order.
    """
    _check_ratios(ratios)
    if by_patient:
        units = m.patients()
        unit_of = lambda r: (r.site, r.patient_id)
    else:
        units = [r.key for r in m.records]
        unit_of = lambda r: r.key
    order = np.random.default_rng(seed).permutation(len(units))
    n_train, n_val, _ = split_sizes(len(units), ratios)
    part = {}
    for rank, i in enumerate(order):
        part[units[i]] = 0 if rank < n_train else 1 if rank < n_train + n_val else 2
    out = [[], [], []]
    for r in m.records:
        out[part[unit_of(r)]].append(r)
    names = ("train", "val", "test")
    return tuple(
        Manifest(recs, provenance=f"{names[k]} split (seed={seed}, by_patient={by_patient}) of: {m.provenance}")
        for k, recs in enumerate(out)
    )


@dataclass
class SitePairing:
    pairs: list[tuple[int, ...]]

    def __post_init__(self):
        self.pairs = [tuple(int(s) for s in p) for p in self.pairs]
        flat = [s for p in self.pairs for s in p]
        if len(flat) != len(set(flat)):
            raise ValueError(f"site pairs overlap: {self.pairs}")


def partition_by_sites(m: Manifest, pairing) -> tuple[list[Manifest], list[int]]:
    """One shard per site group; also returns the sites that were left out."""
    if not isinstance(pairing, SitePairing):
        pairing = SitePairing(pairing)
    shards = [
        Manifest([r for r in m.records if r.site in group], provenance=f"sites {list(group)} of: {m.provenance}")
        for group in pairing.pairs
    ]
    covered = {s for p in pairing.pairs for s in p}
    excluded = sorted({r.site for r in m.records} - covered)
    if excluded:
        log.warning("sites %s are not assigned to any shard and were excluded", excluded)
    return shards, excluded


# ---------------------------------------------------------------------------
# synthetic multi-site phantoms


@dataclass
class SiteProfile:
    """Acquisition characteristics of one synthetic site."""

    intensity_offset: float = 0.0
    contrast: float = 1.0
    noise: float = 0.05
    blur: float = 0.0


DEFAULT_SITES = [
    SiteProfile(0.00, 1.00, 0.04, 0.0),
    SiteProfile(0.10, 0.80, 0.06, 0.8),
    SiteProfile(-0.05, 1.20, 0.03, 0.0),
    SiteProfile(0.15, 0.70, 0.08, 1.2),
    SiteProfile(0.05, 0.90, 0.05, 0.5),
    SiteProfile(-0.10, 1.10, 0.10, 0.0),
]


def ellipse_mask(h: int, w: int, cx: float, cy: float, a: float, b: float, theta: float) -> np.ndarray:
    """Pixels whose centre (col, row) lies inside the rotated ellipse."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    c, s = math.cos(theta), math.sin(theta)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _phantom(rng: np.random.Generator, size: int, profile: SiteProfile):
    h = w = size
    a = rng.uniform(0.12, 0.28) * size
    b = rng.uniform(0.12, 0.28) * size
    cx = rng.uniform(0.3, 0.7) * w
    cy = rng.uniform(0.3, 0.7) * h
    theta = rng.uniform(0, math.pi)
    mask = ellipse_mask(h, w, cx, cy, a, b, theta)

    texture = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=size / 24)
    texture = texture / (np.abs(texture).max() + 1e-12)
    base = 0.35 + 0.15 * texture
    # decoy discs as bright as the target; only shape and size tell them apart
    decoys = np.zeros((h, w), dtype=bool)
    for _ in range(int(rng.integers(1, 3))):
        r = rng.uniform(0.05, 0.09) * size
        decoys |= ellipse_mask(h, w, rng.uniform(0.1, 0.9) * w, rng.uniform(0.1, 0.9) * h, r, r, 0.0)
    decoys &= ~mask
    base = base + 0.25 * decoys + 0.25 * mask
    img = profile.intensity_offset + profile.contrast * base
    if profile.blur > 0:
        img = ndimage.gaussian_filter(img, sigma=profile.blur)
    img = img + rng.normal(0.0, profile.noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    params = {"cx": cx, "cy": cy, "a": a, "b": b, "theta": theta}
    return img, mask, params


def synthesize_dataset(
    n_per_site: int,
    site_profiles: Sequence[SiteProfile] | None = None,
    seed: int = 0,
    out_dir=".",
    size: int = 96,
    slices_per_patient: int = 5,
) -> Manifest:
    """Write phantom slices for each site and return their manifest.

    Each slice is a textured background with a brighter ellipse (the
    foreground) and one or two equally bright decoy discs. Site profiles
    shift intensity, contrast, noise and blur.
    """
    if n_per_site < 1:
        raise ValueError("n_per_site must be at least 1")
    profiles = list(site_profiles or DEFAULT_SITES)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise DatasetError(f"cannot write to {out}: {exc}") from exc

    records, meta = [], []
    for site_idx, profile in enumerate(profiles, start=1):
        rng = np.random.default_rng([seed, site_idx])
        for k in range(n_per_site):
            patient = f"p{k // slices_per_patient:03d}"
            idx = k % slices_per_patient
            img, mask, params = _phantom(rng, size, profile)
            pdir = out / f"site{site_idx}" / patient
            pdir.mkdir(parents=True, exist_ok=True)
            img_path, mask_path = pdir / f"img_{idx}.png", pdir / f"mask_{idx}.png"
            Image.fromarray(np.round(img * 65535).astype(np.uint16)).save(img_path)
            Image.fromarray(mask.astype(np.uint8) * 255).save(mask_path)
            records.append(SliceRecord(site_idx, patient, idx, str(img_path), str(mask_path)))
            meta.append({
                "site": site_idx, "patient_id": patient, "slice_index": idx,
                "height": size, "width": size, **params,
            })
    manifest = Manifest(records, provenance=f"synthetic phantoms (seed={seed}, sites={len(profiles)}, size={size})")
    manifest.save(out / MANIFEST_NAME)
    (out / PHANTOM_META).write_text(json.dumps({
        "seed": seed,
        "profiles": [asdict(p) for p in profiles],
        "slices": meta,
    }, indent=1) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# loading


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except OSError as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc
    return arr.astype(np.float64)


def read_mask(path) -> np.ndarray:
    """Read a mask encoded as {0, 1} or {0, 255}; returns uint8 {0, 1}."""
    arr = read_image(path)
    if arr.ndim != 2:
        raise DatasetError(f"mask {path} is not single-channel")
    values = set(np.unique(arr).tolist())
    if values <= {0.0, 1.0}:
        scaled = arr
    elif values <= {0.0, 255.0}:
        scaled = arr / 255.0
    else:
        raise DatasetError(f"mask {path} is not binary: values {sorted(values)[:8]}")
    return (scaled > 0.5).astype(np.uint8)


def normalize_image(img: np.ndarray, mode: str = "minmax") -> np.ndarray:
    if mode == "minmax":
        lo, hi = img.min(), img.max()
        if hi - lo <= 0:
            return np.zeros_like(img)
        return (img - lo) / (hi - lo)
    if mode == "zscore":
        std = img.std()
        if std <= 0:
            return np.zeros_like(img)
        return (img - img.mean()) / std
    raise ValueError(f"unknown normalization {mode!r}")


def _resize(arr: np.ndarray, hw: tuple[int, int], mode: str) -> np.ndarray:
    if arr.shape == tuple(hw):
        return arr
    t = torch.from_numpy(np.ascontiguousarray(arr))[None, None]
    if mode == "bilinear":
        t = F.interpolate(t, size=tuple(hw), mode="bilinear", align_corners=False)
    else:
        t = F.interpolate(t, size=tuple(hw), mode="nearest")
    return t[0, 0].numpy()


def load_batch(records: Sequence[SliceRecord], target_hw=(384, 384), normalization: str = "minmax", dtype=torch.float32):
    """Load slices as ``([B, 1, H, W] images, [B, H, W] int64 masks)``."""
    if normalization not in ("minmax", "zscore"):
        raise ValueError(f"unknown normalization {normalization!r}")
    images, masks = [], []
    for r in records:
        img = read_image(r.image_path)
        if img.ndim != 2:
            raise DatasetError(f"image {r.image_path} is not single-channel")
        img = _resize(img, target_hw, "bilinear")
        images.append(normalize_image(img, normalization))
        masks.append(_resize(read_mask(r.mask_path).astype(np.float64), target_hw, "nearest"))
    if not records:
        h, w = target_hw
        return torch.zeros((0, 1, h, w), dtype=dtype), torch.zeros((0, h, w), dtype=torch.int64)
    x = torch.from_numpy(np.stack(images)).unsqueeze(1).to(dtype)
    y = torch.from_numpy(np.stack(masks)).round().to(torch.int64)
    return x, y


class SliceDataset:
    """A manifest loaded into memory once, served in deterministic batches."""

    def __init__(self, manifest: Manifest, target_hw=(384, 384), normalization: str = "minmax", dtype=torch.float32):
        self.manifest = manifest
        self.images, self.masks = load_batch(manifest.records, target_hw, normalization, dtype)

    def __len__(self):
        return len(self.manifest)

    def batches(self, batch_size: int, generator: torch.Generator | None = None):
        n = len(self)
        order = torch.randperm(n, generator=generator) if generator is not None else torch.arange(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            yield self.images[idx], self.masks[idx]
