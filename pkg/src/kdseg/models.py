"""Model adapters exposing logits plus named feature taps.

Any ``nn.Module`` can take part in distillation by wrapping it in
:class:`SegmentationModelAdapter` with the names of the submodules whose
outputs should be tapped. The small reference encoder-decoders defined
here stand in for the large published backbones at desk scale.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .features import FeatureMap

CHECKPOINT_FORMAT = "kdseg-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class SegmentationModelAdapter(nn.Module):
    """Uniform ``image -> (logits, taps)`` interface around an arbitrary network.

    ``taps`` maps submodule names of ``net`` to their relative depth in
    ``[0, 1]``. The wrapped network may return a tensor, a tuple whose first
    item is the logits, or a mapping (``output_key`` selects the entry, as
    for torchvision segmentation models).
    """

    def __init__(
        self,
        net: nn.Module,
        taps: Sequence[tuple[str, float]],
        name: str = "model",
        output_key: str | None = None,
        config: dict | None = None,
        kind: str = "external",
    ):
        super().__init__()
        taps = [(str(layer), float(depth)) for layer, depth in taps]
        if not taps:
            raise ValueError("an adapter needs at least one feature tap")
        depths = [d for _, d in taps]
        if any(b <= a for a, b in zip(depths, depths[1:])):
            raise ValueError(f"tap depth fractions must be strictly increasing: {depths}")
        self.net = net
        self.name = name
        self.output_key = output_key
        self.config = config or {}
        self.kind = kind
        self.taps = taps
        self._captures: dict[int, dict] = {}
        modules = dict(net.named_modules())
        for layer_id, _ in taps:
            if layer_id not in modules:
                raise KeyError(f"{name}: no submodule named {layer_id!r} to tap")
            modules[layer_id].register_forward_hook(self._make_hook(layer_id))

    def _make_hook(self, layer_id: str):
        def hook(module, inputs, output):
            store = self._captures.get(threading.get_ident())
            if store is not None:
                store[layer_id] = output
        return hook

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, list[FeatureMap]]:
        key = threading.get_ident()
        captured = self._captures[key] = {}
        try:
            out = self.net(images)
        finally:
            del self._captures[key]
        if isinstance(out, dict):
            out = out[self.output_key or "out"]
        elif isinstance(out, (tuple, list)):
            out = out[0]
        feats = [FeatureMap(captured[layer], layer, depth) for layer, depth in self.taps]
        return out, feats

    @property
    def tap_specs(self) -> list[tuple[str, float]]:
        return list(self.taps)

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    @property
    def trainable(self) -> bool:
        return any(p.requires_grad for p in self.parameters())

    def freeze(self) -> "SegmentationModelAdapter":
        self.eval()
        self.requires_grad_(False)
        return self


@dataclass
class ReferenceNetConfig:
    """Shape of a reference encoder-decoder.

    Stages are numbered in forward order: encoder stages ``0 .. depth-1``
    followed by decoder stages, ``2*depth - 1`` in total. ``tap_stages``
    indexes that sequence; ``None`` taps the bottleneck and the last
    decoder stage.
    """

    base_channels: int = 16
    depth: int = 4
    num_classes: int = 2
    tap_stages: list[int] | None = None
    convs_per_block: int = 2
    in_channels: int = 1

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("depth must be at least 2")
        if self.base_channels < 4:
            raise ValueError("base_channels must be at least 4")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.convs_per_block < 1:
            raise ValueError("convs_per_block must be at least 1")
        if self.tap_stages is None:
            self.tap_stages = [self.depth - 1, self.n_stages - 1]
        self.tap_stages = sorted(set(int(s) for s in self.tap_stages))
        bad = [s for s in self.tap_stages if not 0 <= s < self.n_stages]
        if bad or not self.tap_stages:
            raise ValueError(f"tap_stages must be a non-empty subset of 0..{self.n_stages - 1}, got {self.tap_stages}")

    @property
    def n_stages(self) -> int:
        return 2 * self.depth - 1

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def stage_names(self) -> list[str]:
        enc = [f"enc{i}" for i in range(self.depth)]
        dec = [f"dec{i}" for i in range(self.depth - 2, -1, -1)]
        return enc + dec

    def stage_depth(self, stage: int) -> float:
        return (stage + 1) / self.n_stages


DEFAULT_TEACHER = ReferenceNetConfig(base_channels=16, depth=4, convs_per_block=2)
DEFAULT_STUDENT = ReferenceNetConfig(base_channels=8, depth=3, convs_per_block=1)


def _groups(channels: int) -> int:
    return math.gcd(4, channels)


class ConvBlock(nn.Sequential):
    def __init__(self, c_in: int, c_out: int, n_convs: int):
        layers = []
        for i in range(n_convs):
            layers += [
                nn.Conv2d(c_in if i == 0 else c_out, c_out, kernel_size=3, padding=1),
                nn.GroupNorm(_groups(c_out), c_out),
                nn.ReLU(),
            ]
        super().__init__(*layers)


class Resize(nn.Module):
    """Bilinear resize to the spatial size of a reference tensor."""

    def forward(self, x, like):
        return F.interpolate(x, size=like.shape[-2:], mode="bilinear", align_corners=False)


class DecoderStage(nn.Module):
    def __init__(self, c_low: int, c_skip: int, n_convs: int):
        super().__init__()
        self.up = Resize()
        self.block = ConvBlock(c_low + c_skip, c_skip, n_convs)

    def forward(self, x, skip):
        return self.block(torch.cat([self.up(x, skip), skip], dim=1))


class ReferenceUNet(nn.Module):
    """Encoder-decoder with skip connections and a full-resolution head."""

    def __init__(self, cfg: ReferenceNetConfig):
        super().__init__()
        self.cfg = cfg
        self.pool = nn.MaxPool2d(2)
        for i in range(cfg.depth):
            c_in = cfg.in_channels if i == 0 else cfg.channels(i - 1)
            self.add_module(f"enc{i}", ConvBlock(c_in, cfg.channels(i), cfg.convs_per_block))
        for i in range(cfg.depth - 2, -1, -1):
            self.add_module(f"dec{i}", DecoderStage(cfg.channels(i + 1), cfg.channels(i), cfg.convs_per_block))
        self.head = nn.Conv2d(cfg.channels(0), cfg.num_classes, kernel_size=1)

    def forward(self, x):
        skips = []
        for i in range(self.cfg.depth):
            if i > 0:
                x = self.pool(x)
            x = getattr(self, f"enc{i}")(x)
            skips.append(x)
        for i in range(self.cfg.depth - 2, -1, -1):
            x = getattr(self, f"dec{i}")(x, skips[i])
        return self.head(x)


def build_reference(cfg: ReferenceNetConfig, name: str, seed: int | None = 0, role: str = "model") -> SegmentationModelAdapter:
    if seed is not None:
        torch.manual_seed(seed)
    net = ReferenceUNet(cfg)
    names = cfg.stage_names()
    taps = [(names[s], cfg.stage_depth(s)) for s in cfg.tap_stages]
    return SegmentationModelAdapter(
        net, taps, name=name, config={"reference": asdict(cfg), "role": role}, kind="reference"
    )


def build_reference_teacher(cfg: ReferenceNetConfig | None = None, seed: int | None = 0, name: str = "ref-teacher"):
    return build_reference(cfg or DEFAULT_TEACHER, name, seed, role="teacher")


def build_reference_student(cfg: ReferenceNetConfig | None = None, seed: int | None = 0, name: str = "ref-student"):
    return build_reference(cfg or DEFAULT_STUDENT, name, seed, role="student")


def save_checkpoint(adapter: SegmentationModelAdapter, path, extra: dict | None = None) -> Path:
    """Write parameters and adapter metadata to a single file.

    The file is a ``torch.save`` archive holding ``format``, ``version``,
    ``meta`` (a JSON string: name, kind, taps, output_key, config, extra)
    and ``state_dict``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "name": adapter.name,
        "kind": adapter.kind,
        "taps": adapter.taps,
        "output_key": adapter.output_key,
        "config": adapter.config,
        "extra": extra or {},
    }
    state = {k: v.detach().clone() for k, v in adapter.state_dict().items()}
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": json.dumps(meta, sort_keys=True),
        "state_dict": state,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    # a file handle keeps the archive name fixed, so bytes do not depend on the path
    with open(tmp, "wb") as fh:
        torch.save(payload, fh)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(meta, state_dict)`` from a checkpoint file."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"corrupt or unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    try:
        meta = json.loads(payload["meta"])
        state = payload["state_dict"]
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint metadata: {exc}") from exc
    return meta, state


def load_checkpoint(path, builder: Callable[[dict], SegmentationModelAdapter] | None = None) -> SegmentationModelAdapter:
    """Rebuild an adapter from a checkpoint.

    Reference nets are rebuilt from the stored config; other adapters need
    a ``builder`` that maps the stored metadata to an uninitialised adapter.
    """
    meta, state = read_checkpoint(path)
    if meta["kind"] == "reference":
        cfg = ReferenceNetConfig(**meta["config"]["reference"])
        with torch.random.fork_rng(devices=[]):
            adapter = build_reference(cfg, meta["name"], seed=None, role=meta["config"].get("role", "model"))
    elif builder is not None:
        adapter = builder(meta)
    else:
        raise CheckpointError(f"{path}: adapter kind {meta['kind']!r} needs a builder")
    try:
        adapter.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not match the adapter: {exc}") from exc
    return adapter
