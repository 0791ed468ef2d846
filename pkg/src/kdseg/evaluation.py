"""Dice evaluation, complexity accounting, reports and mask overlays."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
from PIL import Image

from .data import Manifest, SliceDataset, SliceRecord, load_batch
from .models import Resize

REPORT_COLUMNS = ["model", "role", "dice_mean_pct", "dice_std", "params", "flops", "baseline", "delta_pct"]

GT_TONE = (0, 255, 0)
PRED_TONE = (255, 0, 0)
BOTH_TONE = (255, 255, 0)


def dice_score(pred, gt) -> float:
    """Hard Dice overlap; two empty masks score 1."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((pred & gt).sum()) / total


@dataclass
class EvalResult:
    mean_dice: float
    std_dice: float
    n_samples: int
    model_name: str
    params: int
    flops: int
    role: str = "student"
    per_slice: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("an evaluation needs at least one sample")
        if self.std_dice < 0:
            raise ValueError("std_dice must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


def predict_masks(model: nn.Module, images: torch.Tensor, batch_size: int = 16) -> torch.Tensor:
    """Argmax masks ``[B, H, W]`` for a batch of images."""
    was_training = model.training
    model.eval()
    preds = []
    try:
        with torch.no_grad():
            for start in range(0, images.shape[0], batch_size):
                logits, _ = model(images[start:start + batch_size])
                preds.append(logits.argmax(dim=1))
    finally:
        model.train(was_training)
    if not preds:
        return torch.zeros((0, *images.shape[-2:]), dtype=torch.int64)
    return torch.cat(preds)


def per_slice_dice(model, dataset: SliceDataset, batch_size: int = 16) -> list[float]:
    preds = predict_masks(model, dataset.images, batch_size)
    return [dice_score(p.numpy(), g.numpy()) for p, g in zip(preds, dataset.masks)]


def evaluate(
    model,
    test,
    input_hw=(384, 384),
    normalization: str = "minmax",
    role: str = "student",
    batch_size: int = 16,
) -> EvalResult:
    """Per-slice Dice of argmax predictions; mean and population std.

    ``test`` is a :class:`Manifest` or an already loaded :class:`SliceDataset`.
    """
    if isinstance(test, Manifest):
        if len(test) == 0:
            raise ValueError("empty test set")
        test = SliceDataset(test, input_hw, normalization, dtype=model_dtype(model))
    if len(test) == 0:
        raise ValueError("empty test set")
    scores = per_slice_dice(model, test, batch_size)
    arr = np.asarray(scores, dtype=np.float64)
    return EvalResult(
        mean_dice=float(arr.mean()),
        std_dice=float(arr.std()),
        n_samples=len(scores),
        model_name=getattr(model, "name", type(model).__name__),
        params=count_params(model),
        flops=estimate_flops(model, (1, *test.images.shape[-2:])),
        role=role,
        per_slice=scores,
    )


# ---------------------------------------------------------------------------
# complexity


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def conv2d_macs(layer: nn.Conv2d, out_hw: tuple[int, int]) -> int:
    kh, kw = layer.kernel_size
    return layer.in_channels * layer.out_channels * kh * kw * out_hw[0] * out_hw[1] // layer.groups


def _layer_macs(module: nn.Module, inputs, output) -> int:
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
        if isinstance(module, nn.ConvTranspose2d):
            # every input pixel scatters a full kernel
            kh, kw = module.kernel_size
            n_in = inputs[0][0, 0].numel()
            return module.in_channels * module.out_channels * kh * kw * n_in // module.groups
        return conv2d_macs(module, tuple(output.shape[-2:]))
    if isinstance(module, nn.Linear):
        return module.in_features * module.out_features * (output.numel() // output.shape[-1] // output.shape[0])
    if isinstance(module, (nn.BatchNorm2d, nn.GroupNorm, nn.InstanceNorm2d, nn.LayerNorm)):
        n = output[0].numel()
        affine = getattr(module, "affine", getattr(module, "elementwise_affine", False))
        return 2 * n if affine else n
    if isinstance(module, (nn.ReLU, nn.LeakyReLU, nn.PReLU, nn.ReLU6, nn.ELU, nn.Sigmoid, nn.Tanh, nn.Hardswish, nn.SiLU)):
        return output[0].numel()
    if isinstance(module, (nn.MaxPool2d, nn.AvgPool2d, nn.AdaptiveAvgPool2d, nn.AdaptiveMaxPool2d)):
        return inputs[0][0].numel()
    if isinstance(module, (nn.Upsample, Resize)):
        return output[0].numel()
    if isinstance(module, (nn.Identity, nn.Dropout, nn.Dropout2d, nn.Flatten)):
        return 0
    raise TypeError(f"no FLOP formula for layer type {type(module).__name__}")


_KNOWN_LAYERS = (
    nn.Conv2d, nn.ConvTranspose2d, nn.Linear,
    nn.BatchNorm2d, nn.GroupNorm, nn.InstanceNorm2d, nn.LayerNorm,
    nn.ReLU, nn.LeakyReLU, nn.PReLU, nn.ReLU6, nn.ELU, nn.Sigmoid, nn.Tanh, nn.Hardswish, nn.SiLU,
    nn.MaxPool2d, nn.AvgPool2d, nn.AdaptiveAvgPool2d, nn.AdaptiveMaxPool2d,
    nn.Upsample, Resize,
    nn.Identity, nn.Dropout, nn.Dropout2d, nn.Flatten,
)


def model_dtype(model: nn.Module) -> torch.dtype:
    param = next(model.parameters(), None)
    return param.dtype if param is not None else torch.float32


def layer_macs(model: nn.Module, input_shape: Sequence[int]) -> list[tuple[str, int]]:
    """Per-leaf-layer MACs for one ``input_shape = (C, H, W)`` sample.

    Raises ``TypeError`` naming every leaf layer without a closed form.
    """
    leaves = [(n, m) for n, m in model.named_modules() if not list(m.children())]
    unknown = sorted({type(m).__name__ for _, m in leaves if not isinstance(m, _KNOWN_LAYERS)})
    if unknown:
        raise TypeError(f"no FLOP formula for layer types: {unknown}")
    counts: list[tuple[str, int]] = []
    handles = []
    for name, m in leaves:
        def hook(module, inputs, output, name=name):
            counts.append((name, _layer_macs(module, inputs, output)))
        handles.append(m.register_forward_hook(hook))
    dtype = model_dtype(model)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(torch.zeros((1, *input_shape), dtype=dtype))
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    return counts


def estimate_flops(model: nn.Module, input_shape: Sequence[int]) -> int:
    """FLOPs as 2 x MACs summed over all leaf layers."""
    return 2 * sum(macs for _, macs in layer_macs(model, input_shape))


# ---------------------------------------------------------------------------
# reporting


def _fmt_delta(delta: float) -> str:
    return f"{delta:+.2f}"


def report_rows(results: Sequence[EvalResult], baselines: Mapping[str, float] | None = None) -> list[dict]:
    baselines = baselines or {}
    rows = []
    for r in results:
        pct = 100.0 * r.mean_dice
        base = baselines.get(r.model_name)
        rows.append({
            "model": r.model_name,
            "role": r.role,
            "dice_mean_pct": f"{pct:.2f}",
            "dice_std": f"{r.std_dice:.4f}",
            "params": str(r.params),
            "flops": str(r.flops),
            "baseline": "" if base is None else f"{base:.2f}",
            "delta_pct": "" if base is None else _fmt_delta(pct - base),
        })
    return rows


def emit_report(results: Sequence[EvalResult], out_dir, baselines: Mapping[str, float] | None = None) -> tuple[Path, Path]:
    """Write ``report.csv`` and a plain-text table ``report.txt``.

    Dice is in percent; its std stays on the 0-1 scale. ``baselines`` maps a
    model name to the baseline Dice (percent) the delta is measured from.
    """
    if not results:
        raise ValueError("nothing to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = report_rows(results, baselines)

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    csv_path = out / "report.csv"
    csv_path.write_text(buf.getvalue())

    headers = ["Model", "Role", "Dice % (± std, 0-1 scale)", "Params (M)", "FLOPs (G)", "Δ vs baseline"]
    table = [[
        row["model"], row["role"], f"{row['dice_mean_pct']} ± {row['dice_std']}",
        f"{int(row['params']) / 1e6:.4f}", f"{int(row['flops']) / 1e9:.4f}", row["delta_pct"] or "-",
    ] for row in rows]
    widths = [max(len(h), *(len(t[i]) for t in table)) for i, h in enumerate(headers)]
    lines = [" | ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("-+-".join("-" * w for w in widths))
    lines += [" | ".join(c.ljust(w) for c, w in zip(t, widths)) for t in table]
    lines.append("")
    lines.append("FLOPs = 2 x multiply-accumulates, counted for one input of the evaluated shape.")
    txt_path = out / "report.txt"
    txt_path.write_text("\n".join(lines) + "\n")
    return csv_path, txt_path


# ---------------------------------------------------------------------------
# overlays


def contour(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour outside the mask."""
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return m & ~interior


def overlay_image(image: np.ndarray, gt: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """RGB composite: grayscale slice with gt contour green, prediction red, both yellow."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = img.min(), img.max()
    gray = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo)
    rgb = np.repeat(np.round(gray * 255).astype(np.uint8)[..., None], 3, axis=2)
    cg, cp = contour(gt), contour(pred)
    rgb[cg & ~cp] = GT_TONE
    rgb[cp & ~cg] = PRED_TONE
    rgb[cg & cp] = BOTH_TONE
    return rgb


def export_overlays(model, records: Sequence[SliceRecord], out_dir, input_hw=(384, 384), normalization: str = "minmax") -> list[Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create overlay directory {out}: {exc}") from exc
    paths = []
    dtype = model_dtype(model)
    for r in records:
        x, y = load_batch([r], input_hw, normalization, dtype=dtype)
        pred = predict_masks(model, x)[0].numpy()
        rgb = overlay_image(x[0, 0].numpy(), y[0].numpy(), pred)
        path = out / f"site{r.site}_{r.patient_id}_{r.slice_index}.png"
        Image.fromarray(rgb).save(path)
        paths.append(path)
    return paths
