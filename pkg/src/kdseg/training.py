"""Teacher training and mono-/multi-teacher distillation loops."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import torch

from .data import Manifest, SliceDataset
from .ensemble import combined_teacher_prediction, multi_mid_loss, teacher_dice_losses, weights_from_dice_losses
from .evaluation import per_slice_dice
from .features import LayerPairing, mid_loss
from .losses import LossWeights, kd_total_loss, kl_distillation_loss, segmentation_loss, softened_softmax
from .models import SegmentationModelAdapter, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ["epoch", "seg", "mid", "kl", "total", "val_dice", "lr"]
DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class TrainConfig:
    lr_max: float = 0.01
    lr_min: float = 1e-6
    cyclic_step_size: int = 2000
    epochs: int = 100
    batch_size: int = 8
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weighting_mode: str = "as_written"
    input_hw: tuple[int, int] = (384, 384)
    normalization: str = "minmax"
    dtype: str = "float32"
    num_threads: int = 1
    # list of (student_tap, teacher_tap); None pairs taps by depth
    pairing: list[tuple[str, str]] | None = None

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        self.input_hw = tuple(int(v) for v in self.input_hw)
        if self.pairing is not None:
            self.pairing = [tuple(p) for p in self.pairing]
        if not self.lr_min < self.lr_max:
            raise ValueError("lr_min must be smaller than lr_max")
        if self.epochs < 1 or self.batch_size < 1 or self.cyclic_step_size < 1:
            raise ValueError("epochs, batch_size and cyclic_step_size must be positive")
        if self.weighting_mode not in ("as_written", "inverse"):
            raise ValueError(f"unknown weighting_mode {self.weighting_mode!r}")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown training options: {unknown}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_hw"] = list(self.input_hw)
        return d

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]


def cyclic_lr(step: int, cfg: TrainConfig) -> float:
    """Triangular cycle: ``lr_min`` at step 0, ``lr_max`` after ``cyclic_step_size`` steps."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    s = cfg.cyclic_step_size
    pos = step % (2 * s)
    frac = pos / s if pos <= s else (2 * s - pos) / s
    return cfg.lr_min * (1.0 - frac) + cfg.lr_max * frac


@dataclass
class RunHistory:
    epochs: list[dict] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    wall_time: float = 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for rec in self.epochs:
            writer.writerow([rec["epoch"]] + [repr(float(rec[k])) for k in HISTORY_COLUMNS[1:]])
        return buf.getvalue()

    def write(self, run_dir) -> None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "history.csv").write_text(self.to_csv())
        with open(run_dir / "steps.jsonl", "w") as fh:
            for rec in self.steps:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _as_dataset(data, cfg: TrainConfig) -> SliceDataset:
    if isinstance(data, SliceDataset):
        if data.images.dtype != cfg.torch_dtype:
            raise ValueError(f"dataset dtype {data.images.dtype} does not match config dtype {cfg.dtype}")
        return data
    if isinstance(data, Manifest):
        return SliceDataset(data, cfg.input_hw, cfg.normalization, cfg.torch_dtype)
    raise TypeError(f"expected a Manifest or SliceDataset, got {type(data).__name__}")


def _as_teacher(teacher, cfg: TrainConfig) -> SegmentationModelAdapter:
    if not isinstance(teacher, SegmentationModelAdapter):
        teacher = load_checkpoint(teacher)
    teacher.to(cfg.torch_dtype)
    return teacher.freeze()


def resolve_pairing(student: SegmentationModelAdapter, teacher: SegmentationModelAdapter, cfg: TrainConfig) -> LayerPairing:
    """Pairing from the config, or by nearest tap depth; validated against both taps."""
    if cfg.pairing is not None:
        pairing = LayerPairing(cfg.pairing)
    else:
        pairing = LayerPairing.by_depth(student.taps, teacher.taps)
    try:
        pairing.check([t for t, _ in student.taps], [t for t, _ in teacher.taps])
    except KeyError as exc:
        raise ValueError(f"unresolvable layer pairing for {teacher.name}: {exc}") from None
    return pairing


StepFn = Callable[[torch.Tensor, torch.Tensor], dict]


def _fit(
    student: SegmentationModelAdapter,
    train: SliceDataset,
    val: SliceDataset | None,
    cfg: TrainConfig,
    step_fn: StepFn,
    run_dir,
    role: str,
) -> tuple[Path | None, RunHistory]:
    if len(train) == 0:
        raise ValueError("empty training set")
    if not student.trainable:
        raise ValueError(f"{student.name} has no trainable parameters")
    torch.set_num_threads(cfg.num_threads)
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    student.to(cfg.torch_dtype).train()
    opt = torch.optim.Adam(
        student.parameters(), lr=cyclic_lr(0, cfg), betas=(cfg.adam_beta1, cfg.adam_beta2)
    )
    run_dir = Path(run_dir) if run_dir is not None else None
    best_path = run_dir / "best.pt" if run_dir is not None else None

    history = RunHistory()
    best_dice, best_state = -math.inf, None
    step = 0
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        sums = {"seg": 0.0, "mid": 0.0, "kl": 0.0, "total": 0.0}
        n_steps = 0
        lr = cyclic_lr(step, cfg)
        for x, y in train.batches(cfg.batch_size, gen):
            lr = cyclic_lr(step, cfg)
            for group in opt.param_groups:
                group["lr"] = lr
            opt.zero_grad(set_to_none=True)
            out = step_fn(x, y)
            out["total"].backward()
            opt.step()

            rec = {"step": step, "epoch": epoch, "lr": lr}
            for key in ("seg", "mid", "kl", "total"):
                rec[key] = float(out[key].detach())
                sums[key] += rec[key]
            for key in ("weights", "teacher_dice"):
                if key in out:
                    rec[key] = [float(v) for v in out[key]]
            history.steps.append(rec)
            step += 1
            n_steps += 1

        if val is not None and len(val):
            val_dice = sum(per_slice_dice(student, val)) / len(val)
            student.train()
        else:
            val_dice = float("nan")
        history.epochs.append({
            "epoch": epoch, **{k: v / n_steps for k, v in sums.items()}, "val_dice": val_dice, "lr": lr,
        })
        if math.isnan(val_dice) or val_dice > best_dice:
            best_dice = val_dice if not math.isnan(val_dice) else best_dice
            history.best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in student.state_dict().items()}
        log.info("%s epoch %d: total=%.4f val_dice=%.4f lr=%.2e", student.name, epoch,
                 history.epochs[-1]["total"], val_dice, lr)
        if run_dir is not None:
            history.write(run_dir)

    history.wall_time = time.perf_counter() - start
    student.load_state_dict(best_state)
    if best_path is not None:
        save_checkpoint(student, best_path, extra={"best_epoch": history.best_epoch, "role": role})
    return best_path, history


def _seg_terms(logits: torch.Tensor, y: torch.Tensor, w: LossWeights) -> torch.Tensor:
    return segmentation_loss(softened_softmax(logits, 1.0), y, w).to(torch.float64)


def train_teacher(model: SegmentationModelAdapter, train, val, cfg: TrainConfig, run_dir=None):
    """Train on the segmentation loss alone; returns ``(checkpoint, history)``.

    The model ends up holding its best-validation weights.
    """
    w = cfg.loss_weights
    train_ds = _as_dataset(train, cfg)
    val_ds = _as_dataset(val, cfg) if val is not None else None

    def step_fn(x, y):
        logits, _ = model(x)
        seg = _seg_terms(logits, y, w)
        zero = torch.zeros((), dtype=torch.float64)
        return {"seg": seg, "mid": zero, "kl": zero, "total": seg}

    return _fit(model, train_ds, val_ds, cfg, step_fn, run_dir, role="teacher")


def distill_mono(student: SegmentationModelAdapter, teacher, train, val, cfg: TrainConfig, run_dir=None):
    """Distil from one frozen teacher (adapter or checkpoint path)."""
    w = cfg.loss_weights
    teacher = _as_teacher(teacher, cfg)
    pairing = resolve_pairing(student, teacher, cfg)
    train_ds = _as_dataset(train, cfg)
    val_ds = _as_dataset(val, cfg) if val is not None else None

    def step_fn(x, y):
        with torch.no_grad():
            t_logits, t_feats = teacher(x)
            t_soft = softened_softmax(t_logits, w.temperature)
        s_logits, s_feats = student(x)
        seg = _seg_terms(s_logits, y, w)
        mid = mid_loss(s_feats, t_feats, y, pairing).to(torch.float64)
        kl = kl_distillation_loss(s_logits, t_soft, w.temperature, w.kl_reverse, w.kl_scale_t2).to(torch.float64)
        return {"seg": seg, "mid": mid, "kl": kl, "total": kd_total_loss(seg, mid, kl, w)}

    return _fit(student, train_ds, val_ds, cfg, step_fn, run_dir, role="distilled")


def distill_multi(student: SegmentationModelAdapter, teachers: Sequence, train, val, cfg: TrainConfig, run_dir=None):
    """Distil from an adaptively weighted ensemble of frozen teachers.

    Weights are recomputed every batch from each teacher's soft Dice loss
    (at temperature 1) and logged with the step record.
    """
    if not teachers:
        raise ValueError("at least one teacher is required")
    w = cfg.loss_weights
    teachers = [_as_teacher(t, cfg) for t in teachers]
    pairings = [resolve_pairing(student, t, cfg) for t in teachers]
    inverse = cfg.weighting_mode == "inverse"
    train_ds = _as_dataset(train, cfg)
    val_ds = _as_dataset(val, cfg) if val is not None else None

    def step_fn(x, y):
        with torch.no_grad():
            outs = [t(x) for t in teachers]
            dice = teacher_dice_losses([softened_softmax(lg, 1.0) for lg, _ in outs], y)
            weights = weights_from_dice_losses(dice, inverse=inverse)
            t_soft = combined_teacher_prediction([softened_softmax(lg, w.temperature) for lg, _ in outs], weights)
        s_logits, s_feats = student(x)
        seg = _seg_terms(s_logits, y, w)
        mid = multi_mid_loss(s_feats, [f for _, f in outs], weights, y, pairings).to(torch.float64)
        kl = kl_distillation_loss(s_logits, t_soft, w.temperature, w.kl_reverse, w.kl_scale_t2).to(torch.float64)
        return {
            "seg": seg, "mid": mid, "kl": kl, "total": kd_total_loss(seg, mid, kl, w),
            "weights": weights.tolist(), "teacher_dice": dice.tolist(),
        }

    return _fit(student, train_ds, val_ds, cfg, step_fn, run_dir, role="distilled")
