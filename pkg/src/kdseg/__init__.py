"""Mono- and multi-teacher knowledge distillation for 2D segmentation."""

from .ensemble import adaptive_weights, combined_teacher_prediction, multi_mid_loss
from .evaluation import EvalResult, dice_score, emit_report, estimate_flops, evaluate
from .features import FeatureMap, LayerPairing, importance_map, mid_loss
from .losses import LossWeights, kd_total_loss, kl_distillation_loss, lovasz_softmax_loss, soft_dice_loss
from .models import ReferenceNetConfig, SegmentationModelAdapter, build_reference_student, build_reference_teacher
from .training import TrainConfig, cyclic_lr, distill_mono, distill_multi, train_teacher

__version__ = "0.1.0"
