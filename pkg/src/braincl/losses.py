"""Training objectives: Dice + cross-entropy task loss, temperature-scaled
response distillation, cosine latent distillation, the drift-scaled
distillation coefficient, and their weighted total.

All reductions are means over voxels in fixed C-order (batch folded into
voxels), so values are deterministic for a given input. Teacher-side inputs
are always detached: no gradient ever reaches the teacher.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .domain import ValidationError

KLD_DIRECTIONS = ("student_teacher", "teacher_student")


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 2.0
    beta: float = 0.8
    alpha_min: float = 0.0
    alpha_max: float = 0.6
    dice_smooth: float = 1e-5
    kld_direction: str = "student_teacher"

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValidationError("temperature must be > 0")
        if self.beta < 0:
            raise ValidationError("beta must be >= 0")
        if not 0 <= self.alpha_min <= self.alpha_max:
            raise ValidationError("need 0 <= alpha_min <= alpha_max")
        if self.dice_smooth <= 0:
            raise ValidationError("dice_smooth must be > 0")
        if self.kld_direction not in KLD_DIRECTIONS:
            raise ValidationError(f"kld_direction must be one of {KLD_DIRECTIONS}")

    def to_dict(self) -> dict:
        return {
            "temperature": self.temperature,
            "beta": self.beta,
            "alpha_min": self.alpha_min,
            "alpha_max": self.alpha_max,
            "dice_smooth": self.dice_smooth,
            "kld_direction": self.kld_direction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(**d)


@dataclass
class LossBreakdown:
    """Per-step scalar record; `tensor` carries the differentiable total."""

    task_dice: float
    task_ce: float
    kld: float
    cosine: float
    alpha_t: float
    total: float
    tensor: torch.Tensor = field(repr=False, compare=False, default=None)

    def to_dict(self) -> dict:
        return {
            "task_dice": self.task_dice,
            "task_ce": self.task_ce,
            "kld": self.kld,
            "cosine": self.cosine,
            "alpha_t": self.alpha_t,
            "total": self.total,
        }


def _channel_axis(logits: torch.Tensor) -> int:
    # volumes are rank 3: [C, D, H, W] is a single sample, [B, C, D, H, W] a batch
    if logits.ndim == 4:
        return 0
    if logits.ndim == 5:
        return 1
    raise ValidationError(f"expected 4D or 5D logits, got shape {tuple(logits.shape)}")


def _check_target(logits: torch.Tensor, target: torch.Tensor) -> None:
    axis = _channel_axis(logits)
    expected = logits.shape[:axis] + logits.shape[axis + 1 :]
    if tuple(target.shape) != tuple(expected):
        raise ValidationError(
            f"target shape {tuple(target.shape)} does not match logits {tuple(logits.shape)}"
        )
    bad = ((target != 0) & (target != 1)).any()
    if bool(bad):
        raise ValidationError("target mask must be binary")


def dice_loss(logits, target, smooth: float = 1e-5) -> torch.Tensor:
    """Soft Dice on the foreground softmax probability, smoothed by `smooth`."""
    logits = torch.as_tensor(logits)
    target = torch.as_tensor(target)
    _check_target(logits, target)
    axis = _channel_axis(logits)
    prob_fg = torch.softmax(logits, dim=axis).select(axis, 1)
    t = target.to(prob_fg.dtype)
    inter = (prob_fg * t).sum()
    return 1.0 - (2.0 * inter + smooth) / (prob_fg.sum() + t.sum() + smooth)


def ce_loss(logits, target) -> torch.Tensor:
    """Mean voxelwise negative log softmax probability of the true class."""
    logits = torch.as_tensor(logits)
    target = torch.as_tensor(target)
    _check_target(logits, target)
    axis = _channel_axis(logits)
    rows = logits.movedim(axis, -1).reshape(-1, logits.shape[axis])
    labels = target.reshape(-1).long()
    return F.cross_entropy(rows, labels)


def kld_loss(
    student_logits,
    teacher_logits,
    temperature: float = 2.0,
    direction: str = "student_teacher",
) -> torch.Tensor:
    """Mean voxelwise KL divergence between temperature-softened softmaxes.

    The default direction puts the student distribution as the left KL
    argument; "teacher_student" flips it for sensitivity studies. No
    temperature-squared rescaling is applied. The teacher is detached.
    """
    if temperature <= 0:
        raise ValidationError("temperature must be > 0")
    if direction not in KLD_DIRECTIONS:
        raise ValidationError(f"kld direction must be one of {KLD_DIRECTIONS}")
    s = torch.as_tensor(student_logits)
    t = torch.as_tensor(teacher_logits)
    if s.shape != t.shape:
        raise ValidationError(
            f"student/teacher logits shapes differ: {tuple(s.shape)} vs {tuple(t.shape)}"
        )
    axis = _channel_axis(s)
    log_ps = torch.log_softmax(s / temperature, dim=axis)
    log_pt = torch.log_softmax(t.detach() / temperature, dim=axis)
    if direction == "student_teacher":
        kl = (log_ps.exp() * (log_ps - log_pt)).sum(dim=axis)
    else:
        kl = (log_pt.exp() * (log_pt - log_ps)).sum(dim=axis)
    return kl.mean()


def cosine_loss(student_features, teacher_features) -> torch.Tensor:
    """1 - cosine similarity between flattened feature vectors, in [0, 2].

    Accepts [F] vectors or [B, F] batches (mean over rows). A zero-norm
    vector yields the orthogonality value 1 and records a warning; only the
    student side receives gradient.
    """
    fs = torch.as_tensor(student_features)
    ft = torch.as_tensor(teacher_features).detach()
    if fs.shape != ft.shape:
        raise ValidationError(
            f"feature shapes differ: {tuple(fs.shape)} vs {tuple(ft.shape)}"
        )
    if fs.ndim == 1:
        fs, ft = fs.unsqueeze(0), ft.unsqueeze(0)
    elif fs.ndim != 2:
        raise ValidationError(f"expected [F] or [B, F] features, got {tuple(fs.shape)}")
    norm_s = fs.norm(dim=1)
    norm_t = ft.norm(dim=1)
    degenerate = (norm_s == 0) | (norm_t == 0)
    if bool(degenerate.any()):
        warnings.warn("zero-norm feature vector in cosine loss; treating as orthogonal")
    denom = (norm_s * norm_t).clamp_min(torch.finfo(fs.dtype).tiny)
    cos = (fs * ft).sum(dim=1) / denom
    cos = torch.where(degenerate, torch.zeros_like(cos), cos)
    return (1.0 - cos).mean()


def dynamic_alpha(dsc_shift: float, alpha_min: float, alpha_max: float) -> float:
    """Distillation weight scaled by the teacher's Dice deficit on new data.

    alpha = alpha_min + (1 - dsc) * (alpha_max - alpha_min): a teacher that
    already segments the incoming dataset well needs little regularization.
    """
    if not 0.0 <= dsc_shift <= 1.0:
        raise ValidationError(f"dsc_shift must be in [0, 1], got {dsc_shift}")
    if not 0.0 <= alpha_min <= alpha_max:
        raise ValidationError("need 0 <= alpha_min <= alpha_max")
    return alpha_min + (1.0 - dsc_shift) * (alpha_max - alpha_min)


def total_loss(
    logits,
    target,
    teacher_logits=None,
    student_features=None,
    teacher_features=None,
    alpha_t: float = 0.0,
    cfg: LossConfig = LossConfig(),
) -> LossBreakdown:
    """Weighted sum: dice + ce + beta * cosine + alpha_t * kld.

    Distillation terms contribute only when their inputs are supplied (the
    first session, and strategies that disable a term, pass none). Supplying
    one side of the feature pair without the other is an error.
    """
    if (student_features is None) != (teacher_features is None):
        raise ValidationError(
            "student and teacher features must be supplied together or not at all"
        )
    dice = dice_loss(logits, target, cfg.dice_smooth)
    ce = ce_loss(logits, target)
    total = dice + ce

    kld = None
    if teacher_logits is not None:
        kld = kld_loss(logits, teacher_logits, cfg.temperature, cfg.kld_direction)
        total = total + alpha_t * kld
    cos = None
    if student_features is not None:
        cos = cosine_loss(student_features, teacher_features)
        total = total + cfg.beta * cos

    return LossBreakdown(
        task_dice=float(dice.detach()),
        task_ce=float(ce.detach()),
        kld=float(kld.detach()) if kld is not None else 0.0,
        cosine=float(cos.detach()) if cos is not None else 0.0,
        alpha_t=float(alpha_t),
        total=float(total.detach()),
        tensor=total,
    )
