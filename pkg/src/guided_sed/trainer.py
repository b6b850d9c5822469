"""Synchronous teacher-student training from weak tags and unlabeled clips.

Two models with complementary biases train side by side: a time-compressing
tagger (better clip labels) and a frame-preserving detector (better
boundaries). Each batch mixes labeled and unlabeled clips. On the labeled
part both models fit the reference tags; on the unlabeled part each model
fits hard pseudo-tags cut from the other model's clip probabilities, with
gradients blocked through the tag provider.

The detector learns from the tagger's pseudo-tags from the first epoch.
The reverse direction, tagger learning from detector tags, only ramps in
after a warmup: its weight is 0 through epoch s and 1 - gamma^(e - s)
afterwards, approaching 1 as training proceeds.

Every loss term is a sum over its own subset of the batch divided by the
full batch size, so term magnitudes stay comparable as the labeled
fraction changes.
"""

from __future__ import annotations

import copy
import json
from collections.abc import Callable
from dataclasses import dataclass, asdict, field

import numpy as np
import torch

from .corpus import MinibatchSampler
from .errors import ConfigError, DivergenceError, InputError
from .metrics import tagging_macro_f1
from .nets import SedModel


@dataclass(frozen=True)
class TrainConfig:
    """Shared knobs of all training loops.

    ``labeled_fraction`` fixes the labeled share of every minibatch; leave
    it None to match the global weak:unlabeled ratio of the training pools.
    """

    epochs: int = 100
    batch_size: int = 64
    labeled_fraction: float | None = None
    learning_rate: float = 1e-3
    gamma: float = 0.999
    ramp_start_epoch: int = 5
    tag_threshold: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.labeled_fraction is not None and not 0.0 <= self.labeled_fraction <= 1.0:
            raise ConfigError(f"labeled_fraction must lie in [0, 1], got {self.labeled_fraction}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.99 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0.99, 1.0], got {self.gamma}")
        if not 0.0 < self.tag_threshold < 1.0:
            raise ConfigError(f"tag_threshold must lie in (0, 1), got {self.tag_threshold}")
        if self.ramp_start_epoch < 0:
            raise ConfigError(f"ramp_start_epoch must be >= 0, got {self.ramp_start_epoch}")
        if self.epochs > 0 and self.ramp_start_epoch >= self.epochs:
            raise ConfigError(
                f"ramp_start_epoch {self.ramp_start_epoch} leaves no epoch for the ramp "
                f"(epochs={self.epochs})"
            )


def resolve_labeled_fraction(config: TrainConfig, data: "TrainingData") -> float:
    """The per-batch labeled share: explicit if set, else the pool ratio."""
    if config.labeled_fraction is not None:
        return config.labeled_fraction
    n_unlabeled = 0 if data.unlabeled_x is None else len(data.unlabeled_x)
    if n_unlabeled == 0:
        return 1.0
    return len(data.weak_x) / (len(data.weak_x) + n_unlabeled)


def unsupervised_weight(epoch: int, ramp_start: int, gamma: float) -> float:
    """Weight of the detector-to-tagger guidance term at a 1-indexed epoch."""
    if epoch < 1:
        raise InputError(f"epochs are 1-indexed, got {epoch}")
    if epoch <= ramp_start:
        return 0.0
    return 1.0 - gamma ** (epoch - ramp_start)


def binary_cross_entropy(probs: torch.Tensor, targets: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """Per-row BCE, averaged over classes; probabilities are clamped to
    [eps, 1 - eps] so hard 0/1 outputs cannot produce infinities."""
    if probs.shape != targets.shape:
        raise InputError(f"shape mismatch: {tuple(probs.shape)} vs {tuple(targets.shape)}")
    p = probs.clamp(eps, 1.0 - eps)
    losses = -(targets * torch.log(p) + (1.0 - targets) * torch.log1p(-p))
    return losses.mean(dim=-1)


def clip_prediction(clip_probs, threshold: float = 0.5):
    """Hard clip tags: 1 where probability reaches the threshold."""
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    if isinstance(clip_probs, torch.Tensor):
        return (clip_probs.detach() >= threshold).to(clip_probs.dtype)
    return (np.asarray(clip_probs) >= threshold).astype(np.float32)


def frame_prediction(frame_probs, clip_pred, threshold: float = 0.5):
    """Hard frame activations, gated by the clip decision.

    A frame is active only when the product of its probability and the
    binary clip prediction for that class reaches the threshold, so classes
    the tagger rejects produce no frame activity at all. ``clip_pred``
    broadcasts against the trailing class axis of ``frame_probs``.
    """
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    if isinstance(frame_probs, torch.Tensor):
        gate = torch.as_tensor(clip_pred, dtype=frame_probs.dtype)
        product = frame_probs.detach() * gate
        return (product >= threshold).to(frame_probs.dtype)
    product = np.asarray(frame_probs) * np.asarray(clip_pred, dtype=np.float32)
    return (product >= threshold).astype(np.float32)


@dataclass
class LossBundle:
    labeled_ps: torch.Tensor
    labeled_pt: torch.Tensor
    unlabeled_ps: torch.Tensor
    unlabeled_pt: torch.Tensor
    weight: float
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {
            "labeled_ps": float(self.labeled_ps.detach()),
            "labeled_pt": float(self.labeled_pt.detach()),
            "unlabeled_ps": float(self.unlabeled_ps.detach()),
            "unlabeled_pt": float(self.unlabeled_pt.detach()),
            "weight": self.weight,
            "total": float(self.total.detach()),
        }


def compute_guided_losses(
    pt_clip_probs: torch.Tensor,
    ps_clip_probs: torch.Tensor,
    tags: torch.Tensor,
    weak_mask: torch.Tensor,
    weight: float,
    tag_threshold: float = 0.5,
) -> LossBundle:
    """All four loss terms for one mixed batch.

    Pseudo-tags are detached before thresholding, so neither model receives
    gradient through the tags it provides. When the ramp weight is exactly
    zero the fourth term is left out of the total entirely rather than
    multiplied by zero, which keeps ablation runs bit-identical.
    """
    if pt_clip_probs.shape != ps_clip_probs.shape or pt_clip_probs.shape != tags.shape:
        raise InputError("clip probabilities and tags must share one shape")
    batch_size = pt_clip_probs.shape[0]
    if batch_size == 0:
        raise InputError("cannot compute losses for an empty batch")
    labeled = weak_mask
    unlabeled = ~weak_mask

    labeled_ps = binary_cross_entropy(ps_clip_probs[labeled], tags[labeled]).sum() / batch_size
    labeled_pt = binary_cross_entropy(pt_clip_probs[labeled], tags[labeled]).sum() / batch_size

    pt_pseudo = clip_prediction(pt_clip_probs[unlabeled], tag_threshold)
    ps_pseudo = clip_prediction(ps_clip_probs[unlabeled], tag_threshold)
    unlabeled_ps = binary_cross_entropy(ps_clip_probs[unlabeled], pt_pseudo).sum() / batch_size
    unlabeled_pt = binary_cross_entropy(pt_clip_probs[unlabeled], ps_pseudo).sum() / batch_size

    total = labeled_ps + labeled_pt + unlabeled_ps
    if weight != 0.0:
        total = total + weight * unlabeled_pt
    return LossBundle(labeled_ps, labeled_pt, unlabeled_ps, unlabeled_pt, weight, total)


@dataclass
class EpochLog:
    epoch: int
    unsupervised_weight: float
    losses: dict = field(default_factory=dict)  # per-term epoch means
    val_tagging_f1: dict = field(default_factory=dict)  # model role -> macro F1

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EpochLog":
        return cls(**json.loads(text))


@dataclass
class TrainingData:
    """Preloaded feature arrays: a labeled pool, an unlabeled pool, and an
    optional held-out labeled slice used only for per-epoch validation."""

    weak_x: np.ndarray
    weak_y: np.ndarray
    unlabeled_x: np.ndarray | None = None
    val_x: np.ndarray | None = None
    val_y: np.ndarray | None = None

    def validate(self) -> None:
        if self.weak_x.ndim != 3 or self.weak_y.ndim != 2:
            raise InputError("weak_x must be (clips, frames, mels) and weak_y (clips, classes)")
        if len(self.weak_x) != len(self.weak_y):
            raise InputError(
                f"weak pools disagree: {len(self.weak_x)} feature rows vs {len(self.weak_y)} tag rows"
            )
        if self.unlabeled_x is not None and self.unlabeled_x.shape[1:] != self.weak_x.shape[1:]:
            raise InputError("unlabeled clips must share the weak clips' feature shape")
        if (self.val_x is None) != (self.val_y is None):
            raise InputError("validation features and tags must come together")
        if self.val_x is not None and len(self.val_x) != len(self.val_y):
            raise InputError("validation features and tags disagree in length")

    @property
    def n_classes(self) -> int:
        return self.weak_y.shape[1]


def evaluate_tagging(model: SedModel, x: np.ndarray, y: np.ndarray,
                     threshold: float = 0.5, batch_size: int = 32) -> float:
    """Macro tagging F1 of hard clip predictions over a labeled array."""
    model.eval()
    predictions = []
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            chunk = torch.from_numpy(x[start : start + batch_size])
            predictions.append(clip_prediction(model(chunk).clip_probs, threshold).numpy())
    if not predictions:
        return 0.0
    return tagging_macro_f1(np.concatenate(predictions).astype(int), y.astype(int))


def _validation_scores(models: dict, data: TrainingData, threshold: float) -> dict:
    if data.val_x is None or not len(data.val_x):
        return {}
    return {
        name: evaluate_tagging(model, data.val_x, data.val_y, threshold)
        for name, model in models.items()
    }


def _check_finite(total: torch.Tensor, epoch: int, batch_index: int) -> None:
    if not bool(torch.isfinite(total)):
        raise DivergenceError(
            f"loss became non-finite ({float(total.detach())})", epoch=epoch, batch=batch_index
        )


def train_guided(
    pt_model: SedModel,
    ps_model: SedModel,
    data: TrainingData,
    config: TrainConfig,
    ablate_reverse: bool = False,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> list[EpochLog]:
    """Train both models in place with one shared optimizer; returns one log
    per epoch. ``ablate_reverse`` pins the detector-to-tagger weight at 0.
    ``on_epoch`` runs after each epoch's log entry, with the models paused;
    callers use it to snapshot weights without touching the loop."""
    config.validate()
    data.validate()
    labeled_fraction = resolve_labeled_fraction(config, data)
    if data.unlabeled_x is None and labeled_fraction < 1.0:
        raise ConfigError("mixed batches need an unlabeled pool; set labeled_fraction=1.0")
    optimizer = torch.optim.Adam(
        list(pt_model.parameters()) + list(ps_model.parameters()), lr=config.learning_rate
    )
    sampler = MinibatchSampler(
        data.weak_x,
        data.weak_y,
        data.unlabeled_x,
        config.batch_size,
        labeled_fraction,
        seed=config.seed,
    )
    logs = []
    for epoch in range(1, config.epochs + 1):
        weight = 0.0 if ablate_reverse else unsupervised_weight(
            epoch, config.ramp_start_epoch, config.gamma
        )
        pt_model.train()
        ps_model.train()
        sums: dict = {}
        n_batches = 0
        for batch_index, batch in enumerate(sampler.epoch()):
            x = torch.from_numpy(batch.inputs)
            tags = torch.from_numpy(batch.tags)
            mask = torch.from_numpy(batch.weak_mask)
            bundle = compute_guided_losses(
                pt_model(x).clip_probs,
                ps_model(x).clip_probs,
                tags,
                mask,
                weight,
                config.tag_threshold,
            )
            _check_finite(bundle.total, epoch, batch_index)
            optimizer.zero_grad()
            bundle.total.backward()
            optimizer.step()
            for key, value in bundle.as_floats().items():
                if key != "weight":
                    sums[key] = sums.get(key, 0.0) + value
            n_batches += 1
        logs.append(
            EpochLog(
                epoch=epoch,
                unsupervised_weight=weight,
                losses={k: v / n_batches for k, v in sums.items()},
                val_tagging_f1=_validation_scores(
                    {"pt": pt_model, "ps": ps_model}, data, config.tag_threshold
                ),
            )
        )
        if on_epoch is not None:
            on_epoch(logs[-1])
    return logs


def train_weak_only(
    model: SedModel,
    data: TrainingData,
    config: TrainConfig,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> list[EpochLog]:
    """Supervised baseline: batches of labeled clips only, same loss scale."""
    config.validate()
    data.validate()
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    sampler = MinibatchSampler(
        data.weak_x, data.weak_y, None, config.batch_size, 1.0, seed=config.seed
    )
    role = model.spec.kind
    logs = []
    for epoch in range(1, config.epochs + 1):
        model.train()
        total_sum = 0.0
        n_batches = 0
        for batch_index, batch in enumerate(sampler.epoch()):
            x = torch.from_numpy(batch.inputs)
            tags = torch.from_numpy(batch.tags)
            out = model(x)
            loss = binary_cross_entropy(out.clip_probs, tags).sum() / len(batch)
            _check_finite(loss, epoch, batch_index)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total_sum += float(loss.detach())
            n_batches += 1
        logs.append(
            EpochLog(
                epoch=epoch,
                unsupervised_weight=0.0,
                losses={"labeled": total_sum / n_batches, "total": total_sum / n_batches},
                val_tagging_f1=_validation_scores({role: model}, data, config.tag_threshold),
            )
        )
        if on_epoch is not None:
            on_epoch(logs[-1])
    return logs


def ema_update(teacher: SedModel, student: SedModel, decay: float) -> None:
    """Exponential moving average of the student into the teacher, in place.

    Floating tensors (parameters and running stats) are averaged; integer
    buffers are copied. decay=1 freezes the teacher, decay=0 tracks exactly.
    """
    if not 0.0 <= decay <= 1.0:
        raise ConfigError(f"decay must lie in [0, 1], got {decay}")
    with torch.no_grad():
        student_state = student.state_dict()
        for name, tensor in teacher.state_dict().items():
            source = student_state[name]
            if tensor.dtype.is_floating_point:
                tensor.mul_(decay).add_(source, alpha=1.0 - decay)
            else:
                tensor.copy_(source)


MEAN_TEACHER_GAMMA = 0.01 ** (1.0 / 30.0)  # consistency weight reaches 0.99 by epoch 30


def train_mean_teacher(
    student: SedModel,
    data: TrainingData,
    config: TrainConfig,
    ema_decay: float = 0.999,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> tuple[SedModel, list[EpochLog]]:
    """Self-ensembling baseline on the same mixed batches.

    The teacher starts as a copy of the student and tracks it by EMA after
    every step. The student fits reference tags on the labeled part and a
    ramped mean-squared consistency to the teacher's clip probabilities on
    the whole batch. Returns the teacher and the epoch logs; the student is
    trained in place and is the model evaluated downstream.
    """
    config.validate()
    data.validate()
    labeled_fraction = resolve_labeled_fraction(config, data)
    if data.unlabeled_x is None and labeled_fraction < 1.0:
        raise ConfigError("mixed batches need an unlabeled pool; set labeled_fraction=1.0")
    teacher = copy.deepcopy(student)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    optimizer = torch.optim.Adam(student.parameters(), lr=config.learning_rate)
    sampler = MinibatchSampler(
        data.weak_x,
        data.weak_y,
        data.unlabeled_x,
        config.batch_size,
        labeled_fraction,
        seed=config.seed,
    )
    logs = []
    for epoch in range(1, config.epochs + 1):
        weight = unsupervised_weight(epoch, 0, MEAN_TEACHER_GAMMA)
        student.train()
        sums = {"labeled": 0.0, "consistency": 0.0, "total": 0.0}
        n_batches = 0
        for batch_index, batch in enumerate(sampler.epoch()):
            x = torch.from_numpy(batch.inputs)
            tags = torch.from_numpy(batch.tags)
            mask = torch.from_numpy(batch.weak_mask)
            student_clip = student(x).clip_probs
            with torch.no_grad():
                teacher_clip = teacher(x).clip_probs
            labeled = binary_cross_entropy(student_clip[mask], tags[mask]).sum() / len(batch)
            consistency = ((student_clip - teacher_clip) ** 2).mean(dim=-1).sum() / len(batch)
            loss = labeled + weight * consistency
            _check_finite(loss, epoch, batch_index)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            ema_update(teacher, student, ema_decay)
            sums["labeled"] += float(labeled.detach())
            sums["consistency"] += float(consistency.detach())
            sums["total"] += float(loss.detach())
            n_batches += 1
        logs.append(
            EpochLog(
                epoch=epoch,
                unsupervised_weight=weight,
                losses={k: v / n_batches for k, v in sums.items()},
                val_tagging_f1=_validation_scores(
                    {"student": student, "teacher": teacher}, data, config.tag_threshold
                ),
            )
        )
        if on_epoch is not None:
            on_epoch(logs[-1])
    return teacher, logs
