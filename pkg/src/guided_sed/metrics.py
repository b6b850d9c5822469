"""Evaluation: collar-based event matching and clip tagging scores.

Event scoring follows the usual collar convention: a hypothesis matches a
reference of the same class when its onset lies within a fixed collar of
the reference onset and its offset within max(fixed collar, fraction of the
reference duration). Matching is one-to-one with maximum cardinality, so a
hypothesis can never be counted for two references and the TP count does
not depend on event ordering.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import EventInterval
from .errors import ConfigError, InputError


@dataclass(frozen=True)
class CollarConfig:
    onset_collar: float = 0.2
    offset_collar: float = 0.2
    offset_collar_rate: float = 0.2

    def validate(self) -> None:
        if self.onset_collar < 0 or self.offset_collar < 0 or self.offset_collar_rate < 0:
            raise ConfigError("collars must be >= 0")

    def offset_tolerance(self, reference: EventInterval) -> float:
        return max(self.offset_collar, self.offset_collar_rate * reference.duration)

    def admissible(self, reference: EventInterval, hypothesis: EventInterval) -> bool:
        if reference.class_id != hypothesis.class_id:
            return False
        return (
            abs(hypothesis.onset - reference.onset) <= self.onset_collar + 1e-12
            and abs(hypothesis.offset - reference.offset) <= self.offset_tolerance(reference) + 1e-12
        )


@dataclass
class ClassCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        if denom == 0:
            return 0.0
        return 2 * self.tp / denom

    def add(self, other: "ClassCounts") -> None:
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn

    @property
    def seen(self) -> bool:
        return (self.tp + self.fp + self.fn) > 0


def match_events(references, hypotheses, collar: CollarConfig) -> int:
    """Maximum number of one-to-one collar-admissible (ref, hyp) pairs.

    Kuhn's augmenting-path matching on the admissibility graph. Greedy
    pairing can undercount when admissibility windows nest; the augmenting
    search always reaches the true maximum.
    """
    references = list(references)
    hypotheses = list(hypotheses)
    admissible = [
        [collar.admissible(ref, hyp) for hyp in hypotheses] for ref in references
    ]
    owner = [-1] * len(hypotheses)  # hypothesis -> matched reference

    def try_assign(r: int, visited: list[bool]) -> bool:
        for h in range(len(hypotheses)):
            if admissible[r][h] and not visited[h]:
                visited[h] = True
                if owner[h] == -1 or try_assign(owner[h], visited):
                    owner[h] = r
                    return True
        return False

    matched = 0
    for r in range(len(references)):
        if try_assign(r, [False] * len(hypotheses)):
            matched += 1
    return matched


def count_clip(references, hypotheses, n_classes: int, collar: CollarConfig) -> list[ClassCounts]:
    """Per-class TP/FP/FN for one clip."""
    counts = [ClassCounts() for _ in range(n_classes)]
    for c in range(n_classes):
        refs = [ev for ev in references if ev.class_id == c]
        hyps = [ev for ev in hypotheses if ev.class_id == c]
        for ev in refs + hyps:
            if not 0 <= ev.class_id < n_classes:
                raise InputError(f"event class {ev.class_id} outside [0, {n_classes})")
        tp = match_events(refs, hyps, collar)
        counts[c].tp += tp
        counts[c].fp += len(hyps) - tp
        counts[c].fn += len(refs) - tp
    return counts


def event_based_macro_f1(
    references_by_clip: dict,
    hypotheses_by_clip: dict,
    n_classes: int,
    collar: CollarConfig | None = None,
    drop_unseen_classes: bool = True,
) -> tuple[float, list[ClassCounts]]:
    """Macro-averaged event F1 with collars, counts pooled across clips.

    Classes that occur in neither reference nor hypothesis contribute no
    information; by default they are excluded from the macro average rather
    than dragging it toward zero. Hypotheses for clips missing from the
    reference dict are an error; reference clips missing from the
    hypothesis dict count as all-missed.
    """
    collar = collar or CollarConfig()
    collar.validate()
    extra = set(hypotheses_by_clip) - set(references_by_clip)
    if extra:
        raise InputError(f"hypotheses for unknown clip(s): {sorted(extra)[:3]}")
    totals = [ClassCounts() for _ in range(n_classes)]
    for clip_id, refs in references_by_clip.items():
        hyps = hypotheses_by_clip.get(clip_id, [])
        for c, counts in enumerate(count_clip(refs, hyps, n_classes, collar)):
            totals[c].add(counts)
    scored = [c.f1 for c in totals if c.seen] if drop_unseen_classes else [c.f1 for c in totals]
    macro = float(np.mean(scored)) if scored else 0.0
    return macro, totals


def tagging_macro_f1(predictions: np.ndarray, truth: np.ndarray) -> float:
    """Macro F1 over classes for binary clip tags, shapes (clips, classes).

    Every class participates; a class with no positives anywhere scores 0.
    """
    predictions = np.asarray(predictions)
    truth = np.asarray(truth)
    if predictions.shape != truth.shape or predictions.ndim != 2:
        raise InputError(
            f"predictions {tuple(predictions.shape)} and truth {tuple(truth.shape)} must be equal 2-d shapes"
        )
    for arr in (predictions, truth):
        values = np.unique(arr)
        if not np.isin(values, (0, 1)).all():
            raise InputError("tags must be binary")
    scores = []
    for c in range(truth.shape[1]):
        tp = int(np.sum((predictions[:, c] == 1) & (truth[:, c] == 1)))
        fp = int(np.sum((predictions[:, c] == 1) & (truth[:, c] == 0)))
        fn = int(np.sum((predictions[:, c] == 0) & (truth[:, c] == 1)))
        scores.append(ClassCounts(tp, fp, fn).f1)
    return float(np.mean(scores)) if scores else 0.0


def aggregate_runs(values) -> tuple[float, float]:
    """Mean and standard error over repeated runs; one run has zero error."""
    values = [float(v) for v in values]
    if not values:
        raise InputError("cannot aggregate zero runs")
    mean = float(np.mean(values))
    if len(values) == 1:
        return mean, 0.0
    return mean, float(np.std(values, ddof=1) / math.sqrt(len(values)))


@dataclass(frozen=True)
class MetricsReport:
    """Path-free result payload with a canonical JSON form."""

    n_clips: int
    scores: dict = field(default_factory=dict)  # flat metric name -> float
    per_class: dict = field(default_factory=dict)  # class name -> {f1, tp, fp, fn}

    def to_json(self) -> str:
        payload = {
            "n_clips": self.n_clips,
            "per_class": self.per_class,
            "scores": self.scores,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        payload = json.loads(text)
        return cls(
            n_clips=payload["n_clips"],
            scores=payload["scores"],
            per_class=payload["per_class"],
        )
