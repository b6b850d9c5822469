"""From frame probabilities to event lists.

The chain is: threshold the frame probabilities per class, median-smooth
each class track, then decode maximal runs of active frames into
(class, onset, offset) events on the feature hop grid.

Smoothing windows can be fixed or derived per class as roughly a third of
the class's median event duration, snapped to the nearest odd frame count.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import median_filter

from .corpus import EventInterval
from .errors import ConfigError, InputError


@dataclass(frozen=True)
class SmoothingConfig:
    """Frame threshold plus per-class median windows.

    Window resolution order: an explicit ``windows`` tuple wins; otherwise
    ``derivation_rule="duration_adaptive"`` derives one window per class as
    ``duration_fraction`` of the class's median event duration (where the
    caller can supply duration statistics); otherwise every class uses
    ``default_window``.
    """

    frame_threshold: float = 0.5
    default_window: int = 9
    windows: tuple[int, ...] | None = None
    derivation_rule: str = "duration_adaptive"
    duration_fraction: float = 1.0 / 3.0

    def validate(self, n_classes: int | None = None) -> None:
        if not 0.0 < self.frame_threshold < 1.0:
            raise ConfigError(f"frame_threshold must lie in (0, 1), got {self.frame_threshold}")
        if self.derivation_rule not in ("fixed", "duration_adaptive"):
            raise ConfigError(
                f"derivation_rule must be 'fixed' or 'duration_adaptive', got {self.derivation_rule!r}"
            )
        if not 0.0 < self.duration_fraction <= 1.0:
            raise ConfigError(
                f"duration_fraction must lie in (0, 1], got {self.duration_fraction}"
            )
        candidates = [self.default_window]
        if self.windows is not None:
            candidates.extend(self.windows)
            if n_classes is not None and len(self.windows) != n_classes:
                raise ConfigError(
                    f"need one window per class ({n_classes}), got {len(self.windows)}"
                )
        for w in candidates:
            if w < 1 or w % 2 == 0:
                raise ConfigError(f"median windows must be odd and >= 1, got {w}")

    def window_for(self, class_id: int) -> int:
        if self.windows is None:
            return self.default_window
        return self.windows[class_id]


def binarize(probs: np.ndarray, threshold: float) -> np.ndarray:
    """Hard decisions: 1 where the probability reaches the threshold."""
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    probs = np.asarray(probs)
    if probs.size and (np.nanmin(probs) < 0.0 or np.nanmax(probs) > 1.0):
        raise InputError("probabilities must lie in [0, 1]")
    return (probs >= threshold).astype(np.uint8)


def median_smooth(mask: np.ndarray, window) -> np.ndarray:
    """Per-class median filter over time with edge-inclusive reflection.

    ``window`` is one odd int for all classes or a sequence per class. The
    boundary repeats the edge frame (symmetric padding), so an isolated
    onset frame at the clip edge is treated like any interior spike.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise InputError(f"expected a (frames, classes) mask, got shape {tuple(mask.shape)}")
    n_frames, n_classes = mask.shape
    windows = [int(window)] * n_classes if np.isscalar(window) else [int(w) for w in window]
    if len(windows) != n_classes:
        raise InputError(f"need one window per class ({n_classes}), got {len(windows)}")
    out = np.empty_like(mask)
    for c, w in enumerate(windows):
        if w < 1 or w % 2 == 0:
            raise InputError(f"median windows must be odd and >= 1, got {w}")
        if w > 2 * n_frames - 1:
            raise InputError(f"window {w} exceeds 2*frames-1 = {2 * n_frames - 1}")
        out[:, c] = median_filter(mask[:, c], size=w, mode="reflect")
    return out


def nearest_odd(x: float) -> int:
    """Snap a positive frame count to the nearest odd integer (ties go up)."""
    if x < 0:
        raise InputError(f"frame count must be >= 0, got {x}")
    return 2 * int(x // 2) + 1


def derive_windows(
    median_durations, hop_seconds: float, fraction: float = 1.0 / 3.0, fallback: int = 9
) -> tuple[int, ...]:
    """Per-class smoothing windows from median event durations (seconds).

    Each window covers ``fraction`` of the class's median duration. Classes
    with no duration estimate (None or NaN) fall back to the default.
    """
    if hop_seconds <= 0:
        raise ConfigError(f"hop_seconds must be positive, got {hop_seconds}")
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    if fallback < 1 or fallback % 2 == 0:
        raise ConfigError(f"fallback window must be odd and >= 1, got {fallback}")
    windows = []
    for duration in median_durations:
        if duration is None or (isinstance(duration, float) and np.isnan(duration)):
            windows.append(fallback)
            continue
        if duration <= 0:
            raise ConfigError(f"median durations must be positive, got {duration}")
        # Round away float-division noise so durations that land exactly on
        # the frame grid snap to the intended window.
        windows.append(nearest_odd(round(duration * fraction / hop_seconds, 9)))
    return tuple(windows)


def decode_events(mask: np.ndarray, hop_seconds: float) -> list[EventInterval]:
    """Maximal runs of active frames, as events on the hop grid.

    A run of frames [a, b] becomes onset a*hop, offset (b+1)*hop, rounded
    to microseconds. Events come out sorted by (class, onset).
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise InputError(f"expected a (frames, classes) mask, got shape {tuple(mask.shape)}")
    if hop_seconds <= 0:
        raise ConfigError(f"hop_seconds must be positive, got {hop_seconds}")
    events = []
    for c in range(mask.shape[1]):
        track = np.concatenate([[0], mask[:, c].astype(np.int8), [0]])
        flips = np.flatnonzero(np.diff(track))
        for start, stop in zip(flips[::2], flips[1::2]):
            events.append(
                EventInterval(c, round(start * hop_seconds, 6), round(stop * hop_seconds, 6))
            )
    return sorted(events)


def smooth_and_decode(
    frame_probs: np.ndarray,
    config: SmoothingConfig,
    hop_seconds: float,
    clip_probs: np.ndarray | None = None,
    clip_threshold: float = 0.5,
) -> list[EventInterval]:
    """The full chain: binarize, median-smooth, decode.

    When ``clip_probs`` is given, classes whose clip probability falls below
    ``clip_threshold`` are silenced before smoothing, so the detector only
    emits events for classes the clip decision accepts.
    """
    config.validate(n_classes=np.asarray(frame_probs).shape[-1])
    mask = binarize(frame_probs, config.frame_threshold)
    if clip_probs is not None:
        mask = mask * binarize(clip_probs, clip_threshold)[np.newaxis, :]
    n_classes = mask.shape[1]
    windows = [config.window_for(c) for c in range(n_classes)]
    return decode_events(median_smooth(mask, windows), hop_seconds)


# ---------------------------------------------------------------------------
# Event list serialization
# ---------------------------------------------------------------------------


def write_events_jsonl(events_by_clip: dict, path, header: dict | None = None) -> None:
    """One line per clip: {"clip_id": ..., "events": [{class, onset, offset}]}.

    An optional metadata row (no clip_id) may lead the file; readers skip it.
    """
    with open(path, "w") as fh:
        if header:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
        for clip_id in sorted(events_by_clip):
            row = {
                "clip_id": clip_id,
                "events": [
                    {"class": ev.class_id, "onset": ev.onset, "offset": ev.offset}
                    for ev in events_by_clip[clip_id]
                ],
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_events_jsonl(path) -> dict:
    events_by_clip = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            if "clip_id" not in row:  # leading metadata row
                continue
            events_by_clip[row["clip_id"]] = [
                EventInterval(int(ev["class"]), float(ev["onset"]), float(ev["offset"]))
                for ev in row["events"]
            ]
    return events_by_clip


def write_events_tsv(events_by_clip: dict, class_names, path, comment: str | None = None) -> None:
    """Tab-separated rows: clip_id, onset, offset, class name.

    An optional leading #-comment carries provenance.
    """
    path = Path(path)
    lines = [f"# {comment}"] if comment else []
    for clip_id in sorted(events_by_clip):
        for ev in events_by_clip[clip_id]:
            lines.append(f"{clip_id}\t{ev.onset:.6f}\t{ev.offset:.6f}\t{class_names[ev.class_id]}")
    path.write_text("\n".join(lines) + ("\n" if lines else ""))
