"""Corpus model: splits, synthetic generation, manifests, batch sampling.

Three splits with strictly different label visibility:

* ``weak``      clip-level tags only
* ``unlabeled`` no labels at all (ground truth kept in a sidecar file that
                training code never reads)
* ``test``      full event lists with boundaries

The synthetic generator writes 16 kHz mono WAV clips with exact ground
truth. Every clip derives an independent child RNG from (corpus seed, clip
index), so generation is deterministic and parallelizable per clip.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import features, synthesis
from .errors import ConfigError, SamplingError, ValidationError

SPLITS = ("weak", "unlabeled", "test")


@dataclass(frozen=True, order=True)
class EventInterval:
    """One labeled event occurrence: class plus onset/offset in seconds."""

    class_id: int
    onset: float
    offset: float

    def validate(self, n_classes: int | None = None, clip_seconds: float | None = None) -> None:
        if not 0 <= self.onset < self.offset:
            raise ValidationError(f"require 0 <= onset < offset, got [{self.onset}, {self.offset}]")
        if clip_seconds is not None and self.offset > clip_seconds + 1e-9:
            raise ValidationError(f"offset {self.offset} exceeds clip duration {clip_seconds}")
        if n_classes is not None and not 0 <= self.class_id < n_classes:
            raise ValidationError(f"unknown class id {self.class_id} (n_classes={n_classes})")

    @property
    def duration(self) -> float:
        return self.offset - self.onset


@dataclass(frozen=True)
class ClipRecord:
    """One clip in a manifest. Label fields are present only where the split allows."""

    clip_id: str
    split: str
    audio_path: str
    feature_path: str | None = None
    tags: tuple[int, ...] | None = None
    events: tuple[EventInterval, ...] | None = None

    def validate(self, n_classes: int | None = None, clip_seconds: float | None = None,
                 sidecar: bool = False) -> None:
        if self.split not in SPLITS:
            raise ValidationError(f"{self.clip_id}: unknown split {self.split!r}")
        if self.events is not None:
            for ev in self.events:
                try:
                    ev.validate(n_classes, clip_seconds)
                except ValidationError as exc:
                    raise ValidationError(f"{self.clip_id}: {exc}") from None
        if self.tags is not None and n_classes is not None:
            bad = [t for t in self.tags if not 0 <= t < n_classes]
            if bad:
                raise ValidationError(f"{self.clip_id}: unknown class id {bad[0]} in tags")
        if sidecar:
            # Sidecar rows carry full truth for every split; tags must equal
            # the union of event classes.
            if self.events is None or self.tags is None:
                raise ValidationError(f"{self.clip_id}: sidecar record missing truth fields")
            if set(self.tags) != {ev.class_id for ev in self.events}:
                raise ValidationError(f"{self.clip_id}: tags do not match event classes")
            return
        if self.split == "weak":
            if self.tags is None:
                raise ValidationError(f"{self.clip_id}: weak record is missing tags")
            if self.events is not None:
                raise ValidationError(f"{self.clip_id}: weak record must not expose events")
        elif self.split == "unlabeled":
            if self.tags is not None or self.events is not None:
                raise ValidationError(f"{self.clip_id}: unlabeled record must carry no labels")
        elif self.split == "test":
            if self.events is None:
                raise ValidationError(f"{self.clip_id}: test record is missing events")
            if self.tags is not None and set(self.tags) != {ev.class_id for ev in self.events}:
                raise ValidationError(f"{self.clip_id}: tags do not match event classes")

    def implied_tags(self) -> tuple[int, ...]:
        """Tag union derived from the event list (test/sidecar records)."""
        if self.events is None:
            raise ValidationError(f"{self.clip_id}: no events to derive tags from")
        return tuple(sorted({ev.class_id for ev in self.events}))

    def tag_vector(self, n_classes: int) -> np.ndarray:
        vec = np.zeros(n_classes, dtype=np.float32)
        tags = self.tags if self.tags is not None else self.implied_tags()
        for t in tags:
            vec[t] = 1.0
        return vec


@dataclass(frozen=True)
class CorpusSpec:
    """Parameters of the synthetic corpus."""

    n_classes: int = 5
    n_weak: int = 500
    n_unlabeled: int = 2000
    n_test: int = 200
    clip_seconds: float = 10.0
    sample_rate: int = 16000
    polyphony_max: int = 3
    event_duration_range: tuple[float, float] = (0.25, 1.2)
    snr_range: tuple[float, float] = (6.0, 20.0)
    seed: int = 0

    def validate(self) -> None:
        if min(self.n_weak, self.n_unlabeled, self.n_test) < 0:
            raise ConfigError("split counts must be >= 0")
        if not 1 <= self.n_classes <= len(synthesis.CLASS_NAMES):
            raise ConfigError(
                f"n_classes must be in [1, {len(synthesis.CLASS_NAMES)}], got {self.n_classes}"
            )
        lo, hi = self.event_duration_range
        if not 0 < lo <= hi:
            raise ConfigError(f"bad event_duration_range {self.event_duration_range}")
        if hi > self.clip_seconds:
            raise ConfigError(
                f"event duration up to {hi}s cannot be placed in a {self.clip_seconds}s clip"
            )
        if self.polyphony_max < 1:
            raise ConfigError("polyphony_max must be >= 1")
        if self.snr_range[0] > self.snr_range[1]:
            raise ConfigError(f"bad snr_range {self.snr_range}")
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")

    @property
    def total_clips(self) -> int:
        return self.n_weak + self.n_unlabeled + self.n_test

    def fingerprint(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]

    def class_names(self) -> tuple[str, ...]:
        return synthesis.CLASS_NAMES[: self.n_classes]


@dataclass
class Minibatch:
    """One training batch: features plus label visibility mask."""

    inputs: np.ndarray  # (B, T, F) float32
    weak_mask: np.ndarray  # (B,) bool, True where the clip carries tags
    tags: np.ndarray  # (B, C) float32, valid rows only where weak_mask
    clip_ids: list[str]

    def __len__(self) -> int:
        return len(self.clip_ids)


# ---------------------------------------------------------------------------
# Scene sampling and corpus generation
# ---------------------------------------------------------------------------


def _max_simultaneous(intervals) -> int:
    marks = []
    for onset, offset in intervals:
        marks.append((onset, 1))
        marks.append((offset, -1))
    marks.sort()
    peak = level = 0
    for _, step in marks:
        level += step
        peak = max(peak, level)
    return peak


def sample_scene(spec: CorpusSpec, rng: np.random.Generator) -> list[EventInterval]:
    """Draw one clip's events: 1-3 distinct classes, uniform placement.

    Placement retries until the simultaneous-event count respects
    polyphony_max, falling back to evenly spaced sequential placement.
    """
    max_events = min(3, spec.n_classes)
    n_events = int(rng.integers(1, max_events + 1))
    classes = rng.choice(spec.n_classes, size=n_events, replace=False)
    lo, hi = spec.event_duration_range
    durations = rng.uniform(lo, hi, size=n_events)

    for _ in range(50):
        onsets = np.array([rng.uniform(0.0, spec.clip_seconds - d) for d in durations])
        spans = list(zip(onsets, onsets + durations))
        if _max_simultaneous(spans) <= spec.polyphony_max:
            break
    else:
        total = durations.sum()
        if total > spec.clip_seconds:
            keep = max(1, int(spec.clip_seconds // hi))
            classes, durations = classes[:keep], durations[:keep]
            total = durations.sum()
        gap = (spec.clip_seconds - total) / (len(durations) + 1)
        onsets = gap + np.concatenate([[0.0], np.cumsum(durations[:-1] + gap)])

    events = [
        EventInterval(int(c), round(float(o), 6), round(float(o + d), 6))
        for c, o, d in zip(classes, onsets, durations)
    ]
    return sorted(events)


def clip_rng(seed: int, clip_index: int) -> np.random.Generator:
    """Independent child generator for one clip."""
    return np.random.default_rng([seed, clip_index])


def generate_synthetic_corpus(spec: CorpusSpec, out_dir) -> list[ClipRecord]:
    """Write WAV clips, manifest, sidecar truth and metadata under out_dir.

    Returns the manifest records. Deterministic given spec (including its
    seed): rerunning into a fresh directory yields byte-identical manifests
    and audio.
    """
    spec.validate()
    out_dir = Path(out_dir)
    audio_dir = out_dir / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "features").mkdir(exist_ok=True)

    split_plan = [("weak", spec.n_weak), ("unlabeled", spec.n_unlabeled), ("test", spec.n_test)]
    records: list[ClipRecord] = []
    truth: list[ClipRecord] = []
    index = 0
    for split, count in split_plan:
        for i in range(count):
            clip_id = f"{split}-{i:05d}"
            rng = clip_rng(spec.seed, index)
            events = tuple(sample_scene(spec, rng))
            samples = synthesis.render_scene(
                [(ev.class_id, ev.onset, ev.offset) for ev in events],
                spec.clip_seconds,
                spec.sample_rate,
                spec.snr_range,
                rng,
            )
            audio_path = f"audio/{clip_id}.wav"
            feature_path = f"features/{clip_id}.lmel"
            features.write_wav(
                out_dir / audio_path,
                features.Waveform(samples=samples, sample_rate=spec.sample_rate),
            )
            tags = tuple(sorted({ev.class_id for ev in events}))
            if split == "weak":
                record = ClipRecord(clip_id, split, audio_path, feature_path, tags=tags)
            elif split == "unlabeled":
                record = ClipRecord(clip_id, split, audio_path, feature_path)
            else:
                record = ClipRecord(clip_id, split, audio_path, feature_path, events=events)
            records.append(record)
            truth.append(
                ClipRecord(clip_id, split, audio_path, feature_path, tags=tags, events=events)
            )
            index += 1

    write_manifest(records, out_dir / "manifest.jsonl")
    write_manifest(truth, out_dir / "truth_sidecar.jsonl")
    meta = {
        "class_names": list(spec.class_names()),
        "fingerprint": spec.fingerprint(),
        "spec": asdict(spec),
    }
    (out_dir / "corpus_meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return records


# ---------------------------------------------------------------------------
# Manifest I/O (JSONL, one clip per line)
# ---------------------------------------------------------------------------


def _record_to_json(record: ClipRecord) -> dict:
    row: dict = {
        "clip_id": record.clip_id,
        "split": record.split,
        "audio_path": record.audio_path,
    }
    if record.feature_path is not None:
        row["feature_path"] = record.feature_path
    if record.tags is not None:
        row["tags"] = list(record.tags)
    if record.events is not None:
        row["events"] = [
            {"class": ev.class_id, "onset": ev.onset, "offset": ev.offset} for ev in record.events
        ]
    return row


def write_manifest(records, path) -> None:
    with open(path, "w") as fh:
        for record in records:
            fh.write(json.dumps(_record_to_json(record), sort_keys=True) + "\n")


def load_manifest(path, n_classes: int | None = None, sidecar: bool = False) -> list[ClipRecord]:
    """Read and validate a JSONL manifest; errors cite line number and clip."""
    path = Path(path)
    if n_classes is None:
        meta_path = path.parent / "corpus_meta.json"
        if meta_path.exists():
            n_classes = json.loads(meta_path.read_text())["spec"]["n_classes"]

    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: not valid JSON ({exc})") from None
            try:
                record = _record_from_json(row)
                record.validate(n_classes=n_classes, sidecar=sidecar)
            except (KeyError, TypeError, ValidationError) as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            records.append(record)
    return records


def _record_from_json(row: dict) -> ClipRecord:
    events = None
    if "events" in row:
        events = tuple(
            EventInterval(int(ev["class"]), float(ev["onset"]), float(ev["offset"]))
            for ev in row["events"]
        )
    tags = tuple(int(t) for t in row["tags"]) if "tags" in row else None
    return ClipRecord(
        clip_id=row["clip_id"],
        split=row["split"],
        audio_path=row["audio_path"],
        feature_path=row.get("feature_path"),
        tags=tags,
        events=events,
    )


def split_records(records, split: str) -> list[ClipRecord]:
    return [r for r in records if r.split == split]


def validation_split(records, fraction: float = 0.1) -> tuple[list[ClipRecord], list[ClipRecord]]:
    """Hold out a fixed slice of clips for per-epoch validation.

    Clips are ordered by the md5 digest of their id, so the same corpus
    always yields the same held-out set regardless of training seed, and
    the slice stays balanced in expectation. Returns (train, held_out).
    """
    if not 0.0 <= fraction < 1.0:
        raise ConfigError(f"validation fraction must lie in [0, 1), got {fraction}")
    records = list(records)
    if not records:
        return [], []
    ranked = sorted(records, key=lambda r: hashlib.md5(r.clip_id.encode()).hexdigest())
    n_held = min(len(records) - 1, max(1, round(fraction * len(records)))) if fraction > 0 else 0
    held_ids = {r.clip_id for r in ranked[:n_held]}
    train = [r for r in records if r.clip_id not in held_ids]
    held = [r for r in records if r.clip_id in held_ids]
    return train, held


# ---------------------------------------------------------------------------
# Feature store
# ---------------------------------------------------------------------------


class FeatureStore:
    """Maps clip records to cached log mel matrices, computing on miss."""

    def __init__(self, root, config: features.FeatureConfig):
        self.root = Path(root)
        self.config = config

    def path_for(self, record: ClipRecord) -> Path:
        if record.feature_path is not None:
            return self.root / record.feature_path
        return self.root / "features" / f"{record.clip_id}.lmel"

    def get(self, record: ClipRecord) -> features.LogMelSpectrogram:
        path = self.path_for(record)
        if path.exists():
            return features.load_features(path)
        wav = features.read_wav(self.root / record.audio_path)
        spec = features.compute_log_mel(wav, self.config)
        path.parent.mkdir(parents=True, exist_ok=True)
        features.save_features(path, spec)
        return spec

    def ensure_cached(self, records) -> None:
        for record in records:
            if not self.path_for(record).exists():
                self.get(record)

    def load_stack(self, records) -> np.ndarray:
        """(N, T, F) float32 stack; all clips must share a shape."""
        mats = [self.get(r).values for r in records]
        return np.stack(mats).astype(np.float32, copy=False)

    def hop_seconds(self, record: ClipRecord) -> float:
        return self.get(record).frame_hop_seconds


# ---------------------------------------------------------------------------
# Minibatch sampling
# ---------------------------------------------------------------------------


def labeled_quota(batch_size: int, labeled_fraction: float) -> int:
    if not 0.0 <= labeled_fraction <= 1.0:
        raise ConfigError(f"labeled_fraction must lie in [0, 1], got {labeled_fraction}")
    return int(round(batch_size * labeled_fraction))


class MinibatchSampler:
    """Stateful epoch iterator over a weak pool and an unlabeled pool.

    Every batch holds exactly ``round(batch_size * labeled_fraction)``
    labeled clips. An epoch is one pass without replacement over the pool
    that needs the most batches at its quota; the other pool is reshuffled
    and recycled as full permutations, so per epoch each clip appears either
    floor or ceil of (draws / pool size) times. The final batch of an epoch
    may be short when the driving pool does not divide evenly.

    Single-owner: one consumer per instance (the RNG is internal state).
    """

    def __init__(self, weak_features, weak_tags, unlabeled_features, batch_size: int,
                 labeled_fraction: float, seed: int, weak_ids=None, unlabeled_ids=None):
        self.weak_features = weak_features
        self.weak_tags = weak_tags
        self.unlabeled_features = unlabeled_features
        self.batch_size = int(batch_size)
        self.n_weak = 0 if weak_features is None else len(weak_features)
        self.n_unlabeled = 0 if unlabeled_features is None else len(unlabeled_features)
        self.weak_ids = weak_ids if weak_ids is not None else [f"weak#{i}" for i in range(self.n_weak)]
        self.unlabeled_ids = (
            unlabeled_ids if unlabeled_ids is not None else [f"unl#{i}" for i in range(self.n_unlabeled)]
        )
        self.quota_weak = labeled_quota(self.batch_size, labeled_fraction)
        self.quota_unlabeled = self.batch_size - self.quota_weak
        if self.quota_weak > 0 and self.n_weak == 0:
            raise SamplingError("labeled quota is positive but the weak pool is empty")
        if self.quota_unlabeled > 0 and self.n_unlabeled == 0:
            raise SamplingError("unlabeled quota is positive but the unlabeled pool is empty")
        if self.quota_weak == 0 and self.quota_unlabeled == 0:
            raise SamplingError("batch size and labeled fraction give an empty batch")
        self.rng = np.random.default_rng(seed)

    def _needs(self) -> list[int]:
        need = []
        if self.quota_weak > 0:
            need.append(-(-self.n_weak // self.quota_weak))
        if self.quota_unlabeled > 0:
            need.append(-(-self.n_unlabeled // self.quota_unlabeled))
        return need

    def batches_per_epoch(self) -> int:
        return max(self._needs())

    def _index_stream(self, n: int, quota: int, n_batches: int) -> np.ndarray:
        """Per-epoch index sequence for one pool.

        The pool that drives the epoch length contributes exactly one
        permutation, so its final slice may fall short of the quota. A pool
        that needs fewer batches than the epoch provides is recycled via
        fresh permutations and always fills its quota.
        """
        if -(-n // quota) == n_batches:
            return self.rng.permutation(n)
        total = n_batches * quota
        chunks = []
        drawn = 0
        while drawn < total:
            chunks.append(self.rng.permutation(n))
            drawn += n
        return np.concatenate(chunks)[:total]

    def epoch(self):
        """Yield Minibatches for one epoch."""
        n_batches = self.batches_per_epoch()
        weak_stream = (
            self._index_stream(self.n_weak, self.quota_weak, n_batches) if self.quota_weak else None
        )
        unl_stream = (
            self._index_stream(self.n_unlabeled, self.quota_unlabeled, n_batches)
            if self.quota_unlabeled
            else None
        )
        n_classes = self.weak_tags.shape[1] if self.weak_tags is not None else 0
        for b in range(n_batches):
            parts, masks, tag_rows, ids = [], [], [], []
            if weak_stream is not None:
                take = weak_stream[b * self.quota_weak : (b + 1) * self.quota_weak]
                parts.append(self.weak_features[take])
                masks.append(np.ones(len(take), dtype=bool))
                tag_rows.append(self.weak_tags[take])
                ids.extend(self.weak_ids[i] for i in take)
            if unl_stream is not None:
                take = unl_stream[b * self.quota_unlabeled : (b + 1) * self.quota_unlabeled]
                parts.append(self.unlabeled_features[take])
                masks.append(np.zeros(len(take), dtype=bool))
                tag_rows.append(np.zeros((len(take), n_classes), dtype=np.float32))
                ids.extend(self.unlabeled_ids[i] for i in take)
            yield Minibatch(
                inputs=np.concatenate(parts, axis=0),
                weak_mask=np.concatenate(masks),
                tags=np.concatenate(tag_rows, axis=0) if tag_rows else np.zeros((0, n_classes)),
                clip_ids=ids,
            )


def sample_minibatch(weak_pool, unlabeled_pool, batch_size: int, labeled_fraction: float,
                     rng_state: int) -> Minibatch:
    """One deterministic batch; pools are (features, tags) and features arrays."""
    weak_features, weak_tags = weak_pool
    sampler = MinibatchSampler(
        weak_features, weak_tags, unlabeled_pool, batch_size, labeled_fraction, seed=rng_state
    )
    return next(sampler.epoch())
