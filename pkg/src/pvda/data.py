"""Synthetic source/target frame-feature datasets and the feature CSV format.

Every class has a spatial prototype and a motion vector; frame ``j`` of a
video is ``prototype + (j - 1) * motion / (k - 1) + noise``. Classes in a
confusion pair share the motion vector, so only the order-blind spatial
content separates them. Target videos are rotated in a random 2-plane,
offset, and noisier.

Target labels are kept on the samples for evaluation only. Every read of a
target label goes through :data:`LABEL_AUDIT`, which tests use to prove the
training path never looks at them.
"""

from __future__ import annotations

import contextlib
import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError, UsageError


class LabelAudit:
    """Counts target-label reads, split by whether an evaluator is active."""

    def __init__(self):
        self.training_reads = 0
        self.evaluation_reads = 0
        self._eval_depth = 0

    def reset(self) -> None:
        self.training_reads = 0
        self.evaluation_reads = 0

    def record(self) -> None:
        if self._eval_depth:
            self.evaluation_reads += 1
        else:
            self.training_reads += 1

    @contextlib.contextmanager
    def evaluation(self):
        self._eval_depth += 1
        try:
            yield self
        finally:
            self._eval_depth -= 1


LABEL_AUDIT = LabelAudit()


class VideoSample:
    """One video: a ``(k, d_in)`` frame-feature matrix with label and domain tag."""

    __slots__ = ("_label", "domain", "frames", "id")

    def __init__(self, frames, label: int | None, domain: str, id: str):
        if domain not in ("source", "target"):
            raise InputError(f"domain must be 'source' or 'target', got {domain!r}")
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2:
            raise InputError(f"sample {id}: frames must be 2-D, got shape {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise InputError(f"sample {id}: non-finite frame values")
        self.frames = frames
        self._label = None if label is None else int(label)
        self.domain = domain
        self.id = id

    @property
    def label(self) -> int | None:
        if self.domain == "target":
            LABEL_AUDIT.record()
        return self._label

    def __eq__(self, other) -> bool:
        if not isinstance(other, VideoSample):
            return NotImplemented
        return (
            self.id == other.id
            and self.domain == other.domain
            and self._label == other._label
            and np.array_equal(self.frames, other.frames)
        )

    def __repr__(self) -> str:
        return f"VideoSample(id={self.id!r}, domain={self.domain!r}, shape={self.frames.shape})"


@dataclass
class TargetShift:
    rotation_angle: float = 0.0
    offset_scale: float = 0.0
    noise_multiplier: float = 1.0


@dataclass
class GeneratorSpec:
    num_source_classes: int
    num_target_classes: int
    d_in: int = 16
    k: int = 4
    samples_per_class_source: int = 40
    samples_per_class_target: int = 40
    noise_std: float = 0.3
    target_shift: TargetShift = field(default_factory=TargetShift)
    temporal_confusion_pairs: list[tuple[int, int]] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.target_shift, dict):
            self.target_shift = TargetShift(**self.target_shift)
        self.temporal_confusion_pairs = [tuple(p) for p in self.temporal_confusion_pairs]
        self.validate()

    def validate(self) -> None:
        cs, ct = self.num_source_classes, self.num_target_classes
        if cs < 2:
            raise ConfigError(f"need at least 2 source classes, got {cs}")
        if not 1 <= ct <= cs:
            raise ConfigError(f"num_target_classes must be in [1, {cs}], got {ct}")
        if self.k < 2 or self.d_in < 2:
            raise ConfigError(f"need k >= 2 and d_in >= 2, got k={self.k}, d_in={self.d_in}")
        if self.samples_per_class_source < 1 or self.samples_per_class_target < 1:
            raise ConfigError("samples per class must be positive")
        if self.noise_std < 0 or self.target_shift.noise_multiplier < 0:
            raise ConfigError("noise levels must be non-negative")
        for outlier, shared in self.temporal_confusion_pairs:
            if not (ct <= outlier < cs and 0 <= shared < ct):
                raise ConfigError(
                    f"confusion pair ({outlier}, {shared}) must map an outlier class "
                    f"in [{ct}, {cs}) to a shared class in [0, {ct})"
                )

    def to_dict(self) -> dict:
        out = asdict(self)
        out["temporal_confusion_pairs"] = [list(p) for p in self.temporal_confusion_pairs]
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> GeneratorSpec:
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(f"bad generator spec: {exc}") from None

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class SplitDataset:
    source: list[VideoSample]
    target: list[VideoSample]
    class_names: list[str]
    num_target_classes: int
    spec_fingerprint: str

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def k(self) -> int:
        return self.source[0].frames.shape[0]

    @property
    def d_in(self) -> int:
        return self.source[0].frames.shape[1]

    def source_frames(self) -> np.ndarray:
        return np.stack([s.frames for s in self.source])

    def source_labels(self) -> np.ndarray:
        return np.array([s.label for s in self.source], dtype=np.int64)

    def target_frames(self) -> np.ndarray:
        return np.stack([s.frames for s in self.target])

    def __eq__(self, other) -> bool:
        if not isinstance(other, SplitDataset):
            return NotImplemented
        return (
            self.class_names == other.class_names
            and self.num_target_classes == other.num_target_classes
            and self.source == other.source
            and self.target == other.target
        )


def _random_rotation(rng: np.random.Generator, d: int, angle: float) -> np.ndarray:
    basis, _ = np.linalg.qr(rng.standard_normal((d, 2)))
    u, v = basis[:, 0], basis[:, 1]
    c, s = math.cos(angle), math.sin(angle)
    return (
        np.eye(d)
        + (c - 1.0) * (np.outer(u, u) + np.outer(v, v))
        + s * (np.outer(v, u) - np.outer(u, v))
    )


def generate(spec: GeneratorSpec) -> SplitDataset:
    """Draw a labelled source split and a shifted target split (first classes only)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    cs, d, k = spec.num_source_classes, spec.d_in, spec.k

    protos = rng.standard_normal((cs, d))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    motion = rng.standard_normal((cs, d))
    motion *= 0.5 / np.linalg.norm(motion, axis=1, keepdims=True)
    for outlier, shared in spec.temporal_confusion_pairs:
        motion[outlier] = motion[shared]

    shift = spec.target_shift
    rotation = _random_rotation(rng, d, shift.rotation_angle)
    direction = rng.standard_normal(d)
    offset = shift.offset_scale * direction / np.linalg.norm(direction)

    ramp = (np.arange(k) / (k - 1))[:, None]

    def clean(c: int) -> np.ndarray:
        return protos[c][None, :] + ramp * motion[c][None, :]

    source = []
    for c in range(cs):
        for i in range(spec.samples_per_class_source):
            frames = clean(c) + spec.noise_std * rng.standard_normal((k, d))
            source.append(VideoSample(frames, c, "source", f"s{c:03d}_{i:04d}"))

    target_noise = spec.noise_std * shift.noise_multiplier
    target = []
    for c in range(spec.num_target_classes):
        for i in range(spec.samples_per_class_target):
            frames = clean(c) @ rotation.T + offset + target_noise * rng.standard_normal((k, d))
            target.append(VideoSample(frames, c, "target", f"t{c:03d}_{i:04d}"))

    return SplitDataset(
        source=source,
        target=target,
        class_names=[f"class_{c:02d}" for c in range(cs)],
        num_target_classes=spec.num_target_classes,
        spec_fingerprint=spec.fingerprint(),
    )


BENCHMARKS = ("easy-7of14", "hard-5of10-confused", "equal-14of14")


def default_benchmark(name: str, seed: int = 0) -> GeneratorSpec:
    if name == "easy-7of14":
        return GeneratorSpec(
            num_source_classes=14,
            num_target_classes=7,
            target_shift=TargetShift(rotation_angle=0.3, offset_scale=0.3, noise_multiplier=1.2),
            seed=seed,
        )
    if name == "hard-5of10-confused":
        return GeneratorSpec(
            num_source_classes=10,
            num_target_classes=5,
            target_shift=TargetShift(rotation_angle=0.6, offset_scale=1.0, noise_multiplier=2.0),
            temporal_confusion_pairs=[(5, 0), (6, 1), (7, 2)],
            seed=seed,
        )
    if name == "equal-14of14":
        return GeneratorSpec(
            num_source_classes=14,
            num_target_classes=14,
            target_shift=TargetShift(rotation_angle=0.3, offset_scale=0.3, noise_multiplier=1.2),
            seed=seed,
        )
    raise UsageError(f"unknown benchmark {name!r}; expected one of {', '.join(BENCHMARKS)}")


def write_features(dataset: SplitDataset, path) -> None:
    """Write the one-row-per-frame CSV (floats at 17 significant digits)."""
    d = dataset.d_in
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "domain", "label", "frame"] + [f"f{i}" for i in range(d)])
        for sample in dataset.source + dataset.target:
            label = sample._label
            for j, row in enumerate(sample.frames):
                writer.writerow(
                    [sample.id, sample.domain, "" if label is None else label, j]
                    + [format(v, ".17g") for v in row]
                )


def load_features(path) -> SplitDataset:
    """Parse a feature CSV into a dataset, validating constant ``k`` and ``d_in``."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: no such file")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:4] != ["id", "domain", "label", "frame"] or len(header) < 5:
            raise InputError(f"{path}: missing or malformed header (need id,domain,label,frame,f0,...)")
        d = len(header) - 4
        videos: list[tuple[str, str, int | None, list[list[float]], int]] = []
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 4:
                raise InputError(f"{path}: row {rowno} has {len(row)} cells, expected {d + 4}")
            vid, domain, label_s, frame_s = row[:4]
            if domain not in ("source", "target"):
                raise InputError(f"{path}: row {rowno}: bad domain {domain!r}")
            try:
                label = int(label_s) if label_s != "" else None
                frame = int(frame_s)
                values = [float(v) for v in row[4:]]
            except ValueError:
                raise InputError(f"{path}: row {rowno}: non-numeric cell") from None
            if not all(math.isfinite(v) for v in values):
                raise InputError(f"{path}: row {rowno}: non-finite value")
            if videos and videos[-1][0] == vid:
                if frame != len(videos[-1][3]):
                    raise InputError(f"{path}: row {rowno}: frame index {frame} out of order")
                videos[-1][3].append(values)
            else:
                if frame != 0:
                    raise InputError(f"{path}: row {rowno}: video {vid} must start at frame 0")
                if domain == "source" and label is None:
                    raise InputError(f"{path}: row {rowno}: source video {vid} has no label")
                videos.append((vid, domain, label, [values], rowno))

    if not videos:
        raise InputError(f"{path}: no videos")
    k = len(videos[0][3])
    for vid, _, _, frames, rowno in videos:
        if len(frames) != k:
            raise InputError(f"{path}: row {rowno}: video {vid} has {len(frames)} frames, expected {k}")

    source = [VideoSample(f, lab, dom, vid) for vid, dom, lab, f, _ in videos if dom == "source"]
    target = [VideoSample(f, lab, dom, vid) for vid, dom, lab, f, _ in videos if dom == "target"]
    if not source:
        raise InputError(f"{path}: no source videos")
    num_classes = max(s._label for s in source) + 1
    target_labels = {s._label for s in target if s._label is not None}
    if target_labels and max(target_labels) >= num_classes:
        raise InputError(f"{path}: target label outside the source label space")
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    return SplitDataset(
        source=source,
        target=target,
        class_names=[f"class_{c:02d}" for c in range(num_classes)],
        num_target_classes=len(target_labels),
        spec_fingerprint=digest,
    )
