"""Accuracy metrics and CSV/JSON exports.

Target labels are only read here, inside ``LABEL_AUDIT.evaluation()``.
"""

from __future__ import annotations

import csv
from collections.abc import Sequence

import numpy as np

from .data import LABEL_AUDIT, VideoSample
from .errors import PvdaError, UsageError
from .jsonio import dumps
from .model import PatanModel, predict_labels
from .training import predict_frames


def _labels(samples: Sequence[VideoSample]) -> np.ndarray:
    with LABEL_AUDIT.evaluation():
        labels = [s.label for s in samples]
    if any(label is None for label in labels):
        raise UsageError("evaluation needs labelled samples")
    return np.asarray(labels, dtype=np.int64)


def predict(model: PatanModel, samples: Sequence[VideoSample], attentive: bool = True) -> np.ndarray:
    frames = np.stack([s.frames for s in samples])
    return np.concatenate([predict_labels(out) for out in predict_frames(model, frames, attentive)])


def top1_accuracy(model: PatanModel, samples: Sequence[VideoSample], attentive: bool = True) -> float:
    if not samples:
        raise UsageError("top1_accuracy needs at least one sample")
    return float((predict(model, samples, attentive) == _labels(samples)).mean())


def per_class_accuracy(
    model: PatanModel, samples: Sequence[VideoSample], attentive: bool = True
) -> np.ndarray:
    """Accuracy per class index; NaN for classes with no samples."""
    if not samples:
        raise UsageError("per_class_accuracy needs at least one sample")
    labels = _labels(samples)
    correct = predict(model, samples, attentive) == labels
    out = np.full(model.config.num_classes, np.nan)
    for c in np.unique(labels):
        out[c] = correct[labels == c].mean()
    return out


def export_features(model: PatanModel, samples: Sequence[VideoSample], path, attentive: bool = True) -> None:
    """One row per video: id, domain, label and the overall temporal feature."""
    frames = np.stack([s.frames for s in samples])
    feats = np.concatenate([out.f.values for out in predict_frames(model, frames, attentive)])
    with LABEL_AUDIT.evaluation():
        labels = [s.label for s in samples]
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["id", "domain", "label"] + [f"f{i}" for i in range(feats.shape[1])])
            for sample, label, row in zip(samples, labels, feats):
                writer.writerow(
                    [sample.id, sample.domain, "" if label is None else label]
                    + [format(v, ".17g") for v in row]
                )
    except OSError as exc:
        raise PvdaError(f"cannot write features to {path}: {exc}") from exc


def write_json(obj, path) -> None:
    try:
        with open(path, "w") as fh:
            fh.write(dumps(obj) + "\n")
    except OSError as exc:
        raise PvdaError(f"cannot write {path}: {exc}") from exc
