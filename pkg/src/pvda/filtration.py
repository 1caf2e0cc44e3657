"""Source-class filtration weights.

Weights are averages of target predictions over the source label space,
rescaled so the largest entry is 1. Classes the target data never predicts
end up near 0 and are suppressed in the training objective.
"""

from __future__ import annotations

import csv
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UsageError
from .model import ForwardOutput


@dataclass(frozen=True)
class ClassWeights:
    gamma: np.ndarray
    epoch_computed: int = 0

    def __post_init__(self):
        gamma = np.asarray(self.gamma, dtype=np.float64).reshape(-1)
        gamma.setflags(write=False)
        object.__setattr__(self, "gamma", gamma)

    def __len__(self) -> int:
        return self.gamma.shape[0]

    def lookup(self, labels) -> np.ndarray:
        return self.gamma[np.asarray(labels, dtype=np.int64)]

    @classmethod
    def ones(cls, num_classes: int, epoch: int = 0) -> ClassWeights:
        return cls(np.ones(num_classes), epoch)


def normalize(gamma) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=np.float64)
    top = gamma.max()
    if top <= 0:
        return np.ones_like(gamma)
    return gamma / top


def gamma_pada(target_predictions, epoch: int = 0) -> ClassWeights:
    """Mean target prediction over the source classes, max-normalized."""
    preds = np.asarray(target_predictions, dtype=np.float64)
    if preds.size == 0:
        raise UsageError("gamma_pada needs at least one target prediction")
    preds = np.atleast_2d(preds)
    return ClassWeights(normalize(preds.mean(axis=0)), epoch)


def gamma_patan(
    target_outputs: Sequence[ForwardOutput],
    use_local: bool = True,
    epoch: int = 0,
) -> ClassWeights:
    """Temporal-attentive class weights from spatial, temporal and per-scale predictions.

    Per target video the spatial and overall-temporal predictions are added
    to the attention-weighted per-scale predictions, averaged over ``k + 1``
    terms and over videos. With ``use_local=False`` only the two head
    predictions enter and the divisor is 2.
    """
    if not target_outputs:
        raise UsageError("gamma_patan needs at least one target output")
    ks = {out.k for out in target_outputs}
    if len(ks) != 1:
        raise ConfigError(f"target outputs mix frame counts {sorted(ks)}")
    k = ks.pop()
    total = None
    count = 0
    for out in target_outputs:
        s = out.y_t.sum(axis=0) + out.y_sp.sum(axis=0)
        if use_local:
            for r in sorted(out.y_r):
                s = s + (out.w_r[r][:, None] * out.y_r[r]).sum(axis=0)
        if total is not None and s.shape != total.shape:
            raise ConfigError("target outputs disagree on the number of classes")
        total = s if total is None else total + s
        count += out.n
    denom = count * ((k + 1) if use_local else 2)
    return ClassWeights(normalize(total / denom), epoch)


def update_schedule(
    epoch: int,
    num_classes: int,
    recompute: Callable[[], ClassWeights] | None = None,
) -> ClassWeights:
    """All-ones weights at epoch 0, otherwise a fresh full-pass estimate."""
    if epoch < 0:
        raise UsageError(f"epoch must be >= 0, got {epoch}")
    if epoch == 0 or recompute is None:
        return ClassWeights.ones(num_classes, epoch)
    weights = recompute()
    return ClassWeights(weights.gamma, epoch)


def outlier_ratio(gamma, num_target_classes: int) -> float | None:
    """Mean weight over outlier classes divided by mean over shared classes."""
    gamma = np.asarray(gamma, dtype=np.float64)
    if not 0 < num_target_classes < gamma.shape[0]:
        return None
    shared = gamma[:num_target_classes].mean()
    outlier = gamma[num_target_classes:].mean()
    return float(outlier / shared) if shared > 0 else None


def write_gamma_csv(weights, class_names, num_target_classes: int, path, summary: bool = False) -> None:
    gamma = np.asarray(getattr(weights, "gamma", weights), dtype=np.float64)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["class_index", "class_name", "weight", "is_target_class"])
        for c, w in enumerate(gamma):
            writer.writerow([c, class_names[c], format(w, ".17g"), int(c < num_target_classes)])
        if summary:
            shared = gamma[:num_target_classes].mean() if num_target_classes > 0 else None
            has_outliers = num_target_classes < gamma.shape[0]
            outlier = gamma[num_target_classes:].mean() if has_outliers else None
            ratio = outlier_ratio(gamma, num_target_classes)
            writer.writerow([])
            writer.writerow(["shared_mean", "outlier_mean", "ratio"])
            writer.writerow(
                [
                    "" if shared is None else format(shared, ".17g"),
                    "" if outlier is None else format(outlier, ".17g"),
                    "" if ratio is None else format(ratio, ".17g"),
                ]
            )
