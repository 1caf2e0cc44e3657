"""Objectives for source-only, DANN, PADA and PATAN training, and the SGD loop.

Domain terms are written as plain cross-entropies on features passed
through a gradient reversal node, so one backward pass trains the
discriminators to separate domains while pushing the feature extractors the
other way.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import (
    Node,
    ParamSet,
    backward,
    constant,
    no_grad,
    op_add,
    op_cross_entropy,
    op_matmul,
    op_scale,
)
from .errors import ConfigError, InputError, TrainingDivergedError
from .filtration import ClassWeights, gamma_pada, gamma_patan, update_schedule
from .jsonio import dumps
from .model import PatanModel, forward, predict_labels

log = logging.getLogger(__name__)

METHODS = ("source_only", "dann", "pada", "patan")
ABLATIONS = ("none", "no_attentive", "no_local_weights", "no_classifier", "no_adversarial")
SOURCE, TARGET = 0, 1


@dataclass
class TrainConfig:
    method: str = "patan"
    ablation: str = "none"
    lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    epochs: int = 30
    lambda_sp: float = 1.0
    lambda_t: float = 1.0
    lambda_aux: float = 1.0
    lr_drop_epochs: tuple[int, int] = (20, 25)
    max_grad_norm: float | None = 5.0
    seed: int = 0

    def __post_init__(self):
        self.lr_drop_epochs = tuple(self.lr_drop_epochs)
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        if self.ablation != "none" and self.method != "patan":
            raise ConfigError(f"ablation {self.ablation!r} only applies to method 'patan'")
        if not self.lr >= 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        for name in ("lambda_sp", "lambda_t", "lambda_aux"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.max_grad_norm is not None and not self.max_grad_norm > 0:
            raise ConfigError(f"max_grad_norm must be positive or null, got {self.max_grad_norm}")
        if len(self.lr_drop_epochs) != 2:
            raise ConfigError("lr_drop_epochs needs exactly two epochs")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["lr_drop_epochs"] = list(self.lr_drop_epochs)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> TrainConfig:
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(f"bad train config: {exc}") from None


@dataclass
class Batch:
    """Frames plus (for source batches) labels; target batches carry no labels."""

    frames: np.ndarray
    labels: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.frames.shape[0]


@dataclass
class LossParts:
    total: Node
    terms: dict[str, float] = field(default_factory=dict)


def grl_schedule(progress: float) -> float:
    """Reversal gain ramp ``2 / (1 + exp(-10 p)) - 1`` from 0 towards 1."""
    if not 0.0 <= progress <= 1.0:
        raise ConfigError(f"progress must be in [0, 1], got {progress}")
    return 2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0


def _weighted_mean(losses: Node, weights: np.ndarray, scale: float = 1.0) -> Node:
    """``scale / n * sum_i weights[i] * losses[i]`` as a 1x1 node."""
    n = losses.shape[0]
    return op_matmul(constant((scale / n) * np.asarray(weights, dtype=np.float64)[None, :]), losses)


def _check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise InputError(f"source label outside [0, {num_classes}): {labels.tolist()}")
    return labels


def _sum(nodes: list[Node]) -> Node:
    total = nodes[0]
    for node in nodes[1:]:
        total = op_add(total, node)
    return total


def _objective(
    model: PatanModel,
    source: Batch,
    target: Batch | None,
    grl_coeff: float,
    *,
    gamma_cls: np.ndarray | None,
    gamma_adv: np.ndarray | None,
    lambda_sp: float,
    lambda_t: float,
    lambda_aux: float,
    attentive: bool,
    adversarial: bool,
) -> LossParts:
    """Assemble the shared two-head objective.

    Source classification on both heads weighted per sample by ``gamma_cls``;
    source-side domain terms weighted by ``gamma_adv`` and scaled by
    ``lambda_sp``; target-side domain terms unweighted and scaled by
    ``lambda_t``; optional auxiliary per-scale classification.
    """
    num_classes = model.config.num_classes
    labels = _check_labels(source.labels, num_classes)
    n_s = source.n
    ones = np.ones(n_s)
    w_cls = ones if gamma_cls is None else np.asarray(gamma_cls)[labels]
    w_adv = ones if gamma_adv is None else np.asarray(gamma_adv)[labels]

    src = forward(model, source.frames, grl_coeff, attentive=attentive)
    parts: dict[str, Node] = {
        "L_ty": _weighted_mean(op_cross_entropy(src.t_logits, labels), w_cls),
        "L_spy": _weighted_mean(op_cross_entropy(src.sp_logits, labels), w_cls),
    }
    if adversarial:
        if target is None or target.n == 0:
            raise InputError("adversarial objectives need a non-empty target batch")
        tgt = forward(model, target.frames, grl_coeff, attentive=attentive)
        src_dom = np.full(n_s, SOURCE)
        tgt_dom = np.full(target.n, TARGET)
        t_ones = np.ones(target.n)
        parts["L_spd"] = op_add(
            _weighted_mean(op_cross_entropy(src.spd_logits, src_dom), w_adv, lambda_sp),
            _weighted_mean(op_cross_entropy(tgt.spd_logits, tgt_dom), t_ones, lambda_t),
        )
        parts["L_td"] = op_add(
            _weighted_mean(op_cross_entropy(src.td_logits, src_dom), w_adv, lambda_sp),
            _weighted_mean(op_cross_entropy(tgt.td_logits, tgt_dom), t_ones, lambda_t),
        )
    if lambda_aux > 0:
        scales = sorted(src.aux_logits)
        aux = [_weighted_mean(op_cross_entropy(src.aux_logits[r], labels), w_cls) for r in scales]
        parts["L_aux"] = op_scale(_sum(aux), lambda_aux / len(scales))

    return LossParts(_sum(list(parts.values())), {k: v.item() for k, v in parts.items()})


def _source_only_parts(model, source, target, grl_coeff, *, lambda_sp=1.0, lambda_t=1.0):
    return _objective(
        model, source, target, grl_coeff,
        gamma_cls=None, gamma_adv=None, lambda_sp=lambda_sp, lambda_t=lambda_t,
        lambda_aux=0.0, attentive=False, adversarial=False,
    )


def _dann_parts(model, source, target, grl_coeff, *, lambda_sp=1.0, lambda_t=1.0, attentive=False):
    return _objective(
        model, source, target, grl_coeff,
        gamma_cls=None, gamma_adv=None, lambda_sp=lambda_sp, lambda_t=lambda_t,
        lambda_aux=0.0, attentive=attentive, adversarial=True,
    )


def _pada_parts(model, source, target, gamma, grl_coeff, *, lambda_sp=1.0, lambda_t=1.0, attentive=False):
    g = _gamma_array(gamma)
    return _objective(
        model, source, target, grl_coeff,
        gamma_cls=g, gamma_adv=g, lambda_sp=lambda_sp, lambda_t=lambda_t,
        lambda_aux=0.0, attentive=attentive, adversarial=True,
    )


def _patan_parts(
    model, source, target, gamma, grl_coeff, ablation="none",
    *, lambda_sp=1.0, lambda_t=1.0, lambda_aux=1.0,
):
    if ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation {ablation!r}; expected one of {ABLATIONS}")
    g = _gamma_array(gamma)
    return _objective(
        model, source, target, grl_coeff,
        gamma_cls=None if ablation == "no_classifier" else g,
        gamma_adv=None if ablation == "no_adversarial" else g,
        lambda_sp=lambda_sp, lambda_t=lambda_t, lambda_aux=lambda_aux,
        attentive=ablation != "no_attentive", adversarial=True,
    )


def _gamma_array(gamma) -> np.ndarray:
    return np.asarray(getattr(gamma, "gamma", gamma), dtype=np.float64)


def loss_source_only(model, source: Batch, target: Batch | None = None, grl_coeff: float = 0.0, **kw) -> Node:
    return _source_only_parts(model, source, target, grl_coeff, **kw).total


def loss_dann(model, source: Batch, target: Batch, grl_coeff: float, **kw) -> Node:
    """Two-head source classification plus reversed spatial and temporal domain terms."""
    return _dann_parts(model, source, target, grl_coeff, **kw).total


def loss_pada(model, source: Batch, target: Batch, gamma, grl_coeff: float, **kw) -> Node:
    """DANN objective with source classification and source domain terms weighted by class."""
    return _pada_parts(model, source, target, gamma, grl_coeff, **kw).total


def loss_patan(model, source: Batch, target: Batch, gamma, grl_coeff: float, ablation: str = "none", **kw) -> Node:
    """Class-weighted two-head objective on attentive temporal features plus auxiliary scale classifiers."""
    return _patan_parts(model, source, target, gamma, grl_coeff, ablation, **kw).total


@dataclass
class EpochMetrics:
    epoch: int
    losses: dict[str, float]
    source_accuracy: float
    target_accuracy: float | None
    gamma: list[float]
    lr: float

    def to_dict(self) -> dict:
        return asdict(self)


class SGD:
    """Momentum SGD with decoupled weight decay.

    ``v <- momentum * v + grad``; ``p <- p - lr * (v + weight_decay * p)``.
    With ``max_grad_norm`` set, the gradient is first rescaled so its global
    L2 norm does not exceed it.
    """

    def __init__(
        self,
        params: ParamSet,
        lr: float,
        momentum: float = 0.9,
        weight_decay: float = 0.0,
        max_grad_norm: float | None = None,
    ):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.max_grad_norm = max_grad_norm
        self.velocity = {name: np.zeros_like(node.values) for name, node in params.items()}

    def zero_grad(self) -> None:
        self.params.zero_grad()

    def step(self) -> None:
        scale = 1.0
        if self.max_grad_norm is not None:
            norm = math.sqrt(sum(float((node.grad**2).sum()) for node in self.params.values()))
            if norm > self.max_grad_norm:
                scale = self.max_grad_norm / norm
        for name, node in self.params.items():
            v = self.velocity[name]
            v *= self.momentum
            v += node.grad if scale == 1.0 else scale * node.grad
            node.values -= self.lr * (v + self.weight_decay * node.values)


def predict_frames(model: PatanModel, frames: np.ndarray, attentive: bool, chunk: int = 64):
    """Batched inference; yields forward outputs for successive chunks."""
    for start in range(0, frames.shape[0], chunk):
        with no_grad():
            out = forward(model, frames[start : start + chunk], 0.0, attentive=attentive)
        yield out


def uses_attention(config: TrainConfig) -> bool:
    return config.method == "patan" and config.ablation != "no_attentive"


def estimate_gamma(model: PatanModel, target_frames: np.ndarray, config: TrainConfig, epoch: int = 0) -> ClassWeights:
    """Class weights from one full pass over unlabelled target frames.

    PATAN (and its ablations) uses the temporal-attentive rule; every other
    method uses the mean fused head prediction.
    """
    outs = list(predict_frames(model, target_frames, uses_attention(config)))
    if config.method == "patan":
        return gamma_patan(outs, use_local=config.ablation != "no_local_weights", epoch=epoch)
    preds = np.concatenate([(o.y_sp + o.y_t) / 2.0 for o in outs])
    return gamma_pada(preds, epoch=epoch)


def _method_parts(config: TrainConfig, model, source, target, gamma, coeff) -> LossParts:
    kw = dict(lambda_sp=config.lambda_sp, lambda_t=config.lambda_t)
    if config.method == "source_only":
        return _source_only_parts(model, source, None, coeff, **kw)
    if config.method == "dann":
        return _dann_parts(model, source, target, coeff, **kw)
    if config.method == "pada":
        return _pada_parts(model, source, target, gamma, coeff, **kw)
    return _patan_parts(model, source, target, gamma, coeff, config.ablation, lambda_aux=config.lambda_aux, **kw)


def train(
    config: TrainConfig,
    data,
    model: PatanModel,
    evaluate: Callable[[PatanModel], float] | None = None,
    metrics_path=None,
) -> list[EpochMetrics]:
    """Train ``model`` on a :class:`~pvda.data.SplitDataset`.

    Only frames are taken from the target split; its labels never reach the
    optimizer.
    """
    if not data.source or not data.target:
        raise InputError("training needs at least one source and one target sample")
    return fit(
        config,
        data.source_frames(),
        data.source_labels(),
        data.target_frames(),
        model,
        evaluate=evaluate,
        metrics_path=metrics_path,
    )


def fit(
    config: TrainConfig,
    source_frames: np.ndarray,
    source_labels: np.ndarray,
    target_frames: np.ndarray,
    model: PatanModel,
    evaluate: Callable[[PatanModel], float] | None = None,
    metrics_path=None,
) -> list[EpochMetrics]:
    """Run ``config.epochs`` epochs of paired source/target mini-batch SGD.

    The training path sees target frames only. ``evaluate`` (optional) is
    called after each epoch to report target accuracy; it is the only
    place target labels may be consulted.
    """
    config.validate()
    source_frames = np.asarray(source_frames, dtype=np.float64)
    source_labels = _check_labels(source_labels, model.config.num_classes)
    target_frames = np.asarray(target_frames, dtype=np.float64)
    n_s, n_t = source_frames.shape[0], target_frames.shape[0]
    if n_s == 0 or n_t == 0:
        raise InputError("training needs at least one source and one target sample")
    if config.epochs == 0:
        return []

    rng = np.random.default_rng([config.seed, 7])
    opt = SGD(model.params, config.lr, config.momentum, config.weight_decay, config.max_grad_norm)
    bs = config.batch_size
    steps_per_epoch = math.ceil(max(n_s, n_t) / bs)
    total_steps = config.epochs * steps_per_epoch
    filtered = config.method in ("pada", "patan")
    num_classes = model.config.num_classes
    attentive = uses_attention(config)

    history: list[EpochMetrics] = []
    sink = open(metrics_path, "w") if metrics_path is not None else None
    try:
        global_step = 0
        for epoch in range(config.epochs):
            opt.lr = config.lr * 0.1 ** sum(epoch >= e for e in config.lr_drop_epochs)
            if filtered:
                gamma = update_schedule(
                    epoch, num_classes, lambda: estimate_gamma(model, target_frames, config, epoch)
                )
            else:
                gamma = ClassWeights.ones(num_classes, epoch)

            s_order = _cycled_order(rng, n_s, steps_per_epoch * bs)
            t_order = _cycled_order(rng, n_t, steps_per_epoch * bs)
            sums: dict[str, float] = {}
            for step in range(steps_per_epoch):
                coeff = grl_schedule(global_step / total_steps)
                si = s_order[step * bs : (step + 1) * bs]
                ti = t_order[step * bs : (step + 1) * bs]
                parts = _method_parts(
                    config,
                    model,
                    Batch(source_frames[si], source_labels[si]),
                    Batch(target_frames[ti]),
                    gamma,
                    coeff,
                )
                if not math.isfinite(parts.total.item()):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, step {step}: {parts.terms}"
                    )
                opt.zero_grad()
                backward(parts.total)
                opt.step()
                for name, value in parts.terms.items():
                    sums[name] = sums.get(name, 0.0) + value
                global_step += 1

            src_correct = 0
            for start, out in zip(range(0, n_s, 64), predict_frames(model, source_frames, attentive)):
                pred = predict_labels(out)
                src_correct += int((pred == source_labels[start : start + out.n]).sum())
            metrics = EpochMetrics(
                epoch=epoch,
                losses={name: value / steps_per_epoch for name, value in sums.items()},
                source_accuracy=src_correct / n_s,
                target_accuracy=None if evaluate is None else float(evaluate(model)),
                gamma=[float(g) for g in gamma.gamma],
                lr=opt.lr,
            )
            history.append(metrics)
            log.debug("epoch %d %s", epoch, metrics.losses)
            if sink is not None:
                sink.write(dumps(metrics.to_dict(), indent=None) + "\n")
    finally:
        if sink is not None:
            sink.close()
    return history


def _cycled_order(rng: np.random.Generator, n: int, length: int) -> np.ndarray:
    reps = math.ceil(length / n)
    return np.concatenate([rng.permutation(n) for _ in range(reps)])[:length]
