"""Network heads: spatial path, multi-scale relation modules, label attention.

A forward pass is batched: ``frames`` is an ``(n, k, d_in)`` array and every
node in the returned :class:`ForwardOutput` has ``n`` rows.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass
from functools import cache, cached_property, lru_cache

import numpy as np

from .autodiff import (
    Node,
    ParamSet,
    constant,
    log_softmax,
    op_add,
    op_add_bias,
    op_clamp_min,
    op_exp,
    op_grl,
    op_log_softmax,
    op_matmul,
    op_mul,
    op_relu,
    op_row_scale,
    op_sum_rows,
    op_tanh,
    parameter,
    softmax,
)
from .errors import ConfigError, InputError

LOG_PROB_FLOOR = math.log(1e-8)


@dataclass
class ModelConfig:
    d_in: int
    k: int
    num_classes: int
    d_sp: int = 16
    d_t: int = 16
    h_rel: int = 32
    h_disc: int = 16
    max_subsets_per_scale: int = 32
    stop_grad_attention: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.k < 2:
            raise ConfigError(f"k must be >= 2, got {self.k}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        for name in ("d_in", "d_sp", "d_t", "h_rel", "h_disc", "max_subsets_per_scale"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def scales(self) -> range:
        return range(2, self.k + 1)

    def to_dict(self) -> dict:
        return asdict(self)


@cache
def _clip_subsets(k: int, r: int, cap: int, seed: int) -> tuple[tuple[int, ...], ...]:
    if not 2 <= r <= k:
        raise ConfigError(f"scale r={r} outside [2, {k}]")
    if math.comb(k, r) <= cap:
        return tuple(tuple(i + 1 for i in c) for c in itertools.combinations(range(k), r))
    rng = np.random.default_rng([seed, k, r])
    chosen: set[tuple[int, ...]] = set()
    while len(chosen) < cap:
        pick = np.sort(rng.choice(k, size=r, replace=False))
        chosen.add(tuple(int(i) + 1 for i in pick))
    return tuple(sorted(chosen))


def clip_subsets(k: int, r: int, cap: int = 32, seed: int = 0) -> list[tuple[int, ...]]:
    """Frame index tuples (1-based, ascending) fused by the scale-``r`` relation module.

    All ``C(k, r)`` combinations in lexicographic order when they fit under
    ``cap``; otherwise ``cap`` distinct combinations drawn with ``seed``.
    """
    return list(_clip_subsets(k, r, cap, seed))


@dataclass
class Linear:
    weight: Node
    bias: Node

    def __call__(self, x: Node) -> Node:
        return op_add_bias(op_matmul(x, self.weight), self.bias)


@dataclass
class Perceptron:
    """One ReLU hidden layer followed by a linear output."""

    hidden: Linear
    out: Linear

    def __call__(self, x: Node) -> Node:
        return self.out(op_relu(self.hidden(x)))


@dataclass
class ForwardOutput:
    x: Node
    sp_logits: Node
    f_r: dict[int, Node]
    aux_logits: dict[int, Node]
    w_r: dict[int, np.ndarray]
    f: Node
    t_logits: Node
    spd_logits: Node
    td_logits: Node

    # Class probabilities are derived lazily; loss evaluation never needs them.
    @cached_property
    def y_sp(self) -> np.ndarray:
        return softmax(self.sp_logits.values)

    @cached_property
    def y_t(self) -> np.ndarray:
        return softmax(self.t_logits.values)

    @cached_property
    def y_r(self) -> dict[int, np.ndarray]:
        return {r: softmax(node.values) for r, node in self.aux_logits.items()}

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def k(self) -> int:
        return len(self.aux_logits) + 1


class PatanModel:
    """Parameter bundles for every head, initialized deterministically from ``config.seed``."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params = ParamSet()
        rng = np.random.default_rng(config.seed)
        c = config
        self.spf = self._perceptron("spf", rng, c.d_in, c.d_sp, c.d_sp)
        self.spy = self._linear("spy", rng, c.d_sp, c.num_classes)
        self.spd = self._perceptron("spd", rng, c.d_sp, c.h_disc, 2)
        self.rel: dict[int, Perceptron] = {}
        self.aux: dict[int, Linear] = {}
        for r in c.scales:
            self.rel[r] = self._perceptron(f"rel{r}", rng, r * c.d_in, c.h_rel, c.d_t)
            self.aux[r] = self._linear(f"aux{r}", rng, c.d_t, c.num_classes)
        self.ty = self._linear("ty", rng, c.d_t, c.num_classes)
        self.td = self._perceptron("td", rng, c.d_t, c.h_disc, 2)

    def _linear(self, name, rng, fan_in, fan_out) -> Linear:
        a = math.sqrt(6.0 / (fan_in + fan_out))
        w = self.params.add(f"{name}.w", parameter(rng.uniform(-a, a, (fan_in, fan_out))))
        b = self.params.add(f"{name}.b", parameter(np.zeros((1, fan_out))))
        return Linear(w, b)

    def _perceptron(self, name, rng, fan_in, hidden, fan_out) -> Perceptron:
        return Perceptron(
            self._linear(f"{name}.0", rng, fan_in, hidden),
            self._linear(f"{name}.1", rng, hidden, fan_out),
        )

    def state(self) -> dict[str, np.ndarray]:
        return self.params.state()

    def load_state(self, state) -> None:
        self.params.load_state(state)

    def save(self, path) -> None:
        arrays = dict(self.params.state())
        arrays["__config__"] = np.array(json.dumps(self.config.to_dict()))
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> PatanModel:
        try:
            with np.load(path) as data:
                model = cls(ModelConfig(**json.loads(str(data["__config__"]))))
                model.load_state({name: data[name] for name in model.params})
        except FileNotFoundError:
            raise InputError(f"{path}: no such model file") from None
        except (KeyError, ValueError, OSError) as exc:
            raise InputError(f"{path}: not a saved model ({exc})") from None
        return model


def certainty(probs) -> float | np.ndarray:
    """Negative entropy in nats, ``sum p ln max(p, 1e-8)``; rows for 2-D input."""
    p = np.asarray(probs, dtype=np.float64)
    out = (p * np.log(np.maximum(p, 1e-8))).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def attention_weight(probs) -> float | np.ndarray:
    """Label-attention weight ``max(0, tanh(1 + certainty))``."""
    out = np.maximum(0.0, np.tanh(1.0 + np.asarray(certainty(probs))))
    return float(out) if out.ndim == 0 else out


def _attention_node(logits: Node, track_grad: bool) -> Node:
    if not track_grad:
        logp = log_softmax(logits.values)
        cert = (np.exp(logp) * np.maximum(logp, LOG_PROB_FLOOR)).sum(axis=1, keepdims=True)
        return constant(np.maximum(0.0, np.tanh(1.0 + cert)))
    logp = op_log_softmax(logits)
    cert = op_sum_rows(op_mul(op_exp(logp), op_clamp_min(logp, LOG_PROB_FLOOR)))
    return op_relu(op_tanh(op_add(cert, constant(np.ones(cert.shape)))))


@lru_cache(maxsize=256)
def _pool_matrix(n: int, m: int) -> np.ndarray:
    pool = np.kron(np.eye(n), np.ones((1, m)))
    pool.setflags(write=False)
    return pool


def _clip_inputs(frames: np.ndarray, r: int, cfg: ModelConfig) -> tuple[Node, Node]:
    subsets = _clip_subsets(cfg.k, r, cfg.max_subsets_per_scale, cfg.seed)
    idx = np.asarray(subsets) - 1
    n, _, d = frames.shape
    m = len(subsets)
    clips = frames[:, idx, :].reshape(n * m, r * d)
    return constant(clips), Node(_pool_matrix(n, m), op="const")


def local_temporal_feature(model: PatanModel, frames: np.ndarray, r: int) -> Node:
    """Sum of the scale-``r`` relation module over every clip of each video."""
    cfg = model.config
    if not 2 <= r <= cfg.k:
        raise ConfigError(f"scale r={r} outside [2, {cfg.k}]")
    clips, pool = _clip_inputs(_as_batch(frames, cfg), r, cfg)
    return op_matmul(pool, model.rel[r](clips))


def overall_temporal_feature(f_r: dict[int, Node], w_r: dict[int, Node]) -> Node:
    """Attention-weighted sum of per-scale features."""
    total = None
    for r in sorted(f_r):
        term = op_row_scale(f_r[r], w_r[r])
        if total is not None and term.shape != total.shape:
            raise ConfigError(f"scale {r} feature shape {term.shape} != {total.shape}")
        total = term if total is None else op_add(total, term)
    if total is None:
        raise ConfigError("no temporal scales given")
    return total


def _as_batch(frames, cfg: ModelConfig) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 2:
        frames = frames[None]
    if frames.ndim != 3 or frames.shape[1] != cfg.k or frames.shape[2] != cfg.d_in:
        raise InputError(
            f"expected frames of shape (n, {cfg.k}, {cfg.d_in}), got {frames.shape}"
        )
    return frames


def forward(
    model: PatanModel,
    frames,
    grl_coeff: float = 0.0,
    attentive: bool = True,
) -> ForwardOutput:
    """Run every head on a batch of videos.

    ``frames`` is ``(n, k, d_in)`` or a single ``(k, d_in)`` video. With
    ``attentive=False`` every scale weight is fixed to 1 (plain multi-scale
    relation sum).
    """
    cfg = model.config
    frames = _as_batch(frames, cfg)
    n = frames.shape[0]

    x = model.spf(constant(frames.mean(axis=1)))
    sp_logits = model.spy(x)

    f_r: dict[int, Node] = {}
    aux_logits: dict[int, Node] = {}
    w_nodes: dict[int, Node] = {}
    for r in cfg.scales:
        clips, pool = _clip_inputs(frames, r, cfg)
        f_r[r] = op_matmul(pool, model.rel[r](clips))
        aux_logits[r] = model.aux[r](f_r[r])
        if attentive:
            w_nodes[r] = _attention_node(aux_logits[r], not cfg.stop_grad_attention)
        else:
            w_nodes[r] = constant(np.ones((n, 1)))
    f = overall_temporal_feature(f_r, w_nodes)
    t_logits = model.ty(f)

    spd_logits = model.spd(op_grl(x, grl_coeff))
    td_logits = model.td(op_grl(f, grl_coeff))

    return ForwardOutput(
        x=x,
        sp_logits=sp_logits,
        f_r=f_r,
        aux_logits=aux_logits,
        w_r={r: node.values[:, 0].copy() for r, node in w_nodes.items()},
        f=f,
        t_logits=t_logits,
        spd_logits=spd_logits,
        td_logits=td_logits,
    )


def predict_labels(out: ForwardOutput) -> np.ndarray:
    """Argmax of the mean of spatial and temporal predictions; ties go to the lower index."""
    return np.argmax((out.y_sp + out.y_t) / 2.0, axis=1)


def predict_label(out: ForwardOutput) -> int:
    if out.n != 1:
        raise InputError(f"predict_label expects one sample, got {out.n}; use predict_labels")
    return int(predict_labels(out)[0])
