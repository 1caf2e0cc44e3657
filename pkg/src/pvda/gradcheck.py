"""Randomized finite-difference checks of every op and every training objective."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .model import ModelConfig, PatanModel
from .training import Batch, _dann_parts, _pada_parts, _patan_parts

DOMAIN_TERMS = ("L_spd", "L_td")
DISCRIMINATOR_PREFIXES = ("spd.", "td.")

# Each entry builds a scalar from parameters; shapes are (rows, cols) per input.
_OPS = {
    "matmul": ([(3, 4), (4, 2)], lambda a, b: ad.op_matmul(a, b)),
    "add": ([(3, 2), (3, 2)], lambda a, b: ad.op_add(a, b)),
    "add_bias": ([(3, 2), (1, 2)], lambda a, b: ad.op_add_bias(a, b)),
    "mul": ([(3, 2), (3, 2)], lambda a, b: ad.op_mul(a, b)),
    "row_scale": ([(3, 2), (3, 1)], lambda a, b: ad.op_row_scale(a, b)),
    "scale": ([(3, 2)], lambda a: ad.op_scale(a, -1.7)),
    "relu": ([(3, 4)], lambda a: ad.op_relu(a)),
    "tanh": ([(3, 4)], lambda a: ad.op_tanh(a)),
    "exp": ([(3, 4)], lambda a: ad.op_exp(a)),
    "clamp_min": ([(3, 4)], lambda a: ad.op_clamp_min(a, 0.1)),
    "mean": ([(3, 4)], lambda a: ad.op_mean(a)),
    "sum_rows": ([(3, 4)], lambda a: ad.op_sum_rows(a)),
    "concat_rows": ([(2, 3), (1, 3)], lambda a, b: ad.op_concat_rows([a, b])),
    "log_softmax": ([(3, 4)], lambda a: ad.op_log_softmax(a)),
    "cross_entropy": ([(3, 4)], lambda a: ad.op_cross_entropy(a, np.array([0, 3, 1]))),
    "grl": ([(3, 4)], lambda a: ad.op_grl(a, 0.6)),
}


def _readout(out: ad.Node, rng: np.random.Generator) -> ad.Node:
    """Contract an arbitrary node to a scalar with fixed random weights."""
    proj = ad.constant(rng.uniform(-1, 1, (out.shape[1], 1)))
    rows = ad.constant(rng.uniform(-1, 1, (1, out.shape[0])))
    return ad.op_matmul(rows, ad.op_matmul(out, proj))


def check_op(name: str, rng: np.random.Generator, eps: float = 1e-5) -> float:
    shapes, fn = _OPS[name]
    params = ad.ParamSet(
        (f"in{i}", ad.parameter(rng.uniform(-1, 1, shape))) for i, shape in enumerate(shapes)
    )
    readout_seed = int(rng.integers(2**32))
    nodes = list(params.values())
    if name == "grl":
        return check_grl(nodes[0], params, readout_seed, eps)

    def build():
        return _readout(fn(*nodes), np.random.default_rng(readout_seed))

    return ad.grad_check(build, params, eps)


def check_grl(x: ad.Node, params: ad.ParamSet, readout_seed: int, eps: float = 1e-5, coeff: float = 0.6) -> float:
    """Reversal gradient against ``-coeff`` times the finite difference of the identity graph."""
    params.zero_grad()
    ad.backward(_readout(ad.op_grl(x, coeff), np.random.default_rng(readout_seed)))
    analytic = x.grad.copy()
    params.zero_grad()

    def identity():
        return _readout(x, np.random.default_rng(readout_seed)).item()

    numeric = _central_differences(x, identity, eps)
    return _relative_error(analytic, -coeff * numeric)


def _central_differences(node: ad.Node, fn, eps: float) -> np.ndarray:
    flat = node.values.reshape(-1)
    out = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        with ad.no_grad():
            flat[i] = orig + eps
            up = fn()
            flat[i] = orig - eps
            down = fn()
        flat[i] = orig
        out[i] = (up - down) / (2.0 * eps)
    return out.reshape(node.shape)


def _relative_error(analytic, numeric) -> float:
    err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(numeric))
    return float(err.max()) if err.size else 0.0


def random_problem(rng: np.random.Generator):
    """A small random model with one source and one target batch."""
    k = int(rng.integers(2, 5))
    d_in = int(rng.integers(2, 7))
    num_classes = int(rng.integers(2, 6))
    cfg = ModelConfig(
        d_in=d_in,
        k=k,
        num_classes=num_classes,
        d_sp=2,
        d_t=2,
        h_rel=3,
        h_disc=2,
        stop_grad_attention=False,
        seed=int(rng.integers(2**31)),
    )
    model = PatanModel(cfg)
    for name, node in model.params.items():
        if name.endswith(".b"):
            node.values[...] = rng.uniform(-0.1, 0.1, node.shape)
    n = 2
    source = Batch(rng.uniform(-1, 1, (n, k, d_in)), rng.integers(0, num_classes, n))
    target = Batch(rng.uniform(-1, 1, (n, k, d_in)))
    gamma = rng.uniform(0.05, 1.0, num_classes)
    gamma /= gamma.max()
    return model, source, target, gamma, float(rng.uniform(0.1, 1.0))


def adversarial_grad_check(build, params: ad.ParamSet, coeff: float, eps: float = 1e-5) -> float:
    """Check a gradient-reversed objective against finite differences of its parts.

    ``build`` returns :class:`LossParts`. Discriminator parameters must see
    the plain derivative of the whole objective; every other parameter
    reaches the domain terms through exactly one reversal node, so its
    gradient must equal d(classification)/dp - coeff * d(domain)/dp.
    """
    params.zero_grad()
    ad.backward(build().total)
    worst = 0.0

    def split():
        with ad.no_grad():
            terms = build().terms
        return terms, sorted(terms)

    for name, node in params.items():
        analytic = node.grad.copy()
        flat = node.values.reshape(-1)
        cls_fd = np.empty(flat.size)
        dom_fd = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up, names = split()
            flat[i] = orig - eps
            down, _ = split()
            flat[i] = orig
            diffs = {k: (up[k] - down[k]) / (2.0 * eps) for k in names}
            cls_fd[i] = sum(v for k, v in diffs.items() if k not in DOMAIN_TERMS)
            dom_fd[i] = sum(v for k, v in diffs.items() if k in DOMAIN_TERMS)
        gain = 1.0 if name.startswith(DISCRIMINATOR_PREFIXES) else -coeff
        expected = (cls_fd + gain * dom_fd).reshape(node.shape)
        worst = max(worst, _relative_error(analytic, expected))
    params.zero_grad()
    return worst


def check_loss(which: str, rng: np.random.Generator, eps: float = 1e-5) -> float:
    model, source, target, gamma, coeff = random_problem(rng)
    if which == "dann":
        build = lambda: _dann_parts(model, source, target, coeff, attentive=True)
    elif which == "pada":
        build = lambda: _pada_parts(model, source, target, gamma, coeff, attentive=True)
    elif which == "patan":
        build = lambda: _patan_parts(model, source, target, gamma, coeff)
    else:
        raise ValueError(f"unknown loss {which!r}")
    return adversarial_grad_check(build, model.params, coeff, eps)


def run_all(trials: int = 20, seed: int = 0) -> dict[str, float]:
    """Worst relative error per op and per loss over ``trials`` random points."""
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for name in _OPS:
        worst[f"op:{name}"] = max(check_op(name, rng) for _ in range(trials))
    for which in ("dann", "pada", "patan"):
        worst[f"loss:{which}"] = max(check_loss(which, rng) for _ in range(trials))
    return worst


OP_NAMES = tuple(_OPS)
