"""Seeded experiment grids: single runs, method comparison, target-class sweep.

Run ``i`` of an experiment uses seed ``base_seed + i`` for data generation,
model initialization and batch order, so every method in a comparison sees
byte-identical data for a given run index.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import (
    BENCHMARKS,
    GeneratorSpec,
    SplitDataset,
    default_benchmark,
    generate,
    load_features,
)
from .errors import ConfigError
from .evaluation import top1_accuracy, write_json
from .filtration import outlier_ratio, write_gamma_csv
from .model import ModelConfig, PatanModel
from .training import METHODS, TrainConfig, estimate_gamma, train, uses_attention

log = logging.getLogger(__name__)

ROW_LABELS = {
    ("source_only", "none"): "Source-only",
    ("dann", "none"): "DANN",
    ("pada", "none"): "PADA",
    ("patan", "none"): "PATAN",
    ("patan", "no_attentive"): "PATAN w/o attentive",
    ("patan", "no_local_weights"): "PATAN w/o local weights",
    ("patan", "no_classifier"): "PATAN w/o classifier",
    ("patan", "no_adversarial"): "PATAN w/o adversarial",
}
MODEL_KEYS = ("d_sp", "d_t", "h_rel", "h_disc", "max_subsets_per_scale", "stop_grad_attention")


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: GeneratorSpec | str = "hard-5of10-confused"
    model: dict = field(default_factory=dict)
    output_dir: str | None = None
    runs: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.runs < 1:
            raise ConfigError(f"runs must be >= 1, got {self.runs}")
        unknown = set(self.model) - set(MODEL_KEYS)
        if unknown:
            raise ConfigError(f"unknown model options {sorted(unknown)}")

    @classmethod
    def from_dict(cls, raw: dict) -> ExperimentConfig:
        raw = dict(raw)
        unknown = set(raw) - {"train", "data", "model", "output_dir", "runs", "seed"}
        if unknown:
            raise ConfigError(f"unknown experiment keys {sorted(unknown)}")
        train_cfg = TrainConfig.from_dict(raw.pop("train", {}))
        data = raw.pop("data", "hard-5of10-confused")
        if isinstance(data, dict):
            data = dict(data)
            if "benchmark" in data:
                base = default_benchmark(data.pop("benchmark")).to_dict()
                base.update(data)
                data = GeneratorSpec.from_dict(base)
            elif "path" in data:
                data = str(data["path"])
            else:
                data = GeneratorSpec.from_dict(data)
        elif not isinstance(data, str):
            raise ConfigError("data must be a benchmark name, a feature-file path or a generator spec")
        return cls(train=train_cfg, data=data, **raw)

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        data = self.data.to_dict() if isinstance(self.data, GeneratorSpec) else self.data
        return {
            "train": self.train.to_dict(),
            "data": data,
            "model": dict(self.model),
            "runs": self.runs,
            "seed": self.seed,
        }

    def generator_spec(self) -> GeneratorSpec | None:
        if isinstance(self.data, GeneratorSpec):
            return self.data
        if self.data in BENCHMARKS:
            return default_benchmark(self.data)
        return None

    def dataset(self, run_seed: int) -> SplitDataset:
        spec = self.generator_spec()
        if spec is None:
            return load_features(self.data)
        return generate(replace(spec, seed=run_seed))


def run_label(method: str, ablation: str = "none") -> str:
    return ROW_LABELS[(method, ablation)]


def _median(values):
    values = [v for v in values if v is not None]
    return float(np.median(values)) if values else None


def run_single(config: ExperimentConfig, data: SplitDataset, run_seed: int, out_dir: Path | None) -> dict:
    """Train one model and return its JSON-ready record."""
    train_cfg = replace(config.train, seed=run_seed)
    model = PatanModel(
        ModelConfig(
            d_in=data.d_in,
            k=data.k,
            num_classes=data.num_classes,
            seed=run_seed,
            **config.model,
        )
    )
    attentive = uses_attention(train_cfg)

    def evaluate(m):
        return top1_accuracy(m, data.target, attentive)

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    history = train(
        train_cfg,
        data,
        model,
        evaluate=evaluate,
        metrics_path=None if out_dir is None else out_dir / "metrics.jsonl",
    )
    final_acc = top1_accuracy(model, data.target, attentive)
    gamma = estimate_gamma(model, data.target_frames(), train_cfg, epoch=train_cfg.epochs).gamma
    record = {
        "seed": run_seed,
        "spec_fingerprint": data.spec_fingerprint,
        "final_target_accuracy": final_acc,
        "final_source_accuracy": history[-1].source_accuracy if history else None,
        "gamma": [float(g) for g in gamma],
        "gamma_ratio": outlier_ratio(gamma, data.num_target_classes),
        "class_names": list(data.class_names),
        "num_target_classes": data.num_target_classes,
        "attentive": attentive,
        "metrics": [m.to_dict() for m in history],
    }
    if out_dir is not None:
        write_gamma_csv(gamma, data.class_names, data.num_target_classes, out_dir / "gamma.csv", summary=True)
        model.save(out_dir / "model.npz")
        write_json(record, out_dir / "result.json")
    return record


def run_experiment(
    config: ExperimentConfig,
    method: str | None = None,
    ablation: str | None = None,
    out_dir=None,
    datasets: list[SplitDataset] | None = None,
) -> dict:
    """Train ``config.runs`` seeds of one method and summarize them."""
    train_cfg = replace(
        config.train,
        method=method or config.train.method,
        ablation=ablation or ("none" if method else config.train.ablation),
    )
    train_cfg.validate()
    cfg = replace(config, train=train_cfg)
    label = run_label(train_cfg.method, train_cfg.ablation)
    out_dir = Path(out_dir) if out_dir is not None else None
    runs = []
    for i in range(cfg.runs):
        run_seed = cfg.seed + i
        data = datasets[i] if datasets is not None else cfg.dataset(run_seed)
        run_dir = None if out_dir is None else out_dir / f"run_{i}"
        log.info("%s run %d (seed %d)", label, i, run_seed)
        runs.append(run_single(cfg, data, run_seed, run_dir))
    accs = [r["final_target_accuracy"] for r in runs]
    result = {
        "label": label,
        "method": train_cfg.method,
        "ablation": train_cfg.ablation,
        "median_target_accuracy": _median(accs),
        "min_target_accuracy": float(min(accs)),
        "max_target_accuracy": float(max(accs)),
        "median_gamma_ratio": _median([r["gamma_ratio"] for r in runs]),
        "runs": runs,
        "config": cfg.to_dict(),
    }
    if out_dir is not None:
        write_json(result, out_dir / "result.json")
    return result


def _slug(method: str, ablation: str) -> str:
    return method if ablation == "none" else f"{method}-{ablation}"


def run_comparison(
    config: ExperimentConfig,
    methods: list[str],
    ablations: list[str] = (),
    out_dir=None,
) -> dict:
    """Train every method (and PATAN ablation) on identical per-run datasets."""
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; expected one of {METHODS}")
    entries = [(m, "none") for m in methods] + [("patan", a) for a in ablations if a != "none"]
    datasets = [config.dataset(config.seed + i) for i in range(config.runs)]
    out_dir = Path(out_dir) if out_dir is not None else None
    results = []
    for method, ablation in entries:
        sub = None if out_dir is None else out_dir / _slug(method, ablation)
        results.append(run_experiment(config, method, ablation, sub, datasets=datasets))
    for i in range(config.runs):
        prints = {r["runs"][i]["spec_fingerprint"] for r in results}
        if len(prints) != 1:
            raise ConfigError(f"run {i}: methods were trained on different datasets")
    table = {
        "config": config.to_dict(),
        "rows": [
            {
                "label": r["label"],
                "method": r["method"],
                "ablation": r["ablation"],
                "median_target_accuracy": r["median_target_accuracy"],
                "min_target_accuracy": r["min_target_accuracy"],
                "max_target_accuracy": r["max_target_accuracy"],
                "median_gamma_ratio": r["median_gamma_ratio"],
                "target_accuracies": [run["final_target_accuracy"] for run in r["runs"]],
                "gamma_ratios": [run["gamma_ratio"] for run in r["runs"]],
            }
            for r in results
        ],
    }
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_json(table, out_dir / "comparison.json")
    return table


def run_target_count_sweep(
    config: ExperimentConfig,
    counts: list[int],
    methods: tuple[str, ...] = ("patan", "dann"),
    out_dir=None,
) -> dict:
    """Accuracy of each method as the number of target classes varies."""
    base = config.generator_spec()
    if base is None:
        raise ConfigError("the target-count sweep needs a generator spec, not a feature file")
    for count in counts:
        if not 1 <= count <= base.num_source_classes:
            raise ConfigError(
                f"target class count {count} outside [1, {base.num_source_classes}]"
            )
    out_dir = Path(out_dir) if out_dir is not None else None
    rows = []
    for count in counts:
        pairs = [(o, s) for o, s in base.temporal_confusion_pairs if o >= count and s < count]
        spec = replace(base, num_target_classes=count, temporal_confusion_pairs=pairs)
        cfg = replace(config, data=spec)
        row = {"num_target_classes": count}
        for method in methods:
            sub = None if out_dir is None else out_dir / f"ct{count:02d}" / method
            result = run_experiment(cfg, method, "none", sub)
            row[run_label(method)] = result["median_target_accuracy"]
        rows.append(row)
    table = {"config": config.to_dict(), "counts": list(counts), "rows": rows}
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_json(table, out_dir / "sweep.json")
    return table

