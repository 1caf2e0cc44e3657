"""Command-line entry point.

Exit status is 0 on success, 1 when a config, input or usage check fails and
2 when a run fails at runtime (divergence, I/O, a failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .data import (
    BENCHMARKS,
    GeneratorSpec,
    default_benchmark,
    generate,
    load_features,
    write_features,
)
from .errors import ConfigError, InputError, PvdaError, UsageError
from .evaluation import export_features
from .experiments import (
    ExperimentConfig,
    run_comparison,
    run_experiment,
    run_target_count_sweep,
)
from .filtration import write_gamma_csv
from .model import PatanModel
from .training import ABLATIONS, METHODS

GRAD_TOLERANCE = 1e-4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _csv_list(text: str) -> list[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


def _int_list(text: str) -> list[int]:
    try:
        return [int(item) for item in _csv_list(text)]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    return raw


def _spec_from_json(raw: dict) -> GeneratorSpec:
    raw = dict(raw)
    if "benchmark" in raw:
        base = default_benchmark(raw.pop("benchmark")).to_dict()
        base.update(raw)
        raw = base
    return GeneratorSpec.from_dict(raw)


def _load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        config = replace(config, seed=args.seed)
    if getattr(args, "runs", None) is not None:
        config = replace(config, runs=args.runs)
    return config


def _dataset_arg(text: str, seed: int | None):
    """A benchmark name, a generator-spec JSON file or a feature CSV."""
    if text in BENCHMARKS:
        return generate(default_benchmark(text, seed=seed or 0))
    if text.endswith(".json"):
        spec = _spec_from_json(_read_json(text))
        return generate(spec if seed is None else replace(spec, seed=seed))
    return load_features(text)


def cmd_gen_data(args) -> None:
    if args.spec in BENCHMARKS:
        spec = default_benchmark(args.spec)
    else:
        spec = _spec_from_json(_read_json(args.spec))
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    data = generate(spec)
    write_features(data, args.out)
    print(f"wrote {len(data.source)} source and {len(data.target)} target videos to {args.out}")


def cmd_train(args) -> None:
    config = _load_config(args)
    result = run_experiment(config, args.method, args.ablation, args.out)
    print(f"{result['label']}: median target accuracy {result['median_target_accuracy']:.4f} over {config.runs} run(s)")


def cmd_compare(args) -> None:
    config = _load_config(args)
    table = run_comparison(config, _csv_list(args.methods), _csv_list(args.ablations or ""), args.out)
    for row in table["rows"]:
        ratio = row["median_gamma_ratio"]
        ratio_text = "" if ratio is None else f"  gamma ratio {ratio:.3f}"
        print(f"{row['label']:<26} {row['median_target_accuracy']:.4f}{ratio_text}")


def cmd_sweep(args) -> None:
    config = _load_config(args)
    methods = tuple(_csv_list(args.methods))
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; expected one of {METHODS}")
    table = run_target_count_sweep(config, _int_list(args.counts), methods, args.out)
    for row in table["rows"]:
        cells = "  ".join(f"{k}={v:.4f}" for k, v in row.items() if k != "num_target_classes")
        print(f"|C_T|={row['num_target_classes']:>3}  {cells}")


def cmd_grad_check(args) -> int:
    from .gradcheck import run_all

    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    worst = run_all(args.trials, args.seed or 0)
    failed = [name for name, err in worst.items() if not err < GRAD_TOLERANCE]
    for name, err in worst.items():
        print(f"{name:<20} {err:.3e}  {'FAIL' if name in failed else 'ok'}")
    if failed:
        print(f"gradient check failed for {', '.join(failed)}", file=sys.stderr)
        return 2
    return 0


def cmd_export_gamma(args) -> None:
    record = _read_json(args.result)
    if "runs" in record:
        runs = record["runs"]
        if not 0 <= args.run < len(runs):
            raise UsageError(f"--run {args.run} outside [0, {len(runs)})")
        record = runs[args.run]
    try:
        gamma = record["gamma"]
        names = record["class_names"]
        num_target = record["num_target_classes"]
    except KeyError as exc:
        raise InputError(f"{args.result} lacks field {exc}") from None
    try:
        write_gamma_csv(gamma, names, num_target, args.out, summary=True)
    except OSError as exc:
        raise PvdaError(f"cannot write {args.out}: {exc}") from exc
    print(f"wrote {len(gamma)} class weights to {args.out}")


def cmd_export_features(args) -> None:
    run_dir = Path(args.run)
    model = PatanModel.load(run_dir / "model.npz")
    attentive = bool(_read_json(run_dir / "result.json").get("attentive", True))
    data = _dataset_arg(args.data, args.seed)
    samples = data.source + data.target
    export_features(model, samples, args.out, attentive=attentive)
    print(f"wrote {len(samples)} feature rows to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pvda", description="Partial video domain adaptation on synthetic frame features.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic source/target feature CSV")
    p.add_argument("--spec", required=True, help="generator spec JSON or a benchmark name")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one method for the configured number of runs")
    p.add_argument("--config", required=True)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--ablation", choices=ABLATIONS)
    p.add_argument("--seed", type=int)
    p.add_argument("--runs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="train several methods on identical data")
    p.add_argument("--config", required=True)
    p.add_argument("--methods", required=True, help="comma-separated, e.g. dann,pada,patan")
    p.add_argument("--ablations", help="comma-separated PATAN ablations")
    p.add_argument("--seed", type=int)
    p.add_argument("--runs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep-targets", help="accuracy against the number of target classes")
    p.add_argument("--config", required=True)
    p.add_argument("--counts", required=True, help="comma-separated target class counts")
    p.add_argument("--methods", default="patan,dann")
    p.add_argument("--seed", type=int)
    p.add_argument("--runs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("grad-check", help="finite-difference check of every op and objective")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("export-gamma", help="class-weight CSV with a shared/outlier summary")
    p.add_argument("--result", required=True, help="result.json of a run or of a method")
    p.add_argument("--run", type=int, default=0, help="run index inside a method result")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_gamma)

    p = sub.add_parser("export-features", help="per-video overall temporal features as CSV")
    p.add_argument("--run", required=True, help="run directory holding model.npz and result.json")
    p.add_argument("--data", required=True, help="feature CSV, generator spec JSON or benchmark name")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_features)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args) or 0
    except (ConfigError, InputError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (PvdaError, OSError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
