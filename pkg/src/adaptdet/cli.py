"""Command-line entry point.

Subcommands: generate, train, eval, ablate, sweep, export-embeddings.
Configs are JSON or TOML files mirroring the dataclass field names; any
field can be overridden with repeated --override key=value flags (dotted
keys reach the nested model config). The resolved configuration is written
next to each command's outputs.

Exit codes: 0 success, 2 configuration error, 3 runtime/numeric error.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .checkpoint import load_checkpoint
from .data import Dataset, ShiftConfig, generate_benchmark, load_dataset, save_dataset
from .errors import AdaptdetError, ConfigurationError
from .evaluation import (
    detections_to_json,
    domain_probe_accuracy,
    evaluate,
    export_embeddings,
    read_embeddings_csv,
    write_embeddings_csv,
)
from .training import (
    VARIANTS,
    TrainConfig,
    config_from_dict,
    config_to_dict,
    sensitivity_sweep,
    train,
)


@dataclass
class GenerateConfig:
    num_source: int = 200
    num_target: int = 200
    num_source_test: int = 100
    num_target_test: int = 100
    K: int = 3
    shift_kind: str = "fog"
    severity: float = 0.6
    shift_seed: int = 0
    seed: int = 0
    image_size: int = 128

    def shift(self) -> ShiftConfig:
        return ShiftConfig(shift_kind=self.shift_kind, severity=self.severity, seed=self.shift_seed)


def _generate_config_from_dict(payload: dict) -> GenerateConfig:
    known = {f.name for f in fields(GenerateConfig)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigurationError(f"unknown generation config keys: {sorted(unknown)}")
    defaults = GenerateConfig()
    coerced = {}
    for name, value in payload.items():
        current = getattr(defaults, name)
        if isinstance(current, int):
            coerced[name] = int(value)
        elif isinstance(current, float):
            coerced[name] = float(value)
        else:
            coerced[name] = str(value)
    return GenerateConfig(**coerced)


def _read_config_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    if path.suffix == ".json":
        return json.loads(path.read_text())
    if path.suffix == ".toml":
        try:
            import tomllib  # Python >= 3.11
        except ModuleNotFoundError:
            import tomli as tomllib
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    raise ConfigurationError(f"config file must be .json or .toml, got {path.suffix!r}")


def _apply_overrides(payload: dict, overrides: list[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override must look like key=value, got {item!r}")
        key, value = item.split("=", 1)
        target = payload
        parts = key.split(".")
        for part in parts[:-1]:
            target = target.setdefault(part, {})
            if not isinstance(target, dict):
                raise ConfigurationError(f"override key {key!r} conflicts with a scalar field")
        target[parts[-1]] = value
    return payload


def _load_train_config(args) -> TrainConfig:
    payload = _read_config_file(args.config) if args.config else {}
    payload = _apply_overrides(payload, args.override or [])
    return config_from_dict(payload)


def _benchmark_dirs(root: str | Path) -> dict[str, Path]:
    root = Path(root)
    return {
        "source_train": root / "source_train",
        "target_train": root / "target_train",
        "source_test": root / "source_test",
        "target_test": root / "target_test",
    }


def _load_pair(root: str | Path) -> tuple[Dataset, Dataset]:
    dirs = _benchmark_dirs(root)
    for key in ("source_train", "target_train"):
        if not dirs[key].is_dir():
            raise ConfigurationError(f"benchmark root missing {dirs[key]}")
    return load_dataset(dirs["source_train"]), load_dataset(dirs["target_train"])


def cmd_generate(args) -> int:
    payload = _read_config_file(args.config) if args.config else {}
    payload = _apply_overrides(payload, args.override or [])
    cfg = _generate_config_from_dict(payload)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    src_train, tgt_train = generate_benchmark(
        cfg.num_source, cfg.num_target, cfg.K, cfg.shift(), cfg.seed,
        image_size=cfg.image_size, split="train",
    )
    src_test, tgt_test = generate_benchmark(
        cfg.num_source_test, cfg.num_target_test, cfg.K, cfg.shift(), cfg.seed + 1,
        image_size=cfg.image_size, split="test",
    )
    dirs = _benchmark_dirs(out)
    save_dataset(src_train, dirs["source_train"])
    save_dataset(tgt_train, dirs["target_train"])
    save_dataset(src_test, dirs["source_test"])
    save_dataset(tgt_test, dirs["target_test"])
    (out / "generate_config.json").write_text(json.dumps(asdict(cfg), indent=2))
    print(f"benchmark written to {out} (K={cfg.K}, {cfg.shift_kind}@{cfg.severity})")
    return 0


def cmd_train(args) -> int:
    cfg = _load_train_config(args)
    source, target = _load_pair(args.data)
    eval_target = None
    target_test_dir = _benchmark_dirs(args.data)["target_test"]
    if target_test_dir.is_dir():
        eval_target = load_dataset(target_test_dir)
    result = train(cfg, source, target, out_dir=args.out, eval_target=eval_target)
    final_map = result.eval_history[-1]["target_map50"] if result.eval_history else None
    if final_map is not None:
        print(f"training done: final target mAP@0.5 = {final_map:.4f}")
    else:
        print("training done")
    print(f"outputs in {result.out_dir}")
    return 0


def cmd_eval(args) -> int:
    dataset = load_dataset(args.data)
    model, _ = load_checkpoint(args.checkpoint)
    result = evaluate(model, dataset)
    print(f"mAP@0.5 = {result.map50:.4f}")
    for k, ap in sorted(result.per_class_ap.items()):
        name = dataset.manifest.class_names[k]
        print(f"  class {k} ({name}): AP = {ap:.4f}")
    if result.flagged:
        print(f"  classes without ground truth (excluded): {result.flagged}")
    if args.out:
        payload = result.to_dict()
        payload["checkpoint"] = str(args.checkpoint)
        payload["data"] = str(args.data)
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(payload, indent=2))
        print(f"report written to {args.out}")
    if args.detections:
        by_image = {}
        for record in dataset:
            dets = model.detect([record.image])[0]
            by_image[record.image_id] = dets
        out = Path(args.detections)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(detections_to_json(by_image), indent=2))
        print(f"detections written to {args.detections}")
    return 0


def _variant_slug(variant: str) -> str:
    return variant.replace("/", "-")


def cmd_ablate(args) -> int:
    base = _load_train_config(args)
    source, target = _load_pair(args.data)
    eval_target = load_dataset(_benchmark_dirs(args.data)["target_test"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(config_to_dict(base), indent=2))

    rows = []
    for variant in VARIANTS:
        maps = []
        for s in range(args.seeds):
            cfg = replace(base, variant=variant, seed=base.seed + s)
            run_dir = out / f"{_variant_slug(variant)}_seed{cfg.seed}"
            result = train(cfg, source, target, out_dir=run_dir, eval_target=eval_target)
            maps.append(result.eval_history[-1]["target_map50"])
        rows.append({"variant": variant, "target_map50_median": statistics.median(maps), "runs": maps})
        print(f"{variant:>16s}: median target mAP@0.5 = {rows[-1]['target_map50_median']:.4f}  {maps}")

    with open(out / "ablation.csv", "w") as fh:
        fh.write("variant,target_map50_median," + ",".join(f"seed{i}" for i in range(args.seeds)) + "\n")
        for row in rows:
            fh.write(
                f"{row['variant']},{row['target_map50_median']:.6f},"
                + ",".join(f"{m:.6f}" for m in row["runs"])
                + "\n"
            )
    print(f"ablation table written to {out / 'ablation.csv'}")
    return 0


def cmd_sweep(args) -> int:
    base = _load_train_config(args)
    source, target = _load_pair(args.data)
    eval_target = load_dataset(_benchmark_dirs(args.data)["target_test"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(config_to_dict(base), indent=2))
    def parse_grid(text):
        if text is None:
            return None  # use the default grid
        values = tuple(float(v) for v in text.split(",") if v.strip())
        return values

    kwargs = {}
    for name, text in (("gamma_grid", args.gamma_grid), ("lambda_grid", args.lambda_grid)):
        grid = parse_grid(text)
        if grid is not None:
            kwargs[name] = grid
    rows = sensitivity_sweep(
        base, source, target, eval_target, out_csv=out / "sweep.csv", **kwargs
    )
    for row in rows:
        print(
            f"{row['varied']}={row['value']:<6g} ({row['fixed']}={row['fixed_value']:g}): "
            f"target mAP@0.5 = {row['target_map50']:.4f}"
        )
    print(f"sweep table written to {out / 'sweep.csv'}")
    return 0


def cmd_export_embeddings(args) -> int:
    dirs = _benchmark_dirs(args.data)
    split = args.split
    pairs = []
    for domain in ("source", "target"):
        d = dirs[f"{domain}_{split}"]
        if not d.is_dir():
            raise ConfigurationError(f"missing dataset directory {d}")
        pairs.append((load_dataset(d), domain))
    header, rows = export_embeddings(args.checkpoint, pairs)
    write_embeddings_csv(args.out, header, rows)
    print(f"{len(rows)} embeddings written to {args.out}")
    if args.probe:
        feats, domains = read_embeddings_csv(args.out)
        acc = domain_probe_accuracy(feats, domains)
        print(f"linear domain-probe accuracy: {acc:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adaptdet",
        description="Domain-adaptive detection: synthetic benchmark, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config=True):
        if config:
            p.add_argument("--config", help="JSON or TOML config file")
            p.add_argument(
                "--override",
                action="append",
                metavar="KEY=VALUE",
                help="override a config field (repeatable; dotted keys for model.*)",
            )

    p = sub.add_parser("generate", help="write the synthetic two-domain benchmark to disk")
    add_common(p)
    p.add_argument("--out", required=True, help="benchmark root directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on a generated benchmark")
    add_common(p)
    p.add_argument("--data", required=True, help="benchmark root directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one dataset directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="a single dataset directory (with manifest.json)")
    p.add_argument("--out", help="optional JSON report path")
    p.add_argument("--detections", help="optional JSON dump of raw detections")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run every training variant and tabulate target mAP")
    add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=3)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="sensitivity sweep over the adversary weight and focal factor")
    add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gamma-grid", help="comma-separated focal factors (default 1,3,5,7,9)")
    p.add_argument("--lambda-grid", help="comma-separated adversary weights (default 0.1,0.25,0.5,0.75,1)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-embeddings", help="dump per-image reduced features to CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="benchmark root directory")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--probe", action="store_true", help="also fit and report a domain probe")
    p.set_defaults(func=cmd_export_embeddings)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except AdaptdetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
