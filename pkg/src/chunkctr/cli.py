"""Command-line interface: gen-data, train, eval, bench, ablate."""

from __future__ import annotations

import argparse
import json
import statistics
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

from .bench import SCHEMAS, format_csv, run_sweep, write_csv
from .data import SyntheticSpec, as_samples, generate, load_dataset, write_dataset
from .errors import ConfigError, Error
from .model import TrainConfig, evaluate, init_params, load_checkpoint, save_checkpoint, train

ABLATION_VARIANTS = ("baseline", "c-sa", "g-sa", "len-10", "len-50", "t2", "t6")


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    values: dict[str, str] = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, _, value = item.partition("=")
        values[key.strip()] = value.strip()
    return values


def _resolve_config(cls, path: str | None, overrides: list[str]):
    """Dataclass defaults, then the JSON file, then --set overrides.

    Unknown keys are rejected so typos cannot silently fall back to
    defaults.
    """
    values: dict = {}
    if path:
        raw = json.loads(Path(path).read_text())
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        values.update(raw)
    values.update(_parse_overrides(overrides))
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}; valid: {sorted(known)}")
    defaults = cls()
    coerced = {}
    for key, value in values.items():
        kind = type(getattr(defaults, key))
        try:
            coerced[key] = kind(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config key {key!r}: cannot read {value!r} as {kind.__name__}") from exc
    return cls(**coerced)


def _echo_config(cfg, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")


def cmd_gen_data(args) -> int:
    spec = _resolve_config(SyntheticSpec, args.spec, args.set)
    dataset = generate(spec)
    write_dataset(dataset, args.out)
    print(
        json.dumps(
            {
                "items": len(dataset.cache),
                "train": len(dataset.splits["train"]),
                "val": len(dataset.splits["val"]),
                "test": len(dataset.splits["test"]),
            },
            sort_keys=True,
        )
    )
    return 0


def _load_split_samples(data_dir: str, split: str, seq_len: int):
    dataset = load_dataset(data_dir)
    if seq_len > dataset.spec.seq_len:
        raise ConfigError(
            f"config seq_len {seq_len} exceeds the dataset's seq_len {dataset.spec.seq_len}"
        )
    return dataset, as_samples(dataset.splits[split], dataset.cache, seq_len=seq_len)


def cmd_train(args) -> int:
    cfg = _resolve_config(TrainConfig, args.config, args.set)
    out = Path(args.out)
    _echo_config(cfg, out)
    dataset, train_samples = _load_split_samples(args.data, "train", cfg.seq_len)
    val_samples = as_samples(dataset.splits["val"], dataset.cache, seq_len=cfg.seq_len)
    if dataset.cache.dim != cfg.behavior_dim:
        raise ConfigError(
            f"dataset embeddings have width {dataset.cache.dim}, config expects {cfg.behavior_dim}"
        )
    params = init_params(cfg)
    with open(out / "metrics.jsonl", "w") as fh:
        def emit(record: dict) -> None:
            fh.write(json.dumps(record, sort_keys=True))
            fh.write("\n")
            fh.flush()

        records = train(params, train_samples, val_samples=val_samples, config=cfg, on_metrics=emit)
    checkpoint = out / "model.tbin"
    save_checkpoint(params, checkpoint)
    print(json.dumps({"checkpoint": str(checkpoint), "final": records[-1] if records else None}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    params = load_checkpoint(args.checkpoint)
    _, samples = _load_split_samples(args.data, args.split, params.config.seq_len)
    metrics = evaluate(params, samples)
    print(json.dumps({"auc": metrics["auc"], "logloss": metrics["logloss"]}, sort_keys=True))
    return 0


def cmd_bench(args) -> int:
    lengths = [int(v) for v in args.lengths.split(",") if v]
    schemas = [s.strip() for s in args.schemas.split(",") if s.strip()]
    reports = run_sweep(
        schemas, lengths, chunk_size=args.chunk_size, trials=args.trials, dim=args.dim, seed=args.seed
    )
    text = format_csv(reports)
    if args.out:
        write_csv(reports, args.out)
    print(text, end="")
    return 0


def _variant_config(base: TrainConfig, name: str, seed: int) -> TrainConfig:
    cfg = replace(base, seed=seed)
    if name == "baseline":
        return cfg
    if name == "c-sa":
        return replace(cfg, attention="c-sa")
    if name == "g-sa":
        return replace(cfg, attention="g-sa")
    if name == "len-10":
        return replace(cfg, seq_len=max(1, base.seq_len // 10))
    if name == "len-50":
        return replace(cfg, seq_len=max(1, base.seq_len // 2))
    if name == "t2":
        return replace(cfg, num_blocks=2)
    if name == "t6":
        return replace(cfg, num_blocks=6)
    raise ConfigError(f"unknown variant {name!r}; valid: {', '.join(ABLATION_VARIANTS)}")


def cmd_ablate(args) -> int:
    base = _resolve_config(TrainConfig, args.config, args.set)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    for name in variants:
        if name not in ABLATION_VARIANTS:
            raise ConfigError(f"unknown variant {name!r}; valid: {', '.join(ABLATION_VARIANTS)}")
    if args.seeds < 1:
        raise ConfigError(f"seeds must be >= 1, got {args.seeds}")
    dataset = load_dataset(args.data)
    out = Path(args.out)
    _echo_config(base, out)

    results: dict[str, list[dict]] = {name: [] for name in variants}
    for round_index in range(args.seeds):
        seed = base.seed + round_index
        for name in variants:
            cfg = _variant_config(base, name, seed)
            train_samples = as_samples(dataset.splits["train"], dataset.cache, seq_len=cfg.seq_len)
            val_samples = as_samples(dataset.splits["val"], dataset.cache, seq_len=cfg.seq_len)
            params = init_params(cfg)
            train(params, train_samples, val_samples=None, config=cfg)
            metrics = evaluate(params, val_samples)
            results[name].append({"seed": seed, "auc": metrics["auc"], "logloss": metrics["logloss"]})

    table_rows = []
    for name in variants:
        aucs = [r["auc"] for r in results[name]]
        loglosses = [r["logloss"] for r in results[name]]
        table_rows.append(
            {
                "variant": name,
                "runs": len(aucs),
                "auc_mean": statistics.mean(aucs),
                "auc_sd": statistics.pstdev(aucs) if len(aucs) > 1 else 0.0,
                "logloss_mean": statistics.mean(loglosses),
                "logloss_sd": statistics.pstdev(loglosses) if len(loglosses) > 1 else 0.0,
            }
        )
    report = {"base_config": asdict(base), "seeds": args.seeds, "rows": table_rows, "runs": results}
    (out / "ablation.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")

    print(f"{'variant':<10} {'runs':>4} {'auc':>16} {'logloss':>16}")
    for row in table_rows:
        print(
            f"{row['variant']:<10} {row['runs']:>4} "
            f"{row['auc_mean']:.4f} +/- {row['auc_sd']:.4f} "
            f"{row['logloss_mean']:.4f} +/- {row['logloss_sd']:.4f}"
        )
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chunkctr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset and embedding cache")
    p.add_argument("--spec", help="JSON file with generator settings")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--config", help="JSON file with training settings")
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="run the attention-schema complexity sweep")
    p.add_argument("--schemas", default=",".join(SCHEMAS))
    p.add_argument("--lengths", default="256,512,1024,2048")
    p.add_argument("--chunk-size", type=int, default=64)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV report path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="matched-seed training runs across variants")
    p.add_argument("--config", help="JSON file with the baseline training settings")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", default="baseline,c-sa,g-sa")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (Error, OSError, json.JSONDecodeError) as exc:
        print(json.dumps({"error": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
