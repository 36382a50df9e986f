"""Command-line front end.

Every subcommand reads its settings from an optional ``--config`` file
(one key=value per line) plus repeatable ``--set key=value`` overrides;
a handful of frequently-swept values also have dedicated flags that win
over both.  Expected failures print a single ``error: <Type>: <detail>``
line to stderr and exit 1 so shell pipelines can parse them.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import checkpoint
from .compression import compress_model, global_plan
from .data import load_idx_pair, synthetic_shapes
from .errors import CheckpointError, ConfigError, ContractError, NumericError
from .finetune import (DistillConfig, evaluate_accuracy, finetune,
                       metrics_to_csv, train_baseline)
from .flops import benchmark_json, micro_benchmark, model_flops
from .runconfig import (load_config, model_config_from, resolve_exempt,
                        resolve_freeze_epoch)
from .scoring import ScorerVariant, collect_scores, export_scores_csv, \
    load_scores_csv
from .visualize import visualize_merge_map
from .vit import VisionTransformer


def _config_from_args(args) -> dict:
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        if key in overrides:
            raise ConfigError(f"--set repeats key {key!r}")
        overrides[key] = value
    return load_config(getattr(args, "config", None), overrides)


def _load_datasets(cfg: dict):
    """(train, val) pair; val is None when no validation data exists."""
    if cfg["dataset"] == "idx":
        if not cfg["idx_images"] or not cfg["idx_labels"]:
            raise ConfigError(
                "dataset=idx requires idx_images and idx_labels paths")
        full = load_idx_pair(cfg["idx_images"], cfg["idx_labels"],
                             num_classes=cfg["num_classes"])
        held_out = cfg["val_count"]
        if 0 < held_out < len(full):
            return (full.subset(0, len(full) - held_out),
                    full.subset(len(full) - held_out, len(full)))
        return full, None
    train = synthetic_shapes(cfg["data_count"], image_size=cfg["image_size"],
                             seed=cfg["data_seed"])
    val = None
    if cfg["val_count"] > 0:
        val = synthetic_shapes(cfg["val_count"],
                               image_size=cfg["image_size"],
                               seed=cfg["data_seed"] + 1)
    return train, val


def _load_base_model(path) -> VisionTransformer:
    model, _ = checkpoint.load_model(path)
    if not isinstance(model, VisionTransformer):
        raise ContractError(
            f"{path}: expected an uncompressed base checkpoint")
    return model


def _write_metrics(path, rows) -> None:
    if path:
        Path(path).write_text(metrics_to_csv(rows), encoding="utf-8")


def cmd_train_baseline(args) -> int:
    cfg = _config_from_args(args)
    train, val = _load_datasets(cfg)
    model, metrics = train_baseline(
        model_config_from(cfg), train, epochs=cfg["epochs"],
        base_lr=cfg["baseline_lr"], weight_decay=cfg["weight_decay"],
        batch_size=cfg["batch_size"], seed=cfg["seed"], val_data=val)
    checkpoint.save_model(args.out, model)
    _write_metrics(args.metrics, metrics)
    acc = evaluate_accuracy(model, val if val is not None else train)
    print(f"baseline checkpoint written to {args.out}")
    print(f"top1_accuracy={acc!r}")
    return 0


def cmd_score(args) -> int:
    cfg = _config_from_args(args)
    model = _load_base_model(args.ckpt)
    train, _ = _load_datasets(cfg)
    iterations = args.iters if args.iters is not None else cfg["iterations"]
    variant = ScorerVariant.from_name(args.scorer or cfg["scorer"])
    scores = collect_scores(model, train, iterations=iterations,
                            batch_size=cfg["batch_size"], variant=variant,
                            seed=cfg["seed"])
    export_scores_csv(args.out, scores)
    print(f"token scores for {len(scores)} layers written to {args.out}")
    return 0


def cmd_compress(args) -> int:
    cfg = _config_from_args(args)
    model = _load_base_model(args.ckpt)
    scores = load_scores_csv(args.scores)
    depth = model.config.depth
    if len(scores) != depth:
        raise ContractError(
            f"{args.scores} covers {len(scores)} layers but the "
            f"checkpoint has depth {depth}")
    rate = args.rate if args.rate is not None else cfg["rate"]
    threshold = (args.pm_threshold if args.pm_threshold is not None
                 else cfg["pm_threshold"])
    exempt = resolve_exempt(args.exempt or cfg["exempt_layers"], depth)
    plan = global_plan(scores, rate, threshold, exempt_layers=exempt)
    checkpoint.save_plan(args.out, plan)
    active_total = sum(len(s) for l, s in enumerate(scores)
                       if l not in plan.uncompressed)
    print(f"plan written to {args.out}")
    print(f"kept {plan.total_kept()}/{active_total} tokens across "
          f"{depth - len(plan.uncompressed)} compressed layers "
          f"(exempt: {sorted(plan.uncompressed) or 'none'})")
    return 0


def cmd_finetune(args) -> int:
    cfg = _config_from_args(args)
    base = _load_base_model(args.ckpt)
    teacher = _load_base_model(args.teacher or args.ckpt).frozen_copy()
    plan = checkpoint.load_plan(args.plan)
    model = compress_model(base, plan, learnable_matrices=True)
    epochs = args.epochs if args.epochs is not None else cfg["epochs"]
    if args.freeze_at is not None:
        freeze_epoch = args.freeze_at
    else:
        freeze_epoch = resolve_freeze_epoch(
            {"freeze_epoch": cfg["freeze_epoch"], "epochs": epochs})
    distill = DistillConfig(
        epochs=epochs, freeze_epoch=freeze_epoch,
        alpha=args.alpha if args.alpha is not None else cfg["alpha"],
        temperature=cfg["temperature"], base_lr=cfg["base_lr"],
        weight_decay=cfg["weight_decay"], batch_size=cfg["batch_size"],
        seed=cfg["seed"])
    train, val = _load_datasets(cfg)
    model, metrics, _ = finetune(model, teacher, train, distill,
                                 val_data=val)
    checkpoint.save_model(args.out, model)
    _write_metrics(args.metrics, metrics)
    acc = evaluate_accuracy(model, val if val is not None else train)
    print(f"fine-tuned checkpoint written to {args.out}")
    print(f"top1_accuracy={acc!r}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    model, _ = checkpoint.load_model(args.ckpt)
    if args.plan:
        if not isinstance(model, VisionTransformer):
            raise ContractError(
                "cannot apply a plan to an already-compressed checkpoint")
        model = compress_model(model, checkpoint.load_plan(args.plan))
    train, val = _load_datasets(cfg)
    if args.split == "train":
        data = train
    else:
        if val is None:
            raise ContractError("no validation split configured")
        data = val
    acc = evaluate_accuracy(model, data, batch_size=cfg["batch_size"])
    print(f"top1_accuracy={acc!r}")
    return 0


def cmd_flops(args) -> int:
    cfg = _config_from_args(args)
    plan = checkpoint.load_plan(args.plan) if args.plan else None
    report = model_flops(model_config_from(cfg), plan)
    if args.json:
        import json
        print(json.dumps(report.to_json(), indent=2, sort_keys=True))
    elif args.csv:
        sys.stdout.write(report.to_csv())
    else:
        print(report.to_table())
    return 0


def cmd_bench(args) -> int:
    sizes = []
    for chunk in args.sizes.split(","):
        n, sep, d = chunk.strip().partition("x")
        if not sep:
            raise ConfigError(f"--sizes expects NxD entries, got {chunk!r}")
        try:
            sizes.append((int(n), int(d)))
        except ValueError:
            raise ConfigError(
                f"--sizes expects integer NxD entries, got {chunk!r}") \
                from None
    variants = None if args.variants == "all" else \
        tuple(v.strip() for v in args.variants.split(","))
    reports = []
    for n_tokens, dim in sizes:
        kwargs = {} if variants is None else {"variants": variants}
        reports.append(micro_benchmark(n_tokens, dim,
                                       repetitions=args.reps,
                                       seed=args.seed, **kwargs))
    if args.json:
        sys.stdout.write(benchmark_json(
            reports[0] if len(reports) == 1 else reports))
        return 0
    for report in reports:
        for name, stats in report["variants"].items():
            print(f"n={report['n_tokens']} d={report['dim']} "
                  f"variant={name} "
                  f"median_us={stats['median_s'] * 1e6:.2f} "
                  f"iqr_us={stats['iqr_s'] * 1e6:.2f}")
    return 0


def cmd_visualize(args) -> int:
    cfg = _config_from_args(args)
    plan = checkpoint.load_plan(args.plan)
    config = model_config_from(cfg)
    train, val = _load_datasets(cfg)
    data = val if args.split == "val" and val is not None else train
    if not 0 <= args.image < len(data):
        raise ContractError(
            f"image index {args.image} outside [0, {len(data)})")
    image = data.images[args.image]
    if args.layers == "all":
        layers = [l for l in range(plan.depth) if l not in plan.uncompressed]
        if not layers:
            raise ContractError("plan compresses no layers; nothing to draw")
    else:
        layers = [int(part.strip()) for part in args.layers.split(",")]
    for layer in layers:
        for path in visualize_merge_map(image, plan, layer, config,
                                        args.out_dir):
            print(f"wrote {path}")
    return 0


def _add_config_flags(sub) -> None:
    sub.add_argument("--config", default=None,
                     help="key=value settings file")
    sub.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override one setting (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prunemerge",
        description="Token prune-and-merge compression for small vision "
                    "transformers")
    commands = parser.add_subparsers(dest="command", required=True)

    sub = commands.add_parser(
        "train-baseline", help="train the uncompressed model")
    _add_config_flags(sub)
    sub.add_argument("--out", required=True, help="checkpoint to write")
    sub.add_argument("--metrics", default=None, help="metrics CSV to write")
    sub.set_defaults(func=cmd_train_baseline)

    sub = commands.add_parser(
        "score", help="accumulate per-layer token importance scores")
    _add_config_flags(sub)
    sub.add_argument("--ckpt", required=True, help="base checkpoint")
    sub.add_argument("--out", required=True, help="scores CSV to write")
    sub.add_argument("--iters", type=int, default=None,
                     help="scoring batches to accumulate")
    sub.add_argument("--scorer", default=None,
                     choices=[v.value for v in ScorerVariant],
                     help="importance-score variant")
    sub.set_defaults(func=cmd_score)

    sub = commands.add_parser(
        "compress", help="build a budgeted compression plan from scores")
    _add_config_flags(sub)
    sub.add_argument("--ckpt", required=True, help="base checkpoint")
    sub.add_argument("--scores", required=True, help="scores CSV")
    sub.add_argument("--out", required=True, help="plan file to write")
    sub.add_argument("--rate", type=float, default=None,
                     help="fraction of tokens to keep")
    sub.add_argument("--pm-threshold", type=float, default=None,
                     help="fraction of tokens to prune outright")
    sub.add_argument("--exempt", default=None,
                     help="comma-separated exempt layers, 'auto' or 'none'")
    sub.set_defaults(func=cmd_compress)

    sub = commands.add_parser(
        "finetune", help="distill a compressed model from its teacher")
    _add_config_flags(sub)
    sub.add_argument("--ckpt", required=True, help="base checkpoint")
    sub.add_argument("--plan", required=True, help="compression plan")
    sub.add_argument("--teacher", default=None,
                     help="teacher checkpoint (defaults to --ckpt)")
    sub.add_argument("--out", required=True, help="checkpoint to write")
    sub.add_argument("--metrics", default=None, help="metrics CSV to write")
    sub.add_argument("--epochs", type=int, default=None)
    sub.add_argument("--freeze-at", type=int, default=None,
                     help="epoch after which merge matrices freeze")
    sub.add_argument("--alpha", type=float, default=None,
                     help="distillation loss weight")
    sub.set_defaults(func=cmd_finetune)

    sub = commands.add_parser("eval", help="top-1 accuracy of a checkpoint")
    _add_config_flags(sub)
    sub.add_argument("--ckpt", required=True)
    sub.add_argument("--plan", default=None,
                     help="apply this plan to a base checkpoint first")
    sub.add_argument("--split", choices=("train", "val"), default="val")
    sub.set_defaults(func=cmd_eval)

    sub = commands.add_parser(
        "flops", help="analytic operation counts, with or without a plan")
    _add_config_flags(sub)
    sub.add_argument("--plan", default=None)
    sub.add_argument("--json", action="store_true")
    sub.add_argument("--csv", action="store_true")
    sub.set_defaults(func=cmd_flops)

    sub = commands.add_parser(
        "bench", help="micro-benchmark the merge implementations")
    sub.add_argument("--sizes", default="197x192",
                     help="comma-separated NxD problem sizes")
    sub.add_argument("--reps", type=int, default=25)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--variants", default="all",
                     help="comma-separated variant names or 'all'")
    sub.add_argument("--json", action="store_true")
    sub.set_defaults(func=cmd_bench)

    sub = commands.add_parser(
        "visualize", help="render merge maps and reconstructions as PPM")
    _add_config_flags(sub)
    sub.add_argument("--plan", required=True)
    sub.add_argument("--out-dir", required=True)
    sub.add_argument("--image", type=int, default=0,
                     help="dataset index of the image to render")
    sub.add_argument("--split", choices=("train", "val"), default="train")
    sub.add_argument("--layers", default="all",
                     help="comma-separated layer indices or 'all'")
    sub.set_defaults(func=cmd_visualize)

    return parser


EXPECTED_ERRORS = (ContractError, ConfigError, CheckpointError,
                   NumericError, OSError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except EXPECTED_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
