"""Command-line entry point: ``vmseg <subcommand> [options]``.

Every configuration key can be set in a ``--config`` file and overridden by
its own flag (``vmseg train --help`` lists them all with defaults).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .bench import compare_variants, format_table, variant_configs
from .checkpoint import load_checkpoint
from .datapipe import (
    SPLITS,
    NormStats,
    apply_norm,
    load_manifest,
    load_split,
    normalize,
    read_pgm,
    resize,
    save_manifest,
    split_dataset,
    write_pgm,
    write_synth_dataset,
)
from .errors import ConfigError, DataError, VmsegError
from .gradcheck import TOLERANCE, all_cases, run_gradcheck, summarize
from .segnet import VARIANTS, build_network, param_summary, predict_mask
from .train import evaluate_model, train_model

log = logging.getLogger("vmseg")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI-style run configuration file")
    group = p.add_argument_group("configuration keys (override the config file)")
    for spec in C.KEYS:
        group.add_argument(C.flag_name(spec), dest=f"{spec.section}.{spec.key}", default=None,
                           metavar=spec.type.__name__.upper(),
                           help=f"[{spec.section}] {spec.key} (default: {spec.default})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vmseg", description="Attention U-Net segmentation: data prep, training, evaluation, benchmarks.",
        epilog="Configuration keys and defaults:\n" + C.render_defaults(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-q", "--quiet", action="store_true", help="only print warnings and results")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("synth", help="write a synthetic blob dataset (PGM files + manifest.csv)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("-n", "--count", type=int, default=20, help="number of image/mask pairs (default: 20)")
    p.add_argument("--size", type=int, default=64, help="image side length (default: 64)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default: 0)")
    p.add_argument("--split", action="store_true", help="also assign 70:15:15 splits")

    p = sub.add_parser("split", help="assign seeded 70:15:15 train/val/test splits to a manifest")
    p.add_argument("manifest", help="input manifest CSV (image,mask[,split])")
    p.add_argument("--out", help="output manifest (default: overwrite the input)")
    p.add_argument("--seed", type=int, default=0, help="shuffle seed (default: 0)")

    p = sub.add_parser("train", help="train a network on the train/val splits of a manifest")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    _add_config_flags(p)
    p.add_argument("--split", default="test", choices=SPLITS, help="split to evaluate (default: test)")

    p = sub.add_parser("predict", help="write <stem>_pred.pgm masks for images")
    _add_config_flags(p)
    p.add_argument("inputs", nargs="*", help="PGM files or directories (default: the manifest's test split)")
    p.add_argument("--out", help="output directory (default: <output_dir>/pred)")

    p = sub.add_parser("bench", help="compare latency and peak memory of the network variants")
    _add_config_flags(p)
    p.add_argument("--size", type=int, default=64, help="input side length (default: 64)")
    p.add_argument("--runs", type=int, default=30, help="timed runs per variant (default: 30)")
    p.add_argument("--warmup", type=int, default=3, help="untimed warm-up runs (default: 3)")
    p.add_argument("--variants", default=",".join(VARIANTS), help="comma-separated variants")
    p.add_argument("--csv", help="also write the ranking CSV here")

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=20, help="seeds per case (default: 20)")
    p.add_argument("--no-nets", action="store_true", help="skip the end-to-end network cases")
    return parser


def _run_config(args, require: bool = False) -> C.RunConfig:
    if args.config is None:
        if require:
            raise ConfigError("missing required flag --config")
        cfg = C.RunConfig()
    else:
        cfg = C.parse_config(args.config)
    overrides = {spec: getattr(args, f"{spec.section}.{spec.key}") for spec in C.KEYS}
    return C.apply_overrides(cfg, {k: v for k, v in overrides.items() if v is not None})


def _image_size(cfg: C.RunConfig):
    n = cfg.eval.image_size
    return (n, n) if n > 0 else None


def _manifest(cfg: C.RunConfig):
    if cfg.paths.manifest is None:
        raise ConfigError("paths.manifest is not set (use --manifest or [paths] manifest = ...)")
    return load_manifest(cfg.paths.manifest)


def _checkpoint_path(cfg: C.RunConfig) -> str:
    """``paths.checkpoint`` if set, else the file ``train`` writes by default."""
    return cfg.paths.checkpoint or str(Path(cfg.paths.output_dir) / "best.ckpt")


def _stats_path(cfg: C.RunConfig) -> Path:
    return Path(_checkpoint_path(cfg) + ".norm.json")


def _save_stats(cfg: C.RunConfig, stats: NormStats) -> None:
    _stats_path(cfg).write_text(json.dumps({"mean": stats.mean, "std": stats.std, "eps": stats.eps}) + "\n",
                                encoding="utf-8")


def _load_stats(cfg: C.RunConfig) -> NormStats | None:
    """Training-split statistics when ``normalization = dataset``, else None."""
    if cfg.eval.normalization != "dataset":
        return None
    path = _stats_path(cfg)
    if not path.exists():
        raise ConfigError(f"normalization = dataset needs {path} (written by train)")
    raw = json.loads(path.read_text(encoding="utf-8"))
    return NormStats(float(raw["mean"]), float(raw["std"]), float(raw["eps"]))


def _load_net(cfg: C.RunConfig):
    path = _checkpoint_path(cfg)
    if not Path(path).exists():
        raise ConfigError(f"checkpoint {path} not found (set --checkpoint or run train first)")
    return load_checkpoint(path, build_network(cfg.net))


def cmd_synth(args) -> int:
    path = write_synth_dataset(args.out, args.count, args.size, args.seed)
    if args.split:
        manifest = split_dataset(load_manifest(path), args.seed)
        save_manifest(manifest, path)
    print(f"wrote {args.count} pairs and {path}")
    return 0


def cmd_split(args) -> int:
    manifest = split_dataset(load_manifest(args.manifest), args.seed)
    out = args.out or args.manifest
    save_manifest(manifest, out)
    counts = manifest.counts()
    print(f"{out}: " + " ".join(f"{k}={v}" for k, v in counts.items()))
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args, require=True)
    manifest = _manifest(cfg)
    size, norm = _image_size(cfg), cfg.eval.normalization
    train = load_split(manifest, "train", size, norm=norm)
    val = load_split(manifest, "val", size, norm=norm, stats=train.norm_stats)
    out_dir = Path(cfg.paths.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.paths.checkpoint = _checkpoint_path(cfg)
    if train.norm_stats is not None:
        _save_stats(cfg, train.norm_stats)
    history_path = cfg.paths.history or str(out_dir / "history.csv")
    net = build_network(cfg.net)
    log.info("%s", param_summary(net).format())
    augment = cfg.augment if cfg.augment.enabled else None
    net, history = train_model(net, train, val, cfg.train_config(), augment)
    history.to_csv(history_path)
    if history.best_epoch is None:
        print("trained 0 epochs; no checkpoint written")
        return 0
    print(f"best val loss {min(history.val_loss):.5f} at epoch {history.best_epoch}; "
          f"checkpoint {cfg.paths.checkpoint}; history {history_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    stats = _load_stats(cfg)
    data = load_split(_manifest(cfg), args.split, _image_size(cfg), norm=cfg.eval.normalization, stats=stats)
    net = _load_net(cfg)
    rep = evaluate_model(net, data, cfg.eval.threshold, cfg.train.batch_size,
                         cfg.train.bce_weight, cfg.train.dice_weight)
    print(f"{args.split}: {rep.n_images} images (pooled pixel counts)")
    for k, v in rep.as_dict().items():
        flag = "  (degenerate)" if k in rep.degenerate else ""
        print(f"  {k:<9} {v:.5f}{flag}")
    return 0


def _collect_inputs(paths) -> list[Path]:
    files: list[Path] = []
    for raw in paths:
        p = Path(raw)
        if p.is_dir():
            files.extend(sorted(p.glob("*.pgm")))
        elif p.exists():
            files.append(p)
        else:
            raise DataError(f"no such file or directory: {p}")
    return files


def cmd_predict(args) -> int:
    cfg = _run_config(args)
    if args.inputs:
        files = _collect_inputs(args.inputs)
    else:
        manifest = _manifest(cfg)
        files = [manifest.resolve(r.image) for r in manifest.split("test")]
    if not files:
        raise DataError("no input images")
    net = _load_net(cfg)
    stats = _load_stats(cfg)
    out_dir = Path(args.out or Path(cfg.paths.output_dir) / "pred")
    out_dir.mkdir(parents=True, exist_ok=True)
    size = _image_size(cfg)
    for f in files:
        img = read_pgm(f).astype(np.float32) / 255.0
        if size is not None:
            img = resize(img, *size)
        x = normalize(img)[0] if stats is None else apply_norm(img, stats)
        mask = predict_mask(net, x[None].astype(np.float32), cfg.eval.threshold)
        target = out_dir / f"{f.stem}_pred.pgm"
        write_pgm(target, mask.data[0])
        log.info("wrote %s", target)
    print(f"wrote {len(files)} masks to {out_dir}")
    return 0


def cmd_bench(args) -> int:
    cfg = _run_config(args)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"--variants: unknown variant {v!r} (expected {VARIANTS})")
    shape = (cfg.net.in_channels, args.size, args.size)
    reports, table = compare_variants(variant_configs(cfg.net, variants), shape, args.warmup, args.runs)
    print(format_table(reports))
    print()
    print(table, end="")
    if args.csv:
        Path(args.csv).write_text(table, encoding="utf-8")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(range(args.seeds), all_cases(include_nets=not args.no_nets))
    print(summarize(results))
    worst = max(r.max_rel_error for r in results)
    print(f"max rel. error {worst:.3e} (tolerance {TOLERANCE:g})")
    return 0 if worst < TOLERANCE else 1


COMMANDS = {"synth": cmd_synth, "split": cmd_split, "train": cmd_train, "eval": cmd_eval,
            "predict": cmd_predict, "bench": cmd_bench, "gradcheck": cmd_gradcheck}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (VmsegError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
