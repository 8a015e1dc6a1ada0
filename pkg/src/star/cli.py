"""Command-line interface.

Subcommands: synth, train, eval, heatmap, ablate, gradcheck. Every run with a
fixed seed is bitwise reproducible in its numeric outputs (checkpoints, CSV
and key=value files); report paths additionally render PNG figures next to
the delimited output unless --no-figures is given.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import ablation, data, heatmap, metrics, network, plots
from .config import RunConfig, load_config
from .errors import ConfigError
from .policy import RewardBaseline


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    changes = {}
    for flag, key in (("seed", "seed"), ("epochs", "epochs"), ("copies", "mc_copies"),
                      ("workers", "workers")):
        value = getattr(args, flag, None)
        if value is not None:
            changes[key] = value
    return cfg.replace(**changes) if changes else cfg


def _base_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    return _apply_overrides(cfg, args)


def _fit_to_dataset(cfg: RunConfig, ds: data.Dataset) -> RunConfig:
    return cfg.replace(n_channels=ds.n_channels, n_classes=ds.n_classes)


def _load_standardized(args, cfg: RunConfig):
    """Load, optionally LOSO-split, and standardize with train-split stats."""
    ds = data.load_csv(args.data)
    cfg = _fit_to_dataset(cfg, ds)
    holdout = getattr(args, "holdout", None)
    if holdout is not None:
        train_ds, test_ds = data.loso_split(ds, holdout)
    else:
        train_ds, test_ds = ds, None
    stats = data.compute_stats(train_ds)
    train_std = data.standardize(train_ds, stats)
    test_std = data.standardize(test_ds, stats) if test_ds is not None else None
    return cfg, train_std, test_std, stats


def cmd_synth(args) -> int:
    spec = data.SynthSpec(
        n_classes=args.classes, n_channels=args.channels, window_len=args.window_len,
        recording_len=args.recording_len, amplitude=args.amplitude,
        noise_std=args.noise_std, recordings_per_class=args.recordings_per_class,
        n_subjects=args.subjects,
    )
    ds = data.synth_generate(spec, seed=args.seed if args.seed is not None else 0)
    data.save_csv(ds, args.out)
    print(f"wrote {len(ds.recordings)} recordings "
          f"({spec.n_subjects} subjects x {spec.n_classes} classes x "
          f"{spec.recordings_per_class} each, {ds.n_channels} channels) to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _base_config(args)
    if args.variant is not None:
        if args.variant == "S1":
            raise ConfigError("variant S1 is the plain-CNN baseline; run it via `star ablate`")
        cfg = ablation.configure_ablation(args.variant, cfg)
    cfg, train_std, test_std, stats = _load_standardized(args, cfg)
    windows = data.windows_of(train_std, cfg.window_len)
    if not windows:
        raise ConfigError("no training windows; recordings shorter than the window length?")
    print(f"training on {len(windows)} windows "
          f"({cfg.n_channels} channels, {cfg.n_classes} classes, variant {cfg.variant})")

    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    model = network.Model(cfg)
    tracker = RewardBaseline(cfg.baseline_momentum) if cfg.use_baseline else None

    log_rows = []

    def log(epoch, loss, reward):
        log_rows.append((epoch, loss, reward))
        print(f"epoch {epoch:3d}  loss {loss:.4f}  reward {reward:.3f}", flush=True)

    history, best_epoch = network.train_model(model, cfg, windows,
                                              baseline_tracker=tracker, log=log)
    if cfg.keep_best and history:
        print(f"kept parameters from epoch {best_epoch} (best mean training reward)")

    ckpt_path = outdir / "checkpoint.star"
    network.save_checkpoint(ckpt_path, model,
                            extras={"channel_mean": stats.mean, "channel_std": stats.std})
    with open(outdir / "training_log.csv", "w", encoding="utf-8") as fh:
        fh.write("epoch,loss,mean_reward\n")
        for epoch, loss, reward in history:
            fh.write(f"{epoch},{loss!r},{reward!r}\n")
    if not args.no_figures and history:
        plots.save_training_curves(history, outdir / "training_curves.png")
    print(f"checkpoint written to {ckpt_path}")

    if test_std is not None:
        test_windows = data.windows_of(test_std, cfg.window_len)
        report = metrics.evaluate(model, cfg, test_windows)
        print(f"held-out subject {args.holdout}:")
        print(metrics.format_report(report))
        metrics.write_metrics_file(report, outdir / "metrics.txt")
        if not args.no_figures:
            plots.save_confusion_figure(report.confusion, outdir / "confusion.png")
    return 0


def _load_checkpoint_windows(args):
    model, cfg, extras = network.load_checkpoint(args.checkpoint)
    ds = data.load_csv(args.data)
    if ds.n_channels != cfg.n_channels:
        raise ConfigError(f"checkpoint expects {cfg.n_channels} channels, "
                          f"data has {ds.n_channels}")
    if ds.n_classes > cfg.n_classes:
        raise ConfigError(f"checkpoint expects {cfg.n_classes} classes, "
                          f"data has labels up to {ds.n_classes - 1}")
    if "channel_mean" not in extras or "channel_std" not in extras:
        raise ConfigError("checkpoint is missing the channel statistics")
    holdout = getattr(args, "holdout", None)
    if holdout is not None:
        _, ds = data.loso_split(ds, holdout)
    stats = data.ChannelStats(extras["channel_mean"], extras["channel_std"])
    std = data.standardize(ds, stats)
    windows = data.windows_of(std, cfg.window_len)
    if not windows:
        raise ConfigError("no windows to evaluate")
    return model, _apply_overrides(cfg, args), windows


def cmd_eval(args) -> int:
    model, cfg, windows = _load_checkpoint_windows(args)
    report = metrics.evaluate(model, cfg, windows)
    print(metrics.format_report(report))
    if args.out:
        outdir = Path(args.out)
        outdir.mkdir(parents=True, exist_ok=True)
        metrics.write_metrics_file(report, outdir / "metrics.txt")
        if not args.no_figures:
            plots.save_confusion_figure(report.confusion, outdir / "confusion.png")
        print(f"metrics written to {outdir / 'metrics.txt'}")
    return 0


def cmd_heatmap(args) -> int:
    model, cfg, windows = _load_checkpoint_windows(args)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)

    sink = None
    collected = []
    if args.dump_trajectories:
        sink = collected.extend
    aggregate, by_class = _collect_with_sink(model, cfg, windows, args.episodes, sink)
    written = heatmap.write_heatmap_csvs(aggregate, by_class, cfg, outdir)
    if not args.no_figures:
        plots.save_heatmap_figure(aggregate.normalized, outdir / "heatmap_aggregate.png",
                                  title="selection frequency (all classes)")
        for label, hm in sorted(by_class.items()):
            plots.save_heatmap_figure(hm.normalized, outdir / f"heatmap_class{label}.png",
                                      title=f"selection frequency, class {label}")
    if args.dump_trajectories:
        heatmap.serialize_trajectories(collected, args.dump_trajectories)
        print(f"dumped {len(collected)} trajectories to {args.dump_trajectories}")
    print(f"wrote {len(written)} heatmap CSV files to {outdir}")
    return 0


def _collect_with_sink(model, cfg, windows, episodes, sink):
    if sink is None:
        return heatmap.collect_heatmaps(model, cfg, windows, episodes)
    aggregate = heatmap.empty_heatmap(cfg)
    by_class = {}
    for i, w in enumerate(windows):
        streams = network.episode_streams(cfg.seed, network.HEATMAP_TAG, 0, i, episodes)
        res = network.run_chunk(model, cfg, w.values, w.label, streams=streams)
        heatmap.count_chunk(aggregate, res, cfg)
        if w.label not in by_class:
            by_class[w.label] = heatmap.empty_heatmap(cfg)
        heatmap.count_chunk(by_class[w.label], res, cfg)
        sink(network.build_trajectories(res, cfg))
    return aggregate, by_class


def cmd_ablate(args) -> int:
    cfg = _base_config(args)
    cfg, train_std, test_std, _ = _load_standardized(args, cfg)
    if test_std is None:
        raise ConfigError("ablate needs --holdout to form a test split")
    train_windows = data.windows_of(train_std, cfg.window_len)
    test_windows = data.windows_of(test_std, cfg.window_len)
    seeds = [cfg.seed + i for i in range(args.seeds)]
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)

    def progress(row):
        print(f"{row['variant']} seed {row['seed']}: accuracy {row['accuracy']:.4f}", flush=True)

    variants = (args.variant,) if args.variant else ablation.ABLATION_VARIANTS
    rows = ablation.run_ablation(cfg, train_windows, test_windows, seeds,
                                 variants=variants, progress=progress)
    ablation.write_rows_csv(rows, outdir / "ablation_runs.csv")
    table = ablation.format_summary(rows)
    with open(outdir / "ablation_summary.txt", "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    if not args.no_figures:
        plots.save_ablation_figure(ablation.summarize(rows), outdir / "ablation_summary.png")
    print(table)
    return 0


def cmd_gradcheck(args) -> int:
    err = network.lc_gradient_gate(epsilon=args.epsilon)
    print(f"max relative error: {err:.3e} (threshold {args.threshold:.1e})")
    if err < args.threshold:
        print("gradcheck PASS")
        return 0
    print("gradcheck FAIL", file=sys.stderr)
    return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="star",
        description="Multi-agent spatial-temporal attention for sensor windows")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data_arg=True, out_required=True):
        if data_arg:
            p.add_argument("--data", required=True, help="CSV data file")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")

    p = sub.add_parser("synth", help="generate a synthetic dataset CSV")
    p.add_argument("--out", required=True, help="CSV path to write")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--channels", type=int, default=24)
    p.add_argument("--subjects", type=int, default=8)
    p.add_argument("--recordings-per-class", type=int, default=12)
    p.add_argument("--window-len", type=int, default=20)
    p.add_argument("--recording-len", type=int, default=20)
    p.add_argument("--amplitude", type=float, default=5.0)
    p.add_argument("--noise-std", type=float, default=1.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model, write a checkpoint")
    common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--copies", type=int, help="Monte-Carlo copies per window")
    p.add_argument("--workers", type=int, help="parallel chunk workers")
    p.add_argument("--variant", choices=["S2", "S3", "S4", "S5", "S6"],
                   help="ablation variant (S1 runs via `star ablate`)")
    p.add_argument("--holdout", help="subject id to hold out for evaluation")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="directory for metrics files")
    p.add_argument("--holdout", help="evaluate only this subject")
    p.add_argument("--seed", type=int)
    p.add_argument("--copies", type=int)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("heatmap", help="export selection-frequency matrices")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--holdout", help="restrict to this subject")
    p.add_argument("--episodes", type=int, default=5, help="episodes per window")
    p.add_argument("--seed", type=int)
    p.add_argument("--dump-trajectories", help="also write a JSONL trajectory dump")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("ablate", help="run variants S1..S6 over seeds")
    common(p)
    p.add_argument("--holdout", required=True, help="subject id for the test split")
    p.add_argument("--seeds", type=int, default=5, help="number of seeds")
    p.add_argument("--variant", choices=list(ablation.ABLATION_VARIANTS),
                   help="run a single variant instead of all six")
    p.add_argument("--epochs", type=int)
    p.add_argument("--copies", type=int)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gate on the tiny config")
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
