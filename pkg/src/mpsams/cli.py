"""``mpsams`` command line.

Exit codes: 0 ok, 2 config error, 3 data error, 4 training failure, 5 I/O.
Failures print one line to stderr: ``mpsams: error[<code>]: <message>``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_weights, write_checkpoint
from .config import ConfigError, ExperimentConfig
from .data import IngestionError, generate_dataset, load_dataset, synthetic_corpus
from .entropy import ordering_check, random_model
from .model import autoencoder_config
from .pipeline import ARMS, TrainingError, ablate, evaluate, finetune, log_csv, pretrain, schedule_sweep, split_dataset, sweep_csv
from .plot import PlotError, plot_csv
from .selection import ClusteringDegenerateError, cluster_bench

log = logging.getLogger("mpsams")

EXIT_CONFIG, EXIT_DATA, EXIT_TRAINING, EXIT_IO = 2, 3, 4, 5


def out_root(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get("MPSAMS_OUT", "mpsams-out"))


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _corpus(cfg: ExperimentConfig, workers: int):
    if cfg.corpus.manifest:
        return load_dataset(cfg.corpus.manifest, cfg.run.patch_size)
    return synthetic_corpus(cfg.data, cfg.corpus.count, cfg.seed, workers)


def _net_for(cfg: ExperimentConfig, corpus):
    return replace(cfg.net, image_size=corpus.images.shape[-1])


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg: ExperimentConfig, out: Path) -> None:
    m = generate_dataset(cfg.data, cfg.corpus.count, cfg.seed, out / "data", args.workers)
    print(f"wrote {len(m.samples)} samples to {out / 'data'}")


def cmd_pretrain(args, cfg: ExperimentConfig, out: Path) -> None:
    corpus = _corpus(cfg, args.workers)
    split = split_dataset(corpus, cfg.split)
    every = cfg.run.checkpoint_every
    train = replace(cfg.pretrain, seed=cfg.seed)
    snaps = range(every, train.epochs + 1, every) if every > 0 else ()

    def save(epoch, weights):
        if epoch in snaps:
            write_checkpoint(out / f"pretrain_epoch{epoch:04d}.mpsw", weights)

    res = pretrain(corpus.subset(split.train), cfg.schedule, cfg.run.selection, train, _net_for(cfg, corpus),
                   cfg.run.patch_size, cfg.run.method, on_epoch=save if snaps else None)
    write_checkpoint(out / "pretrain.mpsw", res.weights)
    _write(out / "pretrain_log.csv", log_csv(res.log_rows, f"config {cfg.config_hash()}"))
    final = f"{res.losses[-1]:.6f}" if res.losses else "n/a"
    print(f"pretrained {train.epochs} epochs, final loss {final}, fallbacks {res.fallbacks}")


def cmd_finetune(args, cfg: ExperimentConfig, out: Path) -> None:
    corpus = _corpus(cfg, args.workers)
    split = split_dataset(corpus, cfg.split)
    net = _net_for(cfg, corpus)
    weights = load_weights(args.checkpoint, autoencoder_config(net), cfg.run.patch_size) if args.checkpoint else None
    train = replace(cfg.finetune, seed=cfg.seed)
    res = finetune(corpus.subset(split.labeled), corpus.subset(split.val), weights, train, net)
    write_checkpoint(out / "finetune_best.mpsw", res.weights)
    comment = f"config {cfg.config_hash()}"
    _write(out / "finetune_log.csv", log_csv(res.log_rows, comment))
    m = evaluate(res.weights, corpus.subset(split.test), train.threshold, train.aggregate)
    rows = "".join(f"{k},{v:.6f}\n" if isinstance(v, float) else f"{k},{v}\n" for k, v in m.as_dict().items())
    _write(out / "test_metrics.csv", f"# {comment}\nmetric,value\n" + rows)
    print(f"best epoch {res.best_epoch}, transferred {res.transferred} tensors, test DSC {m.dsc:.4f}")


def cmd_ablate(args, cfg: ExperimentConfig, out: Path) -> None:
    unknown = [a for a in cfg.run.arms if a not in ARMS]
    if unknown:
        raise ConfigError(f"unknown arm {unknown[0]!r} in run.arms")
    corpus = _corpus(cfg, args.workers)
    run = replace(cfg.run_config(), net=_net_for(cfg, corpus))

    def progress(arm, seed, m):
        log.info("arm %s seed %d: DSC %.4f", arm, seed, m.dsc)

    report = ablate(corpus, cfg.split, run, cfg.training_seeds(), cfg.run.arms, progress)
    comment = f"config {cfg.config_hash()}"
    _write(out / "ablation.csv", report.to_csv(comment))
    _write(out / "ablation_per_seed.csv", report.per_seed_csv(comment))
    table = report.to_table()
    _write(out / "ablation.txt", table)
    print(table, end="")
    failed = [a for a, r in report.arms.items() if r.errors]
    if failed and all(not r.per_seed for r in report.arms.values()):
        raise TrainingError("every ablation arm failed")


def cmd_cluster_bench(args, cfg: ExperimentConfig, out: Path) -> None:
    b = cfg.bench
    report = cluster_bench(b.patch_counts, b.methods, b.trials, cfg.seed, b.dim, b.budget_seconds)
    _write(out / "cluster_bench.csv", report.to_csv(f"config {cfg.config_hash()}"))
    for method, slope in report.slopes.items():
        shown = "undefined" if slope is None else f"{slope:.3f}"
        print(f"{method}: log-log slope {shown}, recall {report.mean_recall(method):.3f}")


def cmd_entropy_check(args, cfg: ExperimentConfig, out: Path) -> None:
    e = cfg.entropy
    rng = np.random.default_rng(cfg.seed)
    models = [random_model(rng, e.size, e.concentration) for _ in range(e.models)]
    report = ordering_check(models, e.strategy)
    _write(out / "entropy_check.csv", report.to_csv(f"config {cfg.config_hash()}"))
    print(f"H2 <= H1 on {sum(r.h2_le_h1 for r in report.rows)}/{len(report.rows)} models")


def cmd_sweep(args, cfg: ExperimentConfig, out: Path) -> None:
    corpus = _corpus(cfg, args.workers)
    run = replace(cfg.run_config(), net=_net_for(cfg, corpus))
    rows = schedule_sweep(corpus, cfg.sweep.epochs, run, cfg.split, cfg.training_seeds(), cfg.sweep.arm)
    _write(out / "sweep.csv", sweep_csv(rows, f"config {cfg.config_hash()}"))
    for r in rows:
        print(f"{r.pretrain_epochs:>6} epochs: DSC {r.mean:.4f}")


def cmd_plot(args, cfg, out) -> None:
    path = plot_csv(args.csv, args.out_svg, args.title or "")
    print(f"wrote {path}")


COMMANDS = {
    "gen-data": (cmd_gen_data, "write a synthetic image/mask corpus and manifest"),
    "pretrain": (cmd_pretrain, "masked image modeling pretraining"),
    "finetune": (cmd_finetune, "segmentation fine-tuning from a pretrained checkpoint"),
    "ablate": (cmd_ablate, "run the four-arm ablation"),
    "cluster-bench": (cmd_cluster_bench, "time the clustering methods against patch count"),
    "entropy-check": (cmd_entropy_check, "check the entropy ordering on random discrete models"),
    "sweep": (cmd_sweep, "test DSC against pretraining length"),
    "plot": (cmd_plot, "render a CSV as an SVG line chart"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpsams", description="Masked patch selection and adaptive masking for segmentation pretraining.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override, e.g. pretrain.epochs=10 (repeatable)")
    common.add_argument("--seed", type=int, default=0, help="root seed; every other seed derives from it")
    common.add_argument("--out", help="output directory (default: $MPSAMS_OUT or ./mpsams-out)")
    common.add_argument("--workers", type=int, default=1, help="parallel data workers")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    for name, (_, help_text) in COMMANDS.items():
        if name == "plot":
            p = sub.add_parser(name, help=help_text, description=help_text)
            p.add_argument("csv", help="CSV written by another command")
            p.add_argument("out_svg", help="SVG file to write")
            p.add_argument("--title", help="chart title")
            p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
            continue
        p = sub.add_parser(name, help=help_text, description=help_text, parents=[common])
        if name == "finetune":
            p.add_argument("--checkpoint", help="pretrained checkpoint; omit to train from scratch")
    return parser


def _run(args) -> None:
    func = COMMANDS[args.command][0]
    if args.command == "plot":
        func(args, None, None)
        return
    if args.workers < 1:
        raise ConfigError("--workers must be >= 1")
    cfg = ExperimentConfig.load(args.config, args.overrides, args.seed)
    out = out_root(args)
    _write(out / "config.json", cfg.to_json())
    log.info("config %s: %s", cfg.config_hash(), cfg.to_json().replace("\n", " "))
    func(args, cfg, out)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        _run(args)
    except ConfigError as exc:
        code, msg = EXIT_CONFIG, str(exc)
    except (IngestionError, PlotError) as exc:
        code, msg = EXIT_DATA, str(exc)
    except (TrainingError, ClusteringDegenerateError) as exc:
        code, msg = EXIT_TRAINING, str(exc)
    except (OSError, CheckpointError) as exc:
        code, msg = EXIT_IO, str(exc)
    except ValueError as exc:
        # remaining validation failures come from config values
        code, msg = EXIT_CONFIG, str(exc)
    except RuntimeError as exc:
        code, msg = EXIT_TRAINING, str(exc)
    else:
        return 0
    print(f"mpsams: error[{code}]: {' '.join(msg.split())}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
