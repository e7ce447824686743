"""``densemapnet`` command line: synth | train | eval | predict | params | bench.

Exit codes: 0 success, 1 I/O or state error, 2 usage error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import ConfigError, RunConfig, dump_config, load_config
from .data import load_dataset, load_image, save_dataset, split_filter, synth_generate, write_pfm
from .graph import build_densemapnet, count_parameters, parameter_table
from .metrics import benchmark_throughput, emit_disparity_png, evaluate
from .ops import INFERENCE, OpContext
from .training import NonFiniteError, TrainConfig, fit

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("densemapnet")


class UsageError(Exception):
    pass


def _config(args):
    overrides = {key: getattr(args, key, None) for key in RunConfig.keys()}
    return load_config(args.config, overrides)


def _train_config(cfg: RunConfig):
    return TrainConfig(learning_rate=cfg.lr, decay=cfg.decay, batch_size=cfg.batch_size, epochs=cfg.epochs,
                       seed=cfg.seed, dmax=cfg.dmax, checkpoint_every=cfg.checkpoint_every)


def _dataset(cfg: RunConfig, which):
    if not cfg.dataset_dir:
        raise UsageError("dataset_dir is not set")
    samples, _ = load_dataset(cfg.dataset_dir, channels=cfg.channels, dmax=cfg.dmax)
    if which == "all":
        return samples
    train, test, rejected = split_filter(samples, cfg.seed)
    if rejected:
        log.warning("%d samples rejected (max disparity above image width)", rejected)
    chosen = train if which == "train" else test
    if not len(chosen):
        raise UsageError(f"the {which} split is empty ({len(samples)} samples)")
    return chosen.select(samples)


def cmd_synth(args):
    if args.count < 1 or args.height < 8 or args.width < 8:
        raise UsageError("count must be >= 1 and height/width >= 8")
    if not 0 < args.dmax < args.width:
        raise UsageError(f"--dmax must be in (0, width={args.width})")
    samples = synth_generate(args.count, args.height, args.width, args.dmax, args.seed, channels=args.channels)
    save_dataset(args.out, samples, {"count": args.count, "H": args.height, "W": args.width,
                                     "dmax": args.dmax, "seed": args.seed})
    print(f"samples={len(samples)} dmax={args.dmax:g}")
    return EXIT_OK


def cmd_train(args):
    cfg = _config(args)
    samples = _dataset(cfg, "all" if cfg.train_split == "all" else "train")
    graph = build_densemapnet(cfg.channels, cfg.dmax, seed=cfg.seed)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = Path(cfg.checkpoint_path)
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    (out_dir / "run.cfg").write_text(dump_config(cfg), encoding="utf-8")
    log_file = open(out_dir / "train.log", "w", encoding="utf-8")

    def on_epoch(record):
        line = record.format(timing=not args.no_timing)
        print(line, flush=True)
        log_file.write(line + "\n")
        log_file.flush()

    try:
        fit(graph, samples, _train_config(cfg), on_epoch=on_epoch,
            on_checkpoint=lambda g, epoch: ckpt.save_checkpoint(g, ckpt_path))
    finally:
        log_file.close()
    return EXIT_OK


def _load_model(path, channels=None, dmax=1.0):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    stored = ckpt.parse(path.read_bytes())
    graph = build_densemapnet(channels or ckpt.infer_channels(stored), dmax)
    ckpt.load_checkpoint(path, graph)
    return graph


def cmd_eval(args):
    cfg = _config(args)
    graph = _load_model(cfg.checkpoint_path, cfg.channels, cfg.dmax)
    report = evaluate(graph, _dataset(cfg, cfg.eval_split), cfg.dmax)
    text = report.format(timing=not args.no_timing)
    print(text)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "eval.txt").write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_predict(args):
    dmax = args.dmax
    if dmax is None:
        dmax = load_config(args.config).dmax if args.config else None
    if dmax is None:
        raise UsageError("predict needs --dmax (or a --config providing dmax)")
    graph = _load_model(args.checkpoint, dmax=dmax)
    left = load_image(args.left, graph.channels)
    right = load_image(args.right, graph.channels)
    pred = graph.forward(left, right, OpContext(INFERENCE), retain=False).astype(np.float64) * dmax
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    emit_disparity_png(pred, out / "disparity16.png", "gray16")
    emit_disparity_png(pred, out / "disparity_color.png", "colormap", dmax=dmax)
    write_pfm(out / "disparity.pfm", pred)
    print(f"min={pred.min():.4f} max={pred.max():.4f} mean={pred.mean():.4f} out={out}")
    return EXIT_OK


def cmd_params(args):
    graph = build_densemapnet(args.channels, 1.0)
    print(f"{'layer':<12} {'kind':<15} {'trainable':>10} {'non_trainable':>14}")
    for name, kind, t, s in parameter_table(graph):
        print(f"{name:<12} {kind:<15} {t:>10} {s:>14}")
    trainable, frozen = count_parameters(graph)
    print(f"total_trainable={trainable}")
    print(f"total_non_trainable={frozen}")
    print(f"conv_layers={len(graph.conv_layers())} disparity_conv_layers={len(graph.conv_layers('disparity'))}")
    return EXIT_OK


def cmd_bench(args):
    if args.checkpoint:
        graph = _load_model(args.checkpoint)
    else:
        graph = build_densemapnet(args.channels, 1.0, seed=args.seed)
    try:
        result = benchmark_throughput(graph, (args.height, args.width), args.iterations, args.warmup, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(f"height={args.height} width={args.width}")
    print(result.format(timing=not args.no_timing))
    return EXIT_OK if result.deterministic else EXIT_NUMERIC


def _add_run_flags(p):
    p.add_argument("--config", help="key=value run configuration file")
    p.add_argument("--dataset-dir", dest="dataset_dir")
    p.add_argument("--dmax", type=float)
    p.add_argument("--channels", type=int, choices=(1, 3))
    p.add_argument("--lr", type=float)
    p.add_argument("--decay", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-path", dest="checkpoint_path")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--train-split", dest="train_split", choices=("split", "all"))
    p.add_argument("--eval-split", dest="eval_split", choices=("train", "test", "all"))
    p.add_argument("--no-timing", action="store_true", help="omit wall-clock fields from output")


def build_parser():
    parser = argparse.ArgumentParser(prog="densemapnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic stereo dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--dmax", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--channels", type=int, choices=(1, 3), default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a dataset directory")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="report EPE of a checkpoint")
    _add_run_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict disparity for one stereo pair")
    p.add_argument("--left", required=True)
    p.add_argument("--right", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--dmax", type=float)
    p.add_argument("--config")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("params", help="per-layer parameter table")
    p.add_argument("--channels", type=int, choices=(1, 3), default=3)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("bench", help="inference throughput benchmark")
    p.add_argument("--height", type=int, default=540)
    p.add_argument("--width", type=int, default=960)
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--channels", type=int, choices=(1, 3), default=3)
    p.add_argument("--checkpoint")
    p.add_argument("--no-timing", action="store_true")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"densemapnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"densemapnet {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ckpt.CheckpointError, ValueError) as exc:
        print(f"densemapnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
