"""Command-line entry point: train, eval, analyze, simulate."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..synth import MODALITIES, SPEEDS, TRAIN_MODALITIES, export_sequence, generate_sequence
from .analysis import route_analysis
from .checkpoint import load_checkpoint
from .config import TrainConfig, load_config, to_text, with_overrides
from .data import eval_sequences, sim_config
from .evaluate import evaluate, write_metrics
from .train import train


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = with_overrides(cfg, train={"seed": args.seed})
    cfg.validate()
    return cfg


def _eval_seeds(args) -> range:
    return range(args.seed or 0, (args.seed or 0) + args.num_seeds)


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(to_text(cfg))
    result = train(cfg, out)
    print(f"trained {cfg.train.steps} steps; final total loss "
          f"{result.trace[-1][-1] if result.trace else float('nan'):.6g}; checkpoint {out / 'model.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    model, cfg = load_checkpoint(args.checkpoint)
    mods = MODALITIES if args.heldout else TRAIN_MODALITIES
    seqs = eval_sequences(cfg.data, _eval_seeds(args), modalities=mods)
    report = evaluate(model, seqs, cfg.eval, missing=args.missing)
    path = write_metrics(report, Path(args.out) / "metrics.csv")
    print(f"mean IoU {report.mean_iou:.4f}  AUC {report.auc:.4f}  P@{cfg.eval.precision_px:g}px "
          f"{report.precision:.4f}  ({path})")
    return 0


def cmd_analyze(args) -> int:
    model, cfg = load_checkpoint(args.checkpoint)
    seqs = eval_sequences(cfg.data, _eval_seeds(args))
    route_analysis(model, seqs, args.out, tokens=args.tokens)
    print(f"wrote t_router.csv, m_router.csv and gate_trace.npz to {args.out}")
    return 0


def cmd_simulate(args) -> int:
    cfg = _config(args)
    seed = args.seed or 0
    sim = sim_config(cfg.data, args.modality, args.speed, seed)
    path = export_sequence(generate_sequence(sim), Path(args.out))
    print(f"exported {args.modality}/{args.speed} seed {seed} to {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dmoetrack", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False):
        sp.add_argument("--config", help="section.key = value config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default="out", help="output directory")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True)
            sp.add_argument("--num-seeds", type=int, default=5, help="evaluation seeds per modality/speed")
        return sp

    common(sub.add_parser("train", help="train a model")).set_defaults(func=cmd_train)
    ev = common(sub.add_parser("eval", help="evaluate a checkpoint"), checkpoint=True)
    ev.add_argument("--missing", choices=("none", "rgb", "x"), default="none")
    ev.add_argument("--heldout", action="store_true", help="also score the held-out modality")
    ev.set_defaults(func=cmd_eval)
    an = common(sub.add_parser("analyze", help="router selection statistics"), checkpoint=True)
    an.add_argument("--tokens", choices=("all", "search", "template"), default="all")
    an.set_defaults(func=cmd_analyze)
    si = common(sub.add_parser("simulate", help="export a synthetic sequence"))
    si.add_argument("--modality", choices=MODALITIES, default="rgbt")
    si.add_argument("--speed", choices=SPEEDS, default="middle")
    si.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
