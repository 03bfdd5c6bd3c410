"""Command-line entry points: pretrain, adapt, baseline, ablate, dump-weights."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .harness import AdaptConfig
from .model import build_classifier, load_checkpoint, save_checkpoint
from .stream import SourceSpec, describe_schedule, gen_source, parse_schedule_file

logger = logging.getLogger(__name__)


def _add_adapt_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", required=True, help="pretrained model checkpoint")
    p.add_argument("--schedule", required=True, help="schedule description file")
    p.add_argument("--eta", type=float, default=5e-3)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--lambda", dest="lam", type=float, default=0.1)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--epsilon", type=float, default=1e-8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--opt", choices=["adam", "sgd"], default="adam")
    p.add_argument("--consistency", choices=["sigmoid", "softmax"], default="sigmoid")
    p.add_argument("--noise-scale", type=float, default=0.1)
    p.add_argument("--seeds", type=int, default=1, help="repeat with seed offsets and report mean/std")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fimtta",
        description="Layer-wise auto-weighted test-time adaptation on synthetic streams",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train a source classifier and write a checkpoint")
    p.add_argument("--d", type=int, default=16, help="input dimension")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--margin", type=float, default=4.5)
    p.add_argument("--n", type=int, default=1920, help="source sample count")
    p.add_argument("--hidden", default="32,32,32,32", help="comma-separated hidden widths")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--eta-pre", type=float, default=1e-2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("adapt", help="run the layer-wise weighted adaptation")
    _add_adapt_flags(p)
    p.add_argument("--method", choices=["layerwise", "naive_eq6"], default="layerwise")

    p = sub.add_parser("baseline", help="run a non-weighted reference method")
    _add_adapt_flags(p)
    p.add_argument("--method", choices=["source", "bn1", "uniform_tent"], required=True)

    p = sub.add_parser("ablate", help="factorial sweep over tau, lambda, gamma")
    _add_adapt_flags(p)
    p.add_argument("--method", choices=["layerwise", "naive_eq6"], default="layerwise")
    p.add_argument("--taus", default="1.0", help="comma-separated tau grid")
    p.add_argument("--lambdas", default="0.1", help="comma-separated lambda grid")
    p.add_argument("--gammas", default="1.0", help="comma-separated gamma grid")

    p = sub.add_parser("dump-weights", help="layerwise run that also dumps trace diagonals")
    _add_adapt_flags(p)
    return parser


def _floats(text: str) -> list[float]:
    return [float(tok) for tok in text.split(",") if tok.strip()]


def _load_pretrained(path: str):
    model, meta = load_checkpoint(path)
    try:
        source = SourceSpec(
            input_dim=int(meta["d"]),
            class_count=int(meta["classes"]),
            margin=float(meta["margin"]),
            seed=int(meta["source_seed"]),
        )
    except KeyError as exc:
        raise ValueError(f"{path}: checkpoint lacks source metadata ({exc})") from exc
    return model, source


def _config_from_args(args, method: str | None = None) -> AdaptConfig:
    return AdaptConfig(
        method=method or args.method,
        eta=args.eta,
        tau=args.tau,
        lam=args.lam,
        gamma=args.gamma,
        epsilon=args.epsilon,
        optimizer=args.opt,
        consistency=args.consistency,
        noise_scale=args.noise_scale,
        seed=args.seed,
    )


def cmd_pretrain(args) -> int:
    hidden = [int(tok) for tok in args.hidden.split(",") if tok.strip()]
    spec = SourceSpec(
        input_dim=args.d, class_count=args.classes, margin=args.margin, seed=args.seed
    )
    source = gen_source(spec, args.n)
    model = build_classifier(args.d, hidden, args.classes, seed=args.seed)
    result = harness.pretrain(
        model, source, epochs=args.epochs, eta_pre=args.eta_pre, seed=args.seed
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.txt"
    save_checkpoint(
        result.model,
        ckpt,
        meta={
            "d": str(args.d),
            "classes": str(args.classes),
            "margin": repr(args.margin),
            "source_seed": str(args.seed),
            "hidden": args.hidden,
        },
    )
    print(f"source train accuracy: {result.accuracy:.4f}")
    print(f"checkpoint written to {ckpt}")
    return 0


def _run_adapt(args, config: AdaptConfig, tag: str) -> int:
    model, source = _load_pretrained(args.checkpoint)
    schedule = parse_schedule_file(args.schedule)
    print(describe_schedule(schedule))
    summaries = []
    for offset in range(args.seeds):
        cfg = replace(config, seed=config.seed + offset)
        run_tag = tag if args.seeds == 1 else f"{tag}_seed{cfg.seed}"
        result = harness.run_experiment(
            model, source, schedule, cfg, args.out, tag=run_tag
        )
        summaries.append(result.summary)
        print(
            f"[{run_tag}] mean error {result.summary['mean_error']:.4f} "
            f"over {result.summary['batches']} batches"
        )
    if args.seeds > 1:
        errs = [s["mean_error"] for s in summaries]
        print(
            f"mean over {args.seeds} seeds: {np.mean(errs):.4f} +/- {np.std(errs):.4f}"
        )
    return 0


def cmd_adapt(args) -> int:
    return _run_adapt(args, _config_from_args(args), tag=args.method)


def cmd_baseline(args) -> int:
    return _run_adapt(args, _config_from_args(args), tag=args.method)


def cmd_dump_weights(args) -> int:
    config = replace(_config_from_args(args, method="layerwise"), track_diagonal=True)
    model, source = _load_pretrained(args.checkpoint)
    schedule = parse_schedule_file(args.schedule)
    print(describe_schedule(schedule))
    result = harness.run_experiment(
        model, source, schedule, config, args.out, tag="dump"
    )
    print(f"weight dumps (with trace diagonals) written to {result.weights_path}")
    return 0


def cmd_ablate(args) -> int:
    model, source = _load_pretrained(args.checkpoint)
    schedule = parse_schedule_file(args.schedule)
    print(describe_schedule(schedule))
    base = _config_from_args(args)
    rows = harness.ablate(
        model,
        source,
        schedule_factory=lambda: parse_schedule_file(args.schedule),
        base=base,
        taus=_floats(args.taus),
        lams=_floats(args.lambdas),
        gammas=_floats(args.gammas),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = out / "ablation.json"
    table.write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"{'tau':>6} {'lambda':>8} {'gamma':>6} {'mean_error':>11}")
    for row in rows:
        print(
            f"{row['tau']:>6.2f} {row['lambda']:>8.3f} {row['gamma']:>6.2f} "
            f"{row['mean_error']:>11.4f}"
        )
    print(f"ablation table written to {table}")
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "baseline": cmd_baseline,
    "ablate": cmd_ablate,
    "dump-weights": cmd_dump_weights,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:  # CLI contract: nonzero exit on any abort
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
