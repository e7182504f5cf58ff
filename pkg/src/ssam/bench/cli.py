"""Command line entry point.

Exit codes: 0 success, 1 configuration or file-format problem, 2 numeric
failure during adaptation, 3 gradient verification failure. argparse's
own complaints are routed through ConfigError so bad flags also exit 1.
"""

from __future__ import annotations

import argparse
import json
import sys

from ..adaptation import AdaptConfig
from ..errors import ConfigError, FormatError, NumericError
from . import gradcheck as gc
from .reports import run_ablation, run_experiment, summarize_ablation, write_ablation, write_report
from .synthetic import (
    SyntheticShiftSpec,
    default_encoder,
    generate_dataset,
    load_companion_embeddings,
    load_dataset,
    save_benchmark,
)


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage, which collides with the
    # numeric-failure code; surface usage problems as ConfigError instead
    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="ssam", description="soft-association test-time adaptation bench")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic shifted dataset")
    g.add_argument("--spec", help="JSON file of generator fields; defaults used if omitted")
    g.add_argument("--seed", type=int, default=None, help="override the spec seed")
    g.add_argument("--out", required=True, help="dataset path; .vit.emb/.conv.emb written next to it")
    g.set_defaults(func=_cmd_gen_data)

    a = sub.add_parser("adapt", help="adapt on a dataset and report accuracies")
    a.add_argument("--data", required=True)
    a.add_argument("--alpha", type=float, default=1.0)
    a.add_argument("--beta", type=float, default=1.0)
    a.add_argument("--lr", type=float, default=1e-4)
    a.add_argument("--batch", type=int, default=64)
    a.add_argument("--steps", type=int, default=50, help="optimizer steps per batch")
    a.add_argument("--mode", choices=["continual", "episodic"], default="continual")
    a.add_argument("--encoder", choices=["vit", "conv"], default="conv")
    a.add_argument("--insertion-layer", type=int, default=0)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--report", help="directory for CSV outputs")
    a.add_argument(
        "--per-image",
        action="store_true",
        help="also export per-image association rows behind the heatmaps",
    )
    a.set_defaults(func=_cmd_adapt)

    b = sub.add_parser("ablate", help="loss-mask rows plus an (alpha, beta) grid")
    b.add_argument("--data", required=True)
    b.add_argument("--grid", help='JSON file {"alpha": [...], "beta": [...]}')
    b.add_argument("--seeds", type=int, default=3)
    b.add_argument("--encoder", choices=["vit", "conv"], default="conv")
    b.add_argument("--batch", type=int, default=64)
    b.add_argument("--steps", type=int, default=50)
    b.add_argument("--lr", type=float, default=1e-4)
    b.add_argument("--mode", choices=["continual", "episodic"], default="continual")
    b.add_argument("--report", help="directory for ablation.csv")
    b.set_defaults(func=_cmd_ablate)

    c = sub.add_parser("gradcheck", help="verify analytic gradients against finite differences")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--batch", type=int, default=8)
    c.add_argument("--m", type=int, default=4)
    c.add_argument("--d", type=int, default=16)
    c.add_argument("--n", type=int, default=9)
    # negative control: force a named component to fail
    c.add_argument("--corrupt", help=argparse.SUPPRESS)
    c.set_defaults(func=_cmd_gradcheck)
    return p


def _cmd_gen_data(args) -> int:
    spec = SyntheticShiftSpec.from_json(args.spec) if args.spec else SyntheticShiftSpec()
    if args.seed is not None:
        spec.seed = args.seed
    bench = generate_dataset(spec)
    save_benchmark(bench, args.out)
    ds = bench.dataset
    print(f"wrote {args.out}: {ds.count} images, {ds.num_classes} classes, shape {ds.image_shape}")
    for family in sorted(bench.probe_accuracy):
        print(f"unshifted probe accuracy [{family}]: {bench.probe_accuracy[family]:.4f}")
    return 0


def _cmd_adapt(args) -> int:
    ds = load_dataset(args.data)
    emb = load_companion_embeddings(args.data, args.encoder)
    encoder = default_encoder(args.encoder, ds.image_shape, insertion_layer=args.insertion_layer)
    if emb.dim != encoder.dim:
        raise ConfigError(f"embeddings have dim {emb.dim}, encoder produces {encoder.dim}")
    if emb.num_categories != ds.num_classes:
        raise ConfigError(
            f"embeddings have {emb.num_categories} categories, dataset has {ds.num_classes}"
        )
    cfg = AdaptConfig(
        alpha=args.alpha,
        beta=args.beta,
        learning_rate=args.lr,
        batch_size=args.batch,
        steps_per_batch=args.steps,
        mode=args.mode,
        seed=args.seed,
    )
    bundle = run_experiment(encoder, ds, emb, cfg)
    s = bundle.summary
    print(f"pre_accuracy={s['pre_accuracy']:.4f}")
    print(f"post_accuracy={s['post_accuracy']:.4f}")
    print(f"online_accuracy={s['online_accuracy']:.4f}")
    if args.report:
        for path in write_report(bundle, args.report, per_image=args.per_image):
            print(f"wrote {path}")
    return 0


def _load_grid(path):
    if path is None:
        return None, None
    with open(path) as fh:
        raw = json.load(fh)
    unknown = set(raw) - {"alpha", "beta"}
    if unknown:
        raise ConfigError(f"unknown grid keys {sorted(unknown)} in {path}")
    return raw.get("alpha"), raw.get("beta")


def _cmd_ablate(args) -> int:
    ds = load_dataset(args.data)
    emb = load_companion_embeddings(args.data, args.encoder)
    encoder = default_encoder(args.encoder, ds.image_shape)
    ga, gb = _load_grid(args.grid)
    base = AdaptConfig(
        learning_rate=args.lr,
        batch_size=args.batch,
        steps_per_batch=args.steps,
        mode=args.mode,
    )
    rows = run_ablation(encoder, ds, emb, base, grid_alpha=ga, grid_beta=gb, seeds=args.seeds)
    for mask, mean_post in sorted(summarize_ablation(rows).items()):
        print(f"mean post_accuracy [{mask}]: {mean_post:.4f}")
    if args.report:
        print(f"wrote {write_ablation(rows, args.report)}")
    return 0


def _cmd_gradcheck(args) -> int:
    report = gc.gradcheck_command(
        seed=args.seed, batch=args.batch, m=args.m, d=args.d, n=args.n, corrupt=args.corrupt
    )
    print(gc.format_report(report))
    return 0 if report.passed else 3


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        return args.func(args)
    except (ConfigError, FormatError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
