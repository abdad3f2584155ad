"""Command-line entry point: ``python -m nafs <command> [options]``.

Every configuration key is also a flag (``--noise-sigma 0.2``); flags win
over the config file and ``NAFS_SEED``. Exit status is 0 on success, 1 on a
validation or input error and 2 on a numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

from . import pipeline
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config, require_file
from .crossmodal import write_attention_report
from .features import FormatError
from .objectives import NumericError
from .retrieval import evaluate_rankings, read_rankings, write_rankings
from .synthetic import ManifestError, gen_synthetic

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", "-c", help="key=value configuration file")
    group = parser.add_argument_group("configuration keys")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            group.add_argument(flag, dest=f"cfg_{f.name}", nargs="?", const="true", metavar="BOOL")
        else:
            group.add_argument(flag, dest=f"cfg_{f.name}", metavar=f.type.upper())


def _config(args) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return load_config(args.config, overrides)


def cmd_gen_synthetic(args, cfg: RunConfig) -> int:
    path = gen_synthetic(cfg.synthetic(), cfg.data_dir)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    result = pipeline.train(cfg)
    if result.losses:
        print(f"step 0 loss {result.losses[0][1]:.6f}; step {result.losses[-1][0]} loss {result.losses[-1][1]:.6f}")
    print(f"wrote {cfg.path('checkpoint')} and {cfg.path('loss_log')}")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    ev = pipeline.evaluate(cfg)
    sys.stdout.write(ev.to_text())
    return EXIT_OK


def cmd_rank(args, cfg: RunConfig) -> int:
    params, _ = pipeline.load_params(cfg)
    ctx = pipeline.eval_context(cfg, params)
    rankings = ctx.initial()
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    write_rankings(cfg.path("rankings"), rankings, limit=args.limit)
    sys.stdout.write(evaluate_rankings(rankings, ctx.truth, ctx.gallery_pids).to_text("initial ranking"))
    return EXIT_OK


def cmd_rerank(args, cfg: RunConfig) -> int:
    params, _ = pipeline.load_params(cfg)
    ctx = pipeline.eval_context(cfg, params)
    source = require_file(Path(args.input) if args.input else cfg.path("rankings"), "ranking file")
    initial = read_rankings(source)
    gallery = set(ctx.gallery.image_ids)
    for r in initial:
        if set(r.image_ids) != gallery:
            raise ConfigError(f"ranking for {r.query_id} does not cover the full gallery; re-rank needs complete lists")
    reranked = ctx.rerank(initial)
    out = Path(args.output) if args.output else Path(cfg.out_dir) / "reranked.tsv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_rankings(out, reranked)
    sys.stdout.write(evaluate_rankings(reranked, ctx.truth, ctx.gallery_pids).to_text("re-ranked by visual neighbours"))
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    report = pipeline.gradcheck(cfg, fault=args.fault, zero_weights=args.zero_weights, seeds=range(args.seeds))
    print("\n".join(report.lines()))
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_export_attn(args, cfg: RunConfig) -> int:
    if cfg.scales != "full":
        raise ConfigError("attention export needs scales=full")
    params, _ = pipeline.load_params(cfg)
    ctx = pipeline.eval_context(cfg, params)
    rankings = ctx.initial()
    if args.caption_id:
        wanted = set(args.caption_id)
        missing = wanted - {r.query_id for r in rankings}
        if missing:
            raise ConfigError(f"unknown caption ids: {sorted(missing)}")
        rankings = [r for r in rankings if r.query_id in wanted]
    records = pipeline.attention_records(ctx, rankings, args.count or cfg.attn_count or len(rankings))
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    write_attention_report(cfg.path("attn_report"), records)
    print(f"wrote {len(records)} attention records to {cfg.path('attn_report')}")
    return EXIT_OK


COMMANDS = {
    "gen-synthetic": (cmd_gen_synthetic, "generate a synthetic dataset with planted identities"),
    "train": (cmd_train, "train projections and encoders, write checkpoint and loss log"),
    "evaluate": (cmd_evaluate, "Top-1/5/10 on the evaluation split, optionally re-ranked"),
    "rank": (cmd_rank, "write the initial ranking of every query"),
    "rerank": (cmd_rerank, "re-rank an existing ranking file by visual neighbours"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of the loss gradients"),
    "export-attn": (cmd_export_attn, "dump attention matrices for queries and their top match"),
}


class _Parser(argparse.ArgumentParser):
    # Usage errors are validation errors, not argparse's default status 2.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nafs", description="Multi-scale text-based person search.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        _add_config_flags(p)
        if name == "rank":
            p.add_argument("--limit", type=int, default=None, help="keep only the top LIMIT images per query")
        elif name == "rerank":
            p.add_argument("--input", help="ranking file to re-rank (default: the configured rankings path)")
            p.add_argument("--output", help="destination (default: OUT_DIR/reranked.tsv)")
        elif name == "gradcheck":
            p.add_argument("--fault", action="store_true", help="corrupt one gradient entry as a negative control")
            p.add_argument("--zero-weights", action="store_true", help="set every loss weight to zero")
            p.add_argument("--seeds", type=int, default=20, help="number of random instances (default 20)")
        elif name == "export-attn":
            p.add_argument("--caption-id", action="append", help="restrict to this caption (repeatable)")
            p.add_argument("--count", type=int, default=0, help="number of queries to export")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        return COMMANDS[args.command][0](args, cfg)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ManifestError, CheckpointError, FormatError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
