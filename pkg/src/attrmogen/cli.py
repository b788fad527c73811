"""``attrmogen`` command line.

All subcommands share ``--config``, ``--seed`` and ``--out``. Inputs default to
the standard layout under ``--out`` (see ``pipeline.LAYOUT``) and can be
pointed elsewhere with the per-artifact flags.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .config import apply_overrides, load_config, output_dir
from .errors import AttrMoGenError, ConfigError
from .evaluation import MetricReport

COMMANDS = (
    "synth-data",
    "preprocess",
    "train-vqvae",
    "train-transformer",
    "train-eval-encoder",
    "train-attr-classifier",
    "evaluate",
    "attr-protocol",
    "generate",
    "export-features",
    "verify-bounds",
)

INPUTS = {
    "synth-data": (),
    "preprocess": ("corpus",),
    "train-vqvae": ("corpus",),
    "train-transformer": ("corpus", "vqvae"),
    "train-eval-encoder": ("corpus",),
    "train-attr-classifier": ("corpus",),
    "evaluate": ("corpus", "vqvae", "transformer", "eval_encoder"),
    "attr-protocol": ("corpus", "vqvae", "transformer", "attr_classifier"),
    "generate": ("corpus", "vqvae", "transformer"),
    "export-features": ("corpus", "eval_encoder"),
    "verify-bounds": (),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attrmogen", description="Attribute-aware text-to-motion pipeline.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML or JSON run config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="run directory (default: $ATTRMOGEN_OUT or ./runs)")
        for art in INPUTS[name]:
            p.add_argument(f"--{art.replace('_', '-')}", dest=art, help=f"{art} directory")
        if name == "train-vqvae":
            p.add_argument("--iterations", type=int)
            p.add_argument("--alpha", type=float)
            p.add_argument("--lambda", dest="lam", type=float)
        if name in ("train-transformer", "evaluate", "attr-protocol", "generate"):
            p.add_argument("--attr-in-text", choices=("off", "train", "test", "both"))
        if name == "attr-protocol":
            p.add_argument("--mode", choices=("true", "shuffled"), default="shuffled")
        if name == "generate":
            p.add_argument("--text", action="append", required=True, help="prompt; repeatable")
            p.add_argument("--age", type=int, action="append", help="age group per prompt (default 0)")
            p.add_argument("--gender", type=int, action="append", help="gender per prompt (default 0)")
        if name == "export-features":
            p.add_argument("--semantic", action="store_true", help="export pooled semantic embeddings of --vqvae")
            p.add_argument("--vqvae")
        if name == "verify-bounds":
            p.add_argument("--trials", type=int, default=1000)
            p.add_argument("--kl-trials", type=int)
    return parser


def _resolve(args, root: Path) -> dict[str, Path]:
    paths = {}
    for art in INPUTS[args.command]:
        given = getattr(args, art, None)
        if art == "corpus" and given is None and args.command not in ("preprocess",):
            given = root / pipeline.LAYOUT["preprocessed"]
        paths[art] = Path(given) if given else root / pipeline.LAYOUT[art]
    return paths


def run(args) -> int:
    cfg = load_config(args.config)
    cfg = apply_overrides(cfg, seed=args.seed, out=args.out, iterations=getattr(args, "iterations", None),
                          alpha=getattr(args, "alpha", None), lam=getattr(args, "lam", None),
                          attr_in_text=getattr(args, "attr_in_text", None))
    root = output_dir(cfg)
    p = _resolve(args, root)
    reports = root / pipeline.LAYOUT["reports"]
    cmd = args.command

    if cmd == "synth-data":
        corpus = pipeline.stage_synth(cfg, root / pipeline.LAYOUT["corpus"])
        print(f"wrote {len(corpus)} records")
    elif cmd == "preprocess":
        _, info = pipeline.stage_preprocess(cfg, p["corpus"], root / pipeline.LAYOUT["preprocessed"])
        print(f"kept {info['kept']} records, discarded {info['discarded']}")
    elif cmd == "train-vqvae":
        r = pipeline.stage_train_vqvae(cfg, p["corpus"], root / pipeline.LAYOUT["vqvae"])
        if r.history:
            print(f"rec {r.history[0]['rec']:.4f} -> {r.history[-1]['rec']:.4f}")
        print(f"config {cfg.hash()}")
    elif cmd == "train-transformer":
        r = pipeline.stage_train_transformer(cfg, p["corpus"], p["vqvae"], root / pipeline.LAYOUT["transformer"])
        if r.history:
            print(f"final masked loss {r.history[-1]['loss']:.4f}")
    elif cmd == "train-eval-encoder":
        pipeline.stage_train_eval_encoder(cfg, p["corpus"], root / pipeline.LAYOUT["eval_encoder"])
        print(f"config {cfg.hash()}")
    elif cmd == "train-attr-classifier":
        pipeline.stage_train_attr_classifier(cfg, p["corpus"], root / pipeline.LAYOUT["attr_classifier"])
        print(f"config {cfg.hash()}")
    elif cmd == "evaluate":
        payload = pipeline.stage_evaluate(cfg, p["corpus"], p["vqvae"], p["transformer"], p["eval_encoder"], reports)
        print("\n".join(MetricReport(payload["metrics"]).lines()))
    elif cmd == "attr-protocol":
        res = pipeline.stage_attr_protocol(cfg, p["corpus"], p["vqvae"], p["transformer"], p["attr_classifier"],
                                           reports, args.mode)
        for judge, table in res.items():
            print(judge, " ".join(f"{h}={table[h]['avg']:.3f}" for h in ("age_group", "gender")))
    elif cmd == "generate":
        n = len(args.text)
        ages = args.age or [0] * n
        genders = args.gender or [0] * n
        if len(ages) != n or len(genders) != n:
            raise ConfigError("--age and --gender must be given once per --text (or not at all)")
        labels = np.stack([ages, genders], axis=1)
        pipeline.stage_generate(cfg, p["vqvae"], p["transformer"], p["corpus"], args.text, labels,
                                root / pipeline.LAYOUT["generated"])
        print(f"generated {n} motions")
    elif cmd == "export-features":
        vq = (Path(args.vqvae) if args.vqvae else root / pipeline.LAYOUT["vqvae"]) if args.semantic else None
        res = pipeline.stage_export_features(cfg, p["corpus"], p["eval_encoder"], root / pipeline.LAYOUT["features"], vq)
        print(f"exported {len(res)} feature rows")
    elif cmd == "verify-bounds":
        res = pipeline.stage_verify_bounds(cfg, reports, args.trials, args.kl_trials)
        print(f"{'bound':<14s} {'trials':>6s} {'viol':>5s} {'flagged':>7s} {'worst slack':>12s}  result")
        ok = True
        for name in ("entropy_bound", "kl_bound"):
            r = res[name]
            ok &= r["violations"] == 0
            print(f"{name:<14s} {r['trials']:>6d} {r['violations']:>5d} {r['flagged']:>7d} "
                  f"{r['worst_slack']:>12.3e}  {'PASS' if r['violations'] == 0 else 'FAIL'}")
        return 0 if ok else 1
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return run(args)
    except (AttrMoGenError, OSError, ValueError) as e:
        msg = str(e).replace("\n", " ")
        print(f"{type(e).__name__}: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
