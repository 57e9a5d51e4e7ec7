"""Command-line entry point: data generation, staged training,
evaluation, and self-verification.

Exit codes: 0 success, 1 usage/config, 2 data, 3 numeric failure.
The environment variable VLAB_SEED overrides the configured seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import data as data_mod
from . import evalkit
from . import pipeline as P
from . import verify
from .config import RunConfig, describe_keys
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    NumericError,
    ShapeError,
    VlabError,
)
from .model import VLABModel


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("gen-data", help="generate a synthetic corpus")
    gen.add_argument("--n", type=int, required=True, help="number of samples (>= 10)")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--ratios", default="0.8,0.1,0.1", help="train,val,test fractions")

    train = sub.add_parser(
        "train", help="run one training stage",
        epilog=describe_keys(), formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    train.add_argument("--stage", required=True,
                       choices=sorted({"adapt", "adaptive_transferring", "tune",
                                       "integrated_tuning", "blend", "blending"}))
    train.add_argument("--config", help="key=value config file (defaults otherwise)")
    train.add_argument("--data", required=True, help="corpus directory or manifest")
    train.add_argument("--init-ckpt", help="checkpoint to start from")
    train.add_argument("--out", required=True, help="output directory")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on one task")
    ev.add_argument("--task", required=True, choices=("retrieval", "caption", "qa"))
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", required=True, help="results JSON path")
    ev.add_argument("--split", default="test", choices=("train", "val", "test"))

    ver = sub.add_parser("verify", help="run gradient and invariant self-checks")
    ver.add_argument("--suite", default="all", choices=("grads", "invariants", "all"))
    return parser


def _manifest_path(data_arg: str) -> str:
    if os.path.isdir(data_arg):
        return os.path.join(data_arg, "manifest.jsonl")
    return data_arg


def cmd_gen_data(args) -> int:
    cfg = RunConfig({"seed": args.seed})
    try:
        ratios = tuple(float(r) for r in args.ratios.split(","))
    except ValueError:
        raise ConfigError(f"bad --ratios value {args.ratios!r}")
    print(f"config {cfg.config_hash()}")
    manifest = data_mod.generate_corpus(args.n, cfg["seed"], ratios, args.out)
    print(f"wrote {manifest} ({args.n} samples, seed {cfg['seed']})")
    return 0


def cmd_train(args) -> int:
    stage = P.resolve_stage(args.stage)
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    corpus = data_mod.Corpus(_manifest_path(args.data))
    model = VLABModel(cfg.model_config(stage), cfg["seed"])

    if stage == "blend" and not args.init_ckpt:
        raise ConfigError(
            "blend requires an adapted checkpoint: pass --init-ckpt from the "
            "adapt or tune stage"
        )
    if args.init_ckpt:
        arrays = P.load_checkpoint(args.init_ckpt)
        if stage == "blend":
            prior = P.checkpoint_stage(arrays)
            if prior not in ("adapt", "tune"):
                raise ConfigError(
                    f"blend must start from an adapt or tune checkpoint, "
                    f"got stage {prior!r}"
                )
        model.load_state(arrays)

    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "checkpoint.ckpt")
    metrics = os.path.join(args.out, "metrics.jsonl")
    print(f"config {cfg.config_hash()}")
    started = time.time()
    logs = P.run_stage(cfg.stage_config(stage), corpus, model, ckpt, metrics,
                       cfg.canonical_text())
    print(
        f"stage {stage}: {len(logs)} steps in {time.time() - started:.1f}s, "
        f"final loss {logs[-1]['l_total']:.4f} "
        f"(vtc {logs[-1]['l_vtc']:.4f}, mlm {logs[-1]['l_mlm']:.4f}, "
        f"unilm {logs[-1]['l_unilm']:.4f})"
    )
    print(f"checkpoint {ckpt}")
    return 0


def cmd_eval(args) -> int:
    arrays = P.load_checkpoint(args.ckpt)
    if "_meta.config" in arrays:
        cfg = RunConfig.from_text(P.decode_meta_text(arrays["_meta.config"]))
    else:
        cfg = RunConfig()
    stage = P.checkpoint_stage(arrays) or "tune"
    model = VLABModel(cfg.model_config(stage), cfg["seed"])
    missing, _ = model.load_state(arrays)
    if missing:
        raise DataError(
            f"checkpoint {args.ckpt} does not fit the {args.task} model: "
            f"missing {missing[:3]} (+{max(0, len(missing) - 3)} more)"
        )
    corpus = data_mod.Corpus(_manifest_path(args.data))
    print(f"config {cfg.config_hash()}")

    if args.task == "retrieval":
        metrics = evalkit.retrieval_eval(model, corpus, args.split,
                                         cfg["use_dual_softmax"], cfg["dual_softmax_t"])
        summary = " ".join(f"{k}={v:.1f}" for k, v in metrics.items())
    elif args.task == "caption":
        metrics = evalkit.caption_eval(model, corpus, args.split,
                                       cfg["eval_max_len"], cfg["eval_beam"])
        summary = f"BLEU@4={metrics['bleu4']:.1f} EM={metrics['exact_match']:.3f}"
    else:
        metrics = evalkit.qa_eval(model, corpus, args.split, cfg["eval_max_len"],
                                  cfg["eval_beam"])
        summary = f"accuracy={metrics['accuracy']:.3f} (n={metrics['n']})"

    result = {"task": args.task, "metrics": metrics,
              "config_hash": cfg.config_hash(), "seed": cfg["seed"]}
    with open(args.out, "w") as f:
        json.dump(result, f, indent=2)
        f.write("\n")
    print(f"{args.task} [{args.split}]: {summary}")
    return 0


def cmd_verify(args) -> int:
    cfg = RunConfig()
    print(f"config {cfg.config_hash()}")
    started = time.time()
    rows = verify.run_suite(args.suite)
    width = max(len(name) for name, _, _ in rows)
    failures = 0
    for name, passed, detail in rows:
        status = "PASS" if passed else "FAIL"
        line = f"{name:<{width}}  {status}"
        if detail:
            line += f"  {detail}"
        print(line)
        failures += 0 if passed else 1
    print(f"{len(rows) - failures}/{len(rows)} checks passed "
          f"in {time.time() - started:.1f}s")
    if failures:
        raise NumericError(f"{failures} verification checks failed")
    return 0


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        handler = {
            "gen-data": cmd_gen_data,
            "train": cmd_train,
            "eval": cmd_eval,
            "verify": cmd_verify,
        }[args.command]
        return handler(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, ContractError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except VlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
