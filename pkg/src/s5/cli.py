"""Command-line entry points for the full pipeline.

Exit codes: 0 success, 2 configuration error, 3 IO/ingestion error,
4 checkpoint/model error, 5 numeric abort. Every command accepts
--config, --seed, and --workers; the S5_SEED environment variable
overrides the default seed when no --seed flag is given.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import CheckpointError, ConfigError, IngestionError, NumericError
from .io import load_config
from .model import ModelConfig, param_count


def _parse_alpha(text: str) -> float:
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="s5", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="run configuration JSON")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=1)
        return p

    p = common(sub.add_parser("gen-synth", help="generate the synthetic corpus"))
    p.add_argument("--out", required=True)

    p = common(sub.add_parser("infer", help="emit probability maps and features"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--emit", default="probs,features")
    p.add_argument("--out", required=True)

    p = common(sub.add_parser("curate", help="select a curated unlabeled subset"))
    p.add_argument("--labeled", required=True)
    p.add_argument("--unlabeled", action="append", required=True)
    p.add_argument("--infer", required=True, help="directory of infer outputs")
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=("entropy", "random"), default="entropy")
    p.add_argument("--clusters", type=int, default=None)
    p.add_argument("--budget", type=int, default=None)

    p = common(sub.add_parser("pretrain", help="semi-supervised or supervised pre-training"))
    p.add_argument("--labeled", required=True)
    p.add_argument("--unlabeled", default=None)
    p.add_argument("--mode", choices=("semi", "supervised"), default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", required=True)

    p = common(sub.add_parser("finetune", help="fine-tune across pseudo-datasets"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", action="append", required=True,
                   help="repeatable; records group into datasets by tag")
    p.add_argument("--regime", choices=("SDF", "MDF", "MoE-MDF"), required=True)
    p.add_argument("--alpha", type=_parse_alpha, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--schedule", choices=("round_robin", "proportional"), default=None)
    p.add_argument("--out", required=True)

    p = common(sub.add_parser("eval", help="evaluate checkpoints on a manifest"))
    p.add_argument("--ckpt", action="append", required=True)
    p.add_argument("--manifest", action="append", required=True)
    p.add_argument("--out", default=None)

    p = common(sub.add_parser("params", help="parameter accounting per regime"))
    p.add_argument("--regime", choices=("SDF", "MDF", "MoE-MDF"), required=True)
    p.add_argument("--T", type=int, default=1, dest="num_datasets")
    p.add_argument("--alpha", type=_parse_alpha, default=None)

    p = common(sub.add_parser("report", help="metrics log to plot-ready series"))
    p.add_argument("--metrics-log", required=True)
    p.add_argument("--out", required=True)

    return parser


def _resolve_seed(args, cfg):
    """Priority: --seed flag, then S5_SEED, then the config file value."""
    if args.seed is not None:
        cfg.seed = args.seed
    elif os.environ.get("S5_SEED"):
        cfg.seed = int(os.environ["S5_SEED"])
    return cfg


def _cmd_gen_synth(args, cfg):
    from .synth import gen_corpus

    out = gen_corpus(cfg.synth, cfg.seed, args.out, args.workers)
    print(json.dumps(out, sort_keys=True))
    return 0


def _cmd_infer(args, cfg):
    from .infer import infer

    emit = tuple(x for x in args.emit.split(",") if x)
    out = infer(args.ckpt, args.manifest, args.out, emit, args.workers)
    print(json.dumps(out, sort_keys=True))
    return 0


def _cmd_curate(args, cfg):
    from .curation import curate

    clusters = args.clusters if args.clusters is not None else cfg.curation.clusters
    budget = args.budget if args.budget is not None else cfg.curation.budget
    report = curate(args.labeled, args.unlabeled, args.infer, args.out,
                    clusters, budget, cfg.seed, args.method, args.workers)
    print(json.dumps({"selected": report["selected"], "pool": report["pool"]}, sort_keys=True))
    return 0


def _cmd_pretrain(args, cfg):
    from .train import pretrain

    if args.steps is not None:
        cfg.train.steps = args.steps
    mode = args.mode if args.mode else ("semi" if args.unlabeled else "supervised")
    if mode == "semi" and not args.unlabeled:
        raise ConfigError("--mode semi requires --unlabeled")
    out = pretrain(args.labeled, args.unlabeled, args.out, cfg, mode, args.workers)
    print(json.dumps(out, sort_keys=True))
    return 0


def _cmd_finetune(args, cfg):
    from .finetune import finetune

    if args.steps is not None:
        cfg.train.finetune_steps = args.steps
    alpha = args.alpha if args.alpha is not None else cfg.model.alpha
    schedule = args.schedule if args.schedule else cfg.train.schedule
    report = finetune(args.ckpt, args.manifest, args.regime, alpha, cfg, args.out,
                      workers=args.workers, schedule=schedule)
    print(json.dumps({"average": report["average"], "regime": report["regime"]},
                     sort_keys=True))
    return 0


def _cmd_eval(args, cfg):
    from .finetune import evaluate

    report = evaluate(args.ckpt, args.manifest, cfg.model.num_classes,
                      cfg.synth.ignore_label, args.workers)
    text = json.dumps(report, sort_keys=True, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(json.dumps({"average": report["average"]}, sort_keys=True))
    return 0


def _cmd_params(args, cfg):
    m = cfg.model
    alpha = args.alpha if args.alpha is not None else m.alpha
    config = ModelConfig(
        image_size=m.image_size, patch_size=m.patch_size, embed_dim=m.embed_dim,
        ffn_hidden=m.ffn_hidden, ffn_out=m.ffn_out, depth=m.depth, heads=m.heads,
        num_classes=[m.num_classes], dataset_names=["d0"], alpha=alpha,
        moe_enabled=args.regime == "MoE-MDF")
    print(json.dumps(param_count(config, args.regime, args.num_datasets), sort_keys=True))
    return 0


def _cmd_report(args, cfg):
    path = Path(args.metrics_log)
    if not path.exists():
        raise IngestionError(f"missing metrics log: {path}")
    series = {key: [] for key in ("step", "L_s", "L_u", "mask_frac", "lr", "miou_eval")}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise IngestionError(f"{path}:{lineno}: malformed log line ({exc})") from exc
        if "step" not in row:
            raise IngestionError(f"{path}:{lineno}: log line lacks a step field")
        for key in series:
            series[key].append(row.get(key))
    Path(args.out).write_text(json.dumps({"series": series}, sort_keys=True) + "\n",
                              encoding="utf-8")
    print(json.dumps({"lines": len(series["step"])}, sort_keys=True))
    return 0


_COMMANDS = {
    "gen-synth": _cmd_gen_synth,
    "infer": _cmd_infer,
    "curate": _cmd_curate,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "eval": _cmd_eval,
    "params": _cmd_params,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        cfg = _resolve_seed(args, cfg)
        return _COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (IngestionError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 4
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        json.dump({"history": exc.history}, sys.stderr)
        print(file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
