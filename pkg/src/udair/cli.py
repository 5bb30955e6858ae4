"""Command-line entry point.

Exit codes: 0 success, 1 unexpected failure, 2 configuration error,
3 data error (missing/unpaired/corrupt files, checkpoint format), 4 numeric error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import build_config
from .errors import UdairError
from .evaluation import count_params
from .training import load_checkpoint

log = logging.getLogger("udair")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--profile", default="ci", choices=["ci", "paper"])
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a dotted config key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", default="runs/latest")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="udair", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate the synthetic source/target dataset")
    _common(p)

    p = sub.add_parser("train", help="train on the source domain")
    _common(p)
    p.add_argument("--variant", choices=["full", "no_cscl", "no_codebook", "baseline"])
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("eval", help="restore a test split and score it")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--domain", choices=["source", "target"], default="target")
    p.add_argument("--tta", action="store_true", help="enable test-time adaptation")

    p = sub.add_parser("analyze-features", help="feature density / KL and cluster statistics")
    _common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("count-params", help="parameter counts per group")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--variant", choices=["full", "no_cscl", "no_codebook", "baseline"])
    return parser


def _config(args):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "variant", None):
        overrides.append(f"model.variant={args.variant}")
    return build_config(args.profile, args.config, overrides)


def _checkpoint_config(args, ck):
    """Model settings come from the checkpoint; data/eval/tta settings from the command line."""
    cfg = _config(args)
    cfg.model = ck.config.model
    return cfg.validate()


def run(args) -> int:
    out = Path(args.out_dir)
    if args.command == "synth-data":
        cfg = _config(args)
        pipeline.snapshot(cfg, out)
        counts = pipeline.synth_data(cfg, out)
        print(json.dumps(counts))
    elif args.command == "train":
        cfg = _config(args)
        pipeline.snapshot(cfg, out)
        pipeline.train(cfg, out, resume=args.resume)
        print(f"checkpoint written to {out / pipeline.CHECKPOINT_NAME}")
    elif args.command == "eval":
        ck = load_checkpoint(args.checkpoint)
        cfg = _checkpoint_config(args, ck)
        pipeline.snapshot(cfg, out)
        per_task = pipeline.load_domain(cfg, args.domain, "test")
        before = pipeline.dam_call_count()
        records, reports = pipeline.evaluate(ck.model, per_task, cfg, args.domain, args.tta, ck.anchors, out)
        summary = {"samples": len(records), "tta_reports": len(reports),
                   "dam_calls": pipeline.dam_call_count() - before}
        (out / "summary.json").write_text(json.dumps(summary))
        print(json.dumps(summary))
    elif args.command == "analyze-features":
        ck = load_checkpoint(args.checkpoint)
        cfg = _checkpoint_config(args, ck)
        pipeline.snapshot(cfg, out)
        src = pipeline.load_domain(cfg, "source", "test")
        tgt = pipeline.load_domain(cfg, "target", "test")
        report = pipeline.analyze_features(ck.model, src, tgt, cfg, ck.anchors, out)
        brief = {t: {k: v for k, v in e.items() if k.startswith("kl_")} for t, e in report["tasks"].items()}
        print(json.dumps(brief, indent=1))
    elif args.command == "count-params":
        if args.checkpoint:
            model = load_checkpoint(args.checkpoint).model
        else:
            from .backbone import UDAIR
            model = UDAIR(_config(args).model)
        counts = {"total": count_params(model)}
        counts.update({g: count_params(model, g) for g in ("theta_r", "theta_a", "theta_da")})
        print(json.dumps(counts))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    logging.captureWarnings(True)
    try:
        return run(args)
    except UdairError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except FileNotFoundError as exc:
        log.error("missing file: %s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
