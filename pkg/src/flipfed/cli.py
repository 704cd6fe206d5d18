"""Command-line entry point: ``flipfed run | ablate | sweep``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import FlipFedError
from .experiment import ExperimentConfig, ablation_suite, apply_overrides, load_config, run_experiment, sweep

log = logging.getLogger("flipfed")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return apply_overrides(cfg, args.set or [])


def _summary(res) -> dict:
    fm = res.final_metrics()
    return {"seed": res.config.seed, "attack": res.config.attack, "defense": res.config.defense,
            "rounds": fm["round"] + 1, "acc": fm["acc"], "asr": fm["asr"],
            "checkpoints": {str(c): {"acc": res.metric_at(c, "acc"), "asr": res.metric_at(c, "asr")}
                            for c in res.config.checkpoints if c <= res.config.rounds}}


def cmd_run(args) -> dict:
    cfg = _config(args)
    res = run_experiment(cfg, args.out, args.checkpoint)
    return _summary(res)


def _suffixed(out, tag):
    """``runs/m.csv`` -> ``runs/m_<tag>.csv``; None when no --out was given."""
    if not out:
        return None
    base = Path(out)
    return lambda v: base.with_name(f"{base.stem}_{tag(v)}{base.suffix or '.csv'}")


def cmd_ablate(args) -> dict:
    cfg = _config(args)
    out = ablation_suite(cfg, csv_path_for=_suffixed(args.out, str))
    return {"checkpoints": out["checkpoints"], "columns": out["columns"], "asr": out["asr"]}


def cmd_sweep(args) -> dict:
    cfg = _config(args)
    values = [json.loads(v) for v in args.values]
    rows = []
    paths = _suffixed(args.out, lambda v: f"{args.key}={v}")
    for v, res in sweep(cfg, args.key, values, csv_path_for=paths):
        rows.append({"value": v, **_summary(res)})
    return {"key": args.key, "runs": rows}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flipfed", description="Federated backdoor attack / defense experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (defaults to the built-in desk config)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key, e.g. --set defense=robust_lr --set crfl.train_sigma=0.01")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="metrics CSV path")

    p = sub.add_parser("run", help="run one experiment")
    common(p)
    p.add_argument("--checkpoint", help="write the final global model here")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("ablate", help="train / train+flip / train+flip+trigopt with shared seeds")
    common(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("sweep", help="run one experiment per value of a config key")
    common(p)
    p.add_argument("key", help="dotted config key, e.g. crfl.train_sigma or h")
    p.add_argument("values", nargs="+", help="values (JSON literals)")
    p.set_defaults(fn=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = args.fn(args)
    except (FlipFedError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
