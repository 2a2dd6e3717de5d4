"""Command-line entry point.

Exit codes: 0 ok, 2 configuration error, 3 missing upstream artifact,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import default_config_path, load_config
from .errors import ConfigError, FrozenParameterError, MissingArtifactError, NumericalError
from .model import Variant

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4

VARIANTS = {"dme-ce": Variant(True, True), "dme-noce": Variant(True, False),
            "plain-ce": Variant(False, True), "plain-noce": Variant(False, False)}


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, default=None,
                   help="experiment YAML (default: the shipped toy config)")
    p.add_argument("--output-dir", type=Path, default=None,
                   help="workspace root; overrides output_dir from the config")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded execution with deterministic torch kernels")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="collabgen", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-data", help="generate and persist the synthetic scene splits")
    _common(p)

    p = sub.add_parser("train-stage1", help="homogeneous end-to-end training of one agent type")
    _common(p)
    p.add_argument("--agent", type=int, required=True, help="agent id from the config")
    p.add_argument("--out", type=Path, default=None, help="checkpoint path (default: inside the workspace)")
    p.add_argument("--variant", choices=sorted(VARIANTS), default="dme-ce",
                   help="component variant; only dme-ce is the full method")

    p = sub.add_parser("align-stage2", help="train a pair extractor against a frozen ego")
    _common(p)
    p.add_argument("--ego", type=Path, required=True, help="ego stage-1 checkpoint")
    p.add_argument("--collab", type=Path, required=True, help="collaborator stage-1 checkpoint")
    p.add_argument("--out", type=Path, required=True, help="pair checkpoint path")

    p = sub.add_parser("eval", help="AP of solo, each pair and the join/leave sequence")
    _common(p)
    p.add_argument("--graph", type=Path, default=None, help="alias of --config: the graph is the config roster")
    p.add_argument("--split", default="test", help="dataset split to evaluate")
    p.add_argument("--out", type=Path, default=None, help="report JSONL path")

    p = sub.add_parser("robustness", help="AP under one swept noise source")
    _common(p)
    p.add_argument("--sweep", choices=["pose", "delay", "degrade"], required=True)
    p.add_argument("--levels", type=float, nargs="+", default=None,
                   help="noise levels (default: from the config); pose levels set both sigma_xy and sigma_yaw")
    p.add_argument("--out", type=Path, default=None, help="report JSONL path")

    p = sub.add_parser("cost-report", help="trained parameters, FLOPs and message volumes")
    _common(p)
    p.add_argument("--out", type=Path, default=None, help="JSON path")

    p = sub.add_parser("plot", help="render figures and aligned text tables from reports")
    _common(p)
    p.add_argument("--from", dest="source", type=Path, default=None,
                   help="workspace root or its reports/ directory")
    p.add_argument("--kind", choices=["scal", "robust", "ablation"], nargs="+",
                   default=["scal", "robust", "ablation"])

    p = sub.add_parser("repro-all", help="run every stage and write the manifest")
    _common(p)
    return parser


def _workspace(args):
    from .workspace import Workspace

    cfg_path = getattr(args, "graph", None) or args.config or default_config_path()
    cfg = load_config(cfg_path)
    root = args.output_dir if args.output_dir is not None else Path(cfg.output_dir)
    return Workspace(cfg, root)


def run(args) -> int:
    from . import pipeline
    from .evalkit import write_reports

    if args.deterministic:
        pipeline.set_deterministic(True)
    if args.cmd == "plot" and args.source is not None:
        src = args.source.parent if args.source.name == "reports" else args.source
        args.output_dir = src
    ws = _workspace(args)
    if args.cmd == "gen-data":
        print(pipeline.gen_data(ws))
    elif args.cmd == "train-stage1":
        print(pipeline.stage1(ws, args.agent, VARIANTS[args.variant], args.out))
    elif args.cmd == "align-stage2":
        print(pipeline.stage2(ws, args.ego, args.collab, args.out))
    elif args.cmd == "eval":
        from .evalkit import Evaluator

        ev = Evaluator(ws, args.split)
        reports = pipeline.eval_main(ws, ev)
        if len(ws.cfg.agents) > 1:
            reports += pipeline.eval_join(ws, ev)
        out = args.out or ws.report_path(f"eval_{args.split}.jsonl")
        write_reports(out, reports)
        print(out)
    elif args.cmd == "robustness":
        levels = args.levels
        if levels is not None and args.sweep == "delay":
            levels = [int(v) for v in levels]
        out = args.out or ws.report_path(f"robustness_{args.sweep}.jsonl")
        write_reports(out, pipeline.robustness(ws, args.sweep, levels))
        print(out)
    elif args.cmd == "cost-report":
        out = args.out or ws.report_path("cost.json")
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(pipeline.cost_report(ws), indent=1, sort_keys=True) + "\n")
        print(out)
    elif args.cmd == "plot":
        print(" ".join(pipeline.make_plots(ws, tuple(args.kind))))
    elif args.cmd == "repro-all":
        print(pipeline.repro_all(ws))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericalError, FrozenParameterError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
