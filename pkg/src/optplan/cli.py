"""Operator entry points.

    optplan plan   --config experiment.yaml [--resume] [--workers N] [--seed S]
    optplan fit    --corpus curves.jsonl --family exp
    optplan report --ledger run.ledger.jsonl --out report/
    optplan conform --trainer-cmd "optplan-simtrainer --scenario s.json"

Set OPTPLAN_LOG=debug|info|warning for log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import yaml

from . import curvefit, ledger, planner, protocol, report
from .curvefit import CurveFamily
from .graph import GraphMode, GraphValidationError, SamplingStrategy, build_graph
from .stopper import StopperConfig

log = logging.getLogger("optplan.cli")

FAMILY_FLAGS = {
    "power": [CurveFamily.POWER],
    "multi-power": [CurveFamily.MULTI_POWER],
    "exp": [CurveFamily.EXPONENTIAL],
    "multi-exp": [CurveFamily.MULTI_EXPONENTIAL],
    "all": list(CurveFamily),
}


class ConfigError(ValueError):
    pass


def load_config(path: str) -> dict:
    cfg_path = Path(path)
    try:
        with open(cfg_path, "r", encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except yaml.YAMLError as exc:
        raise ConfigError(f"config does not parse: {exc}")
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    for key in ("clip_lengths", "learning_rates"):
        if key not in doc:
            raise ConfigError(f"config is missing required key {key!r}")
    trainer = doc.get("trainer")
    if not isinstance(trainer, dict) or "command" not in trainer:
        raise ConfigError("config needs trainer.command")
    doc["_dir"] = cfg_path.parent
    return doc


def _resolve(base: Path, value: str) -> str:
    p = Path(value)
    return str(p if p.is_absolute() else base / p)


def build_graph_from_config(cfg: dict):
    strategies = cfg.get("strategies", ["consecutive", "uniform"])
    try:
        strategy_set = {SamplingStrategy(s) for s in strategies}
        mode = GraphMode(cfg.get("mode", "basic"))
    except ValueError as exc:
        raise GraphValidationError(str(exc))
    return build_graph(
        cfg["clip_lengths"],
        cfg["learning_rates"],
        strategy_set,
        mode,
        extra=cfg.get("extra") or {},
    )


def stopper_from_config(cfg: dict) -> StopperConfig:
    sc = cfg.get("stopper") or {}
    family = CurveFamily.from_tag(sc.get("family", "exponential"))
    return StopperConfig(
        delay_epochs=int(sc.get("delay_epochs", 10)),
        family=family,
        min_points=sc.get("min_points"),
        horizon_cap=int(sc.get("horizon_cap", 200)),
    )


def cmd_plan(args) -> int:
    try:
        cfg = load_config(args.config)
        graph = build_graph_from_config(cfg)
        stopper_cfg = stopper_from_config(cfg)
    except (ConfigError, GraphValidationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    base = cfg["_dir"]
    run_id = str(cfg.get("run_id", "run"))
    seed = int(args.seed if args.seed is not None else cfg.get("seed", 0))
    workers = int(args.workers if args.workers is not None else cfg.get("workers", 1))
    ledger_path = _resolve(base, cfg.get("ledger", f"{run_id}.ledger.jsonl"))
    plan_out = _resolve(base, cfg.get("plan_out", f"{run_id}.plan.json"))
    trainer = cfg["trainer"]
    command = trainer["command"]
    timeout_s = float(trainer.get("timeout_s", protocol.DEFAULT_TIMEOUT_S))

    def factory():
        return protocol.SubprocessConnection(command, timeout_s=timeout_s)

    try:
        result = planner.plan(
            graph,
            factory,
            stopper_cfg,
            ledger_path,
            run_id=run_id,
            seed=seed,
            workers=workers,
            resume=args.resume,
            retries=int(cfg.get("retries", 0)),
        )
    except (planner.PlanningFailed, protocol.ProtocolViolation,
            protocol.ConnectionLost, ledger.LedgerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    out_path = Path(plan_out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(result.to_json(graph), encoding="utf-8")

    hops = " -> ".join(graph.state(sid).label() for sid in result.path)
    print(f"run:      {run_id}")
    print(f"path:     {hops}")
    print(f"epochs:   {list(result.epochs)}")
    print(f"value:    {result.final_value:.6f}")
    print(f"strategy: {result.winning_strategy.value}")
    print(f"plan:     {plan_out}")
    return 0


def cmd_fit(args) -> int:
    families = FAMILY_FLAGS[args.family]
    corpus_path = Path(args.corpus)
    if not corpus_path.exists():
        print(f"error: corpus not found: {args.corpus}", file=sys.stderr)
        return 2

    records = []
    sums: dict[str, dict] = {
        fam.value: {"count": 0, "rmse": 0.0, "r2": 0.0, "r2_count": 0} for fam in families
    }
    skipped = 0
    for line_no, series_id, series, err in curvefit.load_corpus(corpus_path):
        if series is None:
            print(f"warning: line {line_no} skipped: {err}", file=sys.stderr)
            skipped += 1
            continue
        for fam in families:
            try:
                result = curvefit.fit(series, fam)
            except curvefit.CurveFitError as exc:
                print(
                    f"warning: series {series_id!r} not fitted with {fam.value}: {exc}",
                    file=sys.stderr,
                )
                skipped += 1
                continue
            records.append(curvefit.fit_report_record(series_id, result))
            agg = sums[fam.value]
            agg["count"] += 1
            agg["rmse"] += result.rmse
            if not math.isnan(result.r_square):
                agg["r2"] += result.r_square
                agg["r2_count"] += 1

    if not records:
        print("error: no series could be fitted", file=sys.stderr)
        return 1

    fits_path = corpus_path.with_suffix(corpus_path.suffix + ".fits.jsonl")
    with open(fits_path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(curvefit.dump_record(rec) + "\n")

    summary = {}
    for tag, agg in sums.items():
        if agg["count"] == 0:
            continue
        summary[tag] = {
            "series": agg["count"],
            "avg_rmse": agg["rmse"] / agg["count"],
            "avg_r_square": (agg["r2"] / agg["r2_count"]) if agg["r2_count"] else None,
        }
        r2 = summary[tag]["avg_r_square"]
        r2_text = "n/a" if r2 is None else f"{r2:.4f}"
        print(
            f"{tag:18s} series={agg['count']:4d}  avg_rmse={summary[tag]['avg_rmse']:.3e}  "
            f"avg_r_square={r2_text}"
        )
    summary_path = corpus_path.with_suffix(corpus_path.suffix + ".summary.json")
    summary_path.write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    print(f"fits:    {fits_path}")
    print(f"summary: {summary_path}")
    return 0


def cmd_report(args) -> int:
    if not os.path.exists(args.ledger):
        print(f"error: ledger not found: {args.ledger}", file=sys.stderr)
        return 2
    events, truncated = ledger.read_events(args.ledger)
    if truncated:
        print("warning: ledger has a truncated tail; reporting the readable prefix",
              file=sys.stderr)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "transitions.csv").write_text(report.transitions_csv(events), encoding="utf-8")
    (out_dir / "fits.svg").write_text(report.fits_svg(events), encoding="utf-8")
    (out_dir / "graph.svg").write_text(report.graph_svg(events), encoding="utf-8")
    n = len(report.stopped_records(events))
    print(f"{n} transitions reported to {out_dir}")
    return 0


def cmd_conform(args) -> int:
    result = protocol.conformance_suite(args.trainer_cmd, timeout_s=args.timeout)
    for line in result.lines():
        print(line)
    return 0 if result.all_passed else 1


def main(argv=None) -> int:
    level = os.environ.get("OPTPLAN_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")

    parser = argparse.ArgumentParser(prog="optplan", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p_plan = sub.add_parser("plan", help="run the planner against a trainer")
    p_plan.add_argument("--config", required=True)
    p_plan.add_argument("--resume", action="store_true")
    p_plan.add_argument("--workers", type=int, default=None)
    p_plan.add_argument("--seed", type=int, default=None)
    p_plan.set_defaults(func=cmd_plan)

    p_fit = sub.add_parser("fit", help="fit a curve corpus")
    p_fit.add_argument("--corpus", required=True)
    p_fit.add_argument("--family", choices=sorted(FAMILY_FLAGS), default="exp")
    p_fit.set_defaults(func=cmd_fit)

    p_report = sub.add_parser("report", help="render tables and plots from a ledger")
    p_report.add_argument("--ledger", required=True)
    p_report.add_argument("--out", required=True)
    p_report.set_defaults(func=cmd_report)

    p_conform = sub.add_parser("conform", help="check a trainer against the protocol")
    p_conform.add_argument("--trainer-cmd", required=True)
    p_conform.add_argument("--timeout", type=float, default=60.0)
    p_conform.set_defaults(func=cmd_conform)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
