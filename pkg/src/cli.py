"""
Command-line entry point.

    steer.py plan PLAN.json            spans of an event plan
    steer.py solve INSTANCE.json       steering strengths for one solver instance
    steer.py steer-sim [--seeds N]     paired off/on simulator runs + reports
    steer.py anchors PLAN.json ...     anchor phrases written into a plan

Exit codes: 0 success, 1 validation error, 2 I/O or transport error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Any, Sequence

from src.core import config
from src.core.anchor_service import (
    AnchorRequest,
    FixtureTransport,
    OpenAIChatTransport,
    anchors_from_file,
    check_substrings,
    extract_anchors,
)
from src.core.errors import EXIT_IO, EXIT_OK, EXIT_VALIDATION, InputFileError, SteeringError
from src.sim.simulator import run_batch
from src.steering.abss import SolverMode, instance_from_dict, solve, strengths_to_dict
from src.steering.eaqs import Ablation, StrengthPolicy
from src.steering.event_model import (
    assign_windows,
    ensure_valid,
    event_char_ranges,
    plan_from_dict,
    plan_to_dict,
    tokenize_prompt,
    with_anchors,
)
from src.utils.report_utils import dump_json, write_batch, write_json

logger = logging.getLogger(__name__)

SOLVER_CHOICES = ["paper", *(m.value for m in SolverMode)]


def _read_json(path: str) -> Any:
    if not os.path.exists(path):
        raise InputFileError(f"file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


# ---- Subcommands ----

def cmd_plan(args: argparse.Namespace) -> int:
    plan = plan_from_dict(_read_json(args.plan))
    tokens = tokenize_prompt(plan.prompt)
    report = ensure_valid(plan, tokens)
    spans = assign_windows(plan.weights, plan.latent_frames)

    print(",".join(str(s) for s in spans.spans))
    for msg in report.warnings:
        logger.warning(msg)

    if args.out:
        doc = {"schema_version": 1, **spans.to_dict(), "warnings": report.warnings}
        path = write_json(os.path.join(args.out, "spans.json"), doc)
        logger.info("spans written to %s", path)
    return EXIT_OK


def cmd_solve(args: argparse.Namespace) -> int:
    inst = instance_from_dict(_read_json(args.instance))
    mode = SolverMode(args.solver or SolverMode.CLOSED_FORM.value)
    if inst is None:
        doc = {"alpha": 0.0, "beta": 0.0, "mode": mode.value, "skipped": True}
    else:
        doc = strengths_to_dict(solve(inst, mode))
    sys.stdout.write(dump_json(doc))
    if args.out:
        write_json(os.path.join(args.out, "strengths.json"), doc)
    return EXIT_OK


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    seeds: dict[str, Any] = {}
    if args.seed is not None:
        seeds["seed"] = args.seed
    if args.seeds is not None:
        seeds["count"] = args.seeds
    return {
        "schedule": {"max_steps": args.steer_steps, "max_blocks": args.steer_blocks},
        "solver": {"mode": args.solver},
        "steering": {"strength": args.strength, "ablation": args.ablation},
        "seeds": seeds,
        "output": {"out_dir": args.out, "formats": args.format, "workers": args.workers},
    }


def cmd_steer_sim(args: argparse.Namespace) -> int:
    config_path = os.path.abspath(args.config) if args.config else None
    cfg = config.load_run_config(config_path, _overrides(args))
    out_dir = os.path.abspath(args.out) if args.out else str(config.resolve_path(cfg.output.out_dir))
    logger.info("steer-sim over %d seeds -> %s", len(cfg.seeds), out_dir)

    summary = run_batch(
        cfg.seeds,
        cfg.scenario,
        cfg.solver.mode,
        cfg.schedule,
        config=cfg.steering_config(),
        steering_enabled=not args.no_steering,
        carry=cfg.policy.carry,
        workers=cfg.output.workers,
    )
    write_batch(out_dir, summary, cfg.output.write_json, cfg.output.write_csv)
    print(f"{summary.wins}/{len(summary.deltas)} seeds improved; {len(summary.failures)} failed")
    return EXIT_VALIDATION if summary.failures else EXIT_OK


def cmd_anchors(args: argparse.Namespace) -> int:
    doc = _read_json(args.plan)
    plan = plan_from_dict(doc)

    if args.from_file:
        result = anchors_from_file(args.from_file)
        groups = result.event_phrases
        for g in groups:
            check_substrings(g, plan.prompt)
    else:
        cfg = config.load_run_config(os.path.abspath(args.config) if args.config else None)
        if args.fixture:
            transport = FixtureTransport.from_file(args.fixture)
        else:
            transport = OpenAIChatTransport(
                endpoint=args.endpoint or cfg.anchors.endpoint,
                token_env=cfg.anchors.token_env,
                timeout=cfg.anchors.timeout_sec,
                max_retries=cfg.anchors.max_retries,
            )
        req = AnchorRequest(
            prompt=plan.prompt,
            endpoint=args.endpoint or cfg.anchors.endpoint,
            model=args.model or cfg.anchors.model,
            token_env=cfg.anchors.token_env,
        )
        audit = config.resolve_path(cfg.anchors.audit_file) if cfg.anchors.audit_file else None
        resp = extract_anchors(req, transport, event_char_ranges(plan), audit_path=audit)
        groups = [list(g) for g in resp.event_phrases]

    if len(groups) != plan.event_count:
        raise SteeringError(f"got anchors for {len(groups)} events, plan has {plan.event_count}")
    updated = with_anchors(plan, groups)
    target = args.write or args.plan
    write_json(target, plan_to_dict(updated))
    for i, g in enumerate(groups):
        print(f"event {i}: " + ", ".join(g))
    logger.info("anchors written to %s", target)
    return EXIT_OK


# ---- Parser ----

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="steer", description="Multi-event attention steering tools.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="assign latent-frame spans to the events of a plan")
    p.add_argument("plan", help="event plan JSON")
    p.add_argument("--out", help="directory for spans.json")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("solve", help="solve steering strengths for one instance")
    p.add_argument("instance", help="instance JSON (scores or q_star/k_tgt/k_oth)")
    p.add_argument("--solver", choices=SOLVER_CHOICES, help="paper is the closed-form solver")
    p.add_argument("--out", help="directory for strengths.json")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("steer-sim", help="paired off/on simulator runs")
    p.add_argument("--config", help=f"run config JSON (default {config.CONFIG_PATH})")
    p.add_argument("--seed", type=int, help="first seed")
    p.add_argument("--seeds", type=int, help="number of consecutive seeds")
    p.add_argument("--solver", choices=SOLVER_CHOICES, help="paper is the closed-form solver")
    p.add_argument("--steer-steps", type=int, help="steer the first N denoising steps")
    p.add_argument("--steer-blocks", type=int, help="steer the first N blocks")
    p.add_argument("--no-steering", action="store_true", help="on-report equals off-report")
    p.add_argument("--strength", choices=[s.value for s in StrengthPolicy])
    p.add_argument("--ablation", choices=[a.value for a in Ablation])
    p.add_argument("--workers", type=int, help="threads for seed sweeps")
    p.add_argument("--out", help="output directory")
    p.add_argument("--format", choices=list(config.FORMATS))
    p.set_defaults(func=cmd_steer_sim)

    p = sub.add_parser("anchors", help="extract anchor phrases into a plan")
    p.add_argument("plan", help="event plan JSON (anchors may be empty)")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--endpoint", help="chat-completion base URL")
    source.add_argument("--from-file", help="plan JSON that already lists anchors")
    source.add_argument("--fixture", help="canned endpoint replies (offline)")
    p.add_argument("--model")
    p.add_argument("--config")
    p.add_argument("--write", help="output plan path (default: overwrite PLAN)")
    p.set_defaults(func=cmd_anchors)
    return parser


def _setup_logging(verbose: bool, quiet: bool) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose, args.quiet)
    try:
        return args.func(args)
    except SteeringError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    except json.JSONDecodeError as exc:
        logger.error("cannot parse JSON: %s", exc)
        return EXIT_VALIDATION
    except OSError as exc:
        logger.error("%s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
