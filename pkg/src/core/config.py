"""
src/core/config.py

Centralized configuration & defaults.
- Loads environment variables (supports .env via python-dotenv).
- Holds constants used across modules.
- Layers run settings: built-in defaults < config JSON < command-line overrides.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from dotenv import load_dotenv

from src.core.errors import ConfigError, InputFileError, SteeringError
from src.sim.simulator import SimScenario
from src.steering.abss import DEFAULT_MARGIN_EPS, SolverMode
from src.steering.eaqs import Ablation, SteeringConfig, StrengthPolicy
from src.steering.scheduler import DESK_SCHEDULE, SteeringSchedule, schedule_from_config

logger = logging.getLogger(__name__)

# Load .env if present (non-fatal if missing)
load_dotenv()

REPO_ROOT = Path(__file__).resolve().parents[2]

# ---- Anchor endpoint ----
# Name of the variable holding the endpoint token, not the token itself
ANCHOR_TOKEN_ENV: str = os.environ.get("ANCHOR_TOKEN_ENV", "OPENAI_API_KEY")
ANCHOR_ENDPOINT: str | None = os.environ.get("ANCHOR_ENDPOINT") or None
ANCHOR_MODEL: str = os.environ.get("ANCHOR_MODEL", "gpt-4o-mini")
ANCHOR_TIMEOUT_SEC: float = float(os.environ.get("ANCHOR_TIMEOUT_SEC", "30"))
ANCHOR_MAX_RETRIES: int = int(os.environ.get("ANCHOR_MAX_RETRIES", "1"))

# ---- Paths ----
# Relative paths resolve against the repository root
CONFIG_PATH: str = os.environ.get("STEER_CONFIG_JSON", "config/defaults.json")
OUT_DIR: str = os.environ.get("STEER_OUT_DIR", "out")

FORMATS = ("json", "csv", "both")


@dataclass(frozen=True)
class SolverConfig:
    mode: SolverMode = SolverMode.CLOSED_FORM
    margin_eps: float = DEFAULT_MARGIN_EPS
    ridge: float | None = None


@dataclass(frozen=True)
class PolicyConfig:
    strength: StrengthPolicy = StrengthPolicy.ABSS
    fixed_strength: float = 1.0
    ablation: Ablation = Ablation.NONE
    carry: float = 1.0
    rebuild_projectors: bool = False


@dataclass(frozen=True)
class AnchorServiceConfig:
    endpoint: str | None = ANCHOR_ENDPOINT
    model: str = ANCHOR_MODEL
    token_env: str = ANCHOR_TOKEN_ENV
    timeout_sec: float = ANCHOR_TIMEOUT_SEC
    max_retries: int = ANCHOR_MAX_RETRIES
    audit_file: str | None = None


@dataclass(frozen=True)
class OutputConfig:
    out_dir: str = OUT_DIR
    formats: str = "both"
    workers: int = 1

    @property
    def write_json(self) -> bool:
        return self.formats in ("json", "both")

    @property
    def write_csv(self) -> bool:
        return self.formats in ("csv", "both")


@dataclass(frozen=True)
class RunConfig:
    plan_path: str | None = None
    schedule: SteeringSchedule = DESK_SCHEDULE
    solver: SolverConfig = field(default_factory=SolverConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    scenario: SimScenario = field(default_factory=SimScenario)
    seeds: tuple[int, ...] = (0,)
    anchors: AnchorServiceConfig = field(default_factory=AnchorServiceConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def steering_config(self) -> SteeringConfig:
        return SteeringConfig(
            solver_mode=self.solver.mode,
            margin_eps=self.solver.margin_eps,
            ridge=self.solver.ridge,
            strength=self.policy.strength,
            fixed_strength=self.policy.fixed_strength,
            ablation=self.policy.ablation,
        )


# ---- Loading ----

def resolve_path(path: str | Path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else REPO_ROOT / p


def _merge(base: dict[str, Any], over: dict[str, Any]) -> dict[str, Any]:
    """Recursive overlay; None in `over` means "not given"."""
    out = dict(base)
    for key, value in over.items():
        if value is None:
            continue
        if isinstance(value, dict):
            current = out.get(key)
            out[key] = _merge(current if isinstance(current, dict) else {}, value)
        else:
            out[key] = value
    return out


def _section(cls, doc: dict[str, Any] | None, name: str, **convert):
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigError(f"config section '{name}' must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {sorted(unknown)}")
    kwargs = {}
    for key, value in doc.items():
        try:
            if value is not None:
                kwargs[key] = convert[key](value) if key in convert else value
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid value for {name}.{key}: {value!r}") from exc
    try:
        return cls(**kwargs)
    except (SteeringError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{name}' section: {exc}") from exc


def _seeds(doc: dict[str, Any] | None) -> tuple[int, ...]:
    doc = doc or {}
    unknown = set(doc) - {"seed", "count"}
    if unknown:
        raise ConfigError(f"unknown keys in 'seeds': {sorted(unknown)}")
    start = int(doc.get("seed", 0))
    count = int(doc.get("count", 1))
    if count < 1:
        raise ConfigError("seeds.count must be >= 1")
    return tuple(range(start, start + count))


def read_config_file(path: str | Path) -> dict[str, Any]:
    p = resolve_path(path)
    if not p.exists():
        raise InputFileError(f"config file not found: {p}")
    try:
        with open(p, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"cannot parse config {p}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {p} must hold a JSON object")
    return doc


def config_from_dict(doc: dict[str, Any]) -> RunConfig:
    sections = {"plan", "schedule", "solver", "steering", "scenario", "seeds", "anchors", "output"}
    unknown = set(doc) - sections
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    try:
        schedule = schedule_from_config(doc.get("schedule"), DESK_SCHEDULE)
    except SteeringError as exc:
        raise ConfigError(str(exc)) from exc

    plan_path = doc.get("plan")
    if plan_path is not None and not resolve_path(plan_path).exists():
        raise InputFileError(f"plan file not found: {plan_path}")

    output = _section(OutputConfig, doc.get("output"), "output", workers=int)
    if output.formats not in FORMATS:
        raise ConfigError(f"output.formats must be one of {FORMATS}, got {output.formats!r}")

    return RunConfig(
        plan_path=plan_path,
        schedule=schedule,
        solver=_section(SolverConfig, doc.get("solver"), "solver", mode=SolverMode, margin_eps=float, ridge=float),
        policy=_section(
            PolicyConfig, doc.get("steering"), "steering",
            strength=StrengthPolicy, ablation=Ablation, fixed_strength=float, carry=float,
        ),
        scenario=_section(SimScenario, doc.get("scenario"), "scenario"),
        seeds=_seeds(doc.get("seeds")),
        anchors=_section(AnchorServiceConfig, doc.get("anchors"), "anchors", timeout_sec=float, max_retries=int),
        output=output,
    )


def load_run_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """
    Built-in defaults, overlaid with the JSON file at `path` (or CONFIG_PATH
    when it exists), overlaid with `overrides` (same nested shape; None values
    leave the file value in place).
    """
    doc: dict[str, Any] = {}
    if path is not None:
        doc = read_config_file(path)
    elif resolve_path(CONFIG_PATH).exists():
        doc = read_config_file(CONFIG_PATH)
    if overrides:
        doc = _merge(doc, overrides)
    cfg = config_from_dict(doc)
    log_effective_config(cfg)
    return cfg


def config_to_dict(cfg: RunConfig) -> dict[str, Any]:
    """JSON-ready view of the effective configuration (no secrets)."""
    def plain(obj):
        return {k: (v.value if hasattr(v, "value") else v) for k, v in asdict(obj).items()}

    return {
        "plan": cfg.plan_path,
        "schedule": asdict(cfg.schedule),
        "solver": plain(cfg.solver),
        "steering": plain(cfg.policy),
        "scenario": asdict(cfg.scenario),
        "seeds": {"seed": cfg.seeds[0], "count": len(cfg.seeds)},
        "anchors": asdict(cfg.anchors),
        "output": asdict(cfg.output),
    }


# ---- Helpers ----

def require_anchor_token(token_env: str = ANCHOR_TOKEN_ENV) -> str:
    """
    Raise a clear error if the anchor endpoint token is missing.
    Call this before building a network transport.
    """
    token = os.environ.get(token_env)
    if not token:
        raise ConfigError(
            f"Missing required environment variable: {token_env}. "
            "Set it in your environment or a .env file."
        )
    return token


def log_effective_config(cfg: RunConfig) -> None:
    """Log effective (non-secret) config; token values are never included."""
    logger.info(
        "schedule=%d/%d of %d/%d | solver=%s eps=%s | strength=%s ablation=%s | seeds=%d from %d | out=%s (%s)",
        cfg.schedule.max_steps, cfg.schedule.max_blocks,
        cfg.schedule.total_steps, cfg.schedule.total_blocks,
        cfg.solver.mode.value, cfg.solver.margin_eps,
        cfg.policy.strength.value, cfg.policy.ablation.value,
        len(cfg.seeds), cfg.seeds[0],
        cfg.output.out_dir, cfg.output.formats,
    )
