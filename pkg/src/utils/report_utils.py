from __future__ import annotations

import csv
import json
import logging
import os
from typing import Any, Dict, List, Optional

from src.sim.simulator import AttentionReport, BatchSummary, DeltaReport, SCHEMA_VERSION

logger = logging.getLogger(__name__)

SPAN_COLUMNS = ["span", "event", "mass_off", "mass_on", "margin_off", "margin_on", "leakage_off", "leakage_on"]
SUMMARY_COLUMNS = [
    "seed", "status", "win", "target_gain", "leakage_drop",
    "min_target_delta", "max_leakage_delta", "mean_margin_delta",
]


def _ensure_dir(path: str) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


def _num(v: Optional[float]) -> str:
    if v is None:
        return ""
    return repr(float(v))


def _parse_float(s: str) -> Optional[float]:
    try:
        return float(s)
    except (TypeError, ValueError):
        return None


def dump_json(doc: Any) -> str:
    """Stable text: sorted keys, fixed indent, trailing newline."""
    return json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def write_json(path: str, doc: Any) -> str:
    _ensure_dir(path)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(dump_json(doc))
    return path


def write_span_csv(path: str, delta: DeltaReport) -> str:
    """
    Per-span rows:
    span, event, mass_off, mass_on, margin_off, margin_on, leakage_off, leakage_on
    """
    _ensure_dir(path)
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SPAN_COLUMNS)
        for s in delta.spans:
            w.writerow([
                s.span_index,
                s.event_id,
                _num(s.mass_off),
                _num(s.mass_on),
                _num(s.margin_off),
                _num(s.margin_on),
                _num(s.leakage_off),
                _num(s.leakage_on),
            ])
    return path


def read_span_csv(path: str) -> List[Dict]:
    if not os.path.exists(path):
        return []
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            parsed: Dict[str, Any] = {"span": int(row["span"]), "event": int(row["event"])}
            for col in SPAN_COLUMNS[2:]:
                parsed[col] = _parse_float(row.get(col, ""))
            out.append(parsed)
    return out


def _summary_row(seed: int, delta: Optional[DeltaReport]) -> List[str]:
    if delta is None:
        return [str(seed), "failed", "", "", "", "", "", ""]
    later = [s for s in delta.spans if s.span_index > 0] or list(delta.spans)
    return [
        str(seed),
        "ok",
        str(int(delta.win)),
        str(int(delta.target_gain)),
        str(int(delta.leakage_drop)),
        _num(min(s.target_mass_delta for s in later)) if later else "",
        _num(max(s.competitor_mass_delta for s in later)) if later else "",
        _num(sum(s.margin_delta for s in later) / len(later)) if later else "",
    ]


def write_summary_csv(path: str, summary: BatchSummary) -> str:
    """One row per seed, failed seeds included."""
    _ensure_dir(path)
    by_seed = {d.seed: d for d in summary.deltas}
    seeds = sorted(set(by_seed) | set(summary.failures))
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for seed in seeds:
            w.writerow(_summary_row(seed, by_seed.get(seed)))
    return path


def read_summary_csv(path: str) -> List[Dict]:
    if not os.path.exists(path):
        return []
    with open(path, "r", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def summary_to_dict(summary: BatchSummary) -> Dict[str, Any]:
    return {
        "schema_version": SCHEMA_VERSION,
        "seeds": len(summary.deltas) + len(summary.failures),
        "completed": len(summary.deltas),
        "wins": summary.wins,
        "win_rate": summary.win_rate,
        "failures": {str(k): v for k, v in sorted(summary.failures.items())},
        "per_seed": [
            {"seed": d.seed, "win": d.win, "target_gain": d.target_gain, "leakage_drop": d.leakage_drop}
            for d in summary.deltas
        ],
    }


def seed_dir(out_dir: str, seed: int) -> str:
    return os.path.join(out_dir, f"seed_{seed:04d}")


def write_seed_reports(
    out_dir: str,
    off: AttentionReport,
    on: AttentionReport,
    delta: DeltaReport,
    write_json_files: bool = True,
    write_csv_files: bool = True,
) -> List[str]:
    """Files of one seed; every item owns its own directory."""
    base = seed_dir(out_dir, delta.seed)
    paths = []
    if write_json_files:
        paths.append(write_json(os.path.join(base, "report_off.json"), off.to_dict()))
        paths.append(write_json(os.path.join(base, "report_on.json"), on.to_dict()))
        paths.append(write_json(os.path.join(base, "delta.json"), delta.to_dict()))
    if write_csv_files:
        paths.append(write_span_csv(os.path.join(base, "spans.csv"), delta))
    logger.debug("seed %d: wrote %d files under %s", delta.seed, len(paths), base)
    return paths


def write_batch(
    out_dir: str,
    summary: BatchSummary,
    write_json_files: bool = True,
    write_csv_files: bool = True,
) -> List[str]:
    paths = []
    for d in summary.deltas:
        off, on = summary.pairs[d.seed]
        paths.extend(write_seed_reports(out_dir, off, on, d, write_json_files, write_csv_files))
    if write_csv_files:
        paths.append(write_summary_csv(os.path.join(out_dir, "summary.csv"), summary))
    if write_json_files:
        paths.append(write_json(os.path.join(out_dir, "summary.json"), summary_to_dict(summary)))
    logger.info("wrote %d report files to %s", len(paths), out_dir)
    return paths
