"""
Step/block gating for query steering.

Steering runs only in a prefix of the denoising steps and a prefix of the
transformer blocks: active iff step < max_steps AND block < max_blocks.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any

from src.core.errors import ScheduleError


@dataclass(frozen=True)
class SteeringSchedule:
    max_steps: int = 20
    max_blocks: int = 20
    total_steps: int = 50
    total_blocks: int = 40

    def __post_init__(self):
        for name in ("max_steps", "max_blocks", "total_steps", "total_blocks"):
            if int(getattr(self, name)) < 0:
                raise ScheduleError(f"{name} must be >= 0")
        if self.max_steps > self.total_steps:
            raise ScheduleError(
                f"max_steps ({self.max_steps}) exceeds total_steps ({self.total_steps})"
            )
        if self.max_blocks > self.total_blocks:
            raise ScheduleError(
                f"max_blocks ({self.max_blocks}) exceeds total_blocks ({self.total_blocks})"
            )


FULL_SCHEDULE = SteeringSchedule(max_steps=20, max_blocks=20, total_steps=50, total_blocks=40)
DESK_SCHEDULE = SteeringSchedule(max_steps=3, max_blocks=2, total_steps=6, total_blocks=4)


def is_active(step: int, block: int, sched: SteeringSchedule) -> bool:
    if not 0 <= step < sched.total_steps:
        raise ScheduleError(f"step {step} outside [0, {sched.total_steps})")
    if not 0 <= block < sched.total_blocks:
        raise ScheduleError(f"block {block} outside [0, {sched.total_blocks})")
    return step < sched.max_steps and block < sched.max_blocks


def active_cells(sched: SteeringSchedule) -> int:
    return sched.max_steps * sched.max_blocks


def schedule_from_config(doc: dict[str, Any] | None, base: SteeringSchedule = FULL_SCHEDULE) -> SteeringSchedule:
    """Overlay the keys present in `doc` onto `base`."""
    doc = doc or {}
    unknown = set(doc) - {"max_steps", "max_blocks", "total_steps", "total_blocks"}
    if unknown:
        raise ScheduleError(f"unknown schedule keys: {sorted(unknown)}")
    return SteeringSchedule(
        max_steps=int(doc.get("max_steps", base.max_steps)),
        max_blocks=int(doc.get("max_blocks", base.max_blocks)),
        total_steps=int(doc.get("total_steps", base.total_steps)),
        total_blocks=int(doc.get("total_blocks", base.total_blocks)),
    )
