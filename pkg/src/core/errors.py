"""
Error hierarchy shared by every module.

Each class carries the CLI exit code it maps to:
1 = validation error, 2 = I/O or transport error.
"""
from __future__ import annotations

from typing import Iterable

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2


class SteeringError(Exception):
    exit_code: int = EXIT_VALIDATION


class ConfigError(SteeringError):
    pass


class PlanValidationError(SteeringError):
    def __init__(self, violations: Iterable[str]):
        self.violations = list(violations)
        super().__init__("Invalid event plan: " + "; ".join(self.violations))


class AnchorResolutionError(SteeringError):
    """One or more anchor phrases matched no token."""

    def __init__(self, unmatched: dict[int, list[str]]):
        self.unmatched = {k: list(v) for k, v in unmatched.items()}
        parts = [
            f"event {eid}: " + ", ".join(repr(p) for p in phrases)
            for eid, phrases in sorted(self.unmatched.items())
        ]
        super().__init__("Anchor phrases without token match: " + " | ".join(parts))


class DimensionMismatchError(SteeringError):
    pass


class RankDeficiencyError(SteeringError):
    pass


class DegenerateKeysError(SteeringError):
    pass


class ScheduleError(SteeringError):
    pass


class ScenarioError(SteeringError):
    pass


class SimulationError(SteeringError):
    pass


class AnchorServiceError(SteeringError):
    pass


class AnchorTransportError(AnchorServiceError):
    exit_code = EXIT_IO


class MalformedResponseError(AnchorServiceError):
    pass


class SubstringViolationError(AnchorServiceError):
    def __init__(self, phrase: str):
        self.phrase = phrase
        super().__init__(f"Anchor phrase {phrase!r} is not a substring of the prompt")


class AnchorFileError(AnchorServiceError):
    exit_code = EXIT_IO


class InputFileError(SteeringError):
    """A referenced input file is missing or unreadable."""

    exit_code = EXIT_IO
