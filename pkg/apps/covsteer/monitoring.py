"""
covsteer - Stage Timing
Wall-clock timing of the pipeline stages (assemble, solve, certify, simulate).
"""

import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional

from .utils.logger import setup_logger


logger = setup_logger(__name__)


@dataclass
class StageTiming:
    """One timed pass through a stage."""
    stage: str
    context: Dict[str, Any] = field(default_factory=dict)
    seconds: float = 0.0
    failed: bool = False
    error: Optional[str] = None


@dataclass
class StageStats:
    calls: int = 0
    failures: int = 0
    total_seconds: float = 0.0
    min_seconds: float = float("inf")
    max_seconds: float = 0.0

    def add(self, timing: StageTiming) -> None:
        self.calls += 1
        self.failures += int(timing.failed)
        self.total_seconds += timing.seconds
        self.min_seconds = min(self.min_seconds, timing.seconds)
        self.max_seconds = max(self.max_seconds, timing.seconds)

    def as_dict(self) -> Dict[str, Any]:
        return {
            "calls": self.calls,
            "failures": self.failures,
            "total_seconds": self.total_seconds,
            "mean_seconds": self.total_seconds / self.calls if self.calls else 0.0,
            "min_seconds": self.min_seconds if self.calls else 0.0,
            "max_seconds": self.max_seconds,
        }


class PerformanceMonitor:
    """Thread-safe collector of stage timings."""

    def __init__(self, keep_history: bool = True):
        self.keep_history = keep_history
        self._history: List[StageTiming] = []
        self._stats: Dict[str, StageStats] = {}
        self._lock = threading.Lock()

    @contextmanager
    def measure(self, stage: str, context: Optional[Dict[str, Any]] = None) -> Iterator[StageTiming]:
        """
        Time the enclosed block as one pass through ``stage``.

        Exceptions are recorded as a failed pass and re-raised.
        """
        timing = StageTiming(stage, dict(context or {}))
        start = time.perf_counter()
        try:
            yield timing
        except Exception as e:
            timing.failed = True
            timing.error = str(e)
            raise
        finally:
            timing.seconds = time.perf_counter() - start
            self._record(timing)
            logger.debug(
                "stage.timed",
                stage=stage,
                seconds=round(timing.seconds, 6),
                failed=timing.failed,
                **timing.context,
            )

    def _record(self, timing: StageTiming) -> None:
        with self._lock:
            if self.keep_history:
                self._history.append(timing)
            self._stats.setdefault(timing.stage, StageStats()).add(timing)

    def history(self, stage: Optional[str] = None) -> List[StageTiming]:
        with self._lock:
            return [t for t in self._history if stage is None or t.stage == stage]

    def summary(self) -> Dict[str, Dict[str, Any]]:
        """Per-stage aggregates, keyed by stage name in first-seen order."""
        with self._lock:
            return {name: stats.as_dict() for name, stats in self._stats.items()}

    def reset(self) -> None:
        with self._lock:
            self._history.clear()
            self._stats.clear()


_monitor = PerformanceMonitor()


def get_monitor() -> PerformanceMonitor:
    return _monitor
