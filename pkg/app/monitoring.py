"""
Solver monitoring and metrics collection
Tracks factorizations, solves and stage timings
"""

import threading
from collections import defaultdict, deque
from datetime import datetime
from typing import Any, Dict


class SolverMonitor:
    """Counters for the direct-solver workflow plus per-stage timings"""

    def __init__(self):
        self._lock = threading.Lock()
        self.counters = defaultdict(int)
        self.stage_times = defaultdict(lambda: deque(maxlen=self.max_stage_times))
        self.start_time = datetime.now()

        self.max_stage_times = 100

    def increment(self, counter: str, amount: int = 1) -> int:
        """Increment a counter and return its new value"""
        with self._lock:
            self.counters[counter] += amount
            return self.counters[counter]

    def count(self, counter: str) -> int:
        with self._lock:
            return self.counters[counter]

    @property
    def factorizations(self) -> int:
        """Number of global trace-matrix factorizations so far"""
        return self.count("factorizations")

    def record_stage(self, stage: str, duration: float):
        """Record a timed stage (global matrix, forward rhs, local solves ...)"""
        with self._lock:
            self.stage_times[stage].append(duration)

    def get_stats(self) -> Dict[str, Any]:
        """Get solver statistics"""
        uptime = datetime.now() - self.start_time

        with self._lock:
            average_times = {
                stage: sum(times) / len(times)
                for stage, times in self.stage_times.items() if times
            }
            counters = dict(self.counters)

        return {
            "uptime_seconds": int(uptime.total_seconds()),
            "counters": counters,
            "average_stage_times": average_times,
            "slowest_stage": max(average_times.items(), key=lambda x: x[1])[0] if average_times else "None",
        }

    def reset(self):
        with self._lock:
            self.counters.clear()
            self.stage_times.clear()


monitor = SolverMonitor()
