"""Time-of-day windows shared by clustering features and prompt descriptors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def minute_of_day(timestamps) -> np.ndarray:
    ts = np.asarray(timestamps, dtype="datetime64[m]")
    return (ts - ts.astype("datetime64[D]")).astype(np.int64)


def _in_span(minutes: np.ndarray, span: tuple[float, float]) -> np.ndarray:
    start, end = (int(round(h * 60)) % 1440 for h in span)
    if start <= end:
        return (minutes >= start) & (minutes < end)
    # span wraps past midnight
    return (minutes >= start) | (minutes < end)


@dataclass(frozen=True)
class TodWindows:
    """Clock-hour spans ``[start, end)``; a span with start > end wraps midnight.

    Non-rush is everything outside the AM and PM spans.
    """

    am: tuple[float, float] = (7.0, 10.0)
    pm: tuple[float, float] = (17.0, 20.0)
    night: tuple[float, float] = (0.0, 6.0)

    def masks(self, timestamps) -> dict[str, np.ndarray]:
        m = minute_of_day(timestamps)
        am = _in_span(m, self.am)
        pm = _in_span(m, self.pm)
        return {"am": am, "pm": pm, "night": _in_span(m, self.night), "non_rush": ~(am | pm)}

    def shifted(self, hours: float) -> "TodWindows":
        return TodWindows(*(((a + hours) % 24, (b + hours) % 24) for a, b in (self.am, self.pm, self.night)))
