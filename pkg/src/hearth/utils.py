"""Small shared helpers: UTC timestamps and deterministic JSON."""

from __future__ import annotations

import json
from datetime import datetime, timezone

WEEKDAY_NAMES = ("mon", "tue", "wed", "thu", "fri", "sat", "sun")


def parse_timestamp(text: str) -> datetime:
    """Parse an ISO-8601 timestamp into an aware UTC datetime.

    Accepts a trailing 'Z' (Python 3.10's fromisoformat does not).
    Naive timestamps are taken to be UTC.
    """
    s = text.strip()
    if s.endswith(("Z", "z")):
        s = s[:-1] + "+00:00"
    dt = datetime.fromisoformat(s)
    if dt.tzinfo is None:
        return dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def format_timestamp(dt: datetime) -> str:
    """UTC ISO-8601 with a Z suffix, second precision unless finer is present."""
    dt = dt.astimezone(timezone.utc)
    if dt.microsecond:
        return dt.isoformat().replace("+00:00", "Z")
    return dt.replace(tzinfo=None).isoformat() + "Z"


def to_epoch(dt: datetime) -> float:
    return dt.timestamp()


def from_epoch(epoch: float) -> datetime:
    return datetime.fromtimestamp(epoch, tz=timezone.utc)


def parse_time_of_day(text: str) -> int:
    """'HH:MM' or 'HH:MM:SS' -> seconds since midnight."""
    parts = text.split(":")
    if len(parts) not in (2, 3):
        raise ValueError(f"bad time of day: {text!r}")
    h, m = int(parts[0]), int(parts[1])
    s = int(parts[2]) if len(parts) == 3 else 0
    if not (0 <= h <= 24 and 0 <= m < 60 and 0 <= s < 60):
        raise ValueError(f"bad time of day: {text!r}")
    return h * 3600 + m * 60 + s


def format_time_of_day(seconds: int) -> str:
    h, rem = divmod(int(seconds), 3600)
    m, s = divmod(rem, 60)
    if s:
        return f"{h:02d}:{m:02d}:{s:02d}"
    return f"{h:02d}:{m:02d}"


def dumps_stable(obj) -> str:
    """JSON with sorted keys; the one serializer used for every on-disk artifact
    so that identical runs produce byte-identical files."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def dumps_pretty(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2)
