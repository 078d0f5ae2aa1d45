"""ETL stage between raw supervisor records and the warehouse.

Every raw record is either standardised into a canonical-unit Measure or
quarantined as a classified exception — nothing is dropped silently.
Checks run in a fixed order (unknown-source, unparseable-value,
unit-mismatch, stale-timestamp, out-of-range) and the first failure wins.

A per-sensor drift monitor watches windowed means against a historical
profile; a sustained shift proposes a bounds update that recenters the
sensor's accepted range, after which the quarantine can be replayed and
records that now pass are reintegrated with their original timestamps.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import Callable, Iterable, Iterator, Mapping, Sequence

from .model import Measure, SensorDef, CANONICAL_UNITS
from .utils import format_timestamp, parse_timestamp

logger = logging.getLogger(__name__)

EXCEPTION_CLASSES = (
    "unknown-source",
    "unparseable-value",
    "unit-mismatch",
    "out-of-range",
    "stale-timestamp",
    "drift-suspect",
)

# exception classes that a bounds update can never recover
_UNRECOVERABLE = {"unknown-source", "unparseable-value", "drift-suspect"}

DISPOSITIONS = ("dismissed", "rule-update-candidate", "reintegrated")
_TRANSITIONS = {
    ("dismissed", "rule-update-candidate"),
    ("dismissed", "reintegrated"),
    ("rule-update-candidate", "reintegrated"),
}


class DispositionError(Exception):
    pass


class NoopRuleUpdateError(Exception):
    """propose_rule_update called with a verdict that is not 'drift' (caller bug)."""


@dataclass(frozen=True)
class RawRecord:
    source_address: str
    timestamp_text: str
    value_text: str
    unit_text: str

    def to_json(self) -> dict:
        return {
            "source_address": self.source_address,
            "timestamp": self.timestamp_text,
            "value": self.value_text,
            "unit": self.unit_text,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "RawRecord":
        return cls(obj["source_address"], obj["timestamp"], obj["value"], obj["unit"])


@dataclass
class ExceptionRecord:
    """A raw record that violated the integration rules, plus its afterlife.

    The class is assigned exactly once at creation; the disposition may only
    move dismissed -> reintegrated or dismissed -> rule-update-candidate ->
    reintegrated.  canonical_value is kept when parsing and unit conversion
    succeeded (i.e. for stale/out-of-range records) so drift monitoring can
    still see the value.
    """

    raw: RawRecord
    klass: str
    first_seen: datetime
    disposition: str = "dismissed"
    sensor_id: str | None = None
    canonical_value: float | None = None
    timestamp: datetime | None = None

    def transition(self, new_disposition: str) -> None:
        if (self.disposition, new_disposition) not in _TRANSITIONS:
            raise DispositionError(f"{self.disposition} -> {new_disposition} is not allowed")
        self.disposition = new_disposition

    def to_json(self) -> dict:
        return {
            "raw": self.raw.to_json(),
            "class": self.klass,
            "first_seen": format_timestamp(self.first_seen),
            "disposition": self.disposition,
            "sensor_id": self.sensor_id,
            "canonical_value": self.canonical_value,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "ExceptionRecord":
        return cls(
            raw=RawRecord.from_json(obj["raw"]),
            klass=obj["class"],
            first_seen=parse_timestamp(obj["first_seen"]),
            disposition=obj.get("disposition", "dismissed"),
            sensor_id=obj.get("sensor_id"),
            canonical_value=obj.get("canonical_value"),
        )


# ---------------------------------------------------------------------------
# Integration rules
# ---------------------------------------------------------------------------

# built-in unit aliases per kind; values are canonical-unit converters
_BUILTIN_ALIASES: dict[str, dict[str, Callable[[float], float]]] = {
    "temperature": {
        "C": lambda v: v,
        "°C": lambda v: v,
        "celsius": lambda v: v,
        "F": lambda v: (v - 32.0) * 5.0 / 9.0,
        "°F": lambda v: (v - 32.0) * 5.0 / 9.0,
        "K": lambda v: v - 273.15,
    },
    "pressure": {
        "Pa": lambda v: v,
        "kPa": lambda v: v * 1000.0,
        "hPa": lambda v: v * 100.0,
        "bar": lambda v: v * 100000.0,
    },
    "humidity": {
        "%RH": lambda v: v,
        "%": lambda v: v,
        "percent": lambda v: v,
    },
    "presence": {
        "bool": lambda v: v,
        "boolean": lambda v: v,
    },
    "power": {
        "W": lambda v: v,
        "kW": lambda v: v * 1000.0,
    },
    "valve": {
        "fraction": lambda v: v,
        "%": lambda v: v / 100.0,
    },
}

DEFAULT_KIND_BOUNDS = {
    "temperature": (-40.0, 60.0),
    "pressure": (0.0, 200_000.0),
    "humidity": (0.0, 100.0),
    "presence": (0.0, 1.0),
    "power": (0.0, 1_000_000.0),
    "valve": (0.0, 1.0),
}


@dataclass(frozen=True)
class RuleUpdate:
    """Log entry for one automatic bounds update, with the verdict attached."""

    sensor_id: str
    old_bounds: tuple[float, float]
    new_bounds: tuple[float, float]
    verdict: "DriftVerdict"

    def to_json(self) -> dict:
        return {
            "sensor_id": self.sensor_id,
            "old_bounds": list(self.old_bounds),
            "new_bounds": list(self.new_bounds),
            "verdict": self.verdict.to_json(),
        }


@dataclass(frozen=True)
class IntegrationRuleSet:
    """Per-kind value bounds, accepted unit aliases and per-sensor overrides.

    Immutable: automatic updates return a new rule set with the update logged,
    so any record is processed against exactly one rule-set version.
    """

    rules_id: str = "default"
    kind_bounds: Mapping[str, tuple[float, float]] = field(
        default_factory=lambda: dict(DEFAULT_KIND_BOUNDS)
    )
    max_staleness: float = 3600.0  # seconds
    overrides: Mapping[str, tuple[float, float]] = field(default_factory=dict)
    extra_aliases: Mapping[str, Mapping[str, tuple[float, float]]] = field(default_factory=dict)
    updates: tuple[RuleUpdate, ...] = ()

    def converter(self, kind: str, unit_text: str) -> Callable[[float], float] | None:
        builtin = _BUILTIN_ALIASES.get(kind, {})
        if unit_text in builtin:
            return builtin[unit_text]
        extra = self.extra_aliases.get(kind, {})
        if unit_text in extra:
            scale, offset = extra[unit_text]
            return lambda v: v * scale + offset
        return None

    def bounds_for(self, sensor_id: str, kind: str) -> tuple[float, float]:
        if sensor_id in self.overrides:
            return self.overrides[sensor_id]
        return self.kind_bounds.get(kind, DEFAULT_KIND_BOUNDS[kind])

    def with_override(self, sensor_id: str, bounds: tuple[float, float], update: RuleUpdate) -> "IntegrationRuleSet":
        overrides = dict(self.overrides)
        overrides[sensor_id] = bounds
        return replace(self, overrides=overrides, updates=self.updates + (update,))

    @classmethod
    def from_document(cls, doc: Mapping | None) -> "IntegrationRuleSet":
        """Parse the `integration_rules` section of a model document.

        Omitted kinds keep the built-in bounds; JSON aliases are linear
        (canonical = value * scale + offset).
        """
        if not doc:
            return cls()
        kind_bounds = dict(DEFAULT_KIND_BOUNDS)
        extra_aliases: dict[str, dict[str, tuple[float, float]]] = {}
        for kind, spec in (doc.get("kinds") or {}).items():
            if "bounds" in spec:
                lo, hi = float(spec["bounds"][0]), float(spec["bounds"][1])
                if lo >= hi:
                    raise ValueError(f"integration rules: bounds for {kind} need lo < hi")
                kind_bounds[kind] = (lo, hi)
            for alias, conv in (spec.get("aliases") or {}).items():
                extra_aliases.setdefault(kind, {})[alias] = (
                    float(conv.get("scale", 1.0)),
                    float(conv.get("offset", 0.0)),
                )
        max_staleness = float(doc.get("max_staleness_s", 3600.0))
        if max_staleness <= 0:
            raise ValueError("integration rules: max_staleness_s must be positive")
        overrides = {
            sid: (float(b[0]), float(b[1])) for sid, b in (doc.get("overrides") or {}).items()
        }
        return cls(
            rules_id=str(doc.get("rules_id", "default")),
            kind_bounds=kind_bounds,
            max_staleness=max_staleness,
            overrides=overrides,
            extra_aliases=extra_aliases,
        )


# ---------------------------------------------------------------------------
# Normalisation
# ---------------------------------------------------------------------------

_TRUE_TOKENS = {"true", "yes", "on"}
_FALSE_TOKENS = {"false", "no", "off"}


def _parse_value(text: str, kind: str) -> float | None:
    token = text.strip()
    if kind == "presence":
        low = token.lower()
        if low in _TRUE_TOKENS:
            return 1.0
        if low in _FALSE_TOKENS:
            return 0.0
    try:
        value = float(token)
    except ValueError:
        return None
    if math.isnan(value) or math.isinf(value):
        return None
    return value


def normalize(
    raw: RawRecord,
    registry: Mapping[str, SensorDef],
    rules: IntegrationRuleSet,
    now: datetime,
) -> Measure | ExceptionRecord:
    """Standardise one raw record or classify it as an exception.

    Pure function of its arguments.  Unit conversion happens before the
    range check; the classification order is fixed and the first failing
    check wins.
    """
    sensor = registry.get(raw.source_address)
    if sensor is None:
        return ExceptionRecord(raw, "unknown-source", first_seen=now)

    value = _parse_value(raw.value_text, sensor.kind)
    try:
        ts = parse_timestamp(raw.timestamp_text)
    except ValueError:
        ts = None
    if value is None or ts is None:
        return ExceptionRecord(raw, "unparseable-value", first_seen=now, sensor_id=sensor.sensor_id)

    convert = rules.converter(sensor.kind, raw.unit_text)
    if convert is None:
        return ExceptionRecord(raw, "unit-mismatch", first_seen=now, sensor_id=sensor.sensor_id)
    canonical = convert(value)

    if (now - ts).total_seconds() > rules.max_staleness:
        return ExceptionRecord(
            raw, "stale-timestamp", first_seen=now,
            sensor_id=sensor.sensor_id, canonical_value=canonical, timestamp=ts,
        )

    lo, hi = rules.bounds_for(sensor.sensor_id, sensor.kind)
    if not (lo <= canonical <= hi):
        return ExceptionRecord(
            raw, "out-of-range", first_seen=now,
            sensor_id=sensor.sensor_id, canonical_value=canonical, timestamp=ts,
        )

    return Measure(sensor.sensor_id, ts, canonical)


# ---------------------------------------------------------------------------
# Drift detection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DriftParams:
    k: float = 3.0  # sigma multiplier
    window_size: int = 60  # samples per window
    m_windows: int = 3  # consecutive exceeding windows required
    profile_factor: int = 10  # profile needs >= profile_factor * window_size samples


@dataclass(frozen=True)
class SensorProfile:
    mean: float
    sigma: float
    n_samples: int


def profile_from_samples(values: Sequence[float]) -> SensorProfile:
    n = len(values)
    mean = sum(values) / n
    var = sum((v - mean) ** 2 for v in values) / n
    return SensorProfile(mean=mean, sigma=math.sqrt(var), n_samples=n)


@dataclass(frozen=True)
class DriftVerdict:
    sensor_id: str
    window_mean: float
    profile_mean: float
    profile_sigma: float
    consecutive_windows: int
    verdict: str  # 'none' | 'drift' | 'not-enough-data'

    def to_json(self) -> dict:
        return {
            "sensor_id": self.sensor_id,
            "window_mean": self.window_mean,
            "profile_mean": self.profile_mean,
            "profile_sigma": self.profile_sigma,
            "consecutive_windows": self.consecutive_windows,
            "verdict": self.verdict,
        }


def detect_drift(
    recent: Sequence[float],
    profile: SensorProfile,
    params: DriftParams = DriftParams(),
    sensor_id: str = "",
) -> DriftVerdict:
    """Windowed drift test against a historical profile.

    The trailing samples are cut into consecutive windows of
    params.window_size aligned to the most recent sample; the verdict is
    'drift' iff the last m_windows window means all deviate from the profile
    mean by more than k * profile sigma.  Too little history yields an
    explicit 'not-enough-data' verdict, never a silent 'none'.
    """
    need_profile = params.profile_factor * params.window_size
    if profile.n_samples < need_profile or len(recent) < params.window_size:
        return DriftVerdict(sensor_id, float("nan"), profile.mean, profile.sigma, 0, "not-enough-data")

    threshold = params.k * profile.sigma
    n_windows = len(recent) // params.window_size
    consecutive = 0
    last_mean = 0.0
    for i in range(n_windows):
        hi = len(recent) - i * params.window_size
        window = recent[hi - params.window_size : hi]
        mean = sum(window) / params.window_size
        if i == 0:
            last_mean = mean
        if abs(mean - profile.mean) > threshold:
            consecutive += 1
        else:
            break
    verdict = "drift" if consecutive >= params.m_windows else "none"
    return DriftVerdict(sensor_id, last_mean, profile.mean, profile.sigma, consecutive, verdict)


class DriftMonitor:
    """Online per-sensor drift watcher.

    Each sensor first accumulates profile_factor * window_size samples to
    build its profile, then every completed window is tested.  After a drift
    verdict fires the sensor is recalibrated from scratch so the profile
    follows the new regime.
    """

    def __init__(self, params: DriftParams = DriftParams()):
        self.params = params
        self._profiles: dict[str, SensorProfile] = {}
        self._calibration: dict[str, list[float]] = {}
        self._window: dict[str, list[float]] = {}
        self._consecutive: dict[str, int] = {}

    def profile(self, sensor_id: str) -> SensorProfile | None:
        return self._profiles.get(sensor_id)

    def reset(self, sensor_id: str) -> None:
        self._profiles.pop(sensor_id, None)
        self._calibration.pop(sensor_id, None)
        self._window.pop(sensor_id, None)
        self._consecutive.pop(sensor_id, None)

    def feed(self, sensor_id: str, value: float) -> DriftVerdict | None:
        """Add one sample; returns a verdict when a window completes."""
        p = self.params
        profile = self._profiles.get(sensor_id)
        if profile is None:
            cal = self._calibration.setdefault(sensor_id, [])
            cal.append(value)
            if len(cal) >= p.profile_factor * p.window_size:
                self._profiles[sensor_id] = profile_from_samples(cal)
                del self._calibration[sensor_id]
            return None

        window = self._window.setdefault(sensor_id, [])
        window.append(value)
        if len(window) < p.window_size:
            return None

        mean = sum(window) / len(window)
        window.clear()
        if abs(mean - profile.mean) > p.k * profile.sigma:
            self._consecutive[sensor_id] = self._consecutive.get(sensor_id, 0) + 1
        else:
            self._consecutive[sensor_id] = 0
        consecutive = self._consecutive[sensor_id]
        verdict = "drift" if consecutive >= p.m_windows else "none"
        result = DriftVerdict(sensor_id, mean, profile.mean, profile.sigma, consecutive, verdict)
        if verdict == "drift":
            self.reset(sensor_id)
        return result


# ---------------------------------------------------------------------------
# Rule updates and reintegration
# ---------------------------------------------------------------------------


def propose_rule_update(verdict: DriftVerdict, rules: IntegrationRuleSet, kind: str) -> IntegrationRuleSet:
    """Recenter the sensor's bounds on the drifted window mean.

    The override keeps the half-width of the bounds in effect before the
    update, so repeated drifts keep recentering an interval of constant
    width.  The update is logged on the returned rule set.
    """
    if verdict.verdict != "drift":
        raise NoopRuleUpdateError(f"verdict is {verdict.verdict!r}, not 'drift'")
    old = rules.bounds_for(verdict.sensor_id, kind)
    half_width = (old[1] - old[0]) / 2.0
    new = (verdict.window_mean - half_width, verdict.window_mean + half_width)
    update = RuleUpdate(verdict.sensor_id, old, new, verdict)
    logger.info(
        "integration rules updated for %s: %s -> %s (window mean %.3f)",
        verdict.sensor_id, old, new, verdict.window_mean,
    )
    return rules.with_override(verdict.sensor_id, new, update)


def reintegrate(
    quarantine: Sequence[ExceptionRecord],
    registry: Mapping[str, SensorDef],
    rules: IntegrationRuleSet,
    now: datetime,
) -> tuple[list[Measure], list[ExceptionRecord]]:
    """Replay quarantined records through normalize against updated rules.

    Recovered measures carry their original timestamps.  unknown-source and
    unparseable-value records can never be recovered by a bounds update;
    drift-suspect entries are verdict-trail markers, not data, and always
    remain.  recovered + remaining is a permutation of the input.
    """
    recovered: list[Measure] = []
    remaining: list[ExceptionRecord] = []
    for exc in quarantine:
        if exc.klass in _UNRECOVERABLE:
            remaining.append(exc)
            continue
        outcome = normalize(exc.raw, registry, rules, now)
        if isinstance(outcome, Measure):
            exc.transition("reintegrated")
            recovered.append(outcome)
        else:
            remaining.append(exc)
    return recovered, remaining


def drift_trail_record(verdict: DriftVerdict, sensor: SensorDef, now: datetime) -> ExceptionRecord:
    """Synthetic drift-suspect quarantine entry recording a fired verdict.

    These are markers, not stream data; totality accounting and
    reintegration both exclude the drift-suspect class.
    """
    raw = RawRecord(
        source_address=sensor.raw_address,
        timestamp_text=format_timestamp(now),
        value_text=repr(verdict.window_mean),
        unit_text=CANONICAL_UNITS[sensor.kind],
    )
    rec = ExceptionRecord(raw, "drift-suspect", first_seen=now, sensor_id=sensor.sensor_id)
    rec.disposition = "dismissed"
    rec.transition("rule-update-candidate")
    return rec


# ---------------------------------------------------------------------------
# Stream pipeline
# ---------------------------------------------------------------------------


@dataclass
class IngestStats:
    raw_records: int = 0
    measures: int = 0
    exceptions_by_class: dict[str, int] = field(default_factory=dict)
    reintegrated: int = 0
    rule_updates: int = 0

    def to_json(self) -> dict:
        return {
            "raw_records": self.raw_records,
            "measures": self.measures,
            "exceptions_by_class": dict(sorted(self.exceptions_by_class.items())),
            "reintegrated": self.reintegrated,
            "rule_updates": self.rule_updates,
        }


class StreamPipeline:
    """normalize -> quarantine -> drift watch -> rule update -> reintegrate.

    Holds the current rule-set version; records are processed strictly one
    at a time against exactly one version.  Recovered measures are handed to
    the caller through the return value of process().
    """

    def __init__(
        self,
        registry: Mapping[str, SensorDef],
        rules: IntegrationRuleSet,
        drift_params: DriftParams = DriftParams(),
        auto_update: bool = True,
    ):
        self.registry = registry
        self.rules = rules
        self.monitor = DriftMonitor(drift_params)
        self.auto_update = auto_update
        self.quarantine: list[ExceptionRecord] = []
        self.trail: list[ExceptionRecord] = []
        self.stats = IngestStats()

    def process(self, raw: RawRecord, now: datetime) -> tuple[list[Measure], ExceptionRecord | None]:
        """Run one record; returns (measures to insert, exception if quarantined).

        The measures list contains the record's own measure (if accepted)
        plus any quarantined records recovered by a rule update this record
        triggered.
        """
        self.stats.raw_records += 1
        outcome = normalize(raw, self.registry, self.rules, now)
        measures: list[Measure] = []
        exception: ExceptionRecord | None = None

        if isinstance(outcome, Measure):
            self.stats.measures += 1
            measures.append(outcome)
            verdict = self.monitor.feed(outcome.sensor_id, outcome.value)
        else:
            exception = outcome
            self.stats.exceptions_by_class[outcome.klass] = (
                self.stats.exceptions_by_class.get(outcome.klass, 0) + 1
            )
            self.quarantine.append(outcome)
            verdict = None
            if outcome.canonical_value is not None and outcome.sensor_id is not None:
                # deviant-but-parseable values still feed the drift watcher;
                # they are exactly the behaviour changes it exists to see
                verdict = self.monitor.feed(outcome.sensor_id, outcome.canonical_value)

        if verdict is not None and verdict.verdict == "drift" and self.auto_update:
            measures.extend(self._apply_update(verdict, now))
        return measures, exception

    def _apply_update(self, verdict: DriftVerdict, now: datetime) -> list[Measure]:
        sensor = None
        for s in self.registry.values():
            if s.sensor_id == verdict.sensor_id:
                sensor = s
                break
        if sensor is None:  # virtual or unknown: nothing to update
            return []
        self.rules = propose_rule_update(verdict, self.rules, sensor.kind)
        self.stats.rule_updates += 1
        self.trail.append(drift_trail_record(verdict, sensor, now))
        for exc in self.quarantine:
            if exc.sensor_id == verdict.sensor_id and exc.klass == "out-of-range":
                if exc.disposition == "dismissed":
                    exc.transition("rule-update-candidate")
        recovered, remaining = reintegrate(self.quarantine, self.registry, self.rules, now)
        self.quarantine = remaining
        self.stats.reintegrated += len(recovered)
        return recovered


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def read_raw_csv(path) -> Iterator[RawRecord]:
    """Raw stream file: CSV lines `timestamp,source_address,value,unit`."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            if len(row) != 4:
                # malformed lines still enter the flow and will classify
                # as unparseable rather than vanish
                row = (row + ["", "", "", ""])[:4]
            yield RawRecord(
                source_address=row[1].strip(),
                timestamp_text=row[0].strip(),
                value_text=row[2].strip(),
                unit_text=row[3].strip(),
            )


def write_raw_csv(path, records: Iterable[RawRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        for r in records:
            writer.writerow([r.timestamp_text, r.source_address, r.value_text, r.unit_text])


def write_quarantine(path, records: Iterable[ExceptionRecord]) -> None:
    """Quarantine file: one JSON object per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def read_quarantine(path) -> list[ExceptionRecord]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(ExceptionRecord.from_json(json.loads(line)))
    return out
