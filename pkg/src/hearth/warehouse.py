"""Embedded star-schema store for timestamped measures.

One fact table (sensor_key, time_key, location_key, value) referencing three
flat dimension tables — sensor, time, location — with no hierarchy between
them.  The store is a single directory: an append-only fact log plus JSON
dimension files, all carrying a magic header and version.  Writes are
serialized through a lock; queries materialise their result under the same
lock so readers always see a consistent snapshot.
"""

from __future__ import annotations

import json
import os
import threading
from bisect import bisect_left, bisect_right
from dataclasses import dataclass
from datetime import datetime
from typing import Iterable, Iterator, Mapping, Sequence

from .model import (
    ExpressionError,
    Measure,
    SensorDef,
    SiteModel,
    VirtualSensorDef,
    evaluate_expression,
    virtual_order,
)
from .utils import from_epoch, to_epoch

MAGIC = "HEARTH-STORE"
VERSION = 1
FACT_LOG_HEADER = "#HEARTH-FACTS v1"

AGGREGATIONS = ("raw", "hourly-mean", "daily-min", "daily-max")

# Star shape: the fact table references each dimension exactly once and the
# dimension tables reference nothing (no hierarchy).
SCHEMA = {
    "fact": {
        "columns": ["sensor_key", "time_key", "location_key", "value"],
        "references": {
            "sensor_key": "sensor_dim",
            "time_key": "time_dim",
            "location_key": "location_dim",
        },
    },
    "sensor_dim": {
        "columns": ["sensor_key", "sensor_id", "kind", "unit", "zone_ref", "is_actuator", "virtual"],
        "references": {},
    },
    "time_dim": {
        "columns": ["time_key", "timestamp", "year", "month", "day", "weekday", "hour", "minute"],
        "references": {},
    },
    "location_dim": {
        "columns": ["location_key", "zone_id", "name", "building_id"],
        "references": {},
    },
}


class StoreError(Exception):
    pass


class UnknownSensorError(StoreError):
    """Measure for a sensor the model does not know — ingest should have quarantined it."""


class EmptyFilterError(StoreError):
    """A query filter must select something explicitly; there is no implicit 'all'."""


@dataclass(frozen=True)
class TimeDim:
    timestamp: float  # epoch seconds, UTC
    year: int
    month: int
    day: int
    weekday: int
    hour: int
    minute: int

    @classmethod
    def from_datetime(cls, dt: datetime) -> "TimeDim":
        dt = from_epoch(to_epoch(dt))
        return cls(
            timestamp=to_epoch(dt),
            year=dt.year,
            month=dt.month,
            day=dt.day,
            weekday=dt.weekday(),
            hour=dt.hour,
            minute=dt.minute,
        )


@dataclass(frozen=True)
class FactRow:
    sensor_key: int
    time_key: int
    location_key: int
    value: float


@dataclass(frozen=True)
class QueryFilter:
    """Explicit selection by sensor ids, zone ids and/or kinds.

    Provided axes intersect; at least one must be given.
    """

    sensor_ids: tuple[str, ...] | None = None
    zone_ids: tuple[str, ...] | None = None
    kinds: tuple[str, ...] | None = None


class FactStore:
    """Append-log warehouse with in-memory dimension and fact indexes."""

    def __init__(self, directory: str):
        self.directory = str(directory)
        self._lock = threading.RLock()
        self._sensor_rows: list[dict] = []
        self._sensor_key: dict[str, int] = {}
        self._location_rows: list[dict] = []
        self._location_key: dict[str, int] = {}
        self._time_rows: list[TimeDim] = []
        self._time_key: dict[float, int] = {}
        self._facts: dict[tuple[int, int], float] = {}
        # per-sensor series for range queries: parallel sorted epoch/value lists
        self._series_epochs: dict[int, list[float]] = {}
        self._series_values: dict[int, list[float]] = {}
        self.overwrite_count = 0
        self.eval_errors: list[dict] = []
        self._pending_log: list[str] = []
        self._persisted_facts = 0

    # ------------------------------------------------------------------
    # Lifecycle
    # ------------------------------------------------------------------

    @classmethod
    def create(cls, directory: str, model: SiteModel) -> "FactStore":
        store = cls(directory)
        for b in model.buildings:
            for z in b.zones:
                store._location_key[z.zone_id] = len(store._location_rows)
                store._location_rows.append(
                    {"zone_id": z.zone_id, "name": z.name, "building_id": b.building_id}
                )
        for s in model.sensors:
            store._add_sensor_row(s.sensor_id, s.kind, s.unit, s.zone_ref, s.is_actuator, False)
        for v in model.virtual_sensors:
            store._add_sensor_row(v.sensor_id, v.kind, v.unit, v.zone_ref, False, True)
        os.makedirs(directory, exist_ok=True)
        store.flush()
        return store

    @classmethod
    def open(cls, directory: str) -> "FactStore":
        meta_path = os.path.join(directory, "meta.json")
        try:
            with open(meta_path, "r", encoding="utf-8") as fh:
                meta = json.load(fh)
        except (OSError, json.JSONDecodeError) as err:
            raise StoreError(f"cannot open store at {directory}: {err}") from err
        if meta.get("magic") != MAGIC:
            raise StoreError(f"{directory} is not a fact store (bad magic)")
        if meta.get("version") != VERSION:
            raise StoreError(f"unsupported store version {meta.get('version')}")
        store = cls(directory)
        with open(os.path.join(directory, "sensor_dim.json"), "r", encoding="utf-8") as fh:
            store._sensor_rows = json.load(fh)
        store._sensor_key = {row["sensor_id"]: i for i, row in enumerate(store._sensor_rows)}
        with open(os.path.join(directory, "location_dim.json"), "r", encoding="utf-8") as fh:
            store._location_rows = json.load(fh)
        store._location_key = {row["zone_id"]: i for i, row in enumerate(store._location_rows)}
        with open(os.path.join(directory, "time_dim.json"), "r", encoding="utf-8") as fh:
            epochs = json.load(fh)["timestamps"]
        for epoch in epochs:
            store._time_key[epoch] = len(store._time_rows)
            store._time_rows.append(TimeDim.from_datetime(from_epoch(epoch)))
        store._replay_log()
        return store

    @classmethod
    def open_or_create(cls, directory: str, model: SiteModel | None = None) -> "FactStore":
        if os.path.exists(os.path.join(directory, "meta.json")):
            return cls.open(directory)
        if model is None:
            raise StoreError(f"no store at {directory} and no model to create one")
        return cls.create(directory, model)

    def _add_sensor_row(self, sensor_id, kind, unit, zone_ref, is_actuator, virtual) -> None:
        self._sensor_key[sensor_id] = len(self._sensor_rows)
        self._sensor_rows.append(
            {
                "sensor_id": sensor_id,
                "kind": kind,
                "unit": unit,
                "zone_ref": zone_ref,
                "is_actuator": bool(is_actuator),
                "virtual": bool(virtual),
            }
        )

    def _replay_log(self) -> None:
        path = os.path.join(self.directory, "facts.log")
        if not os.path.exists(path):
            return
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n")
            if header != FACT_LOG_HEADER:
                raise StoreError(f"bad fact log header: {header!r}")
            for line in fh:
                parts = line.rstrip("\n").split(",")
                if len(parts) != 4:
                    raise StoreError(f"corrupt fact log line: {line!r}")
                time_key, sensor_key = int(parts[0]), int(parts[1])
                value = float(parts[3])
                if time_key >= len(self._time_rows) or sensor_key >= len(self._sensor_rows):
                    raise StoreError("fact log references a missing dimension row")
                self._apply_fact(sensor_key, time_key, value)
                self._persisted_facts += 1

    # ------------------------------------------------------------------
    # Writes
    # ------------------------------------------------------------------

    def insert(self, measure: Measure) -> tuple[int, int]:
        """Insert one canonical-unit measure; returns its (sensor_key, time_key).

        A duplicate (sensor, timestamp) overwrites the stored value (last
        write wins) and bumps the overwrite counter.
        """
        with self._lock:
            sensor_key = self._sensor_key.get(measure.sensor_id)
            if sensor_key is None:
                raise UnknownSensorError(measure.sensor_id)
            epoch = to_epoch(measure.timestamp)
            time_key = self._time_key.get(epoch)
            if time_key is None:
                time_key = len(self._time_rows)
                self._time_key[epoch] = time_key
                self._time_rows.append(TimeDim.from_datetime(measure.timestamp))
            self._apply_fact(sensor_key, time_key, measure.value)
            location_key = self._location_key.get(self._sensor_rows[sensor_key]["zone_ref"], -1)
            self._pending_log.append(f"{time_key},{sensor_key},{location_key},{measure.value!r}")
            return sensor_key, time_key

    def _apply_fact(self, sensor_key: int, time_key: int, value: float) -> None:
        key = (sensor_key, time_key)
        epoch = self._time_rows[time_key].timestamp
        epochs = self._series_epochs.setdefault(sensor_key, [])
        values = self._series_values.setdefault(sensor_key, [])
        if key in self._facts:
            self.overwrite_count += 1
            i = bisect_left(epochs, epoch)
            values[i] = value
        else:
            i = bisect_left(epochs, epoch)
            epochs.insert(i, epoch)
            values.insert(i, value)
        self._facts[key] = value

    def flush(self) -> None:
        """Write dimension snapshots and append pending fact log lines."""
        with self._lock:
            os.makedirs(self.directory, exist_ok=True)
            meta = {
                "magic": MAGIC,
                "version": VERSION,
                "overwrite_count": self.overwrite_count,
                "fact_count": len(self._facts),
            }
            with open(os.path.join(self.directory, "meta.json"), "w", encoding="utf-8") as fh:
                json.dump(meta, fh, sort_keys=True)
            with open(os.path.join(self.directory, "sensor_dim.json"), "w", encoding="utf-8") as fh:
                json.dump(self._sensor_rows, fh, sort_keys=True)
            with open(os.path.join(self.directory, "location_dim.json"), "w", encoding="utf-8") as fh:
                json.dump(self._location_rows, fh, sort_keys=True)
            with open(os.path.join(self.directory, "time_dim.json"), "w", encoding="utf-8") as fh:
                json.dump({"timestamps": [t.timestamp for t in self._time_rows]}, fh)
            log_path = os.path.join(self.directory, "facts.log")
            new_file = not os.path.exists(log_path)
            with open(log_path, "a", encoding="utf-8") as fh:
                if new_file:
                    fh.write(FACT_LOG_HEADER + "\n")
                for line in self._pending_log:
                    fh.write(line + "\n")
            self._persisted_facts += len(self._pending_log)
            self._pending_log.clear()

    def close(self) -> None:
        self.flush()

    def __enter__(self) -> "FactStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # ------------------------------------------------------------------
    # Reads
    # ------------------------------------------------------------------

    def sensors(self) -> list[dict]:
        with self._lock:
            return [dict(row, sensor_key=i) for i, row in enumerate(self._sensor_rows)]

    def fact_count(self) -> int:
        with self._lock:
            return len(self._facts)

    def rows(self) -> Iterator[tuple[str, float, float]]:
        """Every fact as (sensor_id, epoch, value) — the full-scan surface."""
        with self._lock:
            snapshot = list(self._facts.items())
        for (sensor_key, time_key), value in snapshot:
            yield (
                self._sensor_rows[sensor_key]["sensor_id"],
                self._time_rows[time_key].timestamp,
                value,
            )

    def _selected_sensors(self, flt: QueryFilter) -> list[str]:
        if flt.sensor_ids is None and flt.zone_ids is None and flt.kinds is None:
            raise EmptyFilterError("query filter must name sensor ids, zone ids or kinds")
        selected = []
        for row in self._sensor_rows:
            if flt.sensor_ids is not None and row["sensor_id"] not in flt.sensor_ids:
                continue
            if flt.zone_ids is not None and row["zone_ref"] not in flt.zone_ids:
                continue
            if flt.kinds is not None and row["kind"] not in flt.kinds:
                continue
            selected.append(row["sensor_id"])
        return sorted(selected)

    def query(
        self,
        flt: QueryFilter,
        start: datetime,
        end: datetime,
        agg: str = "raw",
    ) -> dict[str, list[tuple[datetime, float]]]:
        """Series per selected sensor over [start, end).

        Aggregations bucket by UTC hour or day; bucket timestamps are the
        bucket starts and bucket means sum values in time order.
        """
        if agg not in AGGREGATIONS:
            raise StoreError(f"unknown aggregation {agg!r}")
        t0, t1 = to_epoch(start), to_epoch(end)
        if not t0 < t1:
            raise StoreError("query range needs from < to")
        with self._lock:
            result: dict[str, list[tuple[datetime, float]]] = {}
            for sensor_id in self._selected_sensors(flt):
                sensor_key = self._sensor_key[sensor_id]
                epochs = self._series_epochs.get(sensor_key, [])
                values = self._series_values.get(sensor_key, [])
                lo = bisect_left(epochs, t0)
                hi = bisect_left(epochs, t1)
                points = [(epochs[i], values[i]) for i in range(lo, hi)]
                result[sensor_id] = _aggregate(points, agg)
            return result

    def latest(self, sensor_id: str, at: datetime, within: float | None = None) -> tuple[datetime, float] | None:
        """Latest fact with timestamp <= at (and > at - within when given)."""
        with self._lock:
            sensor_key = self._sensor_key.get(sensor_id)
            if sensor_key is None:
                raise UnknownSensorError(sensor_id)
            epochs = self._series_epochs.get(sensor_key, [])
            if not epochs:
                return None
            t = to_epoch(at)
            i = bisect_right(epochs, t) - 1
            if i < 0:
                return None
            epoch = epochs[i]
            if within is not None and epoch <= t - within:
                return None
            return from_epoch(epoch), self._series_values[sensor_key][i]

    # ------------------------------------------------------------------
    # Virtual sensors
    # ------------------------------------------------------------------

    def evaluate_virtual(
        self, vs: VirtualSensorDef, t: datetime, align: float = 120.0
    ) -> Measure | None:
        """Evaluate a virtual sensor at time t and store the result as a fact.

        Each input resolves to that sensor's latest fact in (t - align, t];
        if any input is absent the result is absent and nothing is stored.
        Evaluation errors (division by zero) are recorded on eval_errors and
        also produce no fact row.
        """
        with self._lock:

            def resolve(sensor_id: str) -> float | None:
                found = self.latest(sensor_id, t, within=align)
                return None if found is None else found[1]

            try:
                value = evaluate_expression(vs.expression, resolve)
            except ExpressionError as err:
                self.eval_errors.append(
                    {"sensor_id": vs.sensor_id, "t": to_epoch(t), "error": str(err)}
                )
                return None
            if value is None:
                return None
            measure = Measure(vs.sensor_id, t, value)
            self.insert(measure)
            return measure

    def evaluate_all_virtual(
        self, model: SiteModel, t: datetime, align: float = 120.0
    ) -> dict[str, Measure | None]:
        """Evaluate every virtual sensor in dependency order."""
        by_id = {v.sensor_id: v for v in model.virtual_sensors}
        return {vid: self.evaluate_virtual(by_id[vid], t, align) for vid in virtual_order(model)}

    def delete_virtual_facts(self, model: SiteModel) -> int:
        """Drop all facts of virtual sensors (used to prove re-evaluation reproduces them)."""
        with self._lock:
            removed = 0
            for v in model.virtual_sensors:
                sensor_key = self._sensor_key.get(v.sensor_id)
                if sensor_key is None:
                    continue
                for key in [k for k in self._facts if k[0] == sensor_key]:
                    del self._facts[key]
                    removed += 1
                self._series_epochs.pop(sensor_key, None)
                self._series_values.pop(sensor_key, None)
            return removed


def _aggregate(points: Sequence[tuple[float, float]], agg: str) -> list[tuple[datetime, float]]:
    if agg == "raw":
        return [(from_epoch(e), v) for e, v in points]
    width = 3600.0 if agg == "hourly-mean" else 86400.0
    buckets: dict[float, list[float]] = {}
    for epoch, value in points:
        buckets.setdefault(epoch - epoch % width, []).append(value)
    out = []
    for bucket_start in sorted(buckets):
        vals = buckets[bucket_start]
        if agg == "hourly-mean":
            out.append((from_epoch(bucket_start), sum(vals) / len(vals)))
        elif agg == "daily-min":
            out.append((from_epoch(bucket_start), min(vals)))
        else:
            out.append((from_epoch(bucket_start), max(vals)))
    return out
