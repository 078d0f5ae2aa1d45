"""Infrastructure model shared by every other module.

A site document describes buildings, zones (axis-aligned boxes), physical
sensors/actuators, virtual sensors (expressions over other sensors),
occupancy schedules and per-zone setpoint policies.  Documents are plain
JSON; once validated they are immutable and safe to share across threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime
from typing import Callable, Iterable, Mapping, Union

from .utils import WEEKDAY_NAMES, format_time_of_day, parse_time_of_day

# kind -> canonical unit stored in the warehouse; all conversion happens in ingest
CANONICAL_UNITS = {
    "temperature": "C",
    "pressure": "Pa",
    "humidity": "%RH",
    "presence": "bool",
    "power": "W",
    "valve": "fraction",
}


class ModelFormatError(Exception):
    """Document cannot be parsed into the model shape (structural, not semantic)."""


class VirtualCycleError(Exception):
    def __init__(self, members: Iterable[str]):
        self.members = tuple(sorted(members))
        super().__init__(f"virtual sensor dependency cycle: {', '.join(self.members)}")


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

Point = tuple[float, float, float]


@dataclass(frozen=True)
class Box:
    """Axis-aligned cuboid in meters."""

    min_corner: Point
    max_corner: Point

    def is_valid(self) -> bool:
        return all(self.min_corner[i] < self.max_corner[i] for i in range(3))

    def contains(self, p: Point) -> bool:
        return all(self.min_corner[i] <= p[i] <= self.max_corner[i] for i in range(3))

    def overlaps(self, other: Box) -> bool:
        """True if the open interiors intersect; shared faces do not count."""
        return all(
            self.min_corner[i] < other.max_corner[i] and other.min_corner[i] < self.max_corner[i]
            for i in range(3)
        )

    def to_json(self) -> dict:
        return {"min": list(self.min_corner), "max": list(self.max_corner)}


# ---------------------------------------------------------------------------
# Virtual sensor expressions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Ref:
    sensor_id: str


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Apply:
    op: str
    args: tuple["Expr", ...]


Expr = Union[Ref, Const, Apply]

_BINARY_OPS = {"-", "/"}
_NARY_OPS = {"+", "*", "avg", "min", "max"}


class ExpressionError(Exception):
    """Raised when an expression cannot be evaluated (e.g. division by zero)."""


def expr_from_json(obj) -> Expr:
    if not isinstance(obj, Mapping):
        raise ModelFormatError(f"expression node must be an object, got {type(obj).__name__}")
    if "ref" in obj:
        return Ref(str(obj["ref"]))
    if "const" in obj:
        return Const(float(obj["const"]))
    if "op" in obj:
        op = obj["op"]
        args = tuple(expr_from_json(a) for a in obj.get("args", ()))
        if op in _BINARY_OPS and len(args) != 2:
            raise ModelFormatError(f"operator {op!r} takes exactly 2 arguments")
        if op in _NARY_OPS and not args:
            raise ModelFormatError(f"operator {op!r} needs at least 1 argument")
        if op not in _BINARY_OPS | _NARY_OPS:
            raise ModelFormatError(f"unknown expression operator {op!r}")
        return Apply(op, args)
    raise ModelFormatError(f"expression node needs 'ref', 'const' or 'op': {obj!r}")


def expr_to_json(expr: Expr):
    if isinstance(expr, Ref):
        return {"ref": expr.sensor_id}
    if isinstance(expr, Const):
        return {"const": expr.value}
    return {"op": expr.op, "args": [expr_to_json(a) for a in expr.args]}


def expr_refs(expr: Expr) -> set[str]:
    if isinstance(expr, Ref):
        return {expr.sensor_id}
    if isinstance(expr, Apply):
        out: set[str] = set()
        for a in expr.args:
            out |= expr_refs(a)
        return out
    return set()


def evaluate_expression(expr: Expr, resolve: Callable[[str], float | None]) -> float | None:
    """Evaluate with a sensor-value resolver.

    Any unresolvable input makes the whole result absent (None) — there is no
    partial evaluation.  Division by zero raises ExpressionError.
    """
    if isinstance(expr, Const):
        return expr.value
    if isinstance(expr, Ref):
        return resolve(expr.sensor_id)
    vals = []
    for a in expr.args:
        v = evaluate_expression(a, resolve)
        if v is None:
            return None
        vals.append(v)
    op = expr.op
    if op == "+":
        return sum(vals)
    if op == "*":
        out = 1.0
        for v in vals:
            out *= v
        return out
    if op == "-":
        return vals[0] - vals[1]
    if op == "/":
        if vals[1] == 0.0:
            raise ExpressionError("division by zero")
        return vals[0] / vals[1]
    if op == "avg":
        return sum(vals) / len(vals)
    if op == "min":
        return min(vals)
    if op == "max":
        return max(vals)
    raise ExpressionError(f"unknown operator {op!r}")


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SetpointPolicy:
    comfort_setpoint: float
    deadband: float = 0.5
    frost_guard: float = 8.0


@dataclass(frozen=True)
class OccupancySchedule:
    schedule_id: str
    # (weekday 0=Mon .. 6=Sun, start seconds-of-day, end seconds-of-day)
    weekly_intervals: tuple[tuple[int, int, int], ...]

    def occupied_at(self, dt: datetime) -> bool:
        wd = dt.weekday()
        sod = dt.hour * 3600 + dt.minute * 60 + dt.second
        return any(w == wd and start <= sod < end for w, start, end in self.weekly_intervals)


@dataclass(frozen=True)
class SensorDef:
    sensor_id: str
    raw_address: str
    kind: str
    unit: str
    position: Point
    zone_ref: str
    is_actuator: bool = False


@dataclass(frozen=True)
class VirtualSensorDef:
    sensor_id: str
    kind: str
    unit: str
    position: Point
    zone_ref: str
    expression: Expr


@dataclass(frozen=True)
class Zone:
    zone_id: str
    name: str
    box: Box
    setpoint_policy: SetpointPolicy
    schedule_ref: str | None = None


@dataclass(frozen=True)
class Building:
    building_id: str
    zones: tuple[Zone, ...]


@dataclass(frozen=True)
class SiteModel:
    site_id: str
    buildings: tuple[Building, ...]
    sensors: tuple[SensorDef, ...] = ()
    virtual_sensors: tuple[VirtualSensorDef, ...] = ()
    schedules: tuple[OccupancySchedule, ...] = ()
    integration_rules_ref: str = "default"

    # -- lookups (documents are immutable, so caching by id() would be safe;
    #    at desk scale rebuilding the dicts is cheap enough not to bother) --

    def zones_by_id(self) -> dict[str, Zone]:
        return {z.zone_id: z for b in self.buildings for z in b.zones}

    def sensors_by_id(self) -> dict[str, SensorDef | VirtualSensorDef]:
        out: dict[str, SensorDef | VirtualSensorDef] = {s.sensor_id: s for s in self.sensors}
        out.update({v.sensor_id: v for v in self.virtual_sensors})
        return out

    def registry_by_address(self) -> dict[str, SensorDef]:
        return {s.raw_address: s for s in self.sensors}

    def schedules_by_id(self) -> dict[str, OccupancySchedule]:
        return {s.schedule_id: s for s in self.schedules}

    def zone_sensors(
        self, zone_id: str, kind: str | None = None, actuators: bool | None = None
    ) -> list[SensorDef]:
        out = []
        for s in self.sensors:
            if s.zone_ref != zone_id:
                continue
            if kind is not None and s.kind != kind:
                continue
            if actuators is not None and s.is_actuator != actuators:
                continue
            out.append(s)
        out.sort(key=lambda s: s.sensor_id)
        return out

    def zone_schedule(self, zone_id: str) -> OccupancySchedule | None:
        zone = self.zones_by_id().get(zone_id)
        if zone is None or zone.schedule_ref is None:
            return None
        return self.schedules_by_id().get(zone.schedule_ref)


@dataclass(frozen=True)
class Measure:
    """One timestamped sensor value in the kind's canonical unit."""

    sensor_id: str
    timestamp: datetime
    value: float


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    path: str
    code: str
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, path: str, code: str, message: str) -> None:
        self.violations.append(Violation(path, code, message))

    def codes(self) -> list[str]:
        return [v.code for v in self.violations]

    def __str__(self) -> str:
        if self.ok:
            return "ok"
        return "\n".join(f"{v.path}: {v.code}: {v.message}" for v in self.violations)


def validate_model(model: SiteModel) -> ValidationReport:
    """Check every model invariant, reporting all violations rather than the first."""
    report = ValidationReport()

    if not model.buildings:
        report.add("buildings", "no-buildings", "a site needs at least one building")

    # identifier uniqueness across the whole document
    seen: dict[str, str] = {}

    def claim(ident: str, path: str) -> None:
        if ident in seen:
            report.add(path, "duplicate-identifier", f"{ident!r} already used at {seen[ident]}")
        else:
            seen[ident] = path

    claim(model.site_id, "site_id")
    for b in model.buildings:
        claim(b.building_id, f"buildings[{b.building_id}]")
        for z in b.zones:
            claim(z.zone_id, f"zones[{z.zone_id}]")
    for s in model.sensors:
        claim(s.sensor_id, f"sensors[{s.sensor_id}]")
    for v in model.virtual_sensors:
        claim(v.sensor_id, f"virtual_sensors[{v.sensor_id}]")
    for sch in model.schedules:
        claim(sch.schedule_id, f"schedules[{sch.schedule_id}]")

    zones = model.zones_by_id()
    schedule_ids = {s.schedule_id for s in model.schedules}

    for b in model.buildings:
        for z in b.zones:
            path = f"zones[{z.zone_id}]"
            if not z.box.is_valid():
                report.add(f"{path}.box", "zone-box-degenerate", "box min must be < max on every axis")
            if z.schedule_ref is not None and z.schedule_ref not in schedule_ids:
                report.add(f"{path}.schedule_ref", "unknown-schedule-ref", z.schedule_ref)
            pol = z.setpoint_policy
            if pol.deadband < 0:
                report.add(f"{path}.setpoint_policy", "deadband-negative", f"deadband {pol.deadband}")
            if pol.frost_guard >= pol.comfort_setpoint:
                report.add(
                    f"{path}.setpoint_policy",
                    "frost-at-or-above-comfort",
                    f"frost_guard {pol.frost_guard} must be below comfort {pol.comfort_setpoint}",
                )
        # zone geometries pairwise non-overlapping within a building
        for i, z1 in enumerate(b.zones):
            for z2 in b.zones[i + 1 :]:
                if z1.box.is_valid() and z2.box.is_valid() and z1.box.overlaps(z2.box):
                    report.add(
                        f"zones[{z1.zone_id}]",
                        "zone-overlap",
                        f"box overlaps zone {z2.zone_id}",
                    )

    def check_placed(sensor_id: str, kind: str, unit: str, position: Point, zone_ref: str, path: str):
        if kind not in CANONICAL_UNITS:
            report.add(f"{path}.kind", "unknown-kind", kind)
        elif unit != CANONICAL_UNITS[kind]:
            report.add(
                f"{path}.unit",
                "unit-kind-mismatch",
                f"kind {kind} stores {CANONICAL_UNITS[kind]!r}, got {unit!r}",
            )
        zone = zones.get(zone_ref)
        if zone is None:
            report.add(f"{path}.zone_ref", "unknown-zone-ref", zone_ref)
        elif zone.box.is_valid() and not zone.box.contains(position):
            report.add(f"{path}.position", "position-outside-zone", f"outside box of {zone_ref}")

    for s in model.sensors:
        path = f"sensors[{s.sensor_id}]"
        check_placed(s.sensor_id, s.kind, s.unit, s.position, s.zone_ref, path)
        if s.kind == "valve" and not s.is_actuator:
            report.add(f"{path}.is_actuator", "valve-not-actuator", "valve sensors are actuators")

    all_ids = {s.sensor_id for s in model.sensors} | {v.sensor_id for v in model.virtual_sensors}
    for v in model.virtual_sensors:
        path = f"virtual_sensors[{v.sensor_id}]"
        check_placed(v.sensor_id, v.kind, v.unit, v.position, v.zone_ref, path)
        for ref in sorted(expr_refs(v.expression)):
            if ref not in all_ids:
                report.add(f"{path}.expression", "unknown-sensor-ref", ref)

    for sch in model.schedules:
        path = f"schedules[{sch.schedule_id}]"
        per_day: dict[int, list[tuple[int, int]]] = {}
        for w, start, end in sch.weekly_intervals:
            if start >= end:
                report.add(
                    path,
                    "schedule-interval-order",
                    f"{WEEKDAY_NAMES[w]} {format_time_of_day(start)} >= {format_time_of_day(end)}",
                )
            per_day.setdefault(w, []).append((start, end))
        for w, intervals in per_day.items():
            intervals.sort()
            for (s1, e1), (s2, _e2) in zip(intervals, intervals[1:]):
                if s2 < e1:
                    report.add(
                        path,
                        "schedule-interval-overlap",
                        f"{WEEKDAY_NAMES[w]} intervals overlap at {format_time_of_day(s2)}",
                    )

    try:
        virtual_order(model)
    except VirtualCycleError as err:
        report.add("virtual_sensors", "virtual-cycle", ", ".join(err.members))

    return report


def virtual_order(model: SiteModel) -> list[str]:
    """Virtual sensor ids in dependency order (dependencies first).

    Physical sensors never appear in the result.  Raises VirtualCycleError
    naming the members of any dependency cycle.
    """
    virtual = {v.sensor_id: v for v in model.virtual_sensors}
    deps = {
        vid: {r for r in expr_refs(v.expression) if r in virtual} for vid, v in virtual.items()
    }
    order: list[str] = []
    ready = sorted(vid for vid, d in deps.items() if not d)
    pending = {vid: set(d) for vid, d in deps.items() if d}
    while ready:
        vid = ready.pop(0)
        order.append(vid)
        newly = []
        for other, d in pending.items():
            d.discard(vid)
            if not d:
                newly.append(other)
        for other in newly:
            del pending[other]
        ready = sorted(ready + newly)
    if pending:
        raise VirtualCycleError(pending.keys())
    return order


# ---------------------------------------------------------------------------
# Document I/O
# ---------------------------------------------------------------------------


def _require(obj: Mapping, key: str, path: str):
    if key not in obj:
        raise ModelFormatError(f"{path}: missing required key {key!r}")
    return obj[key]


def _point(obj, path: str) -> Point:
    if not isinstance(obj, (list, tuple)) or len(obj) != 3:
        raise ModelFormatError(f"{path}: a position is [x, y, z]")
    return (float(obj[0]), float(obj[1]), float(obj[2]))


def _weekday(value, path: str) -> int:
    if isinstance(value, str):
        name = value.lower()[:3]
        if name in WEEKDAY_NAMES:
            return WEEKDAY_NAMES.index(name)
        raise ModelFormatError(f"{path}: unknown weekday {value!r}")
    day = int(value)
    if not 0 <= day <= 6:
        raise ModelFormatError(f"{path}: weekday out of range: {value!r}")
    return day


def site_from_document(doc: Mapping) -> SiteModel:
    """Build a SiteModel from a parsed model document.

    Structural problems (wrong shapes, missing keys) raise ModelFormatError;
    semantic invariants are checked separately by validate_model.
    """
    if not isinstance(doc, Mapping):
        raise ModelFormatError("model document must be a JSON object")
    try:
        site_id = str(_require(doc, "site_id", "document"))
        buildings = []
        for b in _require(doc, "buildings", "document"):
            zones = []
            for z in b.get("zones", ()):
                zpath = f"zones[{z.get('zone_id', '?')}]"
                box = _require(z, "box", zpath)
                pol = z.get("setpoint_policy", {})
                zones.append(
                    Zone(
                        zone_id=str(_require(z, "zone_id", zpath)),
                        name=str(z.get("name", z["zone_id"])),
                        box=Box(
                            _point(_require(box, "min", zpath + ".box"), zpath),
                            _point(_require(box, "max", zpath + ".box"), zpath),
                        ),
                        setpoint_policy=SetpointPolicy(
                            comfort_setpoint=float(pol.get("comfort_setpoint", 21.0)),
                            deadband=float(pol.get("deadband", 0.5)),
                            frost_guard=float(pol.get("frost_guard", 8.0)),
                        ),
                        schedule_ref=z.get("schedule_ref"),
                    )
                )
            buildings.append(Building(str(_require(b, "building_id", "buildings")), tuple(zones)))

        sensors = []
        for s in doc.get("sensors", ()):
            spath = f"sensors[{s.get('sensor_id', '?')}]"
            sensors.append(
                SensorDef(
                    sensor_id=str(_require(s, "sensor_id", spath)),
                    raw_address=str(_require(s, "raw_address", spath)),
                    kind=str(_require(s, "kind", spath)),
                    unit=str(_require(s, "unit", spath)),
                    position=_point(_require(s, "position", spath), spath),
                    zone_ref=str(_require(s, "zone_ref", spath)),
                    is_actuator=bool(s.get("is_actuator", False)),
                )
            )

        virtual = []
        for v in doc.get("virtual_sensors", ()):
            vpath = f"virtual_sensors[{v.get('sensor_id', '?')}]"
            virtual.append(
                VirtualSensorDef(
                    sensor_id=str(_require(v, "sensor_id", vpath)),
                    kind=str(_require(v, "kind", vpath)),
                    unit=str(_require(v, "unit", vpath)),
                    position=_point(_require(v, "position", vpath), vpath),
                    zone_ref=str(_require(v, "zone_ref", vpath)),
                    expression=expr_from_json(_require(v, "expression", vpath)),
                )
            )

        schedules = []
        for sch in doc.get("schedules", ()):
            spath = f"schedules[{sch.get('schedule_id', '?')}]"
            intervals = []
            for iv in sch.get("weekly_intervals", ()):
                intervals.append(
                    (
                        _weekday(_require(iv, "weekday", spath), spath),
                        parse_time_of_day(str(_require(iv, "start", spath))),
                        parse_time_of_day(str(_require(iv, "end", spath))),
                    )
                )
            schedules.append(OccupancySchedule(str(_require(sch, "schedule_id", spath)), tuple(intervals)))

        rules_ref = "default"
        rules_doc = doc.get("integration_rules")
        if isinstance(rules_doc, Mapping):
            rules_ref = str(rules_doc.get("rules_id", "default"))

        return SiteModel(
            site_id=site_id,
            buildings=tuple(buildings),
            sensors=tuple(sensors),
            virtual_sensors=tuple(virtual),
            schedules=tuple(schedules),
            integration_rules_ref=rules_ref,
        )
    except ModelFormatError:
        raise
    except (KeyError, TypeError, ValueError) as err:
        raise ModelFormatError(f"bad model document: {err}") from err


def load_document(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise ModelFormatError(f"cannot read model document {path}: {err}") from err
    if not isinstance(doc, dict):
        raise ModelFormatError("model document must be a JSON object")
    return doc


def load_site(path) -> SiteModel:
    return site_from_document(load_document(path))


def site_to_document(model: SiteModel) -> dict:
    """Inverse of site_from_document (used by demos and tests)."""
    return {
        "site_id": model.site_id,
        "buildings": [
            {
                "building_id": b.building_id,
                "zones": [
                    {
                        "zone_id": z.zone_id,
                        "name": z.name,
                        "box": z.box.to_json(),
                        "setpoint_policy": {
                            "comfort_setpoint": z.setpoint_policy.comfort_setpoint,
                            "deadband": z.setpoint_policy.deadband,
                            "frost_guard": z.setpoint_policy.frost_guard,
                        },
                        **({"schedule_ref": z.schedule_ref} if z.schedule_ref else {}),
                    }
                    for z in b.zones
                ],
            }
            for b in model.buildings
        ],
        "sensors": [
            {
                "sensor_id": s.sensor_id,
                "raw_address": s.raw_address,
                "kind": s.kind,
                "unit": s.unit,
                "position": list(s.position),
                "zone_ref": s.zone_ref,
                "is_actuator": s.is_actuator,
            }
            for s in model.sensors
        ],
        "virtual_sensors": [
            {
                "sensor_id": v.sensor_id,
                "kind": v.kind,
                "unit": v.unit,
                "position": list(v.position),
                "zone_ref": v.zone_ref,
                "expression": expr_to_json(v.expression),
            }
            for v in model.virtual_sensors
        ],
        "schedules": [
            {
                "schedule_id": sch.schedule_id,
                "weekly_intervals": [
                    {
                        "weekday": WEEKDAY_NAMES[w],
                        "start": format_time_of_day(start),
                        "end": format_time_of_day(end),
                    }
                    for w, start, end in sch.weekly_intervals
                ],
            }
            for sch in model.schedules
        ],
    }
