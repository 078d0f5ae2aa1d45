"""Synthetic site: first-order thermal plants plus a raw-record emitter.

Each zone is a single thermal node

    dT/dt = (T_out - T) / tau + u * G

integrated with explicit Euler under a dt <= tau/10 stability guard; u is
the valve setting in [0, 1] and G the heater gain in degC/s at full valve.
The closed-form step response of this model doubles as the oracle for the
control and indicator tests.

The emitter produces one raw record per non-actuator sensor per tick with
Gaussian noise and seeded fault injection (unit corruption, value spikes,
dropouts, unknown addresses), standing in for a building management system.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from datetime import datetime, timedelta

from .model import SiteModel
from .ingest import RawRecord
from .utils import format_timestamp, parse_timestamp, to_epoch


class PlantError(Exception):
    pass


def thermal_step(temperature: float, outdoor: float, tau: float, gain: float, valve: float, dt: float) -> float:
    """One explicit-Euler step of the zone model (shared with the savings baseline)."""
    return temperature + dt * ((outdoor - temperature) / tau + valve * gain)


@dataclass
class ZonePlant:
    temperature: float  # degC
    tau: float  # s
    heater_gain: float  # degC/s at full valve
    valve: float = 0.0
    on_seconds: float = 0.0  # integral of valve setting, in valve-seconds

    def __post_init__(self):
        if self.tau <= 0:
            raise PlantError(f"tau must be positive, got {self.tau}")
        if self.heater_gain < 0:
            raise PlantError(f"heater gain must be >= 0, got {self.heater_gain}")


@dataclass
class OutdoorTrajectory:
    """Piecewise-linear outdoor temperature; clamped beyond the end breakpoints."""

    breakpoints: tuple[tuple[float, float], ...]  # (epoch seconds, degC), ascending

    def value(self, at: datetime) -> float:
        t = to_epoch(at)
        pts = self.breakpoints
        if not pts:
            raise PlantError("outdoor trajectory needs at least one breakpoint")
        if t <= pts[0][0]:
            return pts[0][1]
        for (t0, v0), (t1, v1) in zip(pts, pts[1:]):
            if t <= t1:
                if t1 == t0:
                    return v1
                return v0 + (v1 - v0) * (t - t0) / (t1 - t0)
        return pts[-1][1]


@dataclass
class PlantState:
    zones: dict[str, ZonePlant]
    outdoor: OutdoorTrajectory
    clock: datetime

    def step(self, commands: dict[str, float], dt: float) -> "PlantState":
        """Apply valve commands (zone id -> setting), then integrate dt seconds."""
        if dt <= 0:
            raise PlantError(f"dt must be positive, got {dt}")
        for zone_id, setting in commands.items():
            zone = self.zones.get(zone_id)
            if zone is None:
                raise PlantError(f"command for unknown zone {zone_id!r}")
            if not 0.0 <= setting <= 1.0:
                raise PlantError(f"valve setting {setting} outside [0, 1]")
            zone.valve = setting
        outdoor_now = self.outdoor.value(self.clock)
        for zone_id, zone in self.zones.items():
            if dt > zone.tau / 10.0:
                raise PlantError(
                    f"dt {dt} violates the stability guard tau/10 for zone {zone_id}"
                )
            zone.temperature = thermal_step(
                zone.temperature, outdoor_now, zone.tau, zone.heater_gain, zone.valve, dt
            )
            zone.on_seconds += zone.valve * dt
        self.clock = self.clock + timedelta(seconds=dt)
        return self


def step_plant(state: PlantState, commands: dict[str, float], dt: float) -> PlantState:
    return state.step(commands, dt)


# ---------------------------------------------------------------------------
# Raw record emission with fault injection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FaultProfile:
    unit_rate: float = 0.0
    spike_rate: float = 0.0
    dropout_rate: float = 0.0
    unknown_address_rate: float = 0.0
    noise_sigma: float = 0.0  # degC (applied to non-boolean kinds)
    seed: int = 0

    def __post_init__(self):
        for name in ("unit_rate", "spike_rate", "dropout_rate", "unknown_address_rate"):
            rate = getattr(self, name)
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {rate}")


# value added by a spike fault; large enough to leave any kind's bounds
SPIKE_OFFSET = 1.0e6

_AMBIENT_DEFAULTS = {"humidity": 50.0, "pressure": 101_325.0, "power": 0.0}


class RawEmitter:
    """Turns plant truth into raw records, one per non-actuator sensor per tick.

    Temperature sensors in plant zones read the zone node; temperature
    sensors elsewhere read the outdoor trajectory (that is how an outdoor
    probe is modelled).  Presence sensors follow the zone's occupancy
    schedule.  All randomness comes from one seeded generator, so a fixed
    (model, faults, seed) produces an identical record stream.
    """

    def __init__(self, model: SiteModel, faults: FaultProfile):
        self.model = model
        self.faults = faults
        self.rng = random.Random(faults.seed)
        self._ghost = 0

    def _truth(self, sensor, state: PlantState) -> float:
        if sensor.kind == "temperature":
            zone = state.zones.get(sensor.zone_ref)
            if zone is not None:
                return zone.temperature
            return state.outdoor.value(state.clock)
        if sensor.kind == "presence":
            schedule = self.model.zone_schedule(sensor.zone_ref)
            return 1.0 if schedule is not None and schedule.occupied_at(state.clock) else 0.0
        return _AMBIENT_DEFAULTS.get(sensor.kind, 0.0)

    def emit(self, state: PlantState) -> list[RawRecord]:
        records: list[RawRecord] = []
        ts = format_timestamp(state.clock)
        f = self.faults
        for sensor in self.model.sensors:
            if sensor.is_actuator:
                continue
            value = self._truth(sensor, state)
            if sensor.kind != "presence":
                value += self.rng.gauss(0.0, f.noise_sigma)
            address = sensor.raw_address
            unit = sensor.unit

            r = self.rng.random()
            if r < f.dropout_rate:
                continue
            r -= f.dropout_rate
            if r < f.unknown_address_rate:
                self._ghost += 1
                address = f"GHOST_{self._ghost}"
            else:
                r -= f.unknown_address_rate
                if r < f.unit_rate:
                    unit = "??"
                else:
                    r -= f.unit_rate
                    if r < f.spike_rate:
                        value += SPIKE_OFFSET

            if sensor.kind == "presence":
                text = "1" if value >= 0.5 else "0"
            else:
                text = repr(value)
            records.append(RawRecord(address, ts, text, unit))
        return records


def emit_raw(state: PlantState, model: SiteModel, faults: FaultProfile, emitter: RawEmitter | None = None) -> list[RawRecord]:
    """One-shot convenience around RawEmitter (creates a fresh seeded generator)."""
    if emitter is None:
        emitter = RawEmitter(model, faults)
    return emitter.emit(state)


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HarnessConfig:
    zone_params: dict[str, dict]  # zone id -> {tau, heater_gain, initial_temperature}
    outdoor_breakpoints: tuple[tuple[object, float], ...]  # (iso text | seconds offset, degC)
    faults: FaultProfile = field(default_factory=FaultProfile)

    @classmethod
    def from_document(cls, doc: dict) -> "HarnessConfig":
        zones = {}
        for zone_id, spec in (doc.get("zones") or {}).items():
            zones[zone_id] = {
                "tau": float(spec["tau"]),
                "heater_gain": float(spec.get("heater_gain", 0.0)),
                "initial_temperature": float(spec.get("initial_temperature", 18.0)),
            }
        outdoor = tuple((bp[0], float(bp[1])) for bp in (doc.get("outdoor") or ((0, 10.0),)))
        f = doc.get("faults") or {}
        faults = FaultProfile(
            unit_rate=float(f.get("unit_rate", 0.0)),
            spike_rate=float(f.get("spike_rate", 0.0)),
            dropout_rate=float(f.get("dropout_rate", 0.0)),
            unknown_address_rate=float(f.get("unknown_address_rate", 0.0)),
            noise_sigma=float(f.get("noise_sigma", 0.0)),
            seed=int(f.get("seed", 0)),
        )
        return cls(zone_params=zones, outdoor_breakpoints=outdoor, faults=faults)

    def min_tau(self) -> float:
        taus = [spec["tau"] for spec in self.zone_params.values()]
        return min(taus) if taus else float("inf")


def load_harness_config(path) -> HarnessConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return HarnessConfig.from_document(json.load(fh))


def build_plant(config: HarnessConfig, start: datetime) -> PlantState:
    """Materialise the plant at a start time.

    Numeric outdoor breakpoints are offsets in seconds from the start;
    strings are absolute ISO timestamps.
    """
    zones = {
        zone_id: ZonePlant(
            temperature=spec["initial_temperature"],
            tau=spec["tau"],
            heater_gain=spec["heater_gain"],
        )
        for zone_id, spec in config.zone_params.items()
    }
    start_epoch = to_epoch(start)
    points = []
    for when, temp in config.outdoor_breakpoints:
        if isinstance(when, str):
            points.append((to_epoch(parse_timestamp(when)), temp))
        else:
            points.append((start_epoch + float(when), temp))
    points.sort()
    return PlantState(zones=zones, outdoor=OutdoorTrajectory(tuple(points)), clock=start)
