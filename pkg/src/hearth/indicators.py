"""Derived indicators computed from warehouse series.

Four kinds:

* time-to-reach — seconds from a heat command until the zone temperature
  first enters [target - tol, inf); 'absent' if never reached in the window.
* statistical-presence — 7x24 matrix of the fraction of presence samples
  true per weekday-hour bin.
* savings — baseline heater-on energy (a constant-comfort thermostat
  simulated with the plant model against recorded outdoor conditions) minus
  the actual heater-on energy from the command history, in kWh.
* optimal-setback — the deepest unoccupied setback from which the zone,
  per its estimated first-order response, recovers the comfort target
  within the lead time before the next occupancy:
  max(frost_guard, T_inf - (T_inf - target) * exp(L / tau)).
  tau and T_inf come from a least-squares fit of consecutive-sample pairs
  T[k+1] = a*T[k] + b over full-heat episodes (tau = dt / (1 - a), the
  inversion matching the explicit-Euler plant that produced the data).

Missing inputs yield an explicit insufficient-data result, never a guess.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime

import numpy as np

from .harness import thermal_step
from .model import SiteModel
from .utils import format_timestamp, to_epoch
from .warehouse import FactStore, QueryFilter

INDICATOR_KINDS = ("time-to-reach", "statistical-presence", "savings", "optimal-setback")

_UNITS = {
    "time-to-reach": "s",
    "statistical-presence": "fraction",
    "savings": "kWh",
    "optimal-setback": "C",
}


@dataclass(frozen=True)
class IndicatorResult:
    kind: str
    params: dict
    window: tuple[datetime, datetime]
    status: str  # 'ok' | 'absent' | 'insufficient-data'
    value: float | list | None
    unit: str
    detail: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "params": self.params,
            "window": [format_timestamp(self.window[0]), format_timestamp(self.window[1])],
            "status": self.status,
            "value": self.value,
            "unit": self.unit,
            "detail": self.detail,
        }


class IndicatorError(Exception):
    pass


def compute_indicator(
    store: FactStore,
    model: SiteModel,
    kind: str,
    params: dict,
    window: tuple[datetime, datetime],
) -> IndicatorResult:
    if kind == "time-to-reach":
        return _time_to_reach(store, model, params, window)
    if kind == "statistical-presence":
        return _statistical_presence(store, model, params, window)
    if kind == "savings":
        return _savings(store, model, params, window)
    if kind == "optimal-setback":
        return _optimal_setback(store, model, params, window)
    raise IndicatorError(f"unknown indicator kind {kind!r}")


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------


def _insufficient(kind, params, window, reason) -> IndicatorResult:
    return IndicatorResult(kind, params, window, "insufficient-data", None, _UNITS[kind], {"reason": reason})


def _zone(model: SiteModel, params: dict):
    zone_id = params.get("zone")
    if zone_id is None:
        raise IndicatorError("params must name a zone")
    zone = model.zones_by_id().get(zone_id)
    if zone is None:
        raise IndicatorError(f"unknown zone {zone_id!r}")
    return zone


def _temperature_sensor(model: SiteModel, zone_id: str, params: dict) -> str | None:
    if params.get("sensor"):
        return params["sensor"]
    candidates = model.zone_sensors(zone_id, kind="temperature", actuators=False)
    return candidates[0].sensor_id if candidates else None


def _valve_sensor(model: SiteModel, zone_id: str) -> str | None:
    candidates = model.zone_sensors(zone_id, kind="valve", actuators=True)
    return candidates[0].sensor_id if candidates else None


def _series(store: FactStore, sensor_id: str, window) -> list[tuple[float, float]]:
    res = store.query(QueryFilter(sensor_ids=(sensor_id,)), window[0], window[1], "raw")
    return [(to_epoch(ts), v) for ts, v in res.get(sensor_id, [])]


def _setting_at(store: FactStore, valve_id: str, t: datetime) -> float:
    found = store.latest(valve_id, t)
    return found[1] if found is not None else 0.0


def _on_seconds(points: list[tuple[float, float]], initial: float, t0: float, t1: float) -> float:
    """Integral of the valve step function over [t0, t1) in valve-seconds."""
    total = 0.0
    setting = initial
    prev = t0
    for epoch, value in points:
        if epoch < t0:
            setting = value
            continue
        if epoch >= t1:
            break
        total += setting * (epoch - prev)
        setting = value
        prev = epoch
    total += setting * (t1 - prev)
    return total


# ---------------------------------------------------------------------------
# Kinds
# ---------------------------------------------------------------------------


def _time_to_reach(store, model, params, window) -> IndicatorResult:
    kind = "time-to-reach"
    zone = _zone(model, params)
    target = float(params.get("target", zone.setpoint_policy.comfort_setpoint))
    tol = float(params.get("tol", 0.25))
    params = dict(params, target=target, tol=tol)

    valve_id = _valve_sensor(model, zone.zone_id)
    temp_id = _temperature_sensor(model, zone.zone_id, params)
    if valve_id is None or temp_id is None:
        return _insufficient(kind, params, window, "zone needs a valve actuator and a temperature sensor")

    valve_points = _series(store, valve_id, window)
    prior = _setting_at(store, valve_id, window[0]) if valve_points else 0.0
    episode_start = None
    setting = prior
    for epoch, value in valve_points:
        if setting <= 0.0 and value > 0.0:
            episode_start = epoch
            break
        setting = value
    if episode_start is None:
        return _insufficient(kind, params, window, "no heat command starts an episode in the window")

    temp_points = _series(store, temp_id, window)
    if not temp_points:
        return _insufficient(kind, params, window, "no temperature facts in the window")
    for epoch, value in temp_points:
        if epoch < episode_start:
            continue
        if value >= target - tol:
            return IndicatorResult(
                kind, params, window, "ok", epoch - episode_start, "s",
                {"episode_start": episode_start},
            )
    return IndicatorResult(kind, params, window, "absent", None, "s", {"episode_start": episode_start})


def _statistical_presence(store, model, params, window) -> IndicatorResult:
    kind = "statistical-presence"
    zone = _zone(model, params)
    sensors = model.zone_sensors(zone.zone_id, kind="presence", actuators=False)
    if not sensors:
        return _insufficient(kind, params, window, "zone has no presence sensor")

    true_count = np.zeros((7, 24), dtype=np.int64)
    total = np.zeros((7, 24), dtype=np.int64)
    res = store.query(
        QueryFilter(sensor_ids=tuple(s.sensor_id for s in sensors)), window[0], window[1], "raw"
    )
    for series in res.values():
        for ts, value in series:
            total[ts.weekday(), ts.hour] += 1
            if value > 0.5:
                true_count[ts.weekday(), ts.hour] += 1
    if int(total.sum()) == 0:
        return _insufficient(kind, params, window, "no presence samples in the window")
    matrix = np.where(total > 0, true_count / np.maximum(total, 1), 0.0)
    return IndicatorResult(
        kind, params, window, "ok", matrix.tolist(), "fraction", {"samples": int(total.sum())}
    )


def _savings(store, model, params, window) -> IndicatorResult:
    kind = "savings"
    zone = _zone(model, params)
    try:
        rated_power = float(params["rated_power_w"])
        tau = float(params["tau"])
        gain = float(params["heater_gain"])
        outdoor_id = params["outdoor_sensor"]
    except KeyError as missing:
        return _insufficient(kind, params, window, f"missing param {missing}")
    dt = float(params.get("tick_seconds", 60.0))
    setpoint = float(params.get("comfort_setpoint", zone.setpoint_policy.comfort_setpoint))
    deadband = float(params.get("deadband", zone.setpoint_policy.deadband))
    params = dict(
        params,
        comfort_setpoint=setpoint,
        deadband=deadband,
        tick_seconds=dt,
        baseline="constant-comfort thermostat simulated with the plant model",
    )

    temp_id = _temperature_sensor(model, zone.zone_id, params)
    valve_id = _valve_sensor(model, zone.zone_id)
    if temp_id is None or valve_id is None:
        return _insufficient(kind, params, window, "zone needs a valve actuator and a temperature sensor")
    temp_points = _series(store, temp_id, window)
    outdoor_points = _series(store, outdoor_id, window)
    if not temp_points or not outdoor_points:
        return _insufficient(kind, params, window, "need temperature and outdoor facts in the window")

    t_start = temp_points[0][0]
    t_end = to_epoch(window[1])

    # baseline: heater off at window start, bang-bang around the comfort band
    temperature = temp_points[0][1]
    on_low, off_high = setpoint - deadband / 2.0, setpoint + deadband / 2.0
    heating = False
    baseline_on = 0.0
    outdoor_idx = 0
    outdoor_value = outdoor_points[0][1]
    t = t_start
    while t < t_end:
        while outdoor_idx < len(outdoor_points) and outdoor_points[outdoor_idx][0] <= t:
            outdoor_value = outdoor_points[outdoor_idx][1]
            outdoor_idx += 1
        if heating:
            if temperature >= off_high:
                heating = False
        elif temperature < on_low:
            heating = True
        u = 1.0 if heating else 0.0
        step = min(dt, t_end - t)
        baseline_on += u * step
        temperature = thermal_step(temperature, outdoor_value, tau, gain, u, step)
        t += step

    valve_points = _series(store, valve_id, window)
    initial = _setting_at(store, valve_id, window[0])
    actual_on = _on_seconds(valve_points, initial, t_start, t_end)

    savings_kwh = (baseline_on - actual_on) * rated_power / 3.6e6
    return IndicatorResult(
        kind, params, window, "ok", savings_kwh, "kWh",
        {"baseline_on_s": baseline_on, "actual_on_s": actual_on},
    )


def _optimal_setback(store, model, params, window) -> IndicatorResult:
    kind = "optimal-setback"
    zone = _zone(model, params)
    try:
        lead = float(params["lead_seconds"])
    except KeyError:
        return _insufficient(kind, params, window, "missing param 'lead_seconds'")
    dt = float(params.get("tick_seconds", 60.0))
    target = float(params.get("target", zone.setpoint_policy.comfort_setpoint))
    frost = float(params.get("frost_guard", zone.setpoint_policy.frost_guard))
    params = dict(params, target=target, frost_guard=frost, tick_seconds=dt)

    temp_id = _temperature_sensor(model, zone.zone_id, params)
    valve_id = _valve_sensor(model, zone.zone_id)
    if temp_id is None or valve_id is None:
        return _insufficient(kind, params, window, "zone needs a valve actuator and a temperature sensor")

    temp_points = _series(store, temp_id, window)
    pairs_x, pairs_y = [], []
    for (e0, v0), (e1, v1) in zip(temp_points, temp_points[1:]):
        if abs((e1 - e0) - dt) > 1e-9:
            continue
        from_epoch_dt0 = datetime.fromtimestamp(e0, tz=window[0].tzinfo)
        from_epoch_dt1 = datetime.fromtimestamp(e1, tz=window[0].tzinfo)
        if _setting_at(store, valve_id, from_epoch_dt0) == 1.0 and _setting_at(
            store, valve_id, from_epoch_dt1
        ) == 1.0:
            pairs_x.append(v0)
            pairs_y.append(v1)
    if len(pairs_x) < 8:
        return _insufficient(kind, params, window, f"only {len(pairs_x)} full-heat sample pairs")
    x = np.asarray(pairs_x)
    y = np.asarray(pairs_y)
    if float(np.ptp(x)) < 1e-9:
        return _insufficient(kind, params, window, "heat-up episodes carry no temperature variation")
    a, b = np.polyfit(x, y, 1)
    if not 0.0 < a < 1.0:
        return _insufficient(kind, params, window, f"fit slope {a:.4f} is not a decaying response")
    tau = dt / (1.0 - a)
    t_inf = b / (1.0 - a)

    unclamped = t_inf - (t_inf - target) * math.exp(lead / tau)
    setback = max(frost, unclamped)
    return IndicatorResult(
        kind, params, window, "ok", setback, "C",
        {
            "tau_estimate_s": float(tau),
            "t_inf_estimate": float(t_inf),
            "unclamped": float(unclamped),
            "n_pairs": len(pairs_x),
        },
    )
