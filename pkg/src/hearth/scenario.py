"""Rule-based scenario engine producing actuator commands.

A tick runs four steps: (1) new measures load into the engine's central
memory, latest timestamp wins; (2) derived facts are recomputed — per-zone
occupied-by-schedule flags and virtual sensor values, never carried stale
across ticks; (3) step-3 rules evaluate their guards per zone and emit
assertions ("heat is required"); (4) conflicting assertions are resolved by
priority and the winners map to valve commands (bang-bang, 0/1).  Equal-
priority heat/chill conflicts produce no command plus a conflict log entry:
inaction with visibility beats an arbitrary pick.

Rules live in a JSON file with a small guard grammar: comparisons and
arithmetic over per-zone context names (temperature, presence, occupied,
valve_setting, comfort_setpoint, deadband, frost_guard), boolean
connectives, and value('<sensor-id>') for any sensor by id.  A flow whose
rules reference objects missing from the model refuses to start.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import Callable, Iterable, Mapping, Sequence

from .model import (
    ExpressionError,
    Measure,
    SiteModel,
    evaluate_expression,
    virtual_order,
)
from .utils import format_timestamp

ZONE_VARIABLES = (
    "temperature",
    "presence",
    "occupied",
    "valve_setting",
    "comfort_setpoint",
    "deadband",
    "frost_guard",
)


class MissingInput(Exception):
    """A guard referenced a context value that has no measure yet."""

    def __init__(self, name: str):
        self.name = name
        super().__init__(name)


class GuardSyntaxError(Exception):
    pass


class RuleValidationError(Exception):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


# ---------------------------------------------------------------------------
# Guard expressions
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<str>'[^']*')"
    r"|(?P<op><=|>=|==|!=|<|>|\+|-|\*|/|\(|\)))"
)


def _tokenize(text: str) -> list[tuple[str, str]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            if text[pos:].strip() == "":
                break
            raise GuardSyntaxError(f"bad token at {text[pos:]!r}")
        if m.lastgroup == "num":
            tokens.append(("num", m.group("num")))
        elif m.lastgroup == "ident":
            tokens.append(("ident", m.group("ident")))
        elif m.lastgroup == "str":
            tokens.append(("str", m.group("str")[1:-1]))
        else:
            tokens.append(("op", m.group("op")))
        pos = m.end()
    return tokens


@dataclass(frozen=True)
class Guard:
    text: str
    ast: tuple
    names: frozenset[str]
    sensor_refs: frozenset[str]

    def evaluate(self, ns: Mapping[str, float | bool], resolve: Callable[[str], float]) -> bool:
        return bool(_eval_ast(self.ast, ns, resolve))


class _Parser:
    def __init__(self, tokens: list[tuple[str, str]]):
        self.tokens = tokens
        self.i = 0
        self.names: set[str] = set()
        self.sensor_refs: set[str] = set()

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else (None, None)

    def take(self, kind=None, value=None):
        tok = self.peek()
        if tok[0] is None:
            raise GuardSyntaxError("unexpected end of guard")
        if kind is not None and tok[0] != kind:
            raise GuardSyntaxError(f"expected {kind}, got {tok[1]!r}")
        if value is not None and tok[1] != value:
            raise GuardSyntaxError(f"expected {value!r}, got {tok[1]!r}")
        self.i += 1
        return tok

    def parse(self) -> tuple:
        ast = self.or_expr()
        if self.peek()[0] is not None:
            raise GuardSyntaxError(f"trailing input at {self.peek()[1]!r}")
        return ast

    def or_expr(self):
        node = self.and_expr()
        while self.peek() == ("ident", "or"):
            self.take()
            node = ("or", node, self.and_expr())
        return node

    def and_expr(self):
        node = self.not_expr()
        while self.peek() == ("ident", "and"):
            self.take()
            node = ("and", node, self.not_expr())
        return node

    def not_expr(self):
        if self.peek() == ("ident", "not"):
            self.take()
            return ("not", self.not_expr())
        return self.comparison()

    def comparison(self):
        node = self.sum_expr()
        kind, value = self.peek()
        if kind == "op" and value in ("<", "<=", ">", ">=", "==", "!="):
            self.take()
            node = ("cmp", value, node, self.sum_expr())
        return node

    def sum_expr(self):
        node = self.term()
        while self.peek()[0] == "op" and self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            node = ("arith", op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[0] == "op" and self.peek()[1] in ("*", "/"):
            op = self.take()[1]
            node = ("arith", op, node, self.unary())
        return node

    def unary(self):
        if self.peek() == ("op", "-"):
            self.take()
            return ("neg", self.unary())
        return self.atom()

    def atom(self):
        kind, value = self.peek()
        if kind == "num":
            self.take()
            return ("num", float(value))
        if kind == "op" and value == "(":
            self.take()
            node = self.or_expr()
            self.take("op", ")")
            return node
        if kind == "ident":
            self.take()
            if value in ("true", "false"):
                return ("bool", value == "true")
            if value == "value":
                self.take("op", "(")
                sensor = self.take("str")[1]
                self.take("op", ")")
                self.sensor_refs.add(sensor)
                return ("value", sensor)
            self.names.add(value)
            return ("var", value)
        raise GuardSyntaxError(f"unexpected {value!r}")


def _eval_ast(node: tuple, ns, resolve):
    op = node[0]
    if op == "num":
        return node[1]
    if op == "bool":
        return node[1]
    if op == "var":
        if node[1] not in ns or ns[node[1]] is None:
            raise MissingInput(node[1])
        return ns[node[1]]
    if op == "value":
        value = resolve(node[1])
        if value is None:
            raise MissingInput(node[1])
        return value
    if op == "neg":
        return -_eval_ast(node[1], ns, resolve)
    if op == "not":
        return not _eval_ast(node[1], ns, resolve)
    if op == "and":
        return bool(_eval_ast(node[1], ns, resolve)) and bool(_eval_ast(node[2], ns, resolve))
    if op == "or":
        return bool(_eval_ast(node[1], ns, resolve)) or bool(_eval_ast(node[2], ns, resolve))
    if op == "cmp":
        a = _eval_ast(node[2], ns, resolve)
        b = _eval_ast(node[3], ns, resolve)
        return {
            "<": a < b, "<=": a <= b, ">": a > b, ">=": a >= b, "==": a == b, "!=": a != b,
        }[node[1]]
    if op == "arith":
        a = _eval_ast(node[2], ns, resolve)
        b = _eval_ast(node[3], ns, resolve)
        if node[1] == "+":
            return a + b
        if node[1] == "-":
            return a - b
        if node[1] == "*":
            return a * b
        if b == 0:
            raise MissingInput("division by zero in guard")
        return a / b
    raise GuardSyntaxError(f"bad AST node {op!r}")


_GUARD_CACHE: dict[str, Guard] = {}


def parse_guard(text: str) -> Guard:
    cached = _GUARD_CACHE.get(text)
    if cached is not None:
        return cached
    parser = _Parser(_tokenize(text))
    ast = parser.parse()
    guard = Guard(text, ast, frozenset(parser.names), frozenset(parser.sensor_refs))
    _GUARD_CACHE[text] = guard
    return guard


# ---------------------------------------------------------------------------
# Rules, assertions, commands
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RuleDef:
    rule_id: str
    step: int  # 3 emits assertions, 4 emits commands
    guard: str = "true"
    zone: str = "*"
    action: str = "heat"  # heat | chill
    priority: int = 10
    setting: float = 1.0  # step-4 command template
    scenario_id: str = "heating"

    def to_json(self) -> dict:
        out = {
            "rule_id": self.rule_id,
            "scenario_id": self.scenario_id,
            "step": self.step,
            "action": self.action,
        }
        if self.step == 3:
            out.update({"zone": self.zone, "guard": self.guard, "priority": self.priority})
        else:
            out.update({"setting": self.setting})
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> "RuleDef":
        return cls(
            rule_id=str(obj["rule_id"]),
            step=int(obj["step"]),
            guard=str(obj.get("guard", "true")),
            zone=str(obj.get("zone", "*")),
            action=str(obj.get("action", "heat")),
            priority=int(obj.get("priority", 10)),
            setting=float(obj.get("setting", 1.0)),
            scenario_id=str(obj.get("scenario_id", "heating")),
        )


@dataclass(frozen=True)
class Assertion:
    scenario_id: str
    zone_ref: str
    action: str
    priority: int
    reason: str  # originating rule id
    tick: datetime


@dataclass(frozen=True)
class Command:
    actuator_ref: str
    setting: float
    zone_ref: str
    tick: datetime
    provenance: tuple[Assertion, ...] = ()


@dataclass(frozen=True)
class ResolutionPolicy:
    """Zone -> valve map plus the step-4 command templates."""

    actuator_by_zone: Mapping[str, str]
    heat_setting: float = 1.0

    @classmethod
    def from_model(cls, model: SiteModel, rules: Sequence[RuleDef] = ()) -> "ResolutionPolicy":
        actuators = {}
        for zone_id in model.zones_by_id():
            valves = model.zone_sensors(zone_id, kind="valve", actuators=True)
            if valves:
                actuators[zone_id] = valves[0].sensor_id
        heat_setting = 1.0
        for rule in rules:
            if rule.step == 4 and rule.action == "heat":
                heat_setting = rule.setting
        return cls(actuator_by_zone=actuators, heat_setting=heat_setting)


def builtin_heating_rules() -> list[RuleDef]:
    """The stock heating scenario.

    Comfort heating switches on below comfort - deadband/2 when the zone is
    occupied (by presence or by schedule), holds while the valve is open
    until comfort + deadband/2, and drops out when occupancy ends.  The
    frost rule outranks comfort and ignores occupancy.  One step-4 rule maps
    a winning heat assertion to the zone valve at full opening.
    """
    return [
        RuleDef("frost-protect", 3, guard="temperature < frost_guard", priority=100),
        RuleDef("presence-heat", 3, guard="presence and temperature < comfort_setpoint - deadband / 2"),
        RuleDef("schedule-heat", 3, guard="occupied and temperature < comfort_setpoint - deadband / 2"),
        RuleDef(
            "comfort-hold",
            3,
            guard="valve_setting > 0 and (presence or occupied)"
            " and temperature < comfort_setpoint + deadband / 2",
        ),
        RuleDef("heat-valve", 4, action="heat", setting=1.0),
    ]


def load_rules(path) -> list[RuleDef]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return [RuleDef.from_json(obj) for obj in doc]


def save_rules(path, rules: Iterable[RuleDef]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([r.to_json() for r in rules], fh, indent=2, sort_keys=True)


def validate_rules(rules: Sequence[RuleDef], model: SiteModel) -> list[str]:
    """Every object a rule references must exist in the model."""
    problems = []
    zones = model.zones_by_id()
    sensors = model.sensors_by_id()
    seen_ids = set()
    for rule in rules:
        where = f"rule {rule.rule_id!r}"
        if rule.rule_id in seen_ids:
            problems.append(f"{where}: duplicate rule id")
        seen_ids.add(rule.rule_id)
        if rule.step not in (3, 4):
            problems.append(f"{where}: step must be 3 or 4, got {rule.step}")
            continue
        if rule.action not in ("heat", "chill"):
            problems.append(f"{where}: unknown action {rule.action!r}")
        if rule.step == 3:
            if rule.priority < 0:
                problems.append(f"{where}: priority must be >= 0")
            if rule.zone != "*" and rule.zone not in zones:
                problems.append(f"{where}: unknown zone {rule.zone!r}")
            try:
                guard = parse_guard(rule.guard)
            except GuardSyntaxError as err:
                problems.append(f"{where}: guard does not parse: {err}")
                continue
            for name in sorted(guard.names):
                if name not in ZONE_VARIABLES:
                    problems.append(f"{where}: unknown context name {name!r}")
            for ref in sorted(guard.sensor_refs):
                if ref not in sensors:
                    problems.append(f"{where}: unknown sensor {ref!r}")
        else:
            if not 0.0 <= rule.setting <= 1.0:
                problems.append(f"{where}: setting {rule.setting} outside [0, 1]")
    return problems


# ---------------------------------------------------------------------------
# Engine context and the four steps
# ---------------------------------------------------------------------------


@dataclass
class EngineContext:
    """Central memory: latest measure per sensor plus tick-derived facts."""

    model: SiteModel
    clock: datetime
    latest: dict[str, Measure] = field(default_factory=dict)
    occupied: dict[str, bool] = field(default_factory=dict)
    virtual: dict[str, Measure] = field(default_factory=dict)
    actuator_state: dict[str, float] = field(default_factory=dict)
    align: float = 120.0  # freshness window for virtual inputs, seconds

    @classmethod
    def from_model(cls, model: SiteModel, clock: datetime, align: float = 120.0) -> "EngineContext":
        state = {s.sensor_id: 0.0 for s in model.sensors if s.is_actuator}
        return cls(model=model, clock=clock, actuator_state=state, align=align)

    def copy(self) -> "EngineContext":
        return replace(
            self,
            latest=dict(self.latest),
            occupied=dict(self.occupied),
            virtual=dict(self.virtual),
            actuator_state=dict(self.actuator_state),
        )


def _event(kind: str, tick: datetime, **fields) -> dict:
    out = {"event": kind, "t": format_timestamp(tick)}
    out.update(fields)
    return out


def step1_load(batch: Sequence[Measure], ctx: EngineContext) -> tuple[EngineContext, list[dict]]:
    """Load new measures into central memory; latest timestamp wins."""
    ctx = ctx.copy()
    events = []
    known = ctx.model.sensors_by_id()
    for measure in batch:
        if measure.sensor_id not in known:
            events.append(
                _event("rejected-measure", ctx.clock, sensor_id=measure.sensor_id, reason="unknown sensor")
            )
            continue
        current = ctx.latest.get(measure.sensor_id)
        if current is None or measure.timestamp >= current.timestamp:
            ctx.latest[measure.sensor_id] = measure
    return ctx, events


def step2_derive(ctx: EngineContext) -> tuple[EngineContext, list[dict]]:
    """Recompute derived facts: occupancy flags and virtual sensor values."""
    ctx = ctx.copy()
    events = []
    ctx.occupied = {}
    for zone_id in sorted(ctx.model.zones_by_id()):
        schedule = ctx.model.zone_schedule(zone_id)
        ctx.occupied[zone_id] = schedule.occupied_at(ctx.clock) if schedule else False

    ctx.virtual = {}
    by_id = {v.sensor_id: v for v in ctx.model.virtual_sensors}
    horizon = ctx.align

    def resolve(sensor_id: str) -> float | None:
        got = ctx.virtual.get(sensor_id)
        if got is None:
            got = ctx.latest.get(sensor_id)
        if got is None:
            return None
        if (ctx.clock - got.timestamp).total_seconds() >= horizon:
            return None
        return got.value

    for vid in virtual_order(ctx.model):
        vs = by_id[vid]
        try:
            value = evaluate_expression(vs.expression, resolve)
        except ExpressionError as err:
            events.append(_event("diagnostic", ctx.clock, sensor_id=vid, reason=str(err)))
            continue
        if value is not None:
            ctx.virtual[vid] = Measure(vid, ctx.clock, value)
    return ctx, events


def _zone_namespace(ctx: EngineContext, zone_id: str) -> dict:
    zone = ctx.model.zones_by_id()[zone_id]
    temps = [
        ctx.latest[s.sensor_id].value
        for s in ctx.model.zone_sensors(zone_id, kind="temperature", actuators=False)
        if s.sensor_id in ctx.latest
    ]
    presences = [
        ctx.latest[s.sensor_id].value
        for s in ctx.model.zone_sensors(zone_id, kind="presence", actuators=False)
        if s.sensor_id in ctx.latest
    ]
    valves = ctx.model.zone_sensors(zone_id, kind="valve", actuators=True)
    valve_setting = ctx.actuator_state.get(valves[0].sensor_id, 0.0) if valves else 0.0
    return {
        "temperature": sum(temps) / len(temps) if temps else None,
        "presence": any(p > 0.5 for p in presences) if presences else None,
        "occupied": ctx.occupied.get(zone_id, False),
        "valve_setting": valve_setting,
        "comfort_setpoint": zone.setpoint_policy.comfort_setpoint,
        "deadband": zone.setpoint_policy.deadband,
        "frost_guard": zone.setpoint_policy.frost_guard,
    }


def step3_evaluate(ctx: EngineContext, rules: Sequence[RuleDef]) -> tuple[list[Assertion], list[dict]]:
    """Evaluate step-3 guards per zone; a true guard emits an assertion."""
    assertions = []
    events = []
    zone_ids = sorted(ctx.model.zones_by_id())

    def resolve(sensor_id: str) -> float | None:
        got = ctx.virtual.get(sensor_id) or ctx.latest.get(sensor_id)
        return got.value if got is not None else None

    for rule in rules:
        if rule.step != 3:
            continue
        guard = parse_guard(rule.guard)
        targets = zone_ids if rule.zone == "*" else [rule.zone]
        for zone_id in targets:
            ns = _zone_namespace(ctx, zone_id)
            try:
                fired = guard.evaluate(ns, resolve)
            except MissingInput as missing:
                events.append(
                    _event(
                        "diagnostic", ctx.clock, rule=rule.rule_id, zone=zone_id,
                        reason=f"missing input {missing.name!r}",
                    )
                )
                continue
            if fired:
                assertion = Assertion(
                    rule.scenario_id, zone_id, rule.action, rule.priority, rule.rule_id, ctx.clock
                )
                assertions.append(assertion)
                events.append(
                    _event(
                        "assertion", ctx.clock, rule=rule.rule_id, zone=zone_id,
                        action=rule.action, priority=rule.priority,
                    )
                )
    return assertions, events


def step4_resolve(
    assertions: Sequence[Assertion], policy: ResolutionPolicy
) -> tuple[list[Command], list[dict]]:
    """Resolve conflicting assertions per zone and map winners to commands.

    heat vs chill: the strictly higher maximum priority wins; an exact tie
    yields no command and a conflict log entry.
    """
    commands = []
    events = []
    zones = sorted({a.zone_ref for a in assertions})
    for zone_id in zones:
        here = [a for a in assertions if a.zone_ref == zone_id]
        tick = here[0].tick
        heat = [a for a in here if a.action == "heat"]
        chill = [a for a in here if a.action == "chill"]
        winner = None
        if heat and chill:
            heat_p = max(a.priority for a in heat)
            chill_p = max(a.priority for a in chill)
            if heat_p == chill_p:
                events.append(
                    _event("conflict", tick, zone=zone_id, heat_priority=heat_p, chill_priority=chill_p)
                )
                continue
            winner = "heat" if heat_p > chill_p else "chill"
        elif heat:
            winner = "heat"
        elif chill:
            winner = "chill"

        if winner == "chill":
            # chill assertions exist for conflict handling; no chiller plant is modelled
            events.append(_event("no-actuator", tick, zone=zone_id, action="chill"))
            continue
        if winner == "heat":
            actuator = policy.actuator_by_zone.get(zone_id)
            if actuator is None:
                events.append(_event("no-actuator", tick, zone=zone_id, action="heat"))
                continue
            provenance = tuple(sorted(heat, key=lambda a: (-a.priority, a.reason)))
            command = Command(actuator, policy.heat_setting, zone_id, tick, provenance)
            commands.append(command)
            events.append(
                _event(
                    "command", tick, zone=zone_id, actuator=actuator,
                    setting=policy.heat_setting, reason=provenance[0].reason,
                )
            )
    return commands, events


def run_flow(
    batch: Sequence[Measure],
    rules: Sequence[RuleDef],
    policy: ResolutionPolicy,
    ctx: EngineContext,
) -> tuple[list[Command], list[dict], EngineContext]:
    """Compose steps 1-4 for one tick; pure in (ctx, batch, rules, policy, clock).

    Zones whose valve is open but received no heat assertion this tick get
    an explicit 0.0 command, so the engine owns the full actuator state and
    heaters cannot latch on.
    """
    problems = validate_rules(rules, ctx.model)
    if problems:
        raise RuleValidationError(problems)

    ctx1, events = step1_load(batch, ctx)
    ctx2, ev2 = step2_derive(ctx1)
    assertions, ev3 = step3_evaluate(ctx2, [r for r in rules if r.step == 3])
    commands, ev4 = step4_resolve(assertions, policy)
    events += ev2 + ev3 + ev4

    heated = {c.zone_ref for c in commands}
    for zone_id in sorted(policy.actuator_by_zone):
        actuator = policy.actuator_by_zone[zone_id]
        if zone_id not in heated and ctx2.actuator_state.get(actuator, 0.0) > 0.0:
            command = Command(actuator, 0.0, zone_id, ctx2.clock)
            commands.append(command)
            events.append(
                _event("command", ctx2.clock, zone=zone_id, actuator=actuator, setting=0.0, reason="heat-off")
            )

    ctx3 = ctx2.copy()
    for command in commands:
        ctx3.actuator_state[command.actuator_ref] = command.setting
    return commands, events, ctx3


class Engine:
    """Stateful wrapper: validates rules once, then ticks strictly sequentially."""

    def __init__(
        self,
        model: SiteModel,
        rules: Sequence[RuleDef],
        policy: ResolutionPolicy | None = None,
        start: datetime | None = None,
        align: float = 120.0,
    ):
        problems = validate_rules(rules, model)
        if problems:
            raise RuleValidationError(problems)
        self.model = model
        self.rules = list(rules)
        self.policy = policy if policy is not None else ResolutionPolicy.from_model(model, rules)
        self.ctx = EngineContext.from_model(model, start, align=align) if start else None

    def tick(self, batch: Sequence[Measure], now: datetime) -> tuple[list[Command], list[dict]]:
        if self.ctx is None:
            self.ctx = EngineContext.from_model(self.model, now)
        self.ctx.clock = now
        commands, events, self.ctx = run_flow(batch, self.rules, self.policy, self.ctx)
        return commands, events
