"""Network, demand and bounds records for the spatial market model.

Service kinds: ``P`` production, ``I``/``X`` storage injection/extraction,
``L``/``R`` liquefaction/regasification (all located at nodes), ``A``
pipeline and ``B`` LNG shipping (located at directed arcs).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Union

from .errors import InvalidAnchor, InvariantViolation

NODE_SERVICES = ("P", "I", "X", "L", "R")
ARC_SERVICES = ("A", "B")
SERVICE_KINDS = NODE_SERVICES + ARC_SERVICES

Arc = tuple[str, str]
Location = Union[str, Arc]
INF = math.inf


@dataclass(frozen=True)
class Service:
    kind: str
    location: Location
    cap: Mapping[str, float] = field(default_factory=dict)
    cap_total: float = INF
    linc: Mapping[str, float] = field(default_factory=dict)
    quac: Mapping[str, float] = field(default_factory=dict)

    def cap_at(self, t: str) -> float:
        return float(self.cap.get(t, INF))

    def linc_at(self, t: str) -> float:
        return float(self.linc.get(t, 0.0))

    def quac_at(self, t: str) -> float:
        return float(self.quac.get(t, 0.0))


@dataclass(frozen=True)
class Trader:
    name: str
    production: tuple[str, ...] = ()
    storage: tuple[str, ...] = ()
    consumers: tuple[str, ...] = ()
    pipelines: tuple[Arc, ...] = ()
    ships: tuple[Arc, ...] = ()

    def touched_nodes(self) -> set[str]:
        out = set(self.production) | set(self.storage) | set(self.consumers)
        for n, m in self.pipelines + self.ships:
            out.update((n, m))
        return out


@dataclass(frozen=True)
class MarketNetwork:
    nodes: tuple[str, ...]
    periods: tuple[str, ...]
    traders: tuple[Trader, ...]
    consumers: tuple[str, ...]
    services: Mapping[tuple[str, Location], Service]

    def __post_init__(self):
        _check_unique(self.nodes, "nodes")
        _check_unique(self.periods, "periods")
        _check_unique([f.name for f in self.traders], "traders")
        _check_unique(self.consumers, "consumers")
        nodes = set(self.nodes)
        for n in self.consumers:
            if n not in nodes:
                raise InvariantViolation(f"consumer node {n!r} is not a declared node", "consumers")
        for (kind, loc), svc in self.services.items():
            where = f"services.{kind}[{_fmt_loc(loc)}]"
            if kind not in SERVICE_KINDS or svc.kind != kind or svc.location != loc:
                raise InvariantViolation(f"malformed service key {kind}/{loc}", where)
            ends = loc if kind in ARC_SERVICES else (loc,)
            for n in ends:
                if n not in nodes:
                    raise InvariantViolation(f"{where} references unknown node {n!r}", where)
            if kind in ARC_SERVICES and loc[0] == loc[1]:
                raise InvariantViolation(f"{where} is a self-loop", where)
            for name, values in (("cap", svc.cap), ("linc", svc.linc), ("quac", svc.quac)):
                for t, v in values.items():
                    if t not in self.periods:
                        raise InvariantViolation(f"{where}.{name} names unknown period {t!r}", f"{where}.{name}")
                    if not v >= 0:
                        raise InvariantViolation(f"{where}.{name}[{t}] = {v} must be >= 0", f"{where}.{name}")
            if svc.quac and kind != "P":
                raise InvariantViolation(f"{where}: quadratic cost only applies to production", f"{where}.quac")
            if not svc.cap_total >= 0:
                raise InvariantViolation(f"{where}.cap_total = {svc.cap_total} must be >= 0", f"{where}.cap_total")
        for f in self.traders:
            for n in f.touched_nodes():
                if n not in nodes:
                    raise InvariantViolation(f"trader {f.name!r} references unknown node {n!r}", f"traders.{f.name}")

    # --- lookups ---------------------------------------------------------

    def service(self, kind: str, loc: Location) -> Service | None:
        return self.services.get((kind, loc))

    def trader(self, name: str) -> Trader:
        for f in self.traders:
            if f.name == name:
                return f
        raise KeyError(name)

    def trader_nodes(self, f: Trader) -> tuple[str, ...]:
        """N(f) in the network's node order."""
        touched = f.touched_nodes()
        return tuple(n for n in self.nodes if n in touched)

    def markets(self) -> list[tuple[str, str]]:
        return [(n, t) for t in self.periods for n in self.consumers]

    def traders_at(self, n: str) -> list[Trader]:
        return [f for f in self.traders if n in f.consumers]

    def sales_keys(self) -> list[tuple[str, str, str]]:
        return [(f.name, n, t) for t in self.periods for f in self.traders for n in f.consumers]

    def reach_problems(self) -> list[str]:
        """Trader reach entries that point at absent services."""
        out = []
        consumers = set(self.consumers)
        for f in self.traders:
            for n in f.production:
                if self.service("P", n) is None:
                    out.append(f"trader {f.name!r}: no producer at {n!r}")
            for n in f.storage:
                if self.service("I", n) is None and self.service("X", n) is None:
                    out.append(f"trader {f.name!r}: no storage at {n!r}")
            for n in f.consumers:
                if n not in consumers:
                    out.append(f"trader {f.name!r}: no consumer at {n!r}")
            for arc in f.pipelines:
                if self.service("A", arc) is None:
                    out.append(f"trader {f.name!r}: no pipeline {_fmt_loc(arc)}")
            for arc in f.ships:
                if self.service("B", arc) is None:
                    out.append(f"trader {f.name!r}: no LNG route {_fmt_loc(arc)}")
                if self.service("L", arc[0]) is None:
                    out.append(f"trader {f.name!r}: no liquefaction at {arc[0]!r}")
                if self.service("R", arc[1]) is None:
                    out.append(f"trader {f.name!r}: no regasification at {arc[1]!r}")
        return out


def _check_unique(items, what: str) -> None:
    seen = set()
    for x in items:
        if x in seen:
            raise InvariantViolation(f"duplicate entry {x!r} in {what}", what)
        seen.add(x)


def _fmt_loc(loc: Location) -> str:
    return loc if isinstance(loc, str) else f"{loc[0]}->{loc[1]}"


# --- demand -----------------------------------------------------------------

@dataclass(frozen=True)
class DemandAnchor:
    s0: float
    lambda0: float
    eta: float

    def __post_init__(self):
        if not self.s0 > 0:
            raise InvalidAnchor(f"anchor consumption must be positive, got {self.s0}")
        if not self.lambda0 >= 0:
            raise InvalidAnchor(f"anchor price must be non-negative, got {self.lambda0}")
        if not self.eta < 0:
            raise InvalidAnchor(f"price elasticity must be negative, got {self.eta}")


def inverse_demand_coeffs(anchor: DemandAnchor) -> tuple[float, float]:
    """``(intercept, slope)`` of the affine inverse demand through the anchor."""
    slope = anchor.lambda0 / (anchor.s0 * anchor.eta)
    intercept = anchor.lambda0 - slope * anchor.s0
    return intercept, slope


@dataclass
class SalesBounds:
    """Per-sale bounds; missing lower is 0 and missing upper is +inf.

    ``trader_cap`` caps a trader's total sales per period, keyed ``(f, t)``.
    """

    lower: dict[tuple[str, str, str], float] = field(default_factory=dict)
    upper: dict[tuple[str, str, str], float] = field(default_factory=dict)
    fixed_consumption: dict[tuple[str, str], float] = field(default_factory=dict)
    trader_cap: dict[tuple[str, str], float] = field(default_factory=dict)

    def __post_init__(self):
        for key, lo in self.lower.items():
            if lo < 0:
                raise InvariantViolation(f"negative lower bound {lo} for {key}", "lower")
            if lo > self.upper.get(key, INF):
                raise InvariantViolation(f"lower bound above upper bound for {key}", "lower")
        for key, hi in self.upper.items():
            if hi < 0:
                raise InvariantViolation(f"negative upper bound {hi} for {key}", "upper")


@dataclass
class Equilibrium:
    lam: dict[tuple[str, str], float]
    q_sales: dict[tuple[str, str, str], float]
    s: dict[tuple[str, str], float]
    phi: dict[tuple[str, str, str], float]
    phi_storage: dict[tuple[str, str], float]
    flows: dict[tuple, float]
    alpha: dict[tuple, float]
    alpha_total: dict[tuple, float]
    shadow: dict[tuple, float] = field(default_factory=dict)
