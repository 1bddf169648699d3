"""Assemble the network market model as a mixed LCP and read solutions back.

Every trader ``f`` solves a profit-maximisation problem whose KKT conditions
become complementarity rows. With ``beta = -slope > 0`` of the inverse demand
the rows are

* sales ``qC[f,n,t]``:        ``-lambda + theta*beta*qC + phiN (+ shadow terms) >= 0``
* production ``qP[f,n,t]``:   ``linc + quac*qP + fees - phiN >= 0``
* injection ``qI[f,n,t]``:    ``linc + fees + phiN - phiS >= 0``
* extraction ``qX[f,n,t]``:   ``linc + fees - phiN + phiS >= 0``
* pipeline ``qA[f,n,m,t]``:   ``linc + fees + phiN[n] - phiN[m] >= 0``
* LNG ``qB[f,n,m,t]``:        liquefaction + shipping + regasification costs
  and fees, ``+ phiN[n] - phiN[m] >= 0``
* node balance ``phiN``:      supply minus disposal ``>= 0``
* storage balance ``phiS``:   ``sum_t qI - sum_t qX >= 0``
* capacity ``alpha``:         ``cap - usage >= 0`` (rows omitted for infinite caps)
* market clearing ``lambda``: ``sum_f qC + (lambda - intercept)/beta >= 0``

The clearing row is divided by ``beta`` so that every off-diagonal coupling
is a skew pair and the matrix is positive semidefinite. When the anchor
price is zero (``beta = 0`` and intercept 0) the row uses ``beta = 1``
instead, which forces ``lambda = 0`` all the same.
"""

from __future__ import annotations

import heapq
import math
from collections import defaultdict
from typing import Hashable, Mapping, Union

import numpy as np

from .errors import (
    InfeasibleBounds,
    InvariantViolation,
    LabelMissing,
    MissingAnchor,
    ModelError,
    UnreachableService,
)
from .lcp import LcpSolution, Mlcp
from .network import (
    DemandAnchor,
    Equilibrium,
    MarketNetwork,
    SalesBounds,
    inverse_demand_coeffs,
)

Anchors = Mapping[tuple[str, str], DemandAnchor]
Theta = Union[float, Mapping[tuple[str, str, str], float]]

FLOW_KINDS = ("qP", "qI", "qX", "qA", "qB", "qC")


class _Builder:
    def __init__(self) -> None:
        self.labels: list[Hashable] = []
        self.pos: dict[Hashable, int] = {}
        self.free: list[int] = []
        self.entries: list[tuple[int, int, float]] = []
        self.const: dict[int, float] = defaultdict(float)

    def var(self, label: Hashable, free: bool = False) -> int:
        i = len(self.labels)
        self.labels.append(label)
        self.pos[label] = i
        if free:
            self.free.append(i)
        return i

    def coef(self, row: Hashable, col: Hashable, value: float) -> None:
        if value != 0.0:
            self.entries.append((self.pos[row], self.pos[col], float(value)))

    def rhs(self, row: Hashable, value: float) -> None:
        if value != 0.0:
            self.const[self.pos[row]] += float(value)

    def build(self) -> Mlcp:
        d = len(self.labels)
        m = np.zeros((d, d))
        if self.entries:
            r, c, v = (np.array(x) for x in zip(*self.entries))
            np.add.at(m, (r.astype(int), c.astype(int)), v)
        b = np.zeros(d)
        for i, v in self.const.items():
            b[i] = v
        return Mlcp(m=m, b=b, free=frozenset(self.free), labels=tuple(self.labels))


def _theta_at(theta: Theta, key: tuple[str, str, str]) -> float:
    if isinstance(theta, (int, float)):
        value = float(theta)
    else:
        if key not in theta:
            raise InvariantViolation(f"no market power parameter for {key}", "theta")
        value = float(theta[key])
    if not value >= 0:
        raise InvariantViolation(f"market power parameter {value} for {key} must be >= 0", "theta")
    return value


def _demand(anchor: DemandAnchor) -> tuple[float, float]:
    """``(intercept, beta)`` with the zero-price convention of the module docstring."""
    intercept, slope = inverse_demand_coeffs(anchor)
    beta = -slope
    if beta == 0.0:
        return 0.0, 1.0
    return intercept, beta


def _assemble(
    net: MarketNetwork,
    anchors: Anchors,
    theta: Theta,
    fixed_sales: Mapping[tuple[str, str, str], float] | None = None,
    bounds: SalesBounds | None = None,
) -> Mlcp:
    problems = net.reach_problems()
    if problems:
        raise UnreachableService("; ".join(problems))
    demand = {}
    for n, t in net.markets():
        if (n, t) not in anchors:
            raise MissingAnchor(f"no demand anchor for node {n!r} in period {t!r}")
        demand[n, t] = _demand(anchors[n, t])

    bld = _Builder()
    usage: dict[tuple, list[Hashable]] = defaultdict(list)  # (kind, loc, t) -> flow labels
    periods = net.periods

    # --- variables -------------------------------------------------------
    for f in net.traders:
        fn = f.name
        storage = [n for n in f.storage if net.service("I", n) or net.service("X", n)]
        for t in periods:
            for n in f.production:
                bld.var(("qP", fn, n, t))
                usage["P", n, t].append(("qP", fn, n, t))
            for n in storage:
                if net.service("I", n):
                    bld.var(("qI", fn, n, t))
                    usage["I", n, t].append(("qI", fn, n, t))
                if net.service("X", n):
                    bld.var(("qX", fn, n, t))
                    usage["X", n, t].append(("qX", fn, n, t))
            for n, m in f.pipelines:
                bld.var(("qA", fn, n, m, t))
                usage["A", (n, m), t].append(("qA", fn, n, m, t))
            for n, m in f.ships:
                label = ("qB", fn, n, m, t)
                bld.var(label)
                usage["B", (n, m), t].append(label)
                usage["L", n, t].append(label)
                usage["R", m, t].append(label)
            for n in f.consumers:
                bld.var(("qC", fn, n, t))
            for n in net.trader_nodes(f):
                bld.var(("phiN", fn, n, t))
        for n in storage:
            bld.var(("phiS", fn, n))

    cap_rows = []
    total_rows = defaultdict(list)
    for (kind, loc), svc in net.services.items():
        for t in periods:
            users = usage.get((kind, loc, t))
            if not users:
                continue
            if math.isfinite(svc.cap_at(t)):
                label = ("alpha", kind, loc, t)
                bld.var(label)
                cap_rows.append((label, svc.cap_at(t), users))
            if math.isfinite(svc.cap_total):
                total_rows[kind, loc].extend(users)
    for (kind, loc), users in total_rows.items():
        label = ("alphaT", kind, loc)
        bld.var(label)
        cap_rows.append((label, net.services[kind, loc].cap_total, users))

    for n, t in net.markets():
        bld.var(("lambda", n, t))

    sales = [key for key in net.sales_keys()]
    if fixed_sales is not None:
        for key in sales:
            bld.var(("xi",) + key, free=True)
    if bounds is not None:
        for key in sales:
            if bounds.lower.get(key, 0.0) > 0.0:
                bld.var(("xi_lo",) + key)
            if math.isfinite(bounds.upper.get(key, math.inf)):
                bld.var(("xi_hi",) + key)
        for (n, t) in bounds.fixed_consumption:
            if (n, t) not in demand:
                raise InvariantViolation(f"fixed consumption at non-market {(n, t)}", "fixed_consumption")
            bld.var(("chi", n, t), free=True)
        for (fn, t), cap in bounds.trader_cap.items():
            if math.isfinite(cap):
                bld.var(("mu", fn, t))

    # --- flow rows -------------------------------------------------------
    def fee(row: Hashable, kind: str, loc, t: str) -> float:
        """Couple a flow row to the capacity duals of one service; return its linear cost."""
        svc = net.service(kind, loc)
        if ("alpha", kind, loc, t) in bld.pos:
            bld.coef(row, ("alpha", kind, loc, t), 1.0)
            bld.coef(("alpha", kind, loc, t), row, -1.0)
        if ("alphaT", kind, loc) in bld.pos:
            bld.coef(row, ("alphaT", kind, loc), 1.0)
            bld.coef(("alphaT", kind, loc), row, -1.0)
        return svc.linc_at(t)

    def balance(row: Hashable, f: str, n: str, t: str, sign: float) -> None:
        """``sign=+1`` for gas arriving at node n, ``-1`` for gas leaving it."""
        phi = ("phiN", f, n, t)
        bld.coef(row, phi, -sign)
        bld.coef(phi, row, sign)

    for f in net.traders:
        fn = f.name
        for t in periods:
            for n in f.production:
                row = ("qP", fn, n, t)
                bld.rhs(row, fee(row, "P", n, t))
                bld.coef(row, row, net.service("P", n).quac_at(t))
                balance(row, fn, n, t, +1.0)
            for n in f.storage:
                for kind, sign in (("I", -1.0), ("X", +1.0)):
                    row = ("q" + kind, fn, n, t)
                    if row not in bld.pos:
                        continue
                    bld.rhs(row, fee(row, kind, n, t))
                    balance(row, fn, n, t, sign)
                    # storage balance: injections add, extractions remove
                    bld.coef(row, ("phiS", fn, n), sign)
                    bld.coef(("phiS", fn, n), row, -sign)
            for n, m in f.pipelines:
                row = ("qA", fn, n, m, t)
                bld.rhs(row, fee(row, "A", (n, m), t))
                balance(row, fn, n, t, -1.0)
                balance(row, fn, m, t, +1.0)
            for n, m in f.ships:
                row = ("qB", fn, n, m, t)
                cost = fee(row, "L", n, t) + fee(row, "B", (n, m), t) + fee(row, "R", m, t)
                bld.rhs(row, cost)
                balance(row, fn, n, t, -1.0)
                balance(row, fn, m, t, +1.0)
            for n in f.consumers:
                row = ("qC", fn, n, t)
                _, beta = demand[n, t]
                bld.coef(row, row, _theta_at(theta, (fn, n, t)) * beta)
                balance(row, fn, n, t, -1.0)
                bld.coef(row, ("lambda", n, t), -1.0)
                bld.coef(("lambda", n, t), row, 1.0)

    for label, cap, _users in cap_rows:
        bld.rhs(label, cap)

    for n, t in net.markets():
        intercept, beta = demand[n, t]
        row = ("lambda", n, t)
        bld.coef(row, row, 1.0 / beta)
        bld.rhs(row, -intercept / beta)

    # --- augmentations ---------------------------------------------------
    if fixed_sales is not None:
        for key in sales:
            value = float(fixed_sales.get(key, 0.0))
            if not value >= 0:
                raise InvariantViolation(f"negative reference sales {value} for {key}", "q_ref")
            _shadow(bld, ("xi",) + key, ("qC",) + key, sign=1.0, const=value)
    if bounds is not None:
        _check_bounds(net, bounds)
        for key in sales:
            if ("xi_lo",) + key in bld.pos:
                _shadow(bld, ("xi_lo",) + key, ("qC",) + key, sign=-1.0, const=-bounds.lower[key])
            if ("xi_hi",) + key in bld.pos:
                _shadow(bld, ("xi_hi",) + key, ("qC",) + key, sign=1.0, const=bounds.upper[key])
        for (n, t), s0 in bounds.fixed_consumption.items():
            label = ("chi", n, t)
            bld.rhs(label, s0)
            for f in net.traders_at(n):
                _shadow(bld, label, ("qC", f.name, n, t), sign=1.0, const=0.0)
        for (fn, t), cap in bounds.trader_cap.items():
            if not math.isfinite(cap):
                continue
            label = ("mu", fn, t)
            bld.rhs(label, cap)
            for n in net.trader(fn).consumers:
                _shadow(bld, label, ("qC", fn, n, t), sign=1.0, const=0.0)

    return bld.build()


def _shadow(bld: _Builder, dual: Hashable, sale: Hashable, sign: float, const: float) -> None:
    """Row ``dual``: ``const - sign*q``; the sales row gains ``+sign*dual``."""
    bld.coef(sale, dual, sign)
    bld.coef(dual, sale, -sign)
    if const:
        bld.rhs(dual, const)


def _check_bounds(net: MarketNetwork, bounds: SalesBounds) -> None:
    for (n, t), s0 in bounds.fixed_consumption.items():
        keys = [(f.name, n, t) for f in net.traders_at(n)]
        lo = sum(bounds.lower.get(k, 0.0) for k in keys)
        hi = sum(bounds.upper.get(k, math.inf) for k in keys)
        scale = max(1.0, abs(s0))
        if lo > s0 + 1e-12 * scale or hi < s0 - 1e-12 * scale:
            raise InfeasibleBounds(
                f"consumption {s0} at {(n, t)} lies outside the sum of sales bounds [{lo}, {hi}]"
            )


# --- public assembly entry points -------------------------------------------

def assemble_base(net: MarketNetwork, anchors: Anchors, theta: Theta) -> Mlcp:
    return _assemble(net, anchors, theta)


def assemble_fixed_sales(
    net: MarketNetwork,
    anchors: Anchors,
    theta: Theta,
    q_ref: Mapping[tuple[str, str, str], float],
) -> Mlcp:
    """Base model plus a free dual ``xi`` per sale pinning it to ``q_ref``."""
    return _assemble(net, anchors, theta, fixed_sales=q_ref)


def assemble_bounded(net: MarketNetwork, anchors: Anchors, theta_lim: Theta, bounds: SalesBounds) -> Mlcp:
    """Base model with sales kept in ``[lower, upper]`` and optional fixed consumption."""
    return _assemble(net, anchors, theta_lim, bounds=bounds)


# --- reading solutions back ---------------------------------------------------

def extract_equilibrium(net: MarketNetwork, problem: Mlcp, sol: LcpSolution, tol: float = 1e-6) -> Equilibrium:
    if problem.labels is None:
        raise LabelMissing("problem carries no labels")
    index = problem.index
    z = sol.z

    def get(label):
        try:
            return float(z[index[label]])
        except KeyError:
            raise LabelMissing(f"label {label!r} not present in problem") from None

    lam = {(n, t): get(("lambda", n, t)) for n, t in net.markets()}
    # sales are sign-constrained, so pivoting round-off below zero is dropped
    q_sales = {key: _snap(get(("qC",) + key), tol) for key in net.sales_keys()}
    s = {nt: 0.0 for nt in lam}
    for (f, n, t), q in q_sales.items():
        s[n, t] += q
    phi = {}
    phi_storage = {}
    flows = {}
    alpha = {}
    alpha_total = {}
    shadow = {}
    for label, i in index.items():
        kind = label[0]
        if kind == "phiN":
            phi[label[1:]] = float(z[i])
        elif kind == "phiS":
            phi_storage[label[1:]] = float(z[i])
        elif kind in FLOW_KINDS:
            flows[label] = float(z[i])
        elif kind == "alpha":
            alpha[label[1:]] = float(z[i])
        elif kind == "alphaT":
            alpha_total[label[1:]] = float(z[i])
        elif kind in ("xi", "xi_lo", "xi_hi", "chi", "mu"):
            shadow[label] = float(z[i])

    # the clearing row's quantity part must be the recomputed consumption
    for (n, t), value in s.items():
        row = index[("lambda", n, t)]
        cols = [index[("qC", f.name, n, t)] for f in net.traders_at(n)]
        from_row = float(problem.m[row, cols] @ z[cols]) if cols else 0.0
        if abs(from_row - value) > tol * max(1.0, abs(value)):
            raise ModelError(f"consumption mismatch at {(n, t)}: {from_row} vs {value}")
    return Equilibrium(
        lam=lam,
        q_sales=q_sales,
        s=s,
        phi=phi,
        phi_storage=phi_storage,
        flows=flows,
        alpha=alpha,
        alpha_total=alpha_total,
        shadow=shadow,
    )


def _snap(value: float, tol: float) -> float:
    return 0.0 if -tol <= value < 0.0 else value


def delivery_costs(net: MarketNetwork, eq: Equilibrium, tol: float = 1e-9) -> dict[tuple[str, str, str], float]:
    """Cheapest cost for each trader to place one more unit at each consumer node.

    Shortest paths over the trader's own production, storage, pipeline and
    LNG options, priced at linear cost plus marginal quadratic cost plus the
    equilibrium congestion fees. Used where the nodal dual is not pinned down
    because the trader sells nothing there. Nodes the trader cannot supply
    get ``inf``.
    """
    out = {}

    def fees(kind, loc, t):
        svc = net.service(kind, loc)
        return (
            svc.linc_at(t)
            + eq.alpha.get((kind, loc, t), 0.0)
            + eq.alpha_total.get((kind, loc), 0.0)
        )

    for f in net.traders:
        fn = f.name
        edges: dict = defaultdict(list)
        source = ("src",)
        for t in net.periods:
            for n in f.production:
                q = eq.flows.get(("qP", fn, n, t), 0.0)
                cost = fees("P", n, t) + net.service("P", n).quac_at(t) * q
                edges[source].append(((n, t), cost))
            for n, m in f.pipelines:
                edges[n, t].append(((m, t), fees("A", (n, m), t)))
            for n, m in f.ships:
                cost = fees("L", n, t) + fees("B", (n, m), t) + fees("R", m, t)
                edges[n, t].append(((m, t), cost))
            for n in f.storage:
                if net.service("I", n):
                    edges[n, t].append((("S", n), fees("I", n, t)))
                if net.service("X", n):
                    edges[("S", n)].append(((n, t), fees("X", n, t)))
        for n in f.storage:
            stored = sum(
                eq.flows.get(("qI", fn, n, t), 0.0) - eq.flows.get(("qX", fn, n, t), 0.0)
                for t in net.periods
            )
            if stored > tol:
                edges[source].append((("S", n), eq.phi_storage.get((fn, n), 0.0)))
        dist = _dijkstra(edges, source)
        for t in net.periods:
            for n in f.consumers:
                out[fn, n, t] = dist.get((n, t), math.inf)
    return out


def _dijkstra(edges: Mapping, source) -> dict:
    dist = {source: 0.0}
    heap = [(0.0, 0, source)]
    counter = 1
    done = set()
    while heap:
        d, _, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        for v, w in edges.get(u, ()):
            nd = d + w
            if nd < dist.get(v, math.inf):
                dist[v] = nd
                heapq.heappush(heap, (nd, counter, v))
                counter += 1
    return dist
