"""Seeded synthetic networks and reference data.

Every generator takes a seed (or a ``numpy.random.Generator``) and returns a
``Fixture`` whose ``truth`` is a solved base equilibrium, so callers can both
calibrate against it and check what was recovered.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .calibration import RawReference, ReferenceData
from .lcp import solve_mlcp
from .model import assemble_base, extract_equilibrium
from .network import DemandAnchor, Equilibrium, MarketNetwork, Service, Trader, inverse_demand_coeffs


@dataclass
class Fixture:
    net: MarketNetwork
    anchors: dict[tuple[str, str], DemandAnchor]
    theta: dict[tuple[str, str, str], float]
    truth: Equilibrium

    def true_anchors(self) -> dict[tuple[str, str], DemandAnchor]:
        """The equilibrium point on each demand curve, re-expressed as an anchor."""
        out = {}
        for nt, a in self.anchors.items():
            _, slope = inverse_demand_coeffs(a)
            s = self.truth.s[nt]
            lam = self.truth.lam[nt]
            out[nt] = DemandAnchor(s, lam, lam / (s * slope))
        return out

    def true_sales(self) -> dict[tuple[str, str, str], float]:
        """Equilibrium sales with solver round-off below zero removed."""
        return {k: max(v, 0.0) for k, v in self.truth.q_sales.items()}

    def exact_reference(self, lambda_pad: float = 0.0) -> ReferenceData:
        """References equal to the equilibrium, with boxes tight around them."""
        anchors = self.true_anchors()
        lam = {nt: a.lambda0 for nt, a in anchors.items()}
        eta = {nt: a.eta for nt, a in anchors.items()}
        return ReferenceData.build(
            lam,
            self.true_sales(),
            eta,
            lambda_bounds={nt: (v * (1 - lambda_pad), v * (1 + lambda_pad)) for nt, v in lam.items()},
            eta_bounds={nt: (v, v) for nt, v in eta.items()},
        )

    def perturbed_raw(self, rng: np.random.Generator, spread: float = 0.1) -> RawReference:
        """Sales and prices scaled by independent factors in ``[1-spread, 1+spread]``."""
        anchors = self.true_anchors()
        q = {k: v * rng.uniform(1 - spread, 1 + spread) for k, v in self.true_sales().items()}
        lam = {nt: a.lambda0 * rng.uniform(1 - spread, 1 + spread) for nt, a in anchors.items()}
        eta = {nt: a.eta for nt, a in anchors.items()}
        s = dict(self.truth.s)
        produced: dict[tuple[str, str], float] = {}
        for (f, n, t), v in self.true_sales().items():
            produced[f, t] = produced.get((f, t), 0.0) + v
        p = {ft: v * 1.2 for ft, v in produced.items()}
        return RawReference(lambda_data=lam, q_data=q, s_data=s, eta_data=eta, p_data=p)


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _solve_truth(net, anchors, theta) -> Equilibrium:
    problem = assemble_base(net, anchors, theta)
    return extract_equilibrium(net, problem, solve_mlcp(problem))


def _well_separated(eq: Equilibrium, rel: float = 1e-3, all_active: bool = False) -> bool:
    """Every sale is clearly zero or clearly positive and every market trades.

    With ``all_active`` every sale must be clearly positive, so that every
    market power parameter is identifiable from the equilibrium.
    """
    for (f, n, t), q in eq.q_sales.items():
        s = eq.s[n, t]
        if s <= 0 or eq.lam[n, t] <= 0:
            return False
        if (all_active or q > 1e-9 * max(1.0, s)) and q < rel * s:
            return False
    return True


# --- single market ----------------------------------------------------------------

def single_market(seed, n_traders: int | None = None, all_active: bool = False) -> Fixture:
    """One consumer node fed by 1-4 traders, each with its own producer and pipeline."""
    rng = _rng(seed)
    while True:
        k = int(n_traders or rng.integers(1, 5))
        nodes = ("M",) + tuple(f"P{i}" for i in range(k))
        services = {}
        traders = []
        for i in range(k):
            p = f"P{i}"
            services["P", p] = Service("P", p, linc={"t1": float(rng.uniform(40, 90))})
            services["A", (p, "M")] = Service("A", (p, "M"), linc={"t1": float(rng.uniform(0, 10))})
            traders.append(Trader(f"F{i}", production=(p,), consumers=("M",), pipelines=((p, "M"),)))
        net = MarketNetwork(nodes, ("t1",), tuple(traders), ("M",), services)
        anchors = {("M", "t1"): DemandAnchor(
            float(rng.uniform(20, 100)), float(rng.uniform(100, 200)), float(rng.uniform(-1.0, -0.2))
        )}
        theta = {(f.name, "M", "t1"): float(rng.uniform(0, 1)) for f in traders}
        eq = _solve_truth(net, anchors, theta)
        if _well_separated(eq, all_active=all_active):
            return Fixture(net, anchors, theta, eq)


# --- two nodes ------------------------------------------------------------------

def two_node_network(rng: np.random.Generator, periods=("t1", "t2")) -> MarketNetwork:
    """Nodes n and m, each with a producer, storage, LNG terminals and consumers.

    Trader Fn owns the producer at n and Fm the one at m; both can use the
    pipelines and LNG routes in either direction and store at their home node.
    """
    def per_t(lo, hi):
        return {t: float(rng.uniform(lo, hi)) for t in periods}

    services = {}
    for node in ("n", "m"):
        services["P", node] = Service("P", node, linc=per_t(60, 120), quac={t: float(rng.uniform(0, 0.3)) for t in periods})
        services["I", node] = Service("I", node, linc=per_t(1, 4))
        services["X", node] = Service("X", node, linc=per_t(1, 4))
        services["L", node] = Service("L", node, linc=per_t(5, 15))
        services["R", node] = Service("R", node, linc=per_t(3, 8))
    for arc in (("n", "m"), ("m", "n")):
        services["A", arc] = Service("A", arc, linc=per_t(4, 12))
        services["B", arc] = Service("B", arc, linc=per_t(4, 12))
    arcs = (("n", "m"), ("m", "n"))
    traders = tuple(
        Trader(f"F{node}", production=(node,), storage=(node,), consumers=("n", "m"), pipelines=arcs, ships=arcs)
        for node in ("n", "m")
    )
    return MarketNetwork(("n", "m"), tuple(periods), traders, ("n", "m"), services)


def two_node(seed, all_active: bool = False) -> Fixture:
    rng = _rng(seed)
    while True:
        net = two_node_network(rng)
        anchors = {
            nt: DemandAnchor(float(rng.uniform(30, 120)), float(rng.uniform(180, 300)), float(rng.uniform(-0.8, -0.3)))
            for nt in net.markets()
        }
        theta = {k: float(rng.uniform(0, 1)) for k in net.sales_keys()}
        eq = _solve_truth(net, anchors, theta)
        if _well_separated(eq, all_active=all_active):
            return Fixture(net, anchors, theta, eq)


# --- general meshed networks ---------------------------------------------------------

def _mesh_arcs(rng: np.random.Generator, nodes: list[str], extra: int) -> list[tuple[str, str]]:
    """Bidirectional ring plus random chords, returned as directed arcs."""
    pairs = set()
    k = len(nodes)
    for i in range(k):
        pairs.add(tuple(sorted((nodes[i], nodes[(i + 1) % k]))))
    while len(pairs) < k + extra:
        a, b = rng.choice(k, size=2, replace=False)
        pairs.add(tuple(sorted((nodes[a], nodes[b]))))
    arcs = []
    for a, b in sorted(pairs):
        arcs += [(a, b), (b, a)]
    return arcs


def meshed_network(
    rng: np.random.Generator,
    n_nodes: int,
    n_traders: int,
    periods=("t1", "t2"),
    n_consumers: int | None = None,
    chords: int = 5,
    n_lng: int = 2,
    n_storage: int = 2,
    reach_hops: int | None = None,
    cap_fraction: float = 0.0,
) -> MarketNetwork:
    """A random connected network with one producer node per trader.

    ``reach_hops`` limits each trader to pipelines within that many hops of
    its producer (all pipelines when ``None``). A share ``cap_fraction`` of
    pipelines gets a finite per-period capacity.
    """
    nodes = [f"N{i:02d}" for i in range(n_nodes)]
    producers = nodes[:n_traders]
    consumers = nodes[n_nodes - (n_consumers or n_nodes - n_traders // 2):]
    pipes = _mesh_arcs(rng, nodes, chords)
    lng_src = [str(x) for x in rng.choice(producers, size=min(n_lng, len(producers)), replace=False)]
    regas = [str(x) for x in rng.choice(consumers, size=min(max(2, n_lng), len(consumers)), replace=False)]
    storage_nodes = [str(x) for x in rng.choice(consumers, size=min(n_storage, len(consumers)), replace=False)]

    def per_t(lo, hi):
        return {t: float(rng.uniform(lo, hi)) for t in periods}

    services = {}
    for p in producers:
        services["P", p] = Service("P", p, linc=per_t(80, 200), quac={t: float(rng.uniform(0.0, 0.2)) for t in periods})
    for arc in pipes:
        cap = {}
        if rng.uniform() < cap_fraction:
            cap = per_t(150, 400)
        services["A", arc] = Service("A", arc, cap=cap, linc=per_t(2, 15))
    ships = []
    for src in lng_src:
        services["L", src] = Service("L", src, linc=per_t(10, 25))
        for dst in regas:
            if dst != src:
                services["B", (src, dst)] = Service("B", (src, dst), linc=per_t(5, 25))
                ships.append((src, dst))
    for dst in regas:
        services["R", dst] = Service("R", dst, linc=per_t(3, 10))
    for s in storage_nodes:
        services["I", s] = Service("I", s, linc=per_t(1, 5))
        services["X", s] = Service("X", s, linc=per_t(1, 5))

    adjacency: dict[str, list[tuple[str, str]]] = {n: [] for n in nodes}
    for a, b in pipes:
        adjacency[a].append((a, b))

    traders = []
    for i, p in enumerate(producers):
        if reach_hops is None:
            my_pipes = list(pipes)
        else:
            seen = {p}
            frontier = [p]
            my_pipes = []
            for _ in range(reach_hops):
                nxt = []
                for u in frontier:
                    for arc in adjacency[u]:
                        my_pipes.append(arc)
                        if arc[1] not in seen:
                            seen.add(arc[1])
                            nxt.append(arc[1])
                frontier = nxt
            my_pipes = sorted(set(my_pipes))
        my_ships = tuple(arc for arc in ships if arc[0] == p)
        touched = {p} | {x for arc in my_pipes for x in arc} | {arc[1] for arc in my_ships}
        traders.append(Trader(
            f"F{i}",
            production=(p,),
            storage=tuple(s for s in storage_nodes if s in touched),
            consumers=tuple(c for c in consumers if c in touched),
            pipelines=tuple(my_pipes),
            ships=my_ships,
        ))
    return MarketNetwork(tuple(nodes), tuple(periods), tuple(traders), tuple(consumers), services)


def _random_anchors(rng, net, s_range=(20, 120), lam_range=(280, 380), eta_range=(-0.6, -0.3)):
    return {
        nt: DemandAnchor(float(rng.uniform(*s_range)), float(rng.uniform(*lam_range)), float(rng.uniform(*eta_range)))
        for nt in net.markets()
    }


def ten_node(seed) -> Fixture:
    """10 nodes, 5 traders, 2 periods; a few pipelines carry finite capacities."""
    rng = _rng(seed)
    while True:
        net = meshed_network(rng, 10, 5, n_consumers=8, chords=5, n_lng=2, n_storage=2, cap_fraction=0.2)
        anchors = _random_anchors(rng, net)
        theta = {k: float(rng.uniform(0.1, 0.9)) for k in net.sales_keys()}
        eq = _solve_truth(net, anchors, theta)
        if all(eq.s[nt] > 0 and eq.lam[nt] > 0 for nt in net.markets()):
            return Fixture(net, anchors, theta, eq)


REPLICA_NODES = 43
REPLICA_ARCS = 247


def replica(seed) -> Fixture:
    """43 nodes and 247 transport arcs (pipelines plus LNG routes) over 2 periods.

    Seventeen traders each reach the pipelines within two hops of their
    producer plus their own LNG routes, which keeps the system at a few
    thousand rows.
    """
    rng = _rng(seed)
    n_lng = 8
    n_regas = 12
    while True:
        nodes = [f"N{i:02d}" for i in range(REPLICA_NODES)]
        n_pipe_pairs = (REPLICA_ARCS - n_lng * n_regas + 1) // 2
        pipes = _mesh_arcs(rng, nodes, n_pipe_pairs - REPLICA_NODES)
        # drop one directed arc if the count is odd so the total is exact
        n_ship = REPLICA_ARCS - len(pipes)
        net = _replica_network(rng, nodes, pipes, n_lng, n_regas, n_ship)
        anchors = _random_anchors(rng, net, s_range=(5, 150))
        theta = {k: float(rng.uniform(0.1, 0.9)) for k in net.sales_keys()}
        eq = _solve_truth(net, anchors, theta)
        if all(eq.s[nt] > 0 and eq.lam[nt] > 0 for nt in net.markets()):
            return Fixture(net, anchors, theta, eq)


def _replica_network(rng, nodes, pipes, n_lng, n_regas, n_ship, hops: int = 2) -> MarketNetwork:
    periods = ("t1", "t2")
    n_traders = 17
    # producers spread evenly around the ring so every node is a few hops from one
    producers = [nodes[round(i * len(nodes) / n_traders)] for i in range(n_traders)]
    consumers = [n for n in nodes if n not in producers] + [producers[-1]]
    lng_src = producers[:n_lng]
    regas = [str(x) for x in rng.choice(consumers, size=n_regas, replace=False)]
    storage_nodes = [str(x) for x in rng.choice(consumers, size=8, replace=False)]

    def per_t(lo, hi):
        return {t: float(rng.uniform(lo, hi)) for t in periods}

    services = {}
    for p in producers:
        services["P", p] = Service("P", p, linc=per_t(80, 200), quac={t: float(rng.uniform(0.0, 0.2)) for t in periods})
    for arc in pipes:
        services["A", arc] = Service("A", arc, linc=per_t(2, 15))
    routes = [(s, d) for s in lng_src for d in regas if s != d][:n_ship]
    for s, d in routes:
        services["B", (s, d)] = Service("B", (s, d), linc=per_t(5, 25))
    for s in lng_src:
        services["L", s] = Service("L", s, linc=per_t(10, 25))
    for d in regas:
        services["R", d] = Service("R", d, linc=per_t(3, 10))
    for s in storage_nodes:
        services["I", s] = Service("I", s, linc=per_t(1, 5))
        services["X", s] = Service("X", s, linc=per_t(1, 5))

    out_arcs: dict[str, list] = {n: [] for n in nodes}
    for a, b in pipes:
        out_arcs[a].append((a, b))
    traders = []
    for i, p in enumerate(producers):
        seen, frontier, mine = {p}, [p], set()
        for _ in range(hops):
            nxt = []
            for u in frontier:
                for arc in out_arcs[u]:
                    mine.add(arc)
                    if arc[1] not in seen:
                        seen.add(arc[1])
                        nxt.append(arc[1])
            frontier = nxt
        my_ships = tuple(r for r in routes if r[0] == p)
        touched = seen | {d for _, d in my_ships}
        traders.append(Trader(
            f"F{i:02d}",
            production=(p,),
            storage=tuple(s for s in storage_nodes if s in touched),
            consumers=tuple(c for c in consumers if c in touched),
            pipelines=tuple(sorted(mine)),
            ships=my_ships,
        ))
    return MarketNetwork(tuple(nodes), periods, tuple(traders), tuple(consumers), services)


def count_arcs(net: MarketNetwork) -> int:
    return sum(1 for (kind, _) in net.services if kind in ("A", "B"))


def has_finite_caps(net: MarketNetwork) -> bool:
    return any(math.isfinite(c) for svc in net.services.values() for c in svc.cap.values())
