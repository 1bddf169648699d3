"""Calibration of market power parameters, anchor prices and elasticities.

The loop works on a reference sales pattern ``q_ref`` and its marginal
supply costs ``phi``:

1. marginal costs of delivering ``q_ref`` come from a model whose sales are
   pinned by free shadow prices (``marginal_costs``);
2. per market, the anchor prices and elasticities that keep every active
   trader's market power parameter in [0, 1] are bracketed
   (``admissible_ranges``, ``eta_upper_bound``) and a point is chosen inside
   the reference box (``select_anchors``);
3. if every market admits such a point the parameters follow in closed form
   (``compute_theta``) and the loop stops;
4. otherwise sales are nudged towards an estimate (``estimate_sales``) by a
   bounded model with consumption fixed at the reference (``update_step``).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    AllSalesZero,
    CvMarketError,
    InconsistentData,
    LcpError,
    MaxIterationsExceeded,
    NoActiveTrader,
    SolverFailure,
    ZeroPrice,
    ZeroSales,
)
from .lcp import solve_mlcp
from .model import (
    assemble_base,
    assemble_bounded,
    assemble_fixed_sales,
    delivery_costs,
    extract_equilibrium,
)
from .network import DemandAnchor, Equilibrium, MarketNetwork, SalesBounds

log = logging.getLogger(__name__)

Market = tuple[str, str]
Sale = tuple[str, str, str]


# --- configuration and records -----------------------------------------------

@dataclass(frozen=True)
class CalibrationConfig:
    tol_consumption_rel: float = 0.0025
    tol_consumption_abs: float = 1e-6
    widen_fraction: float = 0.02
    max_iterations: int = 100
    solver_tol: float = 1e-8
    theta_init_module1: float = 1.0
    relaxed_termination: bool = True
    zero_tol: float = 1e-9

    def __post_init__(self):
        if not 0 <= self.widen_fraction < 1:
            raise ValueError("widen_fraction must lie in [0, 1)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        for name in ("tol_consumption_rel", "tol_consumption_abs", "solver_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.theta_init_module1 >= 0:
            raise ValueError("theta_init_module1 must be non-negative")

    def tol_consumption(self, s_ref: float) -> float:
        return max(self.tol_consumption_rel * abs(s_ref), self.tol_consumption_abs)


@dataclass
class ReferenceData:
    """Reference values per market and sale, with the reference boxes.

    Elasticity bounds follow the sign of ``eta``: ``eta_lo <= eta_ref <= eta_hi < 0``.
    """

    lambda_ref: dict[Market, float]
    q_ref: dict[Sale, float]
    s_ref: dict[Market, float]
    eta_ref: dict[Market, float]
    lambda_lo: dict[Market, float]
    lambda_hi: dict[Market, float]
    eta_lo: dict[Market, float]
    eta_hi: dict[Market, float]

    @classmethod
    def build(
        cls,
        lambda_ref: Mapping[Market, float],
        q_ref: Mapping[Sale, float],
        eta_ref: Mapping[Market, float],
        lambda_bounds: Mapping[Market, tuple[float, float]] | None = None,
        eta_bounds: Mapping[Market, tuple[float, float]] | None = None,
    ) -> "ReferenceData":
        """Fill consumption from sales and default the reference boxes."""
        s_ref: dict[Market, float] = {nt: 0.0 for nt in lambda_ref}
        for (f, n, t), q in q_ref.items():
            s_ref[n, t] = s_ref.get((n, t), 0.0) + q
        lam_lo, lam_hi, eta_lo, eta_hi = {}, {}, {}, {}
        for nt, lam in lambda_ref.items():
            lo, hi = (lambda_bounds or {}).get(nt, (lam, lam))
            lam_lo[nt], lam_hi[nt] = lo, hi
            if eta_bounds and nt in eta_bounds:
                eta_lo[nt], eta_hi[nt] = eta_bounds[nt]
            else:
                eta_lo[nt], eta_hi[nt] = default_eta_bounds(eta_ref[nt])
        return cls(dict(lambda_ref), dict(q_ref), s_ref, dict(eta_ref), lam_lo, lam_hi, eta_lo, eta_hi)

    def validate(self) -> None:
        for nt, lam in self.lambda_ref.items():
            if not self.lambda_lo[nt] <= lam <= self.lambda_hi[nt]:
                raise InconsistentData(f"reference price at {nt} outside its bounds")
            if not self.eta_lo[nt] <= self.eta_ref[nt] <= self.eta_hi[nt] < 0:
                raise InconsistentData(f"reference elasticity at {nt} outside its bounds")
        for key, q in self.q_ref.items():
            if not q >= 0:
                raise InconsistentData(f"negative reference sales at {key}")


def default_eta_bounds(eta_ref: float) -> tuple[float, float]:
    """Box ``[max(-eta-0.2, 0.3), min(-eta+0.2, 1)]`` on ``-eta``, stretched to contain ``-eta``."""
    m = -eta_ref
    lo = min(max(m - 0.2, 0.3), m)
    hi = max(min(m + 0.2, 1.0), m)
    return -hi, -lo


@dataclass(frozen=True)
class MarketRanges:
    """Module II brackets for one market plus the data needed to evaluate them."""

    lambda_lo: float
    lambda_hi: float
    phi_active: tuple[float, ...]
    q_active: tuple[float, ...]
    s: float

    @property
    def empty(self) -> bool:
        return self.lambda_lo > self.lambda_hi

    def minus_eta_hi(self, lambda0: float) -> float:
        return eta_upper_bound(lambda0, self.phi_active, self.q_active, self.s)

    def lambda_cap(self, minus_eta_min: float) -> float:
        """Largest anchor price whose elasticity bound still reaches ``minus_eta_min``.

        ``minus_eta_hi`` decreases in the anchor price, so the prices with
        ``minus_eta_hi(lambda0) >= c`` form a half line ending here.
        """
        c = minus_eta_min
        cap = math.inf
        for phi, q in zip(self.phi_active, self.q_active):
            r = q / self.s
            if c > r:
                cap = min(cap, c * phi / (c - r))
        return cap


@dataclass(frozen=True)
class AnchorChoice:
    lambda0: float
    eta: float
    satisfied: bool
    hit_lo: bool = False
    hit_hi: bool = False


@dataclass
class IterationRecord:
    iteration: int
    markets: dict[Market, dict]
    widened: list[Market]
    max_sales_change: float = 0.0
    # largest |lambda* - lambda0| / max(1, lambda0) of the update solve
    price_gap: float = 0.0
    seconds: float = 0.0


@dataclass
class CalibrationResult:
    theta: dict[Sale, float]
    anchors: dict[Market, DemandAnchor]
    q_cal: dict[Sale, float]
    phi_cal: dict[Sale, float]
    iterations: int
    trace: list[IterationRecord]
    deviations: dict[str, dict[str, float]]
    termination: str
    lambda_bounds: dict[Market, tuple[float, float]]
    validation: Equilibrium | None = None


# --- closed-form pieces -------------------------------------------------------

def compute_theta(lambda0: float, q_f: float, s0: float, phi_f: float, eta: float) -> float:
    if q_f <= 0:
        raise ZeroSales("market power is undefined for a trader without sales")
    if lambda0 <= 0:
        raise ZeroPrice("market power is undefined at a zero anchor price")
    if s0 <= 0 or eta >= 0:
        raise ValueError("need s0 > 0 and eta < 0")
    return (lambda0 - phi_f) / ((lambda0 / (s0 * (-eta))) * q_f)


def admissible_ranges(
    phi: Sequence[float], q: Sequence[float], s: float, zero_tol: float = 1e-9
) -> MarketRanges:
    """Bracket on the anchor price for one market.

    Traders with ``q > zero_tol * max(1, s)`` are active; the price must be
    at least every active trader's cost and at most every inactive one's.
    """
    phi = np.asarray(phi, dtype=float)
    q = np.asarray(q, dtype=float)
    active = q > zero_tol * max(1.0, s)
    if not active.any():
        raise NoActiveTrader("positive consumption but no trader sells")
    lo = float(phi[active].max())
    hi = float(phi[~active].min()) if (~active).any() else math.inf
    return MarketRanges(lo, hi, tuple(phi[active].tolist()), tuple(q[active].tolist()), float(s))


def eta_upper_bound(lambda0: float, phi: Sequence[float], q: Sequence[float], s: float) -> float:
    """Largest ``-eta`` keeping every active trader's parameter at most one.

    Traders priced exactly at cost allow any elasticity and drop out.
    """
    bound = math.inf
    for p, qf in zip(phi, q):
        if lambda0 != p:
            bound = min(bound, lambda0 / (lambda0 - p) * qf / s)
    return bound


def _clip(x: float, lo: float, hi: float) -> float:
    return min(max(x, lo), hi)


def select_anchors(
    ranges: MarketRanges,
    lambda_ref: float,
    eta_ref: float,
    lambda_box: tuple[float, float],
    eta_box: tuple[float, float],
) -> AnchorChoice:
    """Pick ``(lambda0, eta)`` for one market, as close to the references as allowed.

    The admissible prices are intersected with those whose elasticity bound
    still meets the reference box on ``-eta``; the reference price is
    projected onto that set and then ``-eta_ref`` onto the elasticities
    admissible at the chosen price. When nothing is admissible the price
    moves to the end of the reference box nearest the admissible set.
    """
    box_lo, box_hi = lambda_box
    meta_lo, meta_hi = -eta_box[1], -eta_box[0]
    j_lo = ranges.lambda_lo
    j_hi = min(ranges.lambda_hi, ranges.lambda_cap(meta_lo))

    lo, hi = max(j_lo, box_lo), min(j_hi, box_hi)
    if lo <= hi:
        lambda0 = _clip(lambda_ref, lo, hi)
        satisfied = True
    else:
        a, b = min(j_lo, j_hi), max(j_lo, j_hi)
        if b < box_lo:
            lambda0 = box_lo
        elif a > box_hi:
            lambda0 = box_hi
        else:
            # the reversed bracket overlaps the box: stay as close as possible
            lambda0 = _clip(lambda_ref, max(a, box_lo), min(b, box_hi))
        satisfied = False
    hit_lo = j_hi <= box_lo
    hit_hi = j_lo >= box_hi

    ub = ranges.minus_eta_hi(lambda0)
    if ub >= meta_lo:
        minus_eta = _clip(-eta_ref, meta_lo, min(meta_hi, ub))
    else:
        minus_eta = meta_lo
        satisfied = False
    return AnchorChoice(lambda0, -minus_eta, satisfied, hit_lo, hit_hi)


def estimate_sales(
    lambda0: float,
    eta: float,
    s0: float,
    phi: Sequence[float],
    q: Sequence[float],
    zero_tol: float = 1e-9,
) -> tuple[np.ndarray, np.ndarray]:
    """Sales estimate and clamped market power per trader of one market."""
    phi = np.asarray(phi, dtype=float)
    q = np.asarray(q, dtype=float)
    active = q > zero_tol * max(1.0, s0)
    if not active.any():
        raise AllSalesZero("no trader sells in this market")
    theta = np.zeros(q.size)
    for i in np.flatnonzero(active):
        theta[i] = _clip(compute_theta(lambda0, q[i], s0, phi[i], eta), 0.0, 1.0)
    theta[~active] = float(theta[active] @ q[active] / q[active].sum())

    gap = (lambda0 - phi) / lambda0
    scale = s0 * (-eta)
    q_est = np.empty(q.size)
    for i in range(q.size):
        if theta[i] > 0:
            q_est[i] = gap[i] * scale / theta[i]
        else:
            q_est[i] = q[i] - abs(gap[i]) * scale
        # a raw parameter inside [0, 1] reproduces the sales; skip the round-off
        if active[i] and 0.0 <= compute_theta(lambda0, q[i], s0, phi[i], eta) <= 1.0:
            q_est[i] = q[i]
    return np.maximum(q_est, 0.0), theta


# --- network solves -------------------------------------------------------------

def _solve(problem, tol: float, what: str):
    try:
        return solve_mlcp(problem, tol=tol)
    except LcpError as exc:
        raise SolverFailure(f"{what}: {exc}") from exc


def _with_delivery_costs(net: MarketNetwork, eq: Equilibrium, q: Mapping[Sale, float], zero_tol: float) -> dict[Sale, float]:
    """Nodal duals, with the opportunity cost substituted where a trader sells nothing."""
    costs = None
    out = {}
    for key in net.sales_keys():
        f, n, t = key
        if q.get(key, 0.0) > zero_tol * max(1.0, eq.s[n, t]):
            out[key] = eq.phi[key]
        else:
            if costs is None:
                costs = delivery_costs(net, eq)
            out[key] = costs[key]
    return out


def marginal_costs(
    net: MarketNetwork,
    anchors_ref: Mapping[Market, DemandAnchor],
    q_ref: Mapping[Sale, float],
    config: CalibrationConfig = CalibrationConfig(),
) -> dict[Sale, float]:
    problem = assemble_fixed_sales(net, anchors_ref, config.theta_init_module1, q_ref)
    sol = _solve(problem, config.solver_tol, "marginal cost model")
    eq = extract_equilibrium(net, problem, sol)
    return _with_delivery_costs(net, eq, q_ref, config.zero_tol)


def update_step(
    net: MarketNetwork,
    anchors: Mapping[Market, DemandAnchor],
    theta_lim: Mapping[Sale, float],
    q_ref: Mapping[Sale, float],
    q_est: Mapping[Sale, float],
    s_ref: Mapping[Market, float],
    config: CalibrationConfig = CalibrationConfig(),
) -> tuple[dict[Sale, float], dict[Sale, float], Equilibrium]:
    keys = net.sales_keys()
    bounds = SalesBounds(
        lower={k: min(q_ref.get(k, 0.0), q_est.get(k, 0.0)) for k in keys},
        upper={k: max(q_ref.get(k, 0.0), q_est.get(k, 0.0)) for k in keys},
        fixed_consumption=dict(s_ref),
    )
    problem = assemble_bounded(net, anchors, theta_lim, bounds)
    sol = _solve(problem, config.solver_tol, "update model")
    eq = extract_equilibrium(net, problem, sol)
    for nt, lam in eq.lam.items():
        lambda0 = anchors[nt].lambda0
        if abs(lam - lambda0) > config.solver_tol * max(1.0, lambda0):
            raise SolverFailure(f"price at {nt} is {lam}, expected the anchor {lambda0}")
    q_new = dict(eq.q_sales)
    return q_new, _with_delivery_costs(net, eq, q_new, config.zero_tol), eq


# --- the calibration loop -------------------------------------------------------

def _market_view(net: MarketNetwork, nt: Market, values: Mapping[Sale, float]) -> list[float]:
    n, t = nt
    return [values[f.name, n, t] for f in net.traders_at(n)]


def _theta_for(net, choices, q, phi, s_ref, zero_tol) -> dict[Sale, float]:
    theta = {}
    for nt, ch in choices.items():
        n, t = nt
        names = [f.name for f in net.traders_at(n)]
        phis = _market_view(net, nt, phi)
        qs = _market_view(net, nt, q)
        _, lim = estimate_sales(ch.lambda0, ch.eta, s_ref[nt], phis, qs, zero_tol)
        for name, value in zip(names, lim):
            theta[name, n, t] = float(value)
    return theta


def _solve_base(net, anchors, theta, tol) -> Equilibrium:
    problem = assemble_base(net, anchors, theta)
    sol = _solve(problem, tol, "base model")
    return extract_equilibrium(net, problem, sol)


def calibrate(net: MarketNetwork, ref: ReferenceData, config: CalibrationConfig = CalibrationConfig()) -> CalibrationResult:
    ref.validate()
    markets = net.markets()
    s_ref = {nt: ref.s_ref[nt] for nt in markets}
    for nt in markets:
        if s_ref[nt] <= 0:
            raise InconsistentData(f"reference consumption at {nt} must be positive")
    box = {nt: [ref.lambda_lo[nt], ref.lambda_hi[nt]] for nt in markets}
    eta_box = {nt: (ref.eta_lo[nt], ref.eta_hi[nt]) for nt in markets}
    q = {k: float(ref.q_ref.get(k, 0.0)) for k in net.sales_keys()}
    trace: list[IterationRecord] = []

    anchors_ref = {nt: DemandAnchor(s_ref[nt], ref.lambda_ref[nt], ref.eta_ref[nt]) for nt in markets}
    try:
        phi = marginal_costs(net, anchors_ref, q, config)
    except SolverFailure as exc:
        raise SolverFailure(str(exc), trace) from exc

    for it in range(1, config.max_iterations + 1):
        start = time.perf_counter()
        choices: dict[Market, AnchorChoice] = {}
        info: dict[Market, dict] = {}
        for nt in markets:
            rng = admissible_ranges(_market_view(net, nt, phi), _market_view(net, nt, q), s_ref[nt], config.zero_tol)
            ch = select_anchors(rng, ref.lambda_ref[nt], ref.eta_ref[nt], tuple(box[nt]), eta_box[nt])
            if ch.lambda0 <= 0:
                raise ZeroPrice(f"chosen anchor price at {nt} is not positive")
            choices[nt] = ch
            info[nt] = {
                "lambda_lo": rng.lambda_lo,
                "lambda_hi": rng.lambda_hi,
                "minus_eta_hi": rng.minus_eta_hi(ch.lambda0),
                "lambda0": ch.lambda0,
                "eta": ch.eta,
                "satisfied": ch.satisfied,
                "box": tuple(box[nt]),
            }
        anchors = {nt: DemandAnchor(s_ref[nt], ch.lambda0, ch.eta) for nt, ch in choices.items()}
        record = IterationRecord(iteration=it, markets=info, widened=[])
        trace.append(record)

        if all(ch.satisfied for ch in choices.values()):
            theta = _theta_for(net, choices, q, phi, s_ref, config.zero_tol)
            record.seconds = time.perf_counter() - start
            return _finish(net, anchors, theta, q, phi, trace, box, config, "strict")

        hits = [nt for nt, ch in choices.items() if ch.hit_lo or ch.hit_hi]
        if config.relaxed_termination and not hits:
            theta = _theta_for(net, choices, q, phi, s_ref, config.zero_tol)
            try:
                eq = _solve_base(net, anchors, theta, config.solver_tol)
            except SolverFailure as exc:
                raise SolverFailure(str(exc), trace) from exc
            if all(abs(eq.s[nt] - s_ref[nt]) <= config.tol_consumption(s_ref[nt]) for nt in markets):
                record.seconds = time.perf_counter() - start
                return _finish(net, anchors, theta, q, phi, trace, box, config, "relaxed", eq)

        if it == config.max_iterations:
            record.seconds = time.perf_counter() - start
            break

        q_est: dict[Sale, float] = {}
        theta_lim: dict[Sale, float] = {}
        for nt, ch in choices.items():
            n, t = nt
            names = [f.name for f in net.traders_at(n)]
            est, lim = estimate_sales(
                ch.lambda0, ch.eta, s_ref[nt], _market_view(net, nt, phi), _market_view(net, nt, q), config.zero_tol
            )
            for name, e, th in zip(names, est, lim):
                q_est[name, n, t] = float(e)
                theta_lim[name, n, t] = float(th)
        try:
            q_new, phi, eq = update_step(net, anchors, theta_lim, q, q_est, s_ref, config)
        except CvMarketError as exc:
            raise SolverFailure(str(exc), trace) from exc
        record.price_gap = max(abs(eq.lam[nt] - anchors[nt].lambda0) / max(1.0, anchors[nt].lambda0) for nt in markets)
        record.max_sales_change = max((abs(q_new[k] - q[k]) for k in q), default=0.0)
        q = q_new

        width = config.widen_fraction
        for nt in hits:
            ch = choices[nt]
            if ch.hit_lo:
                box[nt][0] -= width * ref.lambda_ref[nt]
            if ch.hit_hi:
                box[nt][1] += width * ref.lambda_ref[nt]
            record.widened.append(nt)
        record.seconds = time.perf_counter() - start
        log.info(
            "iteration %d: %d/%d markets satisfied, %d widened, max sales change %.3g",
            it,
            sum(ch.satisfied for ch in choices.values()),
            len(choices),
            len(hits),
            record.max_sales_change,
        )

    raise MaxIterationsExceeded(f"no calibration after {config.max_iterations} iterations", trace)


def _finish(net, anchors, theta, q, phi, trace, box, config, how, eq=None) -> CalibrationResult:
    if eq is None:
        try:
            eq = _solve_base(net, anchors, theta, config.solver_tol)
        except SolverFailure as exc:
            raise SolverFailure(str(exc), trace) from exc
    markets = list(anchors)
    s_ref = {nt: anchors[nt].s0 for nt in markets}
    lam0 = {nt: anchors[nt].lambda0 for nt in markets}
    deviations = {
        "s": deviation_stats([eq.s[nt] for nt in markets], [s_ref[nt] for nt in markets]),
        "lambda": deviation_stats([eq.lam[nt] for nt in markets], [lam0[nt] for nt in markets]),
        "q": deviation_stats([eq.q_sales[k] for k in q], [q[k] for k in q]),
    }
    return CalibrationResult(
        theta=theta,
        anchors=dict(anchors),
        q_cal=dict(q),
        phi_cal=dict(phi),
        iterations=len(trace),
        trace=trace,
        deviations=deviations,
        termination=how,
        lambda_bounds={nt: tuple(b) for nt, b in box.items()},
        validation=eq,
    )


def deviation_stats(values: Sequence[float], targets: Sequence[float]) -> dict[str, float]:
    """Signed deviations ``values - targets``: extremes in absolute and relative terms, mean and median.

    Relative deviations use ``|target|``; entries with a zero target count as 0.
    """
    v = np.asarray(values, dtype=float)
    r = np.asarray(targets, dtype=float)
    if v.size == 0:
        return {k: 0.0 for k in ("min_abs", "max_abs", "min_rel", "max_rel", "mean", "median")}
    d = v - r
    mask = r != 0
    rel = np.where(mask, d / np.where(mask, np.abs(r), 1.0), 0.0)
    return {
        "min_abs": float(d.min()),
        "max_abs": float(d.max()),
        "min_rel": float(rel.min()),
        "max_rel": float(rel.max()),
        "mean": float(d.mean()),
        "median": float(np.median(d)),
    }


# --- reference preprocessing ------------------------------------------------------

@dataclass
class RawReference:
    lambda_data: dict[Market, float]
    q_data: dict[Sale, float]
    s_data: dict[Market, float]
    eta_data: dict[Market, float]
    p_data: dict[tuple[str, str], float] = field(default_factory=dict)
    loss: dict[tuple[str, str], float] = field(default_factory=dict)
    lambda_bounds: dict[Market, tuple[float, float]] = field(default_factory=dict)
    eta_bounds: dict[Market, tuple[float, float]] = field(default_factory=dict)

    def consistent(self, tol: float = 1e-12) -> bool:
        sums: dict[Market, float] = {}
        for (f, n, t), q in self.q_data.items():
            sums[n, t] = sums.get((n, t), 0.0) + q
        return all(abs(sums.get(nt, 0.0) - s) <= tol * max(1.0, s) for nt, s in self.s_data.items())


def production_caps(raw: RawReference) -> dict[tuple[str, str], float]:
    return {ft: p / (1.0 - raw.loss.get(ft, 0.0)) for ft, p in raw.p_data.items()}


def preprocess_reference(
    net: MarketNetwork, raw: RawReference, config: CalibrationConfig = CalibrationConfig()
) -> ReferenceData:
    for name in ("q_data", "s_data", "p_data", "lambda_data"):
        for key, v in getattr(raw, name).items():
            if not v >= 0:
                raise InconsistentData(f"{name}[{key}] = {v} is negative")
    for key, eps in raw.loss.items():
        if not 0 <= eps < 1:
            raise InconsistentData(f"loss estimate {eps} for {key} must lie in [0, 1)")
    for nt, eta in raw.eta_data.items():
        if not eta < 0:
            raise InconsistentData(f"elasticity {eta} at {nt} must be negative")

    keys = net.sales_keys()
    q = {k: float(raw.q_data.get(k, 0.0)) for k in keys}
    caps = production_caps(raw)

    # scale each trader down to its production cap, then each market to its consumption
    for (f, t), cap in caps.items():
        ks = [k for k in keys if k[0] == f and k[2] == t]
        total = sum(q[k] for k in ks)
        if total > cap:
            for k in ks:
                q[k] *= cap / total
    for n, t in net.markets():
        ks = [(g.name, n, t) for g in net.traders_at(n)]
        total = sum(q[k] for k in ks)
        s = raw.s_data[n, t]
        if total > s:
            for k in ks:
                q[k] *= s / total

    anchors = {}
    for nt in net.markets():
        s = raw.s_data[nt]
        if s <= 0:
            raise InconsistentData(f"consumption at {nt} must be positive")
        anchors[nt] = DemandAnchor(s, raw.lambda_data[nt], raw.eta_data[nt])
    bounds = SalesBounds(
        lower=dict(q),
        fixed_consumption={nt: raw.s_data[nt] for nt in net.markets()},
        trader_cap=caps,
    )
    problem = assemble_bounded(net, anchors, 1.0, bounds)
    try:
        sol = solve_mlcp(problem, tol=config.solver_tol)
    except LcpError as exc:
        raise InconsistentData(f"consumption cannot be served by the network and production: {exc}") from exc
    eq = extract_equilibrium(net, problem, sol)

    q_ref = {}
    for k in keys:
        v = max(eq.q_sales[k], 0.0)
        if abs(v - q[k]) <= config.solver_tol * max(1.0, q[k]):
            v = q[k]
        q_ref[k] = v
    lambda_bounds = {nt: raw.lambda_bounds[nt] for nt in raw.lambda_bounds}
    return ReferenceData.build(raw.lambda_data, q_ref, raw.eta_data, lambda_bounds, raw.eta_bounds or None)
