from __future__ import annotations

import math

import numpy as np
import pytest

from cvmarket import synthetic
from cvmarket.calibration import (
    CalibrationConfig,
    MarketRanges,
    RawReference,
    ReferenceData,
    admissible_ranges,
    calibrate,
    compute_theta,
    default_eta_bounds,
    deviation_stats,
    estimate_sales,
    eta_upper_bound,
    marginal_costs,
    preprocess_reference,
    select_anchors,
    update_step,
)
from cvmarket.errors import (
    AllSalesZero,
    InconsistentData,
    MaxIterationsExceeded,
    NoActiveTrader,
    ZeroPrice,
    ZeroSales,
)
from cvmarket.lcp import solve_mlcp
from cvmarket.model import assemble_base, assemble_fixed_sales, extract_equilibrium
from cvmarket.network import DemandAnchor, MarketNetwork, Service, Trader, inverse_demand_coeffs

from oracles import monopoly_cv


def chain(cost=60.0, quac=0.0, tau=5.0, cap=None):
    """Producer node n, consumer node m, one trader and one pipeline n -> m."""
    services = {
        ("P", "n"): Service("P", "n", linc={"t1": cost}, quac={"t1": quac} if quac else {}),
        ("A", ("n", "m")): Service("A", ("n", "m"), linc={"t1": tau}, cap={} if cap is None else {"t1": cap}),
    }
    trader = Trader("F", production=("n",), consumers=("m",), pipelines=(("n", "m"),))
    return MarketNetwork(("n", "m"), ("t1",), (trader,), ("m",), services)


def shared_market(costs):
    services, traders = {}, []
    for i, c in enumerate(costs):
        services["P", f"P{i}"] = Service("P", f"P{i}", linc={"t1": c})
        services["A", (f"P{i}", "M")] = Service("A", (f"P{i}", "M"))
        traders.append(Trader(f"F{i}", production=(f"P{i}",), consumers=("M",), pipelines=((f"P{i}", "M"),)))
    nodes = ("M",) + tuple(f"P{i}" for i in range(len(costs)))
    return MarketNetwork(nodes, ("t1",), tuple(traders), ("M",), services)


# --- market power formula ----------------------------------------------------------------

def test_compute_theta_examples():
    assert compute_theta(100, 20, 50, 80, -0.5) == pytest.approx(0.25)
    assert compute_theta(100, 20, 50, 100, -0.5) == 0.0
    assert compute_theta(100, 20, 50, 100 - 4 * 20, -0.5) == pytest.approx(1.0)


def test_compute_theta_errors():
    with pytest.raises(ZeroSales):
        compute_theta(100, 0, 50, 80, -0.5)
    with pytest.raises(ZeroPrice):
        compute_theta(0, 20, 50, 80, -0.5)


def test_compute_theta_inverts_the_sales_condition():
    rng = np.random.default_rng(1)
    for _ in range(100):
        a = DemandAnchor(rng.uniform(10, 100), rng.uniform(50, 300), -rng.uniform(0.1, 2))
        q = rng.uniform(0.1, a.s0)
        theta = rng.uniform(0, 1)
        _, slope = inverse_demand_coeffs(a)
        phi = a.lambda0 + theta * slope * q
        assert compute_theta(a.lambda0, q, a.s0, phi, a.eta) == pytest.approx(theta, abs=1e-12)


# --- admissible ranges -----------------------------------------------------------------------

def test_ranges_examples():
    r = admissible_ranges([80, 90, 110], [30, 20, 0], 50)
    assert (r.lambda_lo, r.lambda_hi) == (90, 110)
    assert not r.empty
    r = admissible_ranges([80, 90], [30, 20], 50)
    assert (r.lambda_lo, r.lambda_hi) == (90, math.inf)
    r = admissible_ranges([80, 120, 110], [30, 20, 0], 50)
    assert r.empty


def test_ranges_need_an_active_trader():
    with pytest.raises(NoActiveTrader):
        admissible_ranges([80, 90], [0, 0], 50)


def test_eta_upper_bound_examples():
    assert eta_upper_bound(100, [80, 90], [30, 20], 50) == pytest.approx(3.0)
    assert eta_upper_bound(100, [0], [50], 50) == pytest.approx(1.0)
    assert eta_upper_bound(100, [100, 100], [30, 20], 50) == math.inf


def test_lambda_cap_is_where_the_eta_bound_crosses():
    rng = np.random.default_rng(2)
    for _ in range(200):
        k = int(rng.integers(1, 4))
        phi = rng.uniform(50, 150, k)
        q = rng.uniform(1, 30, k)
        r = MarketRanges(float(phi.max()), math.inf, tuple(phi), tuple(q), float(q.sum()))
        c = rng.uniform(0.1, 1.5)
        cap = r.lambda_cap(c)
        for lam in np.linspace(phi.max() + 1e-6, phi.max() + 500, 50):
            assert (r.minus_eta_hi(lam) >= c - 1e-9) == (lam <= cap + 1e-9 * max(1, cap))


# --- anchor selection -------------------------------------------------------------------------

def test_select_inside_range():
    r = admissible_ranges([80, 90, 110], [30, 20, 0], 50)
    ch = select_anchors(r, 100, -0.47, (95, 105), default_eta_bounds(-0.47))
    assert ch.lambda0 == 100 and ch.satisfied
    assert ch.eta == pytest.approx(-0.47)


def test_select_projects_box_end():
    r = admissible_ranges([80, 90, 110], [30, 20, 0], 50)
    ch = select_anchors(r, 80, -0.47, (70, 85), default_eta_bounds(-0.47))
    assert ch.lambda0 == 85
    assert not ch.satisfied
    assert ch.hit_hi and not ch.hit_lo


def test_select_eta_inside_both():
    r = MarketRanges(90, math.inf, (80, 90), (30, 20), 50)
    ch = select_anchors(r, 100, -0.47, (100, 100), (-1.0, -0.3))
    assert r.minus_eta_hi(100) == pytest.approx(3.0)
    assert -ch.eta == pytest.approx(0.47)
    assert ch.satisfied


def test_select_touching_endpoint_counts_as_hit():
    r = MarketRanges(90, 100, (90,), (20,), 50)
    ch = select_anchors(r, 105, -0.5, (100, 110), (-1.0, -0.3))
    assert ch.satisfied and ch.lambda0 == 100
    assert ch.hit_lo


def test_select_properties():
    rng = np.random.default_rng(3)
    for _ in range(2000):
        k = int(rng.integers(1, 5))
        phi = rng.uniform(50, 150, k)
        q = np.where(rng.random(k) < 0.7, rng.uniform(1, 30, k), 0.0)
        if not q.any():
            q[0] = 5.0
        r = admissible_ranges(phi, q, float(q.sum()))
        lam_ref = rng.uniform(40, 200)
        box = (lam_ref * rng.uniform(0.8, 1.0), lam_ref * rng.uniform(1.0, 1.2))
        eta_ref = -rng.uniform(0.2, 1.2)
        ebox = default_eta_bounds(eta_ref)
        ch = select_anchors(r, lam_ref, eta_ref, box, ebox)
        assert box[0] <= ch.lambda0 <= box[1]
        assert ebox[0] - 1e-12 <= ch.eta <= ebox[1] + 1e-12
        if ch.satisfied:
            assert r.lambda_lo <= ch.lambda0 <= r.lambda_hi
            active = q > 0
            theta = [compute_theta(ch.lambda0, qf, q.sum(), p, ch.eta) for p, qf in zip(phi[active], q[active])]
            assert all(-1e-9 <= t <= 1 + 1e-9 for t in theta)


# --- sales estimate -----------------------------------------------------------------------------

def test_estimate_identity_inside_unit_interval():
    q_est, theta = estimate_sales(100, -0.5, 50, [96], [20])
    assert q_est.tolist() == [20.0]
    assert theta[0] == pytest.approx(0.05)


def test_estimate_at_clamped_theta():
    # raw theta = (100 - 80) / (4 * 2.5) = 2, clamped to 1
    q_est, theta = estimate_sales(100, -0.5, 50, [80], [2.5])
    assert theta[0] == 1.0
    assert q_est[0] == pytest.approx(5.0)


def test_estimate_below_cost_floors_at_zero():
    # theta clamps to 0 and sales drop by the cost gap times s0 * (-eta)
    q_est, theta = estimate_sales(100, -0.5, 50, [150, 90], [2.0, 20.0])
    assert theta[0] == 0.0
    assert q_est[0] == 0.0


def test_estimate_fills_inactive_traders_with_weighted_mean():
    q_est, theta = estimate_sales(100, -0.5, 50, [80, 90, 120], [20, 30, 0])
    t0 = compute_theta(100, 20, 50, 80, -0.5)
    t1 = compute_theta(100, 30, 50, 90, -0.5)
    assert theta[2] == pytest.approx((t0 * 20 + t1 * 30) / 50)
    assert 0 <= theta[2] <= 1


def test_estimate_needs_sales():
    with pytest.raises(AllSalesZero):
        estimate_sales(100, -0.5, 50, [80], [0.0])


def test_estimate_identity_property():
    rng = np.random.default_rng(4)
    for _ in range(300):
        k = int(rng.integers(1, 5))
        a = DemandAnchor(rng.uniform(10, 100), rng.uniform(50, 300), -rng.uniform(0.1, 2))
        q = rng.dirichlet(np.ones(k)) * a.s0
        _, slope = inverse_demand_coeffs(a)
        phi = a.lambda0 + rng.uniform(0, 1, k) * slope * q
        q_est, _ = estimate_sales(a.lambda0, a.eta, a.s0, phi, q)
        assert q_est.tolist() == q.tolist()


# --- marginal costs -----------------------------------------------------------------------------

def test_marginal_cost_single_trader_is_production_cost():
    net = chain(cost=60.0, tau=0.0)
    phi = marginal_costs(net, {("m", "t1"): DemandAnchor(30, 100, -0.5)}, {("F", "m", "t1"): 30.0})
    assert phi["F", "m", "t1"] == pytest.approx(60.0)


def test_marginal_cost_along_a_chain():
    net = chain(cost=60.0, quac=0.5, tau=7.0)
    phi = marginal_costs(net, {("m", "t1"): DemandAnchor(30, 100, -0.5)}, {("F", "m", "t1"): 20.0})
    assert phi["F", "m", "t1"] == pytest.approx(60.0 + 0.5 * 20.0 + 7.0)


def test_marginal_cost_includes_congestion_fee():
    net = chain(cost=60.0, tau=7.0, cap=20.0)
    anchors = {("m", "t1"): DemandAnchor(20, 100, -0.5)}
    problem = assemble_fixed_sales(net, anchors, 1.0, {("F", "m", "t1"): 20.0})
    eq = extract_equilibrium(net, problem, solve_mlcp(problem))
    fee = eq.alpha["A", ("n", "m"), "t1"]
    assert eq.phi["F", "m", "t1"] == pytest.approx(60.0 + 7.0 + fee)
    phi = marginal_costs(net, anchors, {("F", "m", "t1"): 20.0})
    assert phi["F", "m", "t1"] == pytest.approx(eq.phi["F", "m", "t1"])


def test_marginal_cost_for_idle_trader_is_returned():
    net = shared_market([60.0, 90.0])
    q_ref = {("F0", "M", "t1"): 30.0, ("F1", "M", "t1"): 0.0}
    phi = marginal_costs(net, {("M", "t1"): DemandAnchor(30, 100, -0.5)}, q_ref)
    assert phi["F1", "M", "t1"] == pytest.approx(90.0)


# --- update step ------------------------------------------------------------------------------------

def test_update_with_collapsed_bounds_keeps_sales():
    fx = synthetic.ten_node(0)
    q = fx.true_sales()
    anchors = fx.true_anchors()
    s = {nt: a.s0 for nt, a in anchors.items()}
    q_new, _, eq = update_step(fx.net, anchors, fx.theta, q, q, s)
    for k, v in q.items():
        assert q_new[k] == pytest.approx(v, abs=1e-7)
    for nt, a in anchors.items():
        assert abs(eq.lam[nt] - a.lambda0) <= 1e-8 * max(1, a.lambda0)


def test_update_straddling_bounds_returns_unconstrained_optimum():
    net = chain(cost=60.0, tau=0.0)
    anchor = DemandAnchor(50, 100, -0.5)
    intercept, slope = inverse_demand_coeffs(anchor)
    q_opt, price = monopoly_cv(intercept, slope, 60.0, 0.5)
    # anchor the demand at the optimum so fixing consumption there is consistent
    a = DemandAnchor(q_opt, price, price / (q_opt * slope))
    key = ("F", "m", "t1")
    q_new, phi, eq = update_step(net, {("m", "t1"): a}, {key: 0.5}, {key: q_opt - 3}, {key: q_opt + 3}, {("m", "t1"): q_opt})
    assert q_new[key] == pytest.approx(q_opt, abs=1e-9)
    assert eq.shadow[("xi_lo",) + key] == pytest.approx(0.0, abs=1e-9)
    assert eq.shadow[("xi_hi",) + key] == pytest.approx(0.0, abs=1e-9)
    assert eq.lam["m", "t1"] == pytest.approx(price)


# --- full loop ------------------------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_round_trip_single_market(seed):
    fx = synthetic.single_market(seed, all_active=True)
    res = calibrate(fx.net, fx.exact_reference())
    assert res.iterations == 1
    for k, v in fx.theta.items():
        assert res.theta[k] == pytest.approx(v, abs=1e-6)


def test_round_trip_two_node():
    fx = synthetic.two_node(0, all_active=True)
    res = calibrate(fx.net, fx.exact_reference())
    assert res.iterations == 1
    truth = fx.true_anchors()
    for nt, a in res.anchors.items():
        assert a.lambda0 == pytest.approx(truth[nt].lambda0, abs=1e-8)
        assert a.eta == pytest.approx(truth[nt].eta, abs=1e-8)
    for k, v in fx.theta.items():
        assert res.theta[k] == pytest.approx(v, abs=1e-6)


def test_round_trip_with_idle_trader_uses_fill_in():
    # seed 0 has traders without sales; their parameter is the sales-weighted mean
    fx = synthetic.single_market(0)
    idle = [k for k, v in fx.truth.q_sales.items() if v <= 1e-9]
    assert idle
    res = calibrate(fx.net, fx.exact_reference())
    active = [k for k in fx.theta if k not in idle]
    for k in active:
        assert res.theta[k] == pytest.approx(fx.theta[k], abs=1e-6)
    mean = sum(res.theta[k] * fx.truth.q_sales[k] for k in active) / sum(fx.truth.q_sales[k] for k in active)
    for k in idle:
        assert res.theta[k] == pytest.approx(mean, abs=1e-12)


def test_reference_below_cost_without_widening_fails():
    fx = synthetic.single_market(1)
    ref = fx.exact_reference()
    low = {nt: 1.0 for nt in ref.lambda_ref}
    ref = ReferenceData.build(low, ref.q_ref, ref.eta_ref, {nt: (1.0, 1.0) for nt in low})
    with pytest.raises(MaxIterationsExceeded) as info:
        calibrate(fx.net, ref, CalibrationConfig(max_iterations=1))
    assert len(info.value.trace) == 1


def test_widening_is_monotone_and_only_at_hit_ends():
    fx = synthetic.ten_node(0)
    ref = preprocess_reference(fx.net, fx.perturbed_raw(np.random.default_rng(1000)))
    res = calibrate(fx.net, ref)
    boxes = [{nt: info["box"] for nt, info in rec.markets.items()} for rec in res.trace]
    boxes.append(res.lambda_bounds)
    assert boxes[0] == {nt: (ref.lambda_lo[nt], ref.lambda_hi[nt]) for nt in ref.lambda_ref}
    widened_any = False
    for rec, before, after in zip(res.trace, boxes, boxes[1:]):
        for nt, (lo, hi) in before.items():
            new_lo, new_hi = after[nt]
            step = 0.02 * ref.lambda_ref[nt]
            assert new_lo in (lo, pytest.approx(lo - step))
            assert new_hi in (hi, pytest.approx(hi + step))
            if (new_lo, new_hi) != (lo, hi):
                assert nt in rec.widened
                widened_any = True
    assert widened_any
    assert all(0 <= v <= 1 for v in res.theta.values())


def test_result_satisfies_termination_conditions():
    fx = synthetic.ten_node(2)
    config = CalibrationConfig()
    ref = preprocess_reference(fx.net, fx.perturbed_raw(np.random.default_rng(1002)))
    res = calibrate(fx.net, ref, config)
    problem = assemble_base(fx.net, res.anchors, res.theta)
    eq = extract_equilibrium(fx.net, problem, solve_mlcp(problem))
    for nt in fx.net.markets():
        assert abs(eq.s[nt] - ref.s_ref[nt]) <= config.tol_consumption(ref.s_ref[nt])
        assert abs(eq.lam[nt] - res.anchors[nt].lambda0) <= 1e-6 * max(1, res.anchors[nt].lambda0)
        lo, hi = res.lambda_bounds[nt]
        assert lo <= res.anchors[nt].lambda0 <= hi
    for rec in res.trace:
        assert rec.price_gap <= config.solver_tol


# --- preprocessing -----------------------------------------------------------------------------------------

def raw_single(q, s, p=None, loss=None):
    keys = [(f"F{i}", "M", "t1") for i in range(len(q))]
    return RawReference(
        lambda_data={("M", "t1"): 150.0},
        q_data=dict(zip(keys, q)),
        s_data={("M", "t1"): s},
        eta_data={("M", "t1"): -0.5},
        p_data=p or {},
        loss=loss or {},
    )


def test_preprocess_fixpoint():
    net = shared_market([60.0, 80.0])
    raw = raw_single([30.0, 20.0], 50.0)
    assert raw.consistent()
    ref = preprocess_reference(net, raw)
    assert ref.q_ref == raw.q_data
    assert ref.s_ref["M", "t1"] == 50.0


def test_preprocess_scales_to_consumption():
    net = shared_market([60.0, 80.0])
    raw = raw_single([36.0, 24.0], 50.0)
    assert not raw.consistent()
    ref = preprocess_reference(net, raw)
    assert ref.q_ref["F0", "M", "t1"] == pytest.approx(30.0)
    assert ref.q_ref["F1", "M", "t1"] == pytest.approx(20.0)
    assert sum(ref.q_ref.values()) == ref.s_ref["M", "t1"]


def test_preprocess_scales_to_production_cap():
    net = shared_market([60.0, 80.0])
    # F0 reports 30 but can produce only 18 / (1 - 0.1) = 20
    raw = raw_single([30.0, 20.0], 50.0, p={("F0", "t1"): 18.0}, loss={("F0", "t1"): 0.1})
    ref = preprocess_reference(net, raw)
    assert ref.q_ref["F0", "M", "t1"] == pytest.approx(20.0, abs=1e-9)
    assert ref.q_ref["F0", "M", "t1"] <= 20.0 + 1e-12
    assert ref.q_ref["F1", "M", "t1"] == pytest.approx(30.0, abs=1e-9)
    assert sum(ref.q_ref.values()) == ref.s_ref["M", "t1"]
    assert ref.s_ref["M", "t1"] == pytest.approx(50.0, abs=1e-9)


def test_preprocess_rejects_negative_data():
    net = shared_market([60.0, 80.0])
    with pytest.raises(InconsistentData):
        preprocess_reference(net, raw_single([-1.0, 20.0], 50.0))


def test_preprocess_rejects_unservable_consumption():
    net = shared_market([60.0])
    raw = raw_single([10.0], 50.0, p={("F0", "t1"): 10.0})
    with pytest.raises(InconsistentData):
        preprocess_reference(net, raw)


# --- small pieces ------------------------------------------------------------------------------------------

def test_default_eta_bounds():
    assert default_eta_bounds(-0.5) == pytest.approx((-0.7, -0.3))
    assert default_eta_bounds(-0.9) == pytest.approx((-1.0, -0.7))
    # a reference outside the recipe's range stretches the box
    lo, hi = default_eta_bounds(-0.2)
    assert lo <= -0.2 <= hi


def test_deviation_stats():
    st = deviation_stats([11.0, 19.0, 30.0], [10.0, 20.0, 30.0])
    assert st["min_abs"] == -1.0 and st["max_abs"] == 1.0
    assert st["min_rel"] == pytest.approx(-0.05) and st["max_rel"] == pytest.approx(0.1)
    assert st["mean"] == pytest.approx(0.0) and st["median"] == 0.0


@pytest.mark.parametrize(
    "kwargs",
    [{"widen_fraction": 1.0}, {"max_iterations": 0}, {"solver_tol": 0.0}, {"tol_consumption_rel": -1.0}, {"theta_init_module1": -0.5}],
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        CalibrationConfig(**kwargs)


def test_reference_validation():
    ref = ReferenceData.build({("M", "t1"): 100.0}, {("F", "M", "t1"): 5.0}, {("M", "t1"): -0.5}, {("M", "t1"): (110.0, 120.0)})
    with pytest.raises(InconsistentData):
        ref.validate()
