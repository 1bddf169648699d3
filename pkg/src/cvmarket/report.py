"""Result documents and the CSV tables rendered from them.

A calibration is stored as one JSON document holding raw per-market and
per-sale vectors. Every table, including the deviation statistics, is
recomputed from those vectors when it is rendered, so re-rendering a stored
result reproduces the tables byte for byte.
"""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path
from typing import Any, Iterable, Mapping

from .calibration import CalibrationResult, MarketRanges, ReferenceData, deviation_stats
from .errors import SchemaError
from .network import Equilibrium, MarketNetwork

# twelve significant digits can be off by 5e-12 relative; one more keeps a 1e-12 round trip
NUMBER_FORMAT = "%.13g"
STAT_COLUMNS = ("min_abs", "max_abs", "min_rel", "max_rel", "mean", "median")


def fmt(x: Any) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, (int, float)):
        x = float(x)
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return NUMBER_FORMAT % x
    return str(x)


def to_csv(header: Iterable[str], rows: Iterable[Iterable[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(header))
    for row in rows:
        w.writerow([fmt(x) for x in row])
    return buf.getvalue()


def _json_num(x: float) -> float | None:
    return float(x) if math.isfinite(x) else None


def _from_json_num(x: float | None, default: float = math.inf) -> float:
    return default if x is None else float(x)


# --- base equilibrium -------------------------------------------------------------

def equilibrium_tables(net: MarketNetwork, eq: Equilibrium) -> dict[str, str]:
    sales = to_csv(
        ("trader", "node", "period", "q_sales", "phi"),
        ((f, n, t, eq.q_sales[f, n, t], eq.phi.get((f, n, t))) for f, n, t in net.sales_keys()),
    )
    prices = to_csv(
        ("node", "period", "lambda", "consumption"),
        ((n, t, eq.lam[n, t], eq.s[n, t]) for n, t in net.markets()),
    )
    return {"sales.csv": sales, "prices.csv": prices}


def ranges_table(ranges: Mapping[tuple[str, str], MarketRanges], lambda_ref: Mapping[tuple[str, str], float]) -> str:
    """One row per market; ``minus_eta_hi`` is evaluated at the reference price."""
    rows = []
    for (n, t), r in ranges.items():
        rows.append((n, t, r.lambda_lo, r.lambda_hi, r.minus_eta_hi(lambda_ref[n, t]), r.empty))
    return to_csv(("node", "period", "lambda_lo", "lambda_hi", "minus_eta_hi_at_ref", "empty"), rows)


# --- calibration results ------------------------------------------------------------

def result_document(net: MarketNetwork, ref: ReferenceData, result: CalibrationResult) -> dict:
    eq = result.validation
    markets = []
    for nt in net.markets():
        a = result.anchors[nt]
        lo, hi = result.lambda_bounds[nt]
        markets.append({
            "node": nt[0],
            "period": nt[1],
            "s_ref": ref.s_ref[nt],
            "lambda_ref": ref.lambda_ref[nt],
            "eta_ref": ref.eta_ref[nt],
            "s0": a.s0,
            "lambda0": a.lambda0,
            "eta": a.eta,
            "lambda_lo": _json_num(lo),
            "lambda_hi": _json_num(hi),
            "s_star": eq.s[nt] if eq else None,
            "lambda_star": eq.lam[nt] if eq else None,
        })
    sales = []
    for key in net.sales_keys():
        sales.append({
            "trader": key[0],
            "node": key[1],
            "period": key[2],
            "q_ref": ref.q_ref.get(key, 0.0),
            "q_cal": result.q_cal[key],
            "phi_cal": result.phi_cal[key],
            "theta": result.theta[key],
            "q_star": eq.q_sales[key] if eq else None,
        })
    trace = []
    for rec in result.trace:
        trace.append({
            "iteration": rec.iteration,
            "markets": len(rec.markets),
            "satisfied": sum(1 for m in rec.markets.values() if m["satisfied"]),
            "widened": [list(nt) for nt in rec.widened],
            "max_sales_change": rec.max_sales_change,
            "price_gap": rec.price_gap,
        })
    return {
        "iterations": result.iterations,
        "termination": result.termination,
        "periods": list(net.periods),
        "markets": markets,
        "sales": sales,
        "trace": trace,
    }


def _need(doc: Mapping, key: str, where: str):
    if key not in doc:
        raise SchemaError(f"{where}: missing field {key!r}")
    return doc[key]


def report_tables(doc: Mapping) -> dict[str, str]:
    """Render the deviation, anchor, market power and trace tables of a result document."""
    markets = _need(doc, "markets", "result")
    sales = _need(doc, "sales", "result")
    trace = _need(doc, "trace", "result")
    periods = _need(doc, "periods", "result")

    pairs = []
    if all(m.get("s_star") is not None for m in markets):
        pairs.append(("consumption", [m["s_star"] for m in markets], [m["s_ref"] for m in markets]))
        pairs.append(("price", [m["lambda_star"] for m in markets], [m["lambda0"] for m in markets]))
        pairs.append(("sales", [s["q_star"] for s in sales], [s["q_cal"] for s in sales]))
    deviations = to_csv(
        ("pair",) + STAT_COLUMNS,
        ((name,) + tuple(deviation_stats(v, r)[c] for c in STAT_COLUMNS) for name, v, r in pairs),
    )

    anchors = to_csv(
        ("node", "period", "s_ref", "lambda_ref", "lambda0", "eta_ref", "eta", "lambda_lo", "lambda_hi"),
        (
            (
                m["node"], m["period"], m["s_ref"], m["lambda_ref"], m["lambda0"], m["eta_ref"], m["eta"],
                _from_json_num(m["lambda_lo"], -math.inf), _from_json_num(m["lambda_hi"]),
            )
            for m in markets
        ),
    )

    traders = list(dict.fromkeys(s["trader"] for s in sales))
    columns = [(n, t) for t in periods for n in dict.fromkeys(m["node"] for m in markets if m["period"] == t)]
    theta = {(s["trader"], s["node"], s["period"]): s["theta"] for s in sales}
    matrix = to_csv(
        ["trader"] + [f"{n}/{t}" for n, t in columns],
        ([f] + [theta.get((f, n, t)) for n, t in columns] for f in traders),
    )

    sales_table = to_csv(
        ("trader", "node", "period", "q_ref", "q_cal", "phi_cal", "theta", "q_star"),
        (
            (s["trader"], s["node"], s["period"], s["q_ref"], s["q_cal"], s["phi_cal"], s["theta"], s["q_star"])
            for s in sales
        ),
    )

    trace_table = to_csv(
        ("iteration", "satisfied", "markets", "widened", "max_sales_change", "price_gap"),
        (
            (
                r["iteration"], r["satisfied"], r["markets"],
                " ".join(f"{n}/{t}" for n, t in r["widened"]),
                r["max_sales_change"], r["price_gap"],
            )
            for r in trace
        ),
    )
    return {
        "deviations.csv": deviations,
        "anchors.csv": anchors,
        "theta.csv": matrix,
        "sales.csv": sales_table,
        "trace.csv": trace_table,
    }


def write_tables(out: str | Path, tables: Mapping[str, str]) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, text in tables.items():
        path = out / name
        path.write_text(text)
        written.append(path)
    return written
