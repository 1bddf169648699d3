"""JSON input files: networks, anchors, market power parameters, references, config.

Network file::

    {
      "nodes": ["N1", "N2"], "periods": ["t1"],
      "consumers": ["N2"],                      # optional, see below
      "traders": [{"name": "F1", "production": ["N1"], "storage": [],
                   "consumers": ["N2"], "pipelines": [["N1", "N2"]], "ships": []}],
      "services": {"P": [{"node": "N1", "linc": 80, "quac": {"t1": 0.1},
                          "cap": {"t1": 40}, "cap_total": null}], "I": [], ...},
      "arcs": {"A": [{"from": "N1", "to": "N2", "linc": 5}], "B": []},
      "anchors": [{"node": "N2", "period": "t1", "s0": 50, "lambda0": 100, "eta": -0.5}]
    }

``cap``, ``linc`` and ``quac`` take either one number for every period or a
per-period mapping; ``null`` or a missing capacity means unbounded. When
``consumers`` is absent the consumer nodes are those some trader sells at.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any, Mapping

from .calibration import CalibrationConfig, RawReference
from .errors import InvariantViolation, ParseError, SchemaError
from .network import (
    ARC_SERVICES,
    NODE_SERVICES,
    DemandAnchor,
    MarketNetwork,
    Service,
    Trader,
)

CONFIG_KEYS = (
    "tol_consumption_rel",
    "tol_consumption_abs",
    "widen_fraction",
    "max_iterations",
    "solver_tol",
    "theta_init_module1",
    "relaxed_termination",
    "zero_tol",
)


# --- low-level helpers ----------------------------------------------------------

def read_json(path: str | Path) -> Any:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc.strerror or exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc


def write_json(path: str | Path, doc: Any) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=False, allow_nan=False) + "\n")


def _obj(value: Any, where: str) -> dict:
    if not isinstance(value, dict):
        raise SchemaError(f"{where}: expected an object")
    return value


def _list(value: Any, where: str) -> list:
    if not isinstance(value, list):
        raise SchemaError(f"{where}: expected a list")
    return value


def _str(value: Any, where: str) -> str:
    if not isinstance(value, str) or not value:
        raise SchemaError(f"{where}: expected a non-empty string")
    return value


def _num(value: Any, where: str, allow_none: bool = False) -> float:
    if value is None and allow_none:
        return math.inf
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(f"{where}: expected a number")
    return float(value)


def _keys(doc: dict, allowed: tuple[str, ...], where: str) -> None:
    extra = sorted(set(doc) - set(allowed))
    if extra:
        raise SchemaError(f"{where}: unknown field {extra[0]!r}")


def _require(doc: dict, key: str, where: str) -> Any:
    if key not in doc:
        raise SchemaError(f"{where}: missing field {key!r}")
    return doc[key]


def _per_period(value: Any, periods: tuple[str, ...], where: str, allow_none: bool = False) -> dict[str, float]:
    if value is None and allow_none:
        return {}
    if isinstance(value, dict):
        out = {}
        for t, v in value.items():
            if t not in periods:
                raise SchemaError(f"{where}: unknown period {t!r}")
            x = _num(v, f"{where}.{t}", allow_none)
            if math.isfinite(x):
                out[t] = x
        return out
    x = _num(value, where, allow_none)
    return {t: x for t in periods} if math.isfinite(x) else {}


def _arc(value: Any, where: str) -> tuple[str, str]:
    items = _list(value, where)
    if len(items) != 2:
        raise SchemaError(f"{where}: an arc is a [from, to] pair")
    return (_str(items[0], f"{where}[0]"), _str(items[1], f"{where}[1]"))


# --- networks -------------------------------------------------------------------

def _service(kind: str, loc, doc: dict, periods, where: str) -> Service:
    return Service(
        kind,
        loc,
        cap=_per_period(doc.get("cap"), periods, f"{where}.cap", allow_none=True),
        cap_total=_num(doc.get("cap_total"), f"{where}.cap_total", allow_none=True),
        linc=_per_period(doc["linc"], periods, f"{where}.linc") if "linc" in doc else {},
        quac=_per_period(doc["quac"], periods, f"{where}.quac") if "quac" in doc else {},
    )


def network_from_dict(doc: Any) -> MarketNetwork:
    doc = _obj(doc, "network")
    _keys(doc, ("nodes", "periods", "consumers", "traders", "services", "arcs", "anchors"), "network")
    nodes = tuple(_str(n, f"nodes[{i}]") for i, n in enumerate(_list(_require(doc, "nodes", "network"), "nodes")))
    periods = tuple(_str(t, f"periods[{i}]") for i, t in enumerate(_list(_require(doc, "periods", "network"), "periods")))

    traders = []
    for i, f in enumerate(_list(doc.get("traders", []), "traders")):
        where = f"traders[{i}]"
        f = _obj(f, where)
        _keys(f, ("name", "production", "storage", "consumers", "pipelines", "ships"), where)
        names = {}
        for key in ("production", "storage", "consumers"):
            names[key] = tuple(_str(n, f"{where}.{key}[{j}]") for j, n in enumerate(_list(f.get(key, []), f"{where}.{key}")))
        arcs = {}
        for key in ("pipelines", "ships"):
            arcs[key] = tuple(_arc(a, f"{where}.{key}[{j}]") for j, a in enumerate(_list(f.get(key, []), f"{where}.{key}")))
        traders.append(Trader(_str(_require(f, "name", where), f"{where}.name"), **names, **arcs))

    services = {}
    node_docs = _obj(doc.get("services", {}), "services")
    _keys(node_docs, NODE_SERVICES, "services")
    for kind, entries in node_docs.items():
        for i, s in enumerate(_list(entries, f"services.{kind}")):
            where = f"services.{kind}[{i}]"
            s = _obj(s, where)
            _keys(s, ("node", "cap", "cap_total", "linc", "quac"), where)
            node = _str(_require(s, "node", where), f"{where}.node")
            if (kind, node) in services:
                raise SchemaError(f"{where}: duplicate service at {node!r}")
            services[kind, node] = _service(kind, node, s, periods, where)
    arc_docs = _obj(doc.get("arcs", {}), "arcs")
    _keys(arc_docs, ARC_SERVICES, "arcs")
    for kind, entries in arc_docs.items():
        for i, s in enumerate(_list(entries, f"arcs.{kind}")):
            where = f"arcs.{kind}[{i}]"
            s = _obj(s, where)
            _keys(s, ("from", "to", "cap", "cap_total", "linc", "quac"), where)
            arc = (_str(_require(s, "from", where), f"{where}.from"), _str(_require(s, "to", where), f"{where}.to"))
            if (kind, arc) in services:
                raise SchemaError(f"{where}: duplicate arc {arc[0]}->{arc[1]}")
            services[kind, arc] = _service(kind, arc, s, periods, where)

    if "consumers" in doc:
        consumers = tuple(_str(n, f"consumers[{i}]") for i, n in enumerate(_list(doc["consumers"], "consumers")))
    else:
        sold = {n for f in traders for n in f.consumers}
        consumers = tuple(n for n in nodes if n in sold)

    net = MarketNetwork(nodes, periods, tuple(traders), consumers, services)
    problems = net.reach_problems()
    if problems:
        raise InvariantViolation(problems[0], "traders")
    return net


def network_to_dict(net: MarketNetwork, anchors: Mapping[tuple[str, str], DemandAnchor] | None = None) -> dict:
    def values(svc: Service) -> dict:
        out: dict[str, Any] = {}
        if svc.cap:
            out["cap"] = {t: svc.cap[t] for t in net.periods if t in svc.cap}
        if math.isfinite(svc.cap_total):
            out["cap_total"] = svc.cap_total
        if svc.linc:
            out["linc"] = {t: svc.linc[t] for t in net.periods if t in svc.linc}
        if svc.quac:
            out["quac"] = {t: svc.quac[t] for t in net.periods if t in svc.quac}
        return out

    services: dict[str, list] = {k: [] for k in NODE_SERVICES}
    arcs: dict[str, list] = {k: [] for k in ARC_SERVICES}
    for (kind, loc), svc in net.services.items():
        if kind in NODE_SERVICES:
            services[kind].append({"node": loc, **values(svc)})
        else:
            arcs[kind].append({"from": loc[0], "to": loc[1], **values(svc)})
    doc = {
        "nodes": list(net.nodes),
        "periods": list(net.periods),
        "consumers": list(net.consumers),
        "traders": [
            {
                "name": f.name,
                "production": list(f.production),
                "storage": list(f.storage),
                "consumers": list(f.consumers),
                "pipelines": [list(a) for a in f.pipelines],
                "ships": [list(a) for a in f.ships],
            }
            for f in net.traders
        ],
        "services": services,
        "arcs": arcs,
    }
    if anchors is not None:
        doc["anchors"] = anchors_to_list(anchors)
    return doc


def load_network(path: str | Path) -> MarketNetwork:
    return network_from_dict(read_json(path))


# --- anchors and market power -----------------------------------------------------

def anchors_to_list(anchors: Mapping[tuple[str, str], DemandAnchor]) -> list[dict]:
    return [
        {"node": n, "period": t, "s0": a.s0, "lambda0": a.lambda0, "eta": a.eta}
        for (n, t), a in anchors.items()
    ]


def anchors_from_doc(doc: Any, net: MarketNetwork) -> dict[tuple[str, str], DemandAnchor]:
    """Anchors from a list, or from the ``anchors`` field of an object."""
    if isinstance(doc, dict):
        doc = _require(doc, "anchors", "anchors file")
    out = {}
    for i, a in enumerate(_list(doc, "anchors")):
        where = f"anchors[{i}]"
        a = _obj(a, where)
        _keys(a, ("node", "period", "s0", "lambda0", "eta"), where)
        nt = (_str(_require(a, "node", where), f"{where}.node"), _str(_require(a, "period", where), f"{where}.period"))
        if nt[0] not in net.consumers:
            raise SchemaError(f"{where}: {nt[0]!r} is not a consumer node")
        if nt[1] not in net.periods:
            raise SchemaError(f"{where}: unknown period {nt[1]!r}")
        if nt in out:
            raise SchemaError(f"{where}: duplicate anchor for {nt}")
        out[nt] = DemandAnchor(
            _num(_require(a, "s0", where), f"{where}.s0"),
            _num(_require(a, "lambda0", where), f"{where}.lambda0"),
            _num(_require(a, "eta", where), f"{where}.eta"),
        )
    return out


def load_anchors(path: str | Path, net: MarketNetwork) -> dict[tuple[str, str], DemandAnchor]:
    return anchors_from_doc(read_json(path), net)


def theta_to_dict(theta: Mapping[tuple[str, str, str], float]) -> dict:
    return {"entries": [{"trader": f, "node": n, "period": t, "theta": v} for (f, n, t), v in theta.items()]}


def theta_from_doc(doc: Any, net: MarketNetwork) -> float | dict[tuple[str, str, str], float]:
    """A bare number, or ``{"default": x, "entries": [...]}`` with per-sale overrides."""
    if not isinstance(doc, dict):
        return _num(doc, "theta")
    _keys(doc, ("default", "entries"), "theta")
    keys = net.sales_keys()
    out: dict[tuple[str, str, str], float] = {}
    if "default" in doc:
        default = _num(doc["default"], "theta.default")
        out = {k: default for k in keys}
    known = set(keys)
    for i, e in enumerate(_list(doc.get("entries", []), "theta.entries")):
        where = f"theta.entries[{i}]"
        e = _obj(e, where)
        _keys(e, ("trader", "node", "period", "theta"), where)
        key = tuple(_str(_require(e, k, where), f"{where}.{k}") for k in ("trader", "node", "period"))
        if key not in known:
            raise SchemaError(f"{where}: trader {key[0]!r} does not sell at {key[1]!r} in {key[2]!r}")
        out[key] = _num(_require(e, "theta", where), f"{where}.theta")
    return out


def load_theta(path: str | Path, net: MarketNetwork):
    return theta_from_doc(read_json(path), net)


# --- references ------------------------------------------------------------------------

def _market_entries(doc: dict, key: str, net: MarketNetwork, bounds: bool) -> tuple[dict, dict]:
    values, boxes = {}, {}
    markets = set(net.markets())
    for i, e in enumerate(_list(doc.get(key, []), f"reference.{key}")):
        where = f"reference.{key}[{i}]"
        e = _obj(e, where)
        _keys(e, ("node", "period", "value", "lo", "hi") if bounds else ("node", "period", "value"), where)
        nt = (_str(_require(e, "node", where), f"{where}.node"), _str(_require(e, "period", where), f"{where}.period"))
        if nt not in markets:
            raise SchemaError(f"{where}: no consumer market at {nt}")
        if nt in values:
            raise SchemaError(f"{where}: duplicate entry for {nt}")
        values[nt] = _num(_require(e, "value", where), f"{where}.value")
        if bounds and ("lo" in e or "hi" in e):
            boxes[nt] = (_num(_require(e, "lo", where), f"{where}.lo"), _num(_require(e, "hi", where), f"{where}.hi"))
    return values, boxes


def reference_from_dict(doc: Any, net: MarketNetwork) -> RawReference:
    """Raw reference data; see ``RawReference.consistent`` for the sales/consumption check."""
    doc = _obj(doc, "reference")
    _keys(doc, ("prices", "elasticities", "consumption", "sales", "production"), "reference")
    lam, lam_box = _market_entries(doc, "prices", net, bounds=True)
    eta, eta_box = _market_entries(doc, "elasticities", net, bounds=True)
    s, _ = _market_entries(doc, "consumption", net, bounds=False)

    sellers = set(net.sales_keys())
    traders = {f.name for f in net.traders}
    q: dict[tuple[str, str, str], float] = {}
    for i, e in enumerate(_list(doc.get("sales", []), "reference.sales")):
        where = f"reference.sales[{i}]"
        e = _obj(e, where)
        _keys(e, ("trader", "node", "period", "value"), where)
        key = tuple(_str(_require(e, k, where), f"{where}.{k}") for k in ("trader", "node", "period"))
        if key[0] not in traders:
            raise SchemaError(f"{where}: unknown trader {key[0]!r}")
        if key not in sellers:
            raise SchemaError(f"{where}: trader {key[0]!r} does not sell at {key[1]!r} in {key[2]!r}")
        if key in q:
            raise SchemaError(f"{where}: duplicate entry for {key}")
        q[key] = _num(_require(e, "value", where), f"{where}.value")

    p, loss = {}, {}
    for i, e in enumerate(_list(doc.get("production", []), "reference.production")):
        where = f"reference.production[{i}]"
        e = _obj(e, where)
        _keys(e, ("trader", "period", "value", "loss"), where)
        ft = (_str(_require(e, "trader", where), f"{where}.trader"), _str(_require(e, "period", where), f"{where}.period"))
        if ft[0] not in traders:
            raise SchemaError(f"{where}: unknown trader {ft[0]!r}")
        if ft[1] not in net.periods:
            raise SchemaError(f"{where}: unknown period {ft[1]!r}")
        p[ft] = _num(_require(e, "value", where), f"{where}.value")
        if "loss" in e:
            loss[ft] = _num(e["loss"], f"{where}.loss")

    for nt in net.markets():
        if nt not in lam:
            raise SchemaError(f"reference.prices: missing entry for {nt}")
        if nt not in eta:
            raise SchemaError(f"reference.elasticities: missing entry for {nt}")
        if nt not in s:
            s[nt] = sum(v for (f, n, t), v in q.items() if (n, t) == nt)
    return RawReference(lam, q, s, eta, p, loss, lam_box, eta_box)


def reference_to_dict(raw: RawReference) -> dict:
    def market(values, boxes):
        out = []
        for (n, t), v in values.items():
            e = {"node": n, "period": t, "value": v}
            if (n, t) in boxes:
                e["lo"], e["hi"] = boxes[n, t]
            out.append(e)
        return out

    doc = {
        "prices": market(raw.lambda_data, raw.lambda_bounds),
        "elasticities": market(raw.eta_data, raw.eta_bounds),
        "consumption": market(raw.s_data, {}),
        "sales": [{"trader": f, "node": n, "period": t, "value": v} for (f, n, t), v in raw.q_data.items()],
    }
    if raw.p_data:
        doc["production"] = []
        for (f, t), v in raw.p_data.items():
            e = {"trader": f, "period": t, "value": v}
            if (f, t) in raw.loss:
                e["loss"] = raw.loss[f, t]
            doc["production"].append(e)
    return doc


def load_reference(path: str | Path, net: MarketNetwork) -> RawReference:
    return reference_from_dict(read_json(path), net)


# --- config --------------------------------------------------------------------------------

def config_from_dict(doc: Any) -> tuple[CalibrationConfig, int | None]:
    """Calibration settings plus the optional ``seed`` for fixture generation."""
    doc = _obj(doc, "config")
    _keys(doc, CONFIG_KEYS + ("seed",), "config")
    kwargs: dict[str, Any] = {}
    for key in CONFIG_KEYS:
        if key not in doc:
            continue
        if key == "relaxed_termination":
            if not isinstance(doc[key], bool):
                raise SchemaError(f"config.{key}: expected true or false")
            kwargs[key] = doc[key]
        elif key == "max_iterations":
            if isinstance(doc[key], bool) or not isinstance(doc[key], int):
                raise SchemaError(f"config.{key}: expected an integer")
            kwargs[key] = doc[key]
        else:
            kwargs[key] = _num(doc[key], f"config.{key}")
    seed = doc.get("seed")
    if seed is not None and (isinstance(seed, bool) or not isinstance(seed, int)):
        raise SchemaError("config.seed: expected an integer")
    try:
        return CalibrationConfig(**kwargs), seed
    except ValueError as exc:
        raise SchemaError(f"config: {exc}") from exc


def load_config(path: str | Path | None) -> tuple[CalibrationConfig, int | None]:
    if path is None:
        return CalibrationConfig(), None
    return config_from_dict(read_json(path))
