"""Command-line driver: ``cvmarket <command> [options]``.

Failures print a JSON object to stderr and exit with a code that identifies
the error class (see ``EXIT_CODES``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import synthetic
from .calibration import RawReference, admissible_ranges, calibrate, marginal_costs, preprocess_reference
from .errors import (
    CalibrationError,
    CvMarketError,
    InconsistentData,
    InputError,
    InvariantViolation,
    LcpError,
    MaxIterationsExceeded,
    MissingAnchor,
    ModelError,
    ParseError,
    SchemaError,
    SolverFailure,
)
from .io import (
    anchors_from_doc,
    load_config,
    load_reference,
    load_theta,
    network_from_dict,
    network_to_dict,
    read_json,
    reference_to_dict,
    theta_to_dict,
    write_json,
)
from .lcp import solve_mlcp
from .model import assemble_base, extract_equilibrium
from .network import DemandAnchor
from .report import equilibrium_tables, ranges_table, report_tables, result_document, write_tables

# most specific class first
EXIT_CODES: tuple[tuple[type, int], ...] = (
    (ParseError, 3),
    (SchemaError, 4),
    (InputError, 4),
    (InvariantViolation, 5),
    (MissingAnchor, 6),
    (ModelError, 7),
    (LcpError, 8),
    (InconsistentData, 9),
    (MaxIterationsExceeded, 10),
    (SolverFailure, 11),
    (CalibrationError, 12),
    (CvMarketError, 1),
)

FIXTURES = {
    "single": synthetic.single_market,
    "two-node": synthetic.two_node,
    "ten-node": synthetic.ten_node,
    "replica": synthetic.replica,
}


def exit_code(exc: CvMarketError) -> int:
    for cls, code in EXIT_CODES:
        if isinstance(exc, cls):
            return code
    return 1


def _network_and_anchors(path: str, anchors_path: str | None):
    doc = read_json(path)
    net = network_from_dict(doc)
    if anchors_path is not None:
        anchors = anchors_from_doc(read_json(anchors_path), net)
    elif isinstance(doc, dict) and "anchors" in doc:
        anchors = anchors_from_doc(doc["anchors"], net)
    else:
        anchors = None
    return net, anchors


def _echo(doc: dict) -> None:
    print(json.dumps(doc, indent=2))


# --- commands -------------------------------------------------------------------------

def cmd_validate(args) -> int:
    net, anchors = _network_and_anchors(args.network, args.anchors)
    summary = {
        "nodes": len(net.nodes),
        "periods": len(net.periods),
        "traders": len(net.traders),
        "markets": len(net.markets()),
        "sales": len(net.sales_keys()),
        "arcs": synthetic.count_arcs(net),
    }
    if anchors is not None:
        missing = [nt for nt in net.markets() if nt not in anchors]
        if missing:
            raise MissingAnchor(f"no demand anchor for node {missing[0][0]!r} in period {missing[0][1]!r}")
        summary["anchors"] = len(anchors)
    if args.theta:
        load_theta(args.theta, net)
    if args.reference:
        raw = load_reference(args.reference, net)
        summary["reference_consistent"] = raw.consistent()
    if args.config:
        load_config(args.config)
    _echo(summary)
    return 0


def cmd_solve(args) -> int:
    net, anchors = _network_and_anchors(args.network, args.anchors)
    if anchors is None:
        anchors = {}
    theta = load_theta(args.theta, net) if args.theta else 1.0
    config, _ = load_config(args.config)
    problem = assemble_base(net, anchors, theta)
    sol = solve_mlcp(problem, tol=config.solver_tol)
    eq = extract_equilibrium(net, problem, sol)
    out = Path(args.out)
    write_tables(out, equilibrium_tables(net, eq))
    summary = {"dimension": problem.dim, "pivots": sol.pivots, "residual": sol.residual}
    write_json(out / "solve.json", summary)
    _echo(summary)
    return 0


def cmd_ranges(args) -> int:
    net, _ = _network_and_anchors(args.network, None)
    config, _ = load_config(args.config)
    ref = preprocess_reference(net, load_reference(args.reference, net), config)
    anchors = {nt: DemandAnchor(ref.s_ref[nt], ref.lambda_ref[nt], ref.eta_ref[nt]) for nt in net.markets()}
    phi = marginal_costs(net, anchors, ref.q_ref, config)
    ranges = {}
    for n, t in net.markets():
        keys = [(f.name, n, t) for f in net.traders_at(n)]
        ranges[n, t] = admissible_ranges(
            [phi[k] for k in keys], [ref.q_ref.get(k, 0.0) for k in keys], ref.s_ref[n, t], config.zero_tol
        )
    out = Path(args.out)
    write_tables(out, {"ranges.csv": ranges_table(ranges, ref.lambda_ref)})
    empty = [f"{n}/{t}" for (n, t), r in ranges.items() if r.empty]
    _echo({"markets": len(ranges), "empty": empty})
    return 0


def cmd_calibrate(args) -> int:
    net, _ = _network_and_anchors(args.network, None)
    config, _ = load_config(args.config)
    ref = preprocess_reference(net, load_reference(args.reference, net), config)
    result = calibrate(net, ref, config)
    doc = result_document(net, ref, result)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "result.json", doc)
    write_tables(out, report_tables(doc))
    _echo({"iterations": result.iterations, "termination": result.termination})
    return 0


def cmd_report(args) -> int:
    doc = read_json(args.result)
    if not isinstance(doc, dict):
        raise SchemaError("result: expected an object")
    write_tables(args.out, report_tables(doc))
    _echo({"iterations": doc.get("iterations"), "termination": doc.get("termination")})
    return 0


def cmd_generate(args) -> int:
    config_seed = load_config(args.config)[1] if args.config else None
    seed = args.seed if args.seed is not None else (config_seed or 0)
    fixture = FIXTURES[args.kind](seed)
    if args.perturb > 0:
        raw = fixture.perturbed_raw(np.random.default_rng(seed), spread=args.perturb)
    else:
        ref = fixture.exact_reference()
        raw = RawReference(
            lambda_data=ref.lambda_ref,
            q_data=ref.q_ref,
            s_data=ref.s_ref,
            eta_data=ref.eta_ref,
            lambda_bounds={nt: (ref.lambda_lo[nt], ref.lambda_hi[nt]) for nt in ref.lambda_ref},
            eta_bounds={nt: (ref.eta_lo[nt], ref.eta_hi[nt]) for nt in ref.eta_ref},
        )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "network.json", network_to_dict(fixture.net, fixture.anchors))
    write_json(out / "theta.json", theta_to_dict(fixture.theta))
    write_json(out / "reference.json", reference_to_dict(raw))
    _echo({"kind": args.kind, "seed": seed, "dimension": assemble_base(fixture.net, fixture.anchors, fixture.theta).dim})
    return 0


# --- parser ---------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cvmarket", description="Conjectural-variations market models and their calibration.")
    p.add_argument("-v", "--verbose", action="store_true", help="log calibration progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("validate", help="check input files without solving")
    s.add_argument("--network", required=True)
    s.add_argument("--reference")
    s.add_argument("--anchors")
    s.add_argument("--theta")
    s.add_argument("--config")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("solve", help="solve the base equilibrium")
    s.add_argument("--network", required=True)
    s.add_argument("--anchors", help="anchors file; defaults to the network file's anchors")
    s.add_argument("--theta", help="market power file; defaults to 1 everywhere")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("ranges", help="admissible anchor price ranges after the marginal cost step")
    s.add_argument("--network", required=True)
    s.add_argument("--reference", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ranges)

    s = sub.add_parser("calibrate", help="run the full calibration and write the report")
    s.add_argument("--network", required=True)
    s.add_argument("--reference", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("report", help="re-render the tables of a stored result")
    s.add_argument("--result", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("generate", help="write a seeded synthetic fixture")
    s.add_argument("--kind", choices=sorted(FIXTURES), required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--config", help="config file whose seed is used when --seed is absent")
    s.add_argument("--perturb", type=float, default=0.0, help="relative spread of perturbed references (0 = exact)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_generate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CvMarketError as exc:
        code = exit_code(exc)
        print(json.dumps({**exc.payload(), "exit_code": code}), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
