"""Command line: check, rectify, flow and compare on JSON system files.

Exit codes: 0 success / integrable, 1 input error, 2 indeterminate, 3 certified not
integrable (or compare deviation above tolerance), 4 chart construction failure,
5 flow truncated at the first grid point.
"""

from __future__ import annotations

import argparse
import math
import sys
import time
from typing import Any

import numpy as np

from . import __version__
from .distrib import CoreError, PreconditionError, dist_integrability_order, dist_series, regularity_check
from .expr import ExprDomainError, IndeterminateError, ParseError
from .liealg import (InternalConsistencyError, central_series, derived_series, gamma_series,
                     lie_integrability_order, structure_constants)
from .quad import TOL_FLOW, ChartError, chart_flow, build_chart, compare_flow, rk_oracle, annihilator_basis
from .systems import SystemFileError, load_system, system_to_dict, with_overrides
from .vfield import SIGMA_TOL, verify_frame

EXIT_OK, EXIT_INPUT, EXIT_INDETERMINATE, EXIT_NOT_INTEGRABLE, EXIT_CHART, EXIT_FLOW = range(6)
TOL_ZERO = 1e-9
TOL_SC = 1e-8


def dumps(obj: Any, indent: int = 2) -> str:
    """Deterministic JSON with floats at 17 significant digits; non-finite floats become null."""

    def enc(o, level):
        pad, inner = " " * (indent * level), " " * (indent * (level + 1))
        if o is None or isinstance(o, bool):
            return {None: "null", True: "true", False: "false"}[o]
        if isinstance(o, (int, np.integer)):
            return str(int(o))
        if isinstance(o, (float, np.floating)):
            o = float(o)
            return "%.17g" % o if math.isfinite(o) else "null"
        if isinstance(o, str):
            import json

            return json.dumps(o)
        if isinstance(o, np.ndarray):
            return enc(o.tolist(), level)
        if isinstance(o, dict):
            if not o:
                return "{}"
            items = [f"{inner}{enc(str(k), 0)}: {enc(v, level + 1)}" for k, v in o.items()]
            return "{\n" + ",\n".join(items) + "\n" + pad + "}"
        if isinstance(o, (list, tuple)):
            if not o:
                return "[]"
            if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in o):
                return "[" + ", ".join(enc(v, level + 1) for v in o) + "]"
            return "[\n" + ",\n".join(inner + enc(v, level + 1) for v in o) + "\n" + pad + "]"
        raise TypeError(f"cannot serialize {type(o).__name__}")

    return enc(obj, 0)


def trace_dict(trace) -> dict:
    return {"kind": trace.kind, "dims": trace.dims, "abelian": trace.abelian, "verdict": trace.verdict,
            "bases": [e.basis.tolist() for e in trace.entries]}


def order_dict(order) -> dict:
    return {"integrable": order.integrable, "abelian_index": order.abelian_index, "order": order.order}


def _lie_pipeline(system, report: dict):
    frame = system.frame
    lie: dict[str, Any] = {"attempted": True}
    report["lie"] = lie
    try:
        c = structure_constants(frame)
    except (np.linalg.LinAlgError, ValueError) as exc:
        lie.update(closed=None, error=str(exc))
        return None
    lie.update(closed=c.closed, fit_residual=c.residual, tol=TOL_SC, zero_tol=TOL_ZERO)
    if not c.closed:
        i, j = c.witness
        lie["witness_pair"] = [frame.fields[i].name, frame.fields[j].name]
        lie["coefficient_spread"] = c.diagnostic
        return None
    names = frame.names
    lie["structure_constants"] = [
        {"i": names[i], "j": names[j], "bracket": {names[k]: float(c.tensor[i, j, k])
                                                   for k in range(c.n) if c.tensor[i, j, k]}}
        for i in range(c.n) for j in range(i + 1, c.n) if np.any(c.tensor[i, j])]
    lie["jacobi_residual"] = c.jacobi_residual()
    d, z = derived_series(c), central_series(c)
    g = gamma_series(c, system.gamma_index)
    order = lie_integrability_order(g)
    lie.update(derived=trace_dict(d), central=trace_dict(z), gamma=trace_dict(g),
               solvable=d.verdict == "zero", nilpotent=z.verdict == "zero", order=order_dict(order))
    lie["orders_by_dynamics"] = {names[i]: lie_integrability_order(gamma_series(c, i)).order
                                 for i in range(c.n)}
    return g, order


def _dist_pipeline(system, report: dict):
    frame = system.frame
    dist: dict[str, Any] = {"attempted": True}
    report["distributional"] = dist
    reg = regularity_check(frame)
    dist.update(regular=reg.regular, completely_regular=reg.completely_regular, span_dim=reg.span_dim,
                witness=reg.witness, rank_tol=1e-10)
    if not reg.completely_regular:
        dist["error"] = "V is not completely regular"
        return None
    g = dist_series("dist_gamma", reg, system.gamma_index)
    d = dist_series("dist_derived", reg)
    z = dist_series("dist_central", reg)
    order = dist_integrability_order(g)
    dist.update(derived=trace_dict(d), central=trace_dict(z), gamma=trace_dict(g),
                solvable=d.verdict == "zero", nilpotent=z.verdict == "zero", order=order_dict(order),
                core_tol=1e-10)
    return g, order


def run_check(system, mode: str = "auto") -> tuple[dict, int, Any]:
    """Certification report, exit code, and the Gamma trace used for charts (or None)."""
    mode = {"dist": "distributional"}.get(mode, mode)
    if mode == "auto" and system.mode != "auto":
        mode = system.mode
    report: dict[str, Any] = {"mode": mode}
    fc = verify_frame(system.frame)
    report["frame"] = {"verified": fc.ok, "min_sigma": fc.min_sigma, "min_ratio": fc.min_ratio,
                       "witness": fc.witness, "skipped": fc.skipped, "tol": SIGMA_TOL}
    result, pipeline = None, None
    try:
        if mode in ("auto", "lie"):
            result = _lie_pipeline(system, report)
            pipeline = "lie" if result else None
        if result is None and mode in ("auto", "distributional"):
            result = _dist_pipeline(system, report)
            pipeline = "distributional" if result else None
    except (IndeterminateError, CoreError, PreconditionError, InternalConsistencyError, ExprDomainError) as exc:
        report.update(verdict="indeterminate", reason=str(exc))
        return report, EXIT_INDETERMINATE, None
    if result is None:
        lie_not_closed = report.get("lie", {}).get("closed") is False
        if mode == "lie" and lie_not_closed:
            report.update(verdict="not_integrable", reason="frame does not close over the reals")
            return report, EXIT_NOT_INTEGRABLE, None
        report.update(verdict="indeterminate", reason="no pipeline applies")
        return report, EXIT_INDETERMINATE, None
    trace, order = result
    report.update(pipeline=pipeline, order=order_dict(order))
    if not order.integrable:
        report.update(verdict="not_integrable",
                      reason="NotLieIntegrable" if pipeline == "lie" else "NotDistIntegrable")
        return report, EXIT_NOT_INTEGRABLE, None
    if not fc.ok:
        report.update(verdict="indeterminate",
                      reason="series terminates abelian but the frame is not pointwise independent")
        return report, EXIT_INDETERMINATE, trace
    report["verdict"] = "integrable"
    return report, EXIT_OK, trace


def _planned_stages(trace) -> list[int]:
    chain = trace.chain_to_zero()
    return [len(annihilator_basis(b, a, s + 1)) for s, (a, b) in enumerate(zip(chain, chain[1:]))]


def run_rectify(system, mode: str = "auto"):
    report, code, trace = run_check(system, mode)
    out: dict[str, Any] = {"check": report}
    if trace is None:
        return out, code, None
    out["planned_covectors"] = _planned_stages(trace)
    try:
        chart = build_chart(trace, system)
    except ChartError as exc:
        out["chart"] = {"error": str(exc), "stage": exc.stage}
        return out, EXIT_CHART, None
    out["chart"] = chart.diagnostics()
    out["chart"]["tolerances"] = {"closed": 1e-7, "quad": chart.tol_quad}
    return out, EXIT_OK if code == EXIT_OK else code, chart


def _grid(args) -> np.ndarray:
    if args.steps < 1:
        raise SystemFileError("--steps must be at least 1")
    return np.linspace(args.t0, args.t1, args.steps + 1)


def _start(args, system) -> np.ndarray:
    if args.x0 is None:
        return np.asarray(system.domain.x0, dtype=float)
    try:
        x = np.array([float(v) for v in args.x0.split(",")])
    except ValueError:
        raise SystemFileError(f"cannot parse --x0 {args.x0!r}") from None
    if len(x) != system.n:
        raise SystemFileError(f"--x0 needs {system.n} values")
    if not system.domain.contains(x):
        raise SystemFileError("--x0 is outside the domain box")
    return x


def run_flow(system, x, times, mode: str = "auto"):
    out, code, chart = run_rectify(system, mode)
    if chart is None:
        return out, code if code != EXIT_OK else EXIT_CHART, None
    flow = chart_flow(chart, x, times)
    out["flow"] = flow.to_dict()
    if not flow.converged[0]:
        return out, EXIT_FLOW, flow
    return out, EXIT_OK, flow


def run_compare(system, x, times, tol: float = TOL_FLOW, mode: str = "auto"):
    out, code, flow = run_flow(system, x, times, mode)
    if flow is None or code == EXIT_FLOW:
        return out, code
    oracle = rk_oracle(system.gamma, x, times, system.domain)
    out["oracle"] = oracle.to_dict()
    ok = flow.converged & oracle.converged
    if not ok.all():
        out["comparison"] = {"pass": False, "tol": tol, "reason": "a trajectory is truncated"}
        return out, EXIT_NOT_INTEGRABLE
    cmp = compare_flow(flow, oracle, tol)
    out["comparison"] = cmp.to_dict()
    return out, EXIT_OK if cmp.ok else EXIT_NOT_INTEGRABLE


def _summary(command: str, out: dict, code: int, seconds: float) -> str:
    check = out.get("check", out)
    lines = [f"liequad {command}: exit {code} ({seconds:.2f} s)"]
    if "verdict" in check:
        order = check.get("order") or {}
        lines.append(f"  verdict {check['verdict']}, pipeline {check.get('pipeline')}, order {order.get('order')}")
        if "reason" in check:
            lines.append(f"  reason: {check['reason']}")
    if "chart" in out:
        ch = out["chart"]
        lines.append("  chart error: " + ch["error"] if "error" in ch else
                     f"  chart stages {[s['covectors'] for s in ch['stages']]}, cond(J(x0)) {ch['jacobian_cond_x0']:.3g}")
    if "comparison" in out:
        cmp = out["comparison"]
        lines.append(f"  max deviation {cmp.get('max_deviation')}, tol {cmp['tol']}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="liequad", description="Integrability by quadratures for vector fields.")
    p.add_argument("--version", action="version", version=f"liequad {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("file", help="system JSON file or bundled system name")
        sp.add_argument("--mode", choices=("auto", "lie", "dist"), default="auto")
        sp.add_argument("--seed", type=int, default=None, help="sampling seed (default: file value, else 0)")
        sp.add_argument("--samples", type=int, default=None, help="sample count for sampled certifications")
        sp.add_argument("--quiet", action="store_true", help="no human summary on stderr")

    def flowargs(sp):
        sp.add_argument("--x0", default=None, help="initial point v1,...,vn (default: reference point)")
        sp.add_argument("--t0", type=float, default=0.0)
        sp.add_argument("--t1", type=float, default=1.0)
        sp.add_argument("--steps", type=int, default=10, help="number of grid intervals")

    common(sub.add_parser("check", help="certify integrability and report series"))
    common(sub.add_parser("rectify", help="build the rectifying chart and report diagnostics"))
    fp = sub.add_parser("flow", help="flow by chart inversion")
    common(fp)
    flowargs(fp)
    fp.add_argument("--format", choices=("json", "csv"), default="json")
    cp = sub.add_parser("compare", help="chart flow against the Runge-Kutta oracle")
    common(cp)
    flowargs(cp)
    cp.add_argument("--tol", type=float, default=TOL_FLOW)
    return p


def _csv(flow: dict) -> str:
    n = len(flow["x0"])
    rows = ["t," + ",".join(f"x{i + 1}" for i in range(n)) + ",converged"]
    for t, p, ok in zip(flow["times"], flow["points"], flow["converged"]):
        rows.append(",".join(["%.17g" % t] + ["%.17g" % v for v in p] + [str(int(ok))]))
    return "\n".join(rows) + "\n"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    start = time.perf_counter()
    try:
        system = load_system(args.file)
        overrides = {k: v for k, v in (("seed", args.seed), ("samples", args.samples)) if v is not None}
        if overrides:
            system = with_overrides(system, **overrides)
        head = {"tool": "liequad", "version": __version__, "command": args.command,
                "seed": system.domain.seed, "system": system_to_dict(system)}
        flow_obj = None
        if args.command == "check":
            body, code, _ = run_check(system, args.mode)
        elif args.command == "rectify":
            body, code, _ = run_rectify(system, args.mode)
        elif args.command == "flow":
            body, code, flow_obj = run_flow(system, _start(args, system), _grid(args), args.mode)
        else:
            body, code = run_compare(system, _start(args, system), _grid(args), args.tol, args.mode)
    except (SystemFileError, ParseError) as exc:
        err = {"error": {"type": type(exc).__name__, "message": str(exc)}}
        if isinstance(exc, ParseError):
            err["error"]["position"] = exc.position
        sys.stdout.write(dumps(err) + "\n")
        return EXIT_INPUT
    out = dict(head, **body, exit_code=code)
    if args.command == "flow" and args.format == "csv" and flow_obj is not None:
        sys.stdout.write(_csv(out["flow"]))
    else:
        sys.stdout.write(dumps(out) + "\n")
    if not args.quiet:
        sys.stderr.write(_summary(args.command, body, code, time.perf_counter() - start) + "\n")
    return code


if __name__ == "__main__":
    raise SystemExit(main())
