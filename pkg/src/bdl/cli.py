"""Command-line front end: ``bdl <command> <file> [flags]``.

Exit codes: 0 success, 2 parse error, 3 infeasible or degenerate instance,
4 invariant violation, 5 bad flags or unreadable input.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import __version__
from . import dualeval as de
from .conjcalc import biconjugate, conj_at
from .cqcheck import CQKind, check, partial_calmness_probe
from .extreal import format_number
from .funcrep import GridFunction
from .probfile import NonAnalyticWarning, ParseError, instance_hash, parse, parse_file, serialize
from .reform import (
    VALUE_TOL,
    BilevelInstance,
    _json_num,
    classify_sets,
    regularization_table,
    solve,
    solve_llvf,
    solve_penalized,
    solve_regularized,
)

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_INFEASIBLE = 3
EXIT_INVARIANT = 4
EXIT_FLAGS = 5


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_FLAGS, f"{self.prog}: {message}")


@dataclass
class RunConfig:
    command: str
    path: str
    scheme: Optional[str] = None
    lam: Optional[float] = None
    lam_sweep: Optional[list] = None
    eps: Optional[float] = None
    eps_seq: Optional[int] = None
    budget: int = 1000
    seed: int = 0
    tol: Optional[float] = None
    output: Optional[str] = None
    format: Optional[str] = None
    kind: Optional[str] = None
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Rendering helpers
# ---------------------------------------------------------------------------

def _point_text(x, y) -> str:
    return "(" + ",".join(format_number(v) for v in list(x) + list(y)) + ")"


def _value_text(v) -> str:
    v = _json_num(v)
    return v if isinstance(v, str) else format_number(float(v))


def _solution_text(sol) -> str:
    pts = "; ".join(_point_text(x, y) for x, y in sol.points())
    return f"value {_value_text(sol.value)} at {pts}" if pts else f"value {_value_text(sol.value)} (no feasible node)"


def _flatten(prefix: str, obj, rows: list):
    if isinstance(obj, dict):
        for k in obj:
            _flatten(f"{prefix}.{k}" if prefix else str(k), obj[k], rows)
    elif isinstance(obj, list) and any(isinstance(v, (dict, list)) for v in obj):
        for i, v in enumerate(obj):
            _flatten(f"{prefix}[{i}]", v, rows)
    elif isinstance(obj, list):
        rows.append((prefix, " ".join(_cell(v) for v in obj)))
    else:
        rows.append((prefix, _cell(obj)))


def _cell(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return ""
    if isinstance(v, float):
        return format_number(v)
    return str(v)


def _csv_text(doc: dict) -> str:
    rows = []
    _flatten("", doc, rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["key", "value"])
    w.writerows(rows)
    return buf.getvalue()


def dumps(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


# ---------------------------------------------------------------------------
# Instance invariants
# ---------------------------------------------------------------------------

def _phi_is_convex(inst: BilevelInstance) -> bool:
    phi = inst.phi
    if not np.all(np.isfinite(phi)):
        return False
    g = GridFunction(inst.xgrid, phi)
    return bool(np.all(biconjugate(g).values >= phi - 1e-9))


def validate_instance(inst: BilevelInstance, seed: int = 0) -> list:
    """Run the invariant suite; returns (name, status, detail) with status
    'ok', 'violated' or 'skipped'."""
    rng = np.random.default_rng(seed)
    out = []

    def rec(name, ok, detail=""):
        out.append((name, "ok" if ok else "violated", detail))

    lower_ok = np.ones(inst.shape, dtype=bool)
    for t in inst.g_tables:
        lower_ok &= t <= inst.tol
    s = inst.penalty
    fin = lower_ok & np.isfinite(s)
    mn = float(s[fin].min()) if fin.any() else math.inf
    rec("value_function_lower_bound", not fin.any() or mn >= -VALUE_TOL, f"min f - phi on lower-feasible nodes = {mn!r}")
    attained = np.isfinite(inst.phi)
    hit = np.any(fin & (np.abs(s) <= VALUE_TOL), axis=1)
    rec("value_function_attained", bool(np.all(hit[attained])), f"{int(attained.sum())} x nodes with finite phi")

    base = solve(inst)
    V = base.value
    rec("argmin_feasible", all((inst.llvf_mask if not inst.geometric else inst.penalty <= VALUE_TOL)[ij] for ij in base.argmin),
        f"{len(base.argmin)} minimisers")

    if V.is_finite and not inst.geometric:
        prev = -math.inf
        ok = True
        for lam in (0.1, 1.0, 10.0):
            P = solve_penalized(inst, lam).value.value
            ok &= P <= V.value / lam + 1e-12
            ok &= lam == 0.1 or P * lam >= prev - 1e-12
            prev = P * lam
        rec("penalized_below_llvf", ok, "lambda in {0.1, 1, 10}")
        vals = [solve_regularized(inst, 2.0 ** -k).value.value for k in range(6)]
        mono = all(a <= b + 1e-12 for a, b in zip(vals, vals[1:])) and vals[-1] <= V.value + 1e-12
        rec("regularized_monotone", mono, "eps = 2^-k, k = 0..5")
    else:
        out.append(("penalized_below_llvf", "skipped", "geometric or infeasible instance"))
        out.append(("regularized_monotone", "skipped", "geometric or infeasible instance"))

    Fg = GridFunction(inst.joint_grid, inst.F_table.reshape(-1))
    Z = inst.joint_grid.nodes()
    idx = rng.integers(Z.shape[0], size=200)
    P = rng.normal(scale=3.0, size=(200, Z.shape[1]))
    yf = Fg.values[idx] + conj_at(Fg, P) - np.sum(Z[idx] * P, axis=1)
    rec("young_fenchel", bool(np.all(yf >= -1e-9)), f"min margin {float(yf.min())!r} over 200 pairs")

    schemes = [de.DualScheme.D_GEO] if inst.geometric else [de.DualScheme.D_EPS, de.DualScheme.D_IN]
    for sch in schemes:
        params = {"eps": 0.1} if sch is de.DualScheme.D_EPS else {}
        primal = de.primal_for(sch, inst, params).value
        if not primal.is_finite:
            out.append((f"weak_duality_{sch.value}", "skipped", "infinite primal value"))
            continue
        pts = de.random_points(sch, inst, 50, rng)
        margin = de.weak_duality_margin(sch, inst, params, pts)
        rec(f"weak_duality_{sch.value}", margin >= -1e-9, f"min margin {margin!r} over 50 points")

    if not inst.geometric and V.is_finite and _phi_is_convex(inst):
        lhs, rhs = de.toland_check(inst, 1.0)
        rec("toland_identity", abs(lhs.value - rhs.value) <= 1e-6, f"{lhs.value!r} vs {rhs.value!r}")
    else:
        out.append(("toland_identity", "skipped", "needs a convex value function and a finite primal"))

    rep = check(CQKind.SLATER_LLVF_FAILURE, inst)
    rec("slater_llvf_failure", rep.label == "FAILS-for-Slater" or rep.verdict.value == "INCONCLUSIVE", rep.label)

    if inst.geometric and V.is_finite:
        sets = classify_sets(inst)
        rec("geometric_F_minus_empty", not sets.F_minus, f"|F-| = {len(sets.F_minus)}")

    try:
        text = serialize(inst)
    except ValueError as exc:
        out.append(("serialize_round_trip", "skipped", str(exc)))
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NonAnalyticWarning)
            try:
                again = parse(text)
            except ParseError as exc:
                again = exc
        rec("serialize_round_trip", again == inst, "parse(serialize(instance)) == instance")
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _load(cfg: RunConfig) -> BilevelInstance:
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NonAnalyticWarning)
            inst = parse_file(cfg.path)
    except FileNotFoundError:
        raise CliError(EXIT_FLAGS, f"cannot read {cfg.path}") from None
    except IsADirectoryError:
        raise CliError(EXIT_FLAGS, f"{cfg.path} is a directory") from None
    except ParseError as exc:
        raise CliError(EXIT_PARSE, f"{cfg.path}:{exc.line}:{exc.column}: {exc.message}"
                       + (f" (near {exc.token!r})" if exc.token else "")) from None
    if cfg.tol is not None:
        inst = BilevelInstance(F=inst.F, f=inst.f, G=inst.G, g=inst.g, xgrid=inst.xgrid, ygrid=inst.ygrid,
                               geometric=inst.geometric, name=inst.name, tol=cfg.tol)
    return inst


def _header(cfg: RunConfig, inst: BilevelInstance) -> dict:
    return {"command": cfg.command, "version": __version__,
            "instance": {"name": inst.name, "hash": instance_hash(inst), "n": inst.n, "m": inst.m,
                         "k": inst.k, "p": inst.p, "geometric": inst.geometric}}


def _cmd_solve(cfg, inst):
    sol = solve(inst)
    doc = _header(cfg, inst)
    doc["solution"] = sol.to_json()
    code = EXIT_OK if sol.value.is_finite else EXIT_INFEASIBLE
    return doc, _solution_text(sol) + "\n", code


def _cmd_penalize(cfg, inst):
    if inst.geometric:
        raise CliError(EXIT_INFEASIBLE, "penalize needs a non-geometric instance")
    lams = cfg.lam_sweep if cfg.lam_sweep is not None else [cfg.lam]
    if any(l is None or not l > 0 for l in lams):
        raise CliError(EXIT_FLAGS, "penalize needs --lambda or --lambda-sweep with positive values")
    sols = [solve_penalized(inst, l) for l in lams]
    base = solve_llvf(inst)
    doc = _header(cfg, inst)
    doc["solutions"] = [s.to_json() for s in sols]
    lines = [f"lambda {format_number(l)}: {_solution_text(s)}" for l, s in zip(lams, sols)]
    if base.value.is_finite:
        probe = partial_calmness_probe(inst, base.argmin[0])
        x, y = base.points()[0]
        doc["calmness"] = {"candidate": {"x": x, "y": y}, **probe.to_json()}
        lam_txt = format_number(probe.lam) if probe.lam is not None else "none"
        lines.append(f"partial calmness at {_point_text(x, y)}: smallest validated lambda {lam_txt}")
    else:
        doc["calmness"] = None
        lines.append("partial calmness: LLVF infeasible")
    code = EXIT_OK if all(s.value.is_finite for s in sols) else EXIT_INFEASIBLE
    return doc, "\n".join(lines) + "\n", code


def _cmd_regularize(cfg, inst):
    if cfg.eps_seq is None or cfg.eps_seq < 0:
        raise CliError(EXIT_FLAGS, "regularize needs --eps-seq K with K >= 0")
    rows = regularization_table(inst, cfg.eps_seq)
    base = solve_llvf(inst)
    doc = _header(cfg, inst)
    doc["llvf"] = base.to_json()
    doc["table"] = [{"k": r.k, "eps": _json_num(r.eps), "value": _json_num(r.value),
                     "argmin": [{"x": inst.x_node(i).tolist(), "y": inst.y_node(j).tolist()} for i, j in r.argmin],
                     "distance_steps": _json_num(r.distance_steps)} for r in rows]
    lines = [f"llvf {_solution_text(base)}", "k eps value distance_steps"]
    lines += [f"{r.k} {format_number(r.eps)} {_value_text(r.value)} {_value_text(r.distance_steps)}" for r in rows]
    code = EXIT_OK if base.value.is_finite else EXIT_INFEASIBLE
    return doc, "\n".join(lines) + "\n", code


def _dual_params(cfg) -> dict:
    params = {}
    if cfg.lam is not None:
        params["lambda"] = cfg.lam
    if cfg.eps is not None:
        params["eps"] = cfg.eps
    return params


def _scheme(cfg):
    if cfg.scheme is None:
        raise CliError(EXIT_FLAGS, f"{cfg.command} needs --scheme")
    try:
        return de.DualScheme.parse(cfg.scheme)
    except ValueError as exc:
        raise CliError(EXIT_FLAGS, str(exc)) from None


def _search(cfg, inst):
    scheme = _scheme(cfg)
    if scheme is de.DualScheme.D_GEO and not inst.geometric:
        raise CliError(EXIT_FLAGS, "d_geo needs a geometric instance")
    if cfg.budget < 1:
        raise CliError(EXIT_FLAGS, "--budget must be positive")
    try:
        return scheme, de.search_dual(scheme, inst, _dual_params(cfg), budget=cfg.budget, seed=cfg.seed)
    except ValueError as exc:
        raise CliError(EXIT_FLAGS, str(exc)) from None


def _gap_text(rep) -> str:
    return (f"scheme {rep.scheme.value} primal {_value_text(rep.primal)} dual {_value_text(rep.dual)} "
            f"gap {_value_text(rep.gap)} ({rep.polarity.value})\n")


def _cmd_dual(cfg, inst):
    scheme, rep = _search(cfg, inst)
    doc = _header(cfg, inst)
    doc["report"] = rep.to_json()
    doc["seed"] = cfg.seed
    code = EXIT_OK if rep.primal.is_finite else EXIT_INFEASIBLE
    return doc, _gap_text(rep), code


def _cmd_gap(cfg, inst):
    scheme, rep = _search(cfg, inst)
    params = _dual_params(cfg)
    primal = de.primal_for(scheme, inst, params)
    redual = de.eval_dual(scheme, inst, params, rep.point) if rep.point is not None else None
    doc = _header(cfg, inst)
    doc["report"] = rep.to_json()
    doc["seed"] = cfg.seed
    doc["recomputed"] = {
        "primal": primal.to_json(),
        "dual_at_point": _json_num(redual) if redual is not None else None,
        "primal_agrees": bool(primal.value == rep.primal),
    }
    code = EXIT_OK
    if not rep.primal.is_finite:
        code = EXIT_INFEASIBLE
    elif not doc["recomputed"]["primal_agrees"]:
        code = EXIT_INVARIANT
    elif scheme in de.PURE_SUP and rep.gap.value < -1e-9:
        code = EXIT_INVARIANT
    return doc, _gap_text(rep) + f"recomputed primal {_value_text(primal.value)}\n", code


def _cmd_check_cq(cfg, inst):
    if cfg.kind is None:
        raise CliError(EXIT_FLAGS, "check-cq needs --kind")
    try:
        kind = CQKind.parse(cfg.kind)
    except ValueError as exc:
        raise CliError(EXIT_FLAGS, str(exc)) from None
    params = _dual_params(cfg)
    params.update(cfg.extra)
    try:
        rep = check(kind, inst, params)
    except ValueError as exc:
        raise CliError(EXIT_FLAGS, str(exc)) from None
    doc = _header(cfg, inst)
    doc["report"] = rep.to_json()
    doc["label"] = rep.label
    text = f"{kind.value}: {rep.label}" + (" (heuristic)" if rep.heuristic else "") + "\n"
    return doc, text, EXIT_OK


def _cmd_validate(cfg, inst):
    results = validate_instance(inst, cfg.seed)
    doc = _header(cfg, inst)
    doc["invariants"] = [{"name": n, "status": s, "detail": d} for n, s, d in results]
    bad = [n for n, s, _ in results if s == "violated"]
    doc["ok"] = not bad
    lines = [f"{s:8s} {n}: {d}" for n, s, d in results]
    lines.append("all invariants hold" if not bad else f"{len(bad)} invariant(s) violated")
    return doc, "\n".join(lines) + "\n", EXIT_OK if not bad else EXIT_INVARIANT


COMMANDS = {
    "solve": (_cmd_solve, "text"),
    "penalize": (_cmd_penalize, "text"),
    "regularize": (_cmd_regularize, "text"),
    "dual": (_cmd_dual, "json"),
    "gap": (_cmd_gap, "json"),
    "check-cq": (_cmd_check_cq, "text"),
    "validate": (_cmd_validate, "text"),
}


def run(cfg: RunConfig) -> tuple:
    """Execute one command; returns (exit code, rendered report)."""
    inst = _load(cfg)
    func, default_fmt = COMMANDS[cfg.command]
    doc, text, code = func(cfg, inst)
    fmt = cfg.format or default_fmt
    body = dumps(doc) if fmt == "json" else _csv_text(doc) if fmt == "csv" else text
    return code, body


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _float_list(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bdl", description="Bilevel duality laboratory on finite grids.")
    p.add_argument("--version", action="version", version=f"bdl {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("file", help="problem file")
        sp.add_argument("--format", choices=("json", "text", "csv"))
        sp.add_argument("--output", "-o", help="write the report here instead of standard output")
        sp.add_argument("--tol", type=float, help="feasibility tolerance override")
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("solve", help="enumerate the value-function reformulation")
    common(sp)
    sp = sub.add_parser("penalize", help="solve the penalized problem and probe partial calmness")
    common(sp)
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--lambda", dest="lam", type=float)
    g.add_argument("--lambda-sweep", dest="lam_sweep", type=_float_list)
    sp = sub.add_parser("regularize", help="eps = 2^-k relaxations and their convergence table")
    common(sp)
    sp.add_argument("--eps-seq", dest="eps_seq", type=int, required=True, metavar="K_MAX")
    for name in ("dual", "gap"):
        sp = sub.add_parser(name, help="search a dual scheme" if name == "dual" else "dual search with the primal recomputed")
        common(sp)
        sp.add_argument("--scheme", required=True)
        sp.add_argument("--lambda", dest="lam", type=float)
        sp.add_argument("--eps", type=float)
        sp.add_argument("--budget", type=int, default=1000)
    sp = sub.add_parser("check-cq", help="run one constraint-qualification check")
    common(sp)
    sp.add_argument("--kind", required=True)
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.add_argument("--eps", type=float)
    sp.add_argument("--family", choices=("llvf", "constraints"))
    sp = sub.add_parser("validate", help="run the invariant suite on the instance")
    common(sp)
    return p


def config_from_args(argv) -> RunConfig:
    ns = build_parser().parse_args(argv)
    extra = {"family": ns.family} if getattr(ns, "family", None) else {}
    return RunConfig(
        command=ns.command, path=ns.file, scheme=getattr(ns, "scheme", None), lam=getattr(ns, "lam", None),
        lam_sweep=getattr(ns, "lam_sweep", None), eps=getattr(ns, "eps", None), eps_seq=getattr(ns, "eps_seq", None),
        budget=getattr(ns, "budget", 1000), seed=ns.seed, tol=ns.tol, output=ns.output, format=ns.format,
        kind=getattr(ns, "kind", None), extra=extra,
    )


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg = config_from_args(argv)
        code, body = run(cfg)
    except CliError as exc:
        print(str(exc), file=sys.stderr)
        return exc.code
    if cfg.output:
        with open(cfg.output, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(body)
    else:
        sys.stdout.write(body)
    if code == EXIT_INFEASIBLE:
        print("instance is infeasible or degenerate for this command", file=sys.stderr)
    elif code == EXIT_INVARIANT:
        print("invariant violation", file=sys.stderr)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
