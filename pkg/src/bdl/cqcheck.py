"""Constraint qualifications and regularity conditions, checked on grid samples.

Every report carries a verdict, a witness that can be re-evaluated
independently, the strictness tolerance used, and a ``heuristic`` flag that
is set for sampled topological probes (contingent cones, closedness, cone
pointedness in dimension > 2).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linprog

from . import dualeval as de
from .funcrep import AnalyticFunction
from .lowerlevel import lipschitz_estimate
from .reform import (
    BilevelInstance,
    _json_num,
    classify_sets,
    solve_geometric,
    solve_llvf,
    solve_penalized,
    solve_regularized,
)

ANGLE_TOL = 1e-9


class CQKind(str, Enum):
    SLATER_GENERALIZED = "SLATER_GENERALIZED"
    SLATER_LLVF_FAILURE = "SLATER_LLVF_FAILURE"
    CONTINGENT_PROBE = "CONTINGENT_PROBE"
    CONE_34_FAILURE = "CONE_34_FAILURE"
    SLATER_LAMBDA = "SLATER_LAMBDA"
    SFRC = "SFRC"
    FRC = "FRC"
    CC_PROBE = "CC_PROBE"
    REGUL = "REGUL"
    POINTED_HIGH_DIM = "POINTED_HIGH_DIM"
    INTERIOR_NONEMPTY = "INTERIOR_NONEMPTY"
    ASSUM_NOT_INTERIOR = "ASSUM_NOT_INTERIOR"

    @classmethod
    def parse(cls, text: str) -> "CQKind":
        try:
            return cls(text.strip().upper().replace("-", "_"))
        except ValueError:
            raise ValueError(f"unknown CQ kind {text!r}") from None


class Verdict(str, Enum):
    HOLDS = "HOLDS"
    FAILS = "FAILS"
    INCONCLUSIVE = "INCONCLUSIVE"


HEURISTIC_KINDS = frozenset({CQKind.CONTINGENT_PROBE, CQKind.CC_PROBE, CQKind.SFRC, CQKind.FRC, CQKind.POINTED_HIGH_DIM})


@dataclass
class CQReport:
    kind: CQKind
    verdict: Verdict
    witness: dict
    tol: float
    heuristic: bool
    notes: list = field(default_factory=list)

    @property
    def label(self) -> str:
        """Verdict as printed; negative facts about Slater points are spelled out."""
        if self.kind is CQKind.SLATER_LLVF_FAILURE and self.verdict is Verdict.FAILS:
            return "FAILS-for-Slater"
        return self.verdict.value

    def to_json(self) -> dict:
        return {
            "kind": self.kind.value,
            "verdict": self.verdict.value,
            "heuristic": bool(self.heuristic),
            "witness": _jsonify(self.witness),
            "tol": _json_num(self.tol),
            "notes": list(self.notes),
        }


def _jsonify(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonify(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return _json_num(float(obj))
    if isinstance(obj, Enum):
        return obj.value
    return _json_num(obj) if hasattr(obj, "value") else obj


# ---------------------------------------------------------------------------
# Tolerances and clouds
# ---------------------------------------------------------------------------

def strict_tol(inst: BilevelInstance, tables: Sequence[np.ndarray] = ()) -> float:
    """'< 0' means '<= -tol': 1e-9 for analytic data, else 10 h L with L a
    finite-difference Lipschitz estimate of the involved tables."""
    if inst.is_analytic():
        return 1e-9
    h = max(inst.joint_grid.steps)
    lip = max([1.0] + [lipschitz_estimate(t.reshape(-1), inst.joint_grid) for t in tables])
    return 10.0 * h * lip


@dataclass(frozen=True)
class FeatureCloud:
    """One image vector per scanned grid node (non-finite images dropped)."""

    points: np.ndarray
    nodes: tuple  # (ix, iy) per row
    kind: str  # "psi" (2-D, geometric) or "psi_eps"

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def geo_cloud(inst: BilevelInstance) -> FeatureCloud:
    """(F, f - phi) over X x Y."""
    P = np.stack([inst.F_table.reshape(-1), inst.penalty.reshape(-1)], axis=1)
    return _finite_cloud(inst, P, "psi")


def eps_cloud(inst: BilevelInstance, eps: float) -> FeatureCloud:
    """(F, f - phi - eps, G, g) over the joint grid."""
    cols = [inst.F_table.reshape(-1), inst.penalty.reshape(-1) - eps]
    cols += [t.reshape(-1) for t in inst.G_tables + inst.g_tables]
    return _finite_cloud(inst, np.stack(cols, axis=1), "psi_eps")


def _finite_cloud(inst, P, kind) -> FeatureCloud:
    ok = np.all(np.isfinite(P), axis=1)
    Ny = inst.ygrid.size
    idx = np.flatnonzero(ok)
    return FeatureCloud(P[ok], tuple((int(i // Ny), int(i % Ny)) for i in idx), kind)


def _node_json(inst: BilevelInstance, ix: int, iy: int) -> dict:
    return {"x": inst.x_node(ix).tolist(), "y": inst.y_node(iy).tolist()}


# ---------------------------------------------------------------------------
# 2-D pointedness
# ---------------------------------------------------------------------------

def pointedness_2d(cloud: FeatureCloud, V: float) -> CQReport:
    """Is cone(co(cloud) - (V, 0) + open quadrant) pointed?

    Each translated point w spans, together with the quadrant directions,
    the angular arc from min(angle(w), 0) to max(angle(w), pi/2); a point
    strictly inside the negative quadrant spans the whole circle. The cone
    is pointed iff the union of arcs is shorter than pi (minus 1e-9 rad).
    """
    if cloud.dim != 2:
        raise ValueError("pointedness_2d needs a 2-D cloud")
    if cloud.points.shape[0] == 0:
        raise ValueError("empty cloud")
    if not math.isfinite(V):
        raise ValueError("the vertex value must be finite")
    W = cloud.points - np.array([V, 0.0])
    nonzero = np.any(W != 0.0, axis=1)
    lo, hi = 0.0, math.pi / 2
    lo_i = hi_i = None
    full = None
    for i in np.flatnonzero(nonzero):
        a, b = W[i]
        if a < 0 and b < 0:
            full = int(i)
            break
        th = math.atan2(b, a)
        if th < lo:
            lo, lo_i = th, int(i)
        if th > hi:
            hi, hi_i = th, int(i)
    if full is not None:
        w = W[full]
        witness = {"negative_point": w.tolist(), "node": list(cloud.nodes[full]), "span": 2 * math.pi}
        return CQReport(CQKind.POINTED_HIGH_DIM, Verdict.FAILS, witness, ANGLE_TOL, False,
                        ["2-D exact test: a translated point lies in the open negative quadrant"])
    span = hi - lo
    witness = {
        "theta_min": lo,
        "theta_max": hi,
        "span": span,
        "min_point": W[lo_i].tolist() if lo_i is not None else [1.0, 0.0],
        "max_point": W[hi_i].tolist() if hi_i is not None else [0.0, 1.0],
        "min_node": list(cloud.nodes[lo_i]) if lo_i is not None else None,
        "max_node": list(cloud.nodes[hi_i]) if hi_i is not None else None,
    }
    verdict = Verdict.HOLDS if span < math.pi - ANGLE_TOL else Verdict.FAILS
    return CQReport(CQKind.POINTED_HIGH_DIM, verdict, witness, ANGLE_TOL, False,
                    ["2-D exact test on the sampled generators (angular hull)"])


def characterize_geo(inst: BilevelInstance) -> CQReport:
    """Set-condition prediction of pointedness, cross-checked with the angular test."""
    if not inst.geometric:
        raise ValueError("characterize_geo needs a geometric instance")
    sets = classify_sets(inst)
    Feq = set(sets.F_eq)
    O_Feq = sorted(set(sets.O) & Feq)
    Xi_Feq = sorted(set(sets.Xi_plus) & Feq)
    if sets.O:
        predicted = bool(O_Feq) and bool(Xi_Feq)
    else:
        predicted = bool(Xi_Feq)
    computed = pointedness_2d(geo_cloud(inst), sets.value)
    agree = predicted == (computed.verdict is Verdict.HOLDS)
    witness = {
        "predicted_pointed": predicted,
        "computed_pointed": computed.verdict is Verdict.HOLDS,
        "agree": agree,
        "O_cap_Feq": [_node_json(inst, *n) for n in O_Feq[:1]],
        "Xi_plus_cap_Feq": [_node_json(inst, *n) for n in Xi_Feq[:1]],
        "angular": computed.witness,
    }
    notes = ["verdict is the angular test; the set conditions are reported alongside"]
    if not agree:
        notes.append("DISAGREEMENT: set-condition prediction differs from the angular test")
    return CQReport(CQKind.POINTED_HIGH_DIM, computed.verdict, witness, ANGLE_TOL, False, notes)


# ---------------------------------------------------------------------------
# Partial calmness
# ---------------------------------------------------------------------------

@dataclass
class CalmnessResult:
    lam: Optional[float]  # smallest validated modulus, None when none validates
    counterexample: Optional[tuple]  # (x, y, t) violating at the largest modulus
    checked: int

    def to_json(self) -> dict:
        out = {"lambda": _json_num(self.lam) if self.lam is not None else None, "checked": self.checked}
        if self.counterexample is not None:
            x, y, t = self.counterexample
            out["counterexample"] = {"x": list(x), "y": list(y), "t": _json_num(t)}
        return out


def partial_calmness_probe(inst: BilevelInstance, candidate, lam_grid=(0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0),
                           radii=(3, 2, 1), tol: float = 1e-9) -> CalmnessResult:
    """Test F(x,y) - F(xb,yb) + lam |t| >= 0 on all P[t]-feasible triples in nested boxes.

    A node (x, y) satisfying G, g <= tol is P[t]-feasible for t in the band
    |f - phi + t| <= band; the smallest |t| on that band is the worst case.
    """
    ix, iy = inst.locate(*candidate) if not isinstance(candidate, tuple) or len(candidate) != 2 or not all(
        isinstance(c, (int, np.integer)) for c in candidate) else candidate
    if not inst.llvf_mask[ix, iy]:
        raise ValueError("candidate is not feasible for the value-function reformulation")
    band = max(1e-9, inst.tol)
    Fb = inst.F_table[ix, iy]
    xs = np.array(inst.xgrid.multi_index(ix))
    ys = np.array(inst.ygrid.multi_index(iy))
    xm = np.array([inst.xgrid.multi_index(i) for i in range(inst.xgrid.size)]).reshape(inst.xgrid.size, -1)
    ym = np.array([inst.ygrid.multi_index(j) for j in range(inst.ygrid.size)]).reshape(inst.ygrid.size, -1)
    dx = np.max(np.abs(xm - xs), axis=1)
    dy = np.max(np.abs(ym - ys), axis=1)
    dist = np.maximum(dx[:, None], dy[None, :])
    t_abs = np.maximum(inst.penalty - band, 0.0)
    base_mask = inst.constraint_mask & np.isfinite(inst.penalty)
    lams = sorted(float(l) for l in lam_grid)
    if any(l < 0 for l in lams):
        raise ValueError("moduli must be nonnegative")
    checked = 0
    last_violation = None
    for lam in lams:
        bad = None
        for r in radii:
            mask = base_mask & (dist <= r)
            checked += int(mask.sum())
            with np.errstate(invalid="ignore"):
                lhs = inst.F_table - Fb + lam * t_abs
            viol = mask & (lhs < -tol)
            if viol.any():
                i, j = np.argwhere(viol)[0]
                bad = (tuple(inst.x_node(i).tolist()), tuple(inst.y_node(j).tolist()), -float(t_abs[i, j]))
                break
        if bad is None:
            return CalmnessResult(lam, None, checked)
        last_violation = bad
    return CalmnessResult(None, last_violation, checked)


# ---------------------------------------------------------------------------
# Individual checks
# ---------------------------------------------------------------------------

def _is_affine(h) -> bool:
    return isinstance(h, AnalyticFunction) and h.is_affine


def _slater_generalized(inst: BilevelInstance, params: dict) -> CQReport:
    family = params.get("family", "llvf")
    if family not in ("llvf", "constraints"):
        raise ValueError("family must be 'llvf' or 'constraints'")
    tabs = [(t, _is_affine(h)) for t, h in zip(inst.G_tables + inst.g_tables, list(inst.G) + list(inst.g))]
    if family == "llvf":
        tabs.append((inst.penalty, False))
    tol = strict_tol(inst, [t for t, _ in tabs])
    ok = np.ones(inst.shape, dtype=bool)
    slack = np.full(inst.shape, np.inf)
    for t, aff in tabs:
        ok &= (t <= tol) if aff else (t <= -tol)
        if not aff:
            slack = np.minimum(slack, -t)
    if ok.any():
        cand = np.where(ok, slack, -np.inf)
        i, j = np.unravel_index(int(np.argmax(cand)), inst.shape)
        values = [float(t[i, j]) for t, _ in tabs]
        return CQReport(CQKind.SLATER_GENERALIZED, Verdict.HOLDS,
                        {"point": _node_json(inst, i, j), "constraint_values": values,
                         "affine": [a for _, a in tabs]}, tol, False)
    worst = float(np.max(np.where(np.isfinite(slack), slack, -np.inf))) if tabs else math.inf
    return CQReport(CQKind.SLATER_GENERALIZED, Verdict.FAILS,
                    {"best_strict_slack": worst, "nodes_scanned": int(np.prod(inst.shape))}, tol, False,
                    ["exhaustive node scan found no strict point for the non-affine constraints"])


def _slater_llvf_failure(inst: BilevelInstance, params: dict) -> CQReport:
    tol = strict_tol(inst, [inst.penalty])
    lower_ok = np.ones(inst.shape, dtype=bool)
    for t in inst.g_tables:
        lower_ok &= t <= inst.tol
    s = np.where(lower_ok & np.isfinite(inst.penalty), inst.penalty, np.inf)
    if not np.isfinite(s).any():
        return CQReport(CQKind.SLATER_LLVF_FAILURE, Verdict.INCONCLUSIVE, {"reason": "no lower-level feasible node"}, tol, False)
    i, j = np.unravel_index(int(np.argmin(s)), inst.shape)
    mn = float(s[i, j])
    strict = bool(np.any(s <= -tol))
    verdict = Verdict.INCONCLUSIVE if strict else Verdict.FAILS
    return CQReport(CQKind.SLATER_LLVF_FAILURE, verdict,
                    {"min_penalty": mn, "argmin": _node_json(inst, i, j), "strict_points": int(np.sum(s <= -tol))},
                    tol, False, ["f - phi >= 0 at every node, so no strict Slater point for the value constraint"])


def _cone_34_failure(inst: BilevelInstance, params: dict) -> CQReport:
    tol = strict_tol(inst, [inst.penalty])
    s = inst.penalty.reshape(-1)
    rows = [s] + [t.reshape(-1) for t in inst.G_tables + inst.g_tables]
    P = np.stack(rows, axis=1)
    fin = np.all(np.isfinite(P), axis=1)
    lower_ok = np.ones(s.size, dtype=bool)
    for t in inst.g_tables:
        lower_ok &= t.reshape(-1) <= inst.tol
    first = P[fin & lower_ok, 0]
    if first.size == 0:
        return CQReport(CQKind.CONE_34_FAILURE, Verdict.INCONCLUSIVE, {"reason": "empty image"}, tol, False)
    mn = float(first.min())
    if mn >= -tol:
        return CQReport(CQKind.CONE_34_FAILURE, Verdict.FAILS,
                        {"min_first_coordinate": mn, "points": int(first.size)}, tol, False,
                        ["every image point has first coordinate >= -tol, so (a, 0, 0) with a < 0 is unreachable"])
    return CQReport(CQKind.CONE_34_FAILURE, Verdict.INCONCLUSIVE, {"min_first_coordinate": mn}, tol, False)


def _open_box_mask(inst: BilevelInstance) -> np.ndarray:
    Z = inst.joint_grid.nodes()
    lo = np.asarray(inst.joint_grid.box.lower)
    hi = np.asarray(inst.joint_grid.box.upper)
    degenerate = lo == hi
    inside = np.all((Z > lo) & (Z < hi) | degenerate, axis=1)
    return inside.reshape(inst.shape)


def _slater_lambda(inst: BilevelInstance, params: dict) -> CQReport:
    tabs = inst.G_tables + inst.g_tables
    tol = strict_tol(inst, tabs)
    ok = _open_box_mask(inst)
    slack = np.full(inst.shape, np.inf)
    for t in tabs:
        ok &= t <= -tol
        slack = np.minimum(slack, -t)
    if ok.any():
        cand = np.where(ok, slack, -np.inf)
        i, j = np.unravel_index(int(np.argmax(cand)), inst.shape)
        return CQReport(CQKind.SLATER_LAMBDA, Verdict.HOLDS,
                        {"point": _node_json(inst, i, j),
                         "G": [float(t[i, j]) for t in inst.G_tables],
                         "g": [float(t[i, j]) for t in inst.g_tables]}, tol, False)
    return CQReport(CQKind.SLATER_LAMBDA, Verdict.FAILS,
                    {"nodes_scanned": int(np.prod(inst.shape))}, tol, False,
                    ["no interior node satisfies every constraint strictly"])


def _regul(inst: BilevelInstance, params: dict) -> CQReport:
    tabs = inst.g_tables
    tol = strict_tol(inst, tabs)
    upper = np.ones(inst.shape, dtype=bool)
    for t in inst.G_tables:
        upper &= t <= inst.tol
    xs = np.flatnonzero(upper.any(axis=1))
    p = len(tabs)
    results = {}
    first_fail = None
    for size in range(1, p + 1):
        for J in itertools.combinations(range(p), size):
            ok = upper.copy()
            for j in J:
                ok &= tabs[j] <= -tol
            holds_x = ok[xs].any(axis=1)
            key = ",".join(str(j + 1) for j in J)
            results[key] = bool(holds_x.all())
            if not holds_x.all() and first_fail is None:
                ix = int(xs[np.flatnonzero(~holds_x)[0]])
                first_fail = {"x": inst.x_node(ix).tolist(), "subset": [j + 1 for j in J]}
    if p == 0:
        return CQReport(CQKind.REGUL, Verdict.HOLDS, {"subsets": {}, "x_nodes": int(xs.size)}, tol, False,
                        ["no lower-level constraints"])
    if first_fail is None:
        # witness: for the full index set, one strictly feasible y per x
        ok = upper.copy()
        for t in tabs:
            ok &= t <= -tol
        wit = [{"x": inst.x_node(int(ix)).tolist(), "y": inst.y_node(int(np.flatnonzero(ok[ix])[0])).tolist()}
               for ix in xs[:3]]
        return CQReport(CQKind.REGUL, Verdict.HOLDS, {"subsets": results, "x_nodes": int(xs.size), "samples": wit}, tol, False)
    return CQReport(CQKind.REGUL, Verdict.FAILS, {"subsets": results, "violation": first_fail}, tol, False)


def _interior_nonempty(inst: BilevelInstance, params: dict) -> CQReport:
    eps = float(params.get("eps", 0.1))
    cloud = eps_cloud(inst, eps)
    tol = 1e-9
    if cloud.points.shape[0] == 0:
        return CQReport(CQKind.INTERIOR_NONEMPTY, Verdict.INCONCLUSIVE, {"reason": "empty image"}, tol, True)
    p0 = cloud.points[0]
    centre = p0 + 1.0
    return CQReport(CQKind.INTERIOR_NONEMPTY, Verdict.HOLDS,
                    {"centre": centre.tolist(), "radius": 1.0, "base_point": p0.tolist(),
                     "node": _node_json(inst, *cloud.nodes[0])}, tol, True,
                    ["the unit ball around base + (1,...,1) lies in base + nonnegative orthant"])


def _separation_lp(Q: np.ndarray):
    """max t s.t. <mu, q> >= t for all rows q, mu >= 0, sum mu = 1."""
    N, d = Q.shape
    c = np.zeros(d + 1)
    c[-1] = -1.0
    A = np.hstack([-Q, np.ones((N, 1))])
    res = linprog(c, A_ub=A, b_ub=np.zeros(N), A_eq=np.hstack([np.ones((1, d)), np.zeros((1, 1))]), b_eq=[1.0],
                  bounds=[(0, None)] * d + [(None, None)], method="highs")
    if res.status != 0:
        return None, None
    return res.x[:d], float(res.x[-1])


def _assum_not_interior(inst: BilevelInstance, params: dict) -> CQReport:
    eps = float(params.get("eps", 0.1))
    V = solve_regularized(inst, eps).value
    tol = 1e-9
    if not V.is_finite:
        return CQReport(CQKind.ASSUM_NOT_INTERIOR, Verdict.INCONCLUSIVE, {"reason": "infinite primal value"}, tol, True)
    cloud = eps_cloud(inst, eps)
    Q = cloud.points.copy()
    Q[:, 0] -= V.value
    mu, t = _separation_lp(Q)
    if mu is None:
        return CQReport(CQKind.ASSUM_NOT_INTERIOR, Verdict.INCONCLUSIVE, {"reason": "separation LP failed"}, tol, True)
    names = ["varsigma", "gamma"] + [f"alpha{i + 1}" for i in range(inst.k)] + [f"beta{j + 1}" for j in range(inst.p)]
    mult = {n: float(v) for n, v in zip(names, mu)}
    witness = {"multipliers": mult, "min_inner": t, "degenerate": bool(mu[0] <= tol)}
    notes = []
    if mu[0] <= tol:
        notes.append("separating multiplier has varsigma = 0 (degenerate case)")
    verdict = Verdict.HOLDS if t >= -tol else Verdict.FAILS
    return CQReport(CQKind.ASSUM_NOT_INTERIOR, verdict, witness, tol, True, notes)


def _pointed_high_dim(inst: BilevelInstance, params: dict) -> CQReport:
    eps = float(params.get("eps", 0.1))
    ang = float(params.get("angle_tol", 1e-6))
    V = solve_regularized(inst, eps).value if not inst.geometric else solve_geometric(inst).value
    tol = ang
    if not V.is_finite:
        return CQReport(CQKind.POINTED_HIGH_DIM, Verdict.INCONCLUSIVE, {"reason": "infinite primal value"}, tol, True)
    cloud = geo_cloud(inst) if inst.geometric else eps_cloud(inst, eps)
    W = cloud.points.copy()
    W[:, 0] -= V.value
    W = np.vstack([W, np.eye(W.shape[1])])  # orthant directions
    norms = np.linalg.norm(W, axis=1)
    W = W[norms > 0] / norms[norms > 0, None]
    cap = int(params.get("max_points", 3000))
    if W.shape[0] > cap:
        W = W[np.linspace(0, W.shape[0] - 1, cap).astype(int)]
    G = W @ W.T
    i, j = np.unravel_index(int(np.argmin(G)), G.shape)
    angle = math.acos(max(-1.0, min(1.0, float(G[i, j]))))
    witness = {"pair": [W[i].tolist(), W[j].tolist()], "angle": angle}
    if angle >= math.pi - ang:
        return CQReport(CQKind.POINTED_HIGH_DIM, Verdict.FAILS, witness, tol, True,
                        ["antipodal pair of sampled directions: the cone contains a line (within tolerance)"])
    return CQReport(CQKind.POINTED_HIGH_DIM, Verdict.INCONCLUSIVE, witness, tol, True,
                    ["no antipodal pair found; pointedness of the closed cone is not decidable from samples"])


def _contingent_probe(inst: BilevelInstance, params: dict) -> CQReport:
    """Sampled test of (1, 0, 0) against the cone of E = {(V - F - sigma, -psi - z, -omega)}.

    psi = (G, g) and omega = f - phi. With sigma = 0 and the slack z chosen
    to cancel satisfied constraints, a node contributes the ratio of its
    residual constraint size to its objective decrease V - F.
    """
    ratio_tol = float(params.get("ratio_tol", 1e-6))
    sol = solve_llvf(inst)
    tol = 1e-9
    if not sol.value.is_finite:
        return CQReport(CQKind.CONTINGENT_PROBE, Verdict.INCONCLUSIVE, {"reason": "infeasible problem"}, tol, True)
    V = sol.value.value
    first = V - inst.F_table
    resid = np.abs(np.where(np.isfinite(inst.penalty), inst.penalty, np.inf)) ** 2
    for t in inst.G_tables + inst.g_tables:
        resid = resid + np.maximum(t, 0.0) ** 2
    resid = np.sqrt(resid)
    pos = first > tol
    notes = ["set E read as {(phi(xb) - phi(x) - sigma, -psi(x) - z, -omega(x))} (the printed display is unbalanced)"]
    if not pos.any():
        return CQReport(CQKind.CONTINGENT_PROBE, Verdict.HOLDS, {"min_ratio": None, "decreasing_nodes": 0}, tol, True, notes)
    ratio = np.where(pos, resid / np.where(pos, first, 1.0), np.inf)
    i, j = np.unravel_index(int(np.argmin(ratio)), inst.shape)
    witness = {"min_ratio": float(ratio[i, j]), "node": _node_json(inst, i, j),
               "direction": [float(first[i, j]), float(resid[i, j])]}
    verdict = Verdict.FAILS if ratio[i, j] <= ratio_tol else Verdict.HOLDS
    return CQReport(CQKind.CONTINGENT_PROBE, verdict, witness, ratio_tol, True, notes)


@dataclass
class CharacteristicSet:
    """Per-x* generators of the characteristic set: the lowest height on the
    vertical axis and the conjugate terms that sum to it."""

    entries: list  # dicts: x_star, height, terms{h1, constraints, support, phistar}

    def verify(self, tol: float = 1e-9) -> bool:
        for e in self.entries:
            t = e["terms"]
            total = t["h1"] + t["constraints"] + t["support"] - t["phistar"]
            if not abs(total - e["height"]) <= tol * max(1.0, abs(total)):
                return False
        return True


def characteristic_set(inst: BilevelInstance, lam: float, xstars=None) -> CharacteristicSet:
    ctx = de._context(inst, float(lam), None)
    xstars = de.outer_grid(inst) if xstars is None else np.atleast_2d(xstars)
    n, m, k, p = inst.n, inst.m, inst.k, inst.p
    d = n + m
    entries = []
    for xs in xstars:
        vec = de._lp_mod_inner(ctx, xs)
        if vec is None:
            continue
        W = vec[None, :d]
        mult = vec[d:d + k + p]
        Uj = vec[d + k + p:].reshape(k + p, d)
        h1s = float(de._batched_conj(ctx.Z, ctx.h1, W)[0])
        cons = 0.0
        S = np.concatenate([xs, np.zeros(m)]) - vec[:d]
        for i in range(k + p):
            if mult[i] > 0:
                cons += mult[i] * float(de._batched_conj(ctx.Z, ctx.C[i], Uj[i][None, :])[0])
            S = S - mult[i] * Uj[i]
        sup = float(de._support_box(ctx.lower, ctx.upper, S[None, :])[0])
        ps = ctx.phistar(xs)
        height = h1s + cons + sup - ps
        entries.append({"x_star": xs.tolist(), "height": height,
                        "terms": {"h1": h1s, "constraints": cons, "support": sup, "phistar": ps}})
    return CharacteristicSet(entries)


def _frc_family(inst: BilevelInstance, params: dict, kind: CQKind) -> CQReport:
    lam = params.get("lambda")
    if lam is None or not lam > 0:
        raise ValueError(f"{kind.value} needs a positive lambda")
    tol = float(params.get("tol", 1e-7))
    cs = characteristic_set(inst, lam)
    if not cs.entries:
        return CQReport(kind, Verdict.INCONCLUSIVE, {"reason": "no sampled outer points"}, tol, True)
    thr_R = max(e["height"] for e in cs.entries)
    V = solve_penalized(inst, lam).value
    if not V.is_finite:
        return CQReport(kind, Verdict.INCONCLUSIVE, {"reason": "infinite penalized value"}, tol, True)
    thr_E = -V.value
    diff = thr_R - thr_E
    worst = max(cs.entries, key=lambda e: e["height"])
    witness = {"threshold_R": thr_R, "threshold_epi": thr_E, "outer_points": len(cs.entries),
               "decomposition_ok": cs.verify(), "binding_x_star": worst["x_star"]}
    notes = ["vertical-axis sections: R gives heights >= threshold_R, the epigraph gives heights >= threshold_epi"]
    if kind is CQKind.SFRC:
        if diff >= -tol:
            verdict = Verdict.HOLDS
        else:
            verdict = Verdict.FAILS
            witness["height_in_R_not_in_epi"] = 0.5 * (thr_R + thr_E)
    else:
        if abs(diff) <= tol:
            verdict = Verdict.HOLDS
        else:
            verdict = Verdict.FAILS
            witness["threshold_gap"] = diff
    return CQReport(kind, verdict, witness, tol, True, notes)


def _cc_probe(inst: BilevelInstance, params: dict) -> CQReport:
    """Closedness probe: on sampled x*, the conjugate of the constraint sum must
    equal the infimal convolution of the pieces, attained at bounded multipliers."""
    lam = params.get("lambda")
    if lam is None or not lam > 0:
        raise ValueError("CC_PROBE needs a positive lambda")
    tol = float(params.get("tol", 1e-7))
    ctx = de._context(inst, float(lam), None)
    xstars = de.outer_grid(inst)
    step = max(1, xstars.shape[0] // 9)
    worst = (0.0, None)
    at_bound = []
    for xs in xstars[::step]:
        a = de._lp_lambda_inner(ctx, xs)
        b = de._lp_mod_inner(ctx, xs)
        if a is None or b is None:
            continue
        va = float(de._eval_lambda_inner(ctx, xs, a[None, :])[0])
        vb = float(de._eval_mod_inner(ctx, xs, b[None, :])[0])
        if va - vb > worst[0]:
            worst = (va - vb, xs.tolist())
        if np.any(np.abs(a) >= 0.999 * de.MULT_BOUND):
            at_bound.append(xs.tolist())
    witness = {"max_value_difference": worst[0], "at_x_star": worst[1], "multipliers_at_bound": at_bound[:3]}
    if worst[0] <= tol and not at_bound:
        return CQReport(CQKind.CC_PROBE, Verdict.HOLDS, witness, tol, True,
                        ["sampled sums attained at bounded multipliers; closedness not certified"])
    return CQReport(CQKind.CC_PROBE, Verdict.INCONCLUSIVE, witness, tol, True,
                    ["sampled values differ or escape to the multiplier bound: possible non-closed sum"])


_DISPATCH = {
    CQKind.SLATER_GENERALIZED: _slater_generalized,
    CQKind.SLATER_LLVF_FAILURE: _slater_llvf_failure,
    CQKind.CONE_34_FAILURE: _cone_34_failure,
    CQKind.SLATER_LAMBDA: _slater_lambda,
    CQKind.REGUL: _regul,
    CQKind.INTERIOR_NONEMPTY: _interior_nonempty,
    CQKind.ASSUM_NOT_INTERIOR: _assum_not_interior,
    CQKind.POINTED_HIGH_DIM: _pointed_high_dim,
    CQKind.CONTINGENT_PROBE: _contingent_probe,
    CQKind.SFRC: lambda i, p: _frc_family(i, p, CQKind.SFRC),
    CQKind.FRC: lambda i, p: _frc_family(i, p, CQKind.FRC),
    CQKind.CC_PROBE: _cc_probe,
}


def check(kind, inst: BilevelInstance, params: Optional[dict] = None) -> CQReport:
    kind = CQKind(kind) if not isinstance(kind, CQKind) else kind
    params = dict(params or {})
    if inst.geometric and kind in (CQKind.SLATER_LAMBDA, CQKind.REGUL) and not (inst.G or inst.g):
        pass  # boxes only: the checks still run and report on the empty families
    rep = _DISPATCH[kind](inst, params)
    if kind in HEURISTIC_KINDS:
        rep.heuristic = True
    return rep
