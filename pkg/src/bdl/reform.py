"""Single-level reformulations of the bilevel problem and their exhaustive solvers.

Every solver scans all joint nodes ``(x, y)`` and reports the complete set
of minimisers within ``ARGMIN_TOL`` of the optimal value, in node order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from .extreal import POS_INF, XReal, render, xadd_array, xscale_array, xsub_array
from .funcrep import AnalyticFunction, FuncHandle, GridSpec
from .lowerlevel import LowerLevelProblem, joint_table, lipschitz_estimate, value_function

ARGMIN_TOL = 1e-9
VALUE_TOL = 1e-9


class Problem(str, Enum):
    LLVF = "LLVF"
    P_T = "P_t"
    P_LAMBDA = "P_lambda"
    LLVF_EPS = "LLVF_eps"
    LLVF_S = "LLVF_s"


class BilevelInstance:
    """Upper objective ``F``, constraints ``G_i``, and the lower level ``(f, g_j)``.

    All functions take the joint vector ``(x1..xn, y1..ym)``. Geometric
    instances have no constraint functions at all: the boxes of the two
    grids are the sets ``X`` and ``Y``.
    """

    def __init__(
        self,
        F: FuncHandle,
        f: FuncHandle,
        G: Sequence[FuncHandle] = (),
        g: Sequence[FuncHandle] = (),
        xgrid: GridSpec = None,
        ygrid: GridSpec = None,
        geometric: bool = False,
        name: str = "instance",
        tol: Optional[float] = None,
    ):
        if xgrid is None or ygrid is None:
            raise ValueError("both grids are required")
        self.F = F
        self.G = tuple(G)
        self.xgrid = xgrid
        self.ygrid = ygrid
        self.lower = LowerLevelProblem(f, g, ygrid)
        self.geometric = bool(geometric)
        self.name = name
        d = xgrid.dim + ygrid.dim
        for h in (F, f) + self.G + self.lower.g:
            if h.dim != d:
                raise ValueError(f"function dimension {h.dim} does not match n + m = {d}")
        if self.geometric and (self.G or self.lower.g):
            raise ValueError("geometric instances carry no constraint functions")
        xgrid.product(ygrid)  # enforces the joint caps
        self._tol = tol

    # -- shape -----------------------------------------------------------------
    @property
    def f(self):
        return self.lower.f

    @property
    def g(self):
        return self.lower.g

    @property
    def n(self):
        return self.xgrid.dim

    @property
    def m(self):
        return self.ygrid.dim

    @property
    def k(self):
        return len(self.G)

    @property
    def p(self):
        return len(self.g)

    @cached_property
    def joint_grid(self) -> GridSpec:
        return self.xgrid.product(self.ygrid)

    @property
    def shape(self):
        return (self.xgrid.size, self.ygrid.size)

    def is_analytic(self) -> bool:
        return all(isinstance(h, AnalyticFunction) for h in (self.F, self.f) + self.G + self.g)

    @property
    def tol(self) -> float:
        """Feasibility slack for ``G_i <= 0`` and ``g_j <= 0``."""
        if self._tol is not None:
            return self._tol
        return 1e-9 if self.is_analytic() else 10.0 * max(self.joint_grid.steps)

    def __eq__(self, other):
        return (
            isinstance(other, BilevelInstance)
            and self.name == other.name
            and self.geometric == other.geometric
            and self.xgrid == other.xgrid
            and self.ygrid == other.ygrid
            and self.F == other.F
            and self.f == other.f
            and self.G == other.G
            and self.g == other.g
        )

    __hash__ = object.__hash__

    # -- tables (Nx, Ny) -----------------------------------------------------------
    @cached_property
    def F_table(self):
        return joint_table(self.F, self.xgrid, self.ygrid)

    @cached_property
    def f_table(self):
        return self.lower.f_table(self.xgrid)

    @cached_property
    def G_tables(self):
        return [joint_table(Gi, self.xgrid, self.ygrid) for Gi in self.G]

    @cached_property
    def g_tables(self):
        return self.lower.g_tables(self.xgrid)

    @cached_property
    def phi(self) -> np.ndarray:
        return value_function(self.lower, self.xgrid, self.tol).values

    @cached_property
    def penalty(self) -> np.ndarray:
        """``f(x, y) - phi(x)`` under extended subtraction."""
        return xsub_array(self.f_table, np.broadcast_to(self.phi[:, None], self.shape))

    @cached_property
    def constraint_mask(self) -> np.ndarray:
        mask = np.ones(self.shape, dtype=bool)
        for t in self.G_tables + self.g_tables:
            mask &= t <= self.tol
        return mask

    @cached_property
    def upper_mask(self) -> np.ndarray:
        mask = np.ones(self.shape, dtype=bool)
        for t in self.G_tables:
            mask &= t <= self.tol
        return mask

    @cached_property
    def llvf_mask(self) -> np.ndarray:
        return self.constraint_mask & (self.penalty <= VALUE_TOL)

    # -- node helpers ----------------------------------------------------------------
    def x_node(self, ix: int) -> np.ndarray:
        return self.xgrid.node(ix)

    def y_node(self, iy: int) -> np.ndarray:
        return self.ygrid.node(iy)

    def locate(self, x, y) -> tuple:
        ix = x if isinstance(x, (int, np.integer)) else self.xgrid.locate(x)
        iy = y if isinstance(y, (int, np.integer)) else self.ygrid.locate(y)
        if ix is None or iy is None:
            raise ValueError(f"({x}, {y}) is not a joint grid node")
        return int(ix), int(iy)

    def lipschitz_moduli(self) -> dict:
        """Finite-difference estimates of the Lipschitz moduli of f and phi."""
        return {
            "k_f": lipschitz_estimate(self.f_table.reshape(-1), self.joint_grid),
            "k_phi": lipschitz_estimate(self.phi, self.xgrid),
        }


# ---------------------------------------------------------------------------
# Solutions
# ---------------------------------------------------------------------------

@dataclass
class PrimalSolution:
    problem: Problem
    value: XReal
    argmin: list  # list of (ix, iy)
    params: dict = field(default_factory=dict)
    instance: Optional[BilevelInstance] = field(default=None, repr=False, compare=False)

    def points(self) -> list:
        inst = self.instance
        return [(inst.x_node(ix).tolist(), inst.y_node(iy).tolist()) for ix, iy in self.argmin]

    def to_json(self) -> dict:
        return {
            "problem": self.problem.value,
            "params": {k: _json_num(v) for k, v in sorted(self.params.items())},
            "value": _json_num(self.value),
            "argmin": [{"x": [_json_num(v) for v in x], "y": [_json_num(v) for v in y]} for x, y in self.points()],
        }


def _json_num(v):
    """Finite numbers as JSON numbers, infinities as the +inf / -inf tokens."""
    if isinstance(v, XReal):
        v = v.value
    if isinstance(v, (bool, str)) or v is None:
        return v
    v = float(v)
    if math.isinf(v):
        return render(v)
    if v.is_integer() and abs(v) < 2**53:
        return int(v)
    return v


def _argmin(obj: np.ndarray, mask: np.ndarray, tie: float = ARGMIN_TOL):
    vals = np.where(mask, obj, np.inf)
    best = vals.min() if vals.size else np.inf
    if not np.isfinite(best):
        if best == -np.inf:
            idx = np.argwhere(vals == -np.inf)
            return XReal(best), [tuple(int(v) for v in r) for r in idx]
        return POS_INF, []
    idx = np.argwhere(vals <= best + tie)
    return XReal(float(best)), [tuple(int(v) for v in r) for r in idx]


def llvf_feasible(inst: BilevelInstance, x, y, tol: Optional[float] = None) -> bool:
    ix, iy = inst.locate(x, y)
    tol = inst.tol if tol is None else tol
    for t in inst.G_tables + inst.g_tables:
        if not t[ix, iy] <= tol:
            return False
    return bool(inst.penalty[ix, iy] <= max(tol, VALUE_TOL))


def solve_llvf(inst: BilevelInstance) -> PrimalSolution:
    value, arg = _argmin(inst.F_table, inst.llvf_mask)
    return PrimalSolution(Problem.LLVF, value, arg, {}, inst)


def perturbed_feasible(inst: BilevelInstance, x, y, t: float, tol: Optional[float] = None) -> bool:
    ix, iy = inst.locate(x, y)
    band = max(VALUE_TOL, inst.tol if tol is None else tol)
    if not inst.constraint_mask[ix, iy]:
        return False
    return bool(abs(inst.penalty[ix, iy] + t) <= band)


def penalized_objective(inst: BilevelInstance, lam: float) -> np.ndarray:
    if not lam > 0:
        raise ValueError("lambda must be positive")
    return xadd_array(xscale_array(1.0 / lam, inst.F_table), inst.penalty)


def solve_penalized(inst: BilevelInstance, lam: float) -> PrimalSolution:
    obj = penalized_objective(inst, lam)
    value, arg = _argmin(obj, inst.constraint_mask)
    return PrimalSolution(Problem.P_LAMBDA, value, arg, {"lambda": float(lam)}, inst)


def solve_regularized(inst: BilevelInstance, eps: float) -> PrimalSolution:
    if not eps > 0:
        raise ValueError("eps must be positive")
    mask = inst.constraint_mask & (inst.penalty <= eps + VALUE_TOL)
    value, arg = _argmin(inst.F_table, mask)
    return PrimalSolution(Problem.LLVF_EPS, value, arg, {"eps": float(eps)}, inst)


def solve_geometric(inst: BilevelInstance) -> PrimalSolution:
    if not inst.geometric:
        raise ValueError("solve_geometric needs a geometric instance")
    value, arg = _argmin(inst.F_table, inst.penalty <= VALUE_TOL)
    return PrimalSolution(Problem.LLVF_S, value, arg, {}, inst)


def solve(inst: BilevelInstance) -> PrimalSolution:
    return solve_geometric(inst) if inst.geometric else solve_llvf(inst)


# ---------------------------------------------------------------------------
# Set classification for the geometric problem
# ---------------------------------------------------------------------------

@dataclass
class SetClassification:
    F_minus: list
    F_eq: list
    F_plus: list
    Xi_minus: list
    Xi_eq: list
    Xi_plus: list
    O: list
    value: float
    tol: float

    def to_json(self) -> dict:
        return {k: [list(p) for p in getattr(self, k)] for k in ("F_minus", "F_eq", "F_plus", "Xi_minus", "Xi_eq", "Xi_plus", "O")}


def _nodes(mask) -> list:
    return [tuple(int(v) for v in r) for r in np.argwhere(mask)]


def classify_sets(inst: BilevelInstance, tol: float = VALUE_TOL) -> SetClassification:
    sol = solve_geometric(inst)
    if not sol.value.is_finite:
        raise ValueError("set classification needs a finite optimal value")
    V = sol.value.value
    s = inst.penalty
    Fv = inst.F_table
    return SetClassification(
        F_minus=_nodes(s < -tol),
        F_eq=_nodes(np.abs(s) <= tol),
        F_plus=_nodes(s > tol),
        Xi_minus=_nodes(Fv < V - tol),
        Xi_eq=_nodes(np.abs(Fv - V) <= tol),
        Xi_plus=_nodes(Fv > V + tol),
        O=list(sol.argmin),
        value=V,
        tol=tol,
    )


# ---------------------------------------------------------------------------
# Regularisation sequence
# ---------------------------------------------------------------------------

@dataclass
class ConvergenceRow:
    k: int
    eps: float
    value: XReal
    argmin: list
    distance_steps: float  # grid steps from the nearest LLVF argmin (inf-norm)


def regularization_table(inst: BilevelInstance, k_max: int) -> list:
    """Solve the eps = 2^-k relaxations, k = 0..k_max, and measure how far
    their minimisers sit from the LLVF minimisers (in grid steps)."""
    base = solve_llvf(inst)
    steps = np.array(inst.joint_grid.steps)
    steps = np.where(steps > 0, steps, 1.0)
    ref = np.array([np.concatenate([inst.x_node(ix), inst.y_node(iy)]) for ix, iy in base.argmin])
    rows = []
    for k in range(k_max + 1):
        eps = 2.0 ** (-k)
        sol = solve_regularized(inst, eps)
        if not sol.argmin or ref.size == 0:
            dist = math.inf
        else:
            pts = np.array([np.concatenate([inst.x_node(ix), inst.y_node(iy)]) for ix, iy in sol.argmin])
            d = np.abs(pts[:, None, :] - ref[None, :, :]) / steps
            dist = float(np.max(np.min(np.max(d, axis=2), axis=1)))
        rows.append(ConvergenceRow(k, eps, sol.value, sol.argmin, dist))
    return rows
