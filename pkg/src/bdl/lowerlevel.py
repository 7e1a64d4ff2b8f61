"""Lower-level problem: value function, solution sets and the value-function conjugate.

All quantities are computed by exhaustive scans over the joint grid
``xgrid x ygrid``. Tables are indexed ``[ix, iy]`` with flat joint index
``ix * Ny + iy`` (row-major, x coordinates first).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .conjcalc import conj_at
from .extreal import XReal
from .funcrep import AnalyticFunction, FuncHandle, GridFunction, GridSpec

ANALYTIC_TOL = 1e-9
VALUE_TOL = 1e-9


def joint_grid(xgrid: GridSpec, ygrid: GridSpec) -> GridSpec:
    return xgrid.product(ygrid)


def joint_table(func: FuncHandle, xgrid: GridSpec, ygrid: GridSpec) -> np.ndarray:
    """Values of ``func(x, y)`` on all joint nodes, shape ``(Nx, Ny)``."""
    jg = joint_grid(xgrid, ygrid)
    if func.dim != jg.dim:
        raise ValueError(f"function has dim {func.dim}, joint grid has dim {jg.dim}")
    vals = func.evaluate_many(jg.nodes())
    return vals.reshape(xgrid.size, ygrid.size)


class LowerLevelProblem:
    """``min_y f(x, y)`` subject to ``g_j(x, y) <= 0`` on a y grid."""

    def __init__(self, f: FuncHandle, g: Sequence[FuncHandle], ygrid: GridSpec):
        self.f = f
        self.g = tuple(g)
        self.ygrid = ygrid
        dims = {f.dim} | {gj.dim for gj in self.g}
        if len(dims) != 1:
            raise ValueError("lower-level functions must share the joint dimension")
        if f.dim <= ygrid.dim:
            raise ValueError("joint dimension must exceed the y dimension")
        self._cache = {}

    @property
    def n(self) -> int:
        return self.f.dim - self.ygrid.dim

    @property
    def m(self) -> int:
        return self.ygrid.dim

    def is_analytic(self) -> bool:
        return all(isinstance(h, AnalyticFunction) for h in (self.f,) + self.g)

    def default_tol(self, xgrid: GridSpec) -> float:
        """1e-9 for analytic data, ten joint grid steps otherwise."""
        if self.is_analytic():
            return ANALYTIC_TOL
        return 10.0 * max(joint_grid(xgrid, self.ygrid).steps)

    def _table(self, key, func, xgrid):
        k = (key, xgrid)
        if k not in self._cache:
            t = joint_table(func, xgrid, self.ygrid)
            t.setflags(write=False)
            self._cache[k] = t
        return self._cache[k]

    def f_table(self, xgrid: GridSpec) -> np.ndarray:
        return self._table("f", self.f, xgrid)

    def g_tables(self, xgrid: GridSpec) -> list:
        return [self._table(("g", j), gj, xgrid) for j, gj in enumerate(self.g)]

    def feasible_mask(self, xgrid: GridSpec, tol: Optional[float] = None) -> np.ndarray:
        tol = self.default_tol(xgrid) if tol is None else tol
        mask = np.ones((xgrid.size, self.ygrid.size), dtype=bool)
        for t in self.g_tables(xgrid):
            mask &= t <= tol
        return mask


@dataclass(frozen=True)
class ValueFunction:
    """phi on the x grid; +inf exactly where no y node is feasible."""

    phi: GridFunction
    tol: float

    @property
    def values(self) -> np.ndarray:
        return self.phi.values

    @property
    def grid(self) -> GridSpec:
        return self.phi.grid


def _phi_values(L: LowerLevelProblem, xgrid: GridSpec, tol: float) -> np.ndarray:
    ft = L.f_table(xgrid)
    mask = L.feasible_mask(xgrid, tol)
    masked = np.where(mask, ft, np.inf)
    return masked.min(axis=1)


def value_function(L: LowerLevelProblem, xgrid: GridSpec, tol: Optional[float] = None) -> ValueFunction:
    tol = L.default_tol(xgrid) if tol is None else tol
    vals = _phi_values(L, xgrid, tol)
    improper = not np.isfinite(vals).any() or np.isneginf(vals).any()
    return ValueFunction(GridFunction(xgrid, vals, improper=improper), tol)


def _x_index(xgrid: GridSpec, x) -> int:
    if isinstance(x, (int, np.integer)):
        if not 0 <= int(x) < xgrid.size:
            raise ValueError("x node index out of range")
        return int(x)
    idx = xgrid.locate(x)
    if idx is None:
        raise ValueError(f"{x} is not a node of the x grid")
    return idx


def eps_solution_set(
    L: LowerLevelProblem,
    xgrid: GridSpec,
    x,
    eps: float,
    tol: Optional[float] = None,
    value_tol: float = VALUE_TOL,
) -> list:
    """Flat y node indices with ``y`` feasible and ``f(x, y) - phi(x) <= eps + value_tol``."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    tol = L.default_tol(xgrid) if tol is None else tol
    ix = _x_index(xgrid, x)
    ft = L.f_table(xgrid)[ix]
    mask = L.feasible_mask(xgrid, tol)[ix]
    if not mask.any():
        return []
    phi = ft[mask].min()
    ok = mask & (ft - phi <= eps + value_tol)
    return [int(i) for i in np.flatnonzero(ok)]


def solution_set(L: LowerLevelProblem, xgrid: GridSpec, x, tol: Optional[float] = None, value_tol: float = VALUE_TOL) -> list:
    return eps_solution_set(L, xgrid, x, 0.0, tol, value_tol)


def depends_on_x(func: FuncHandle, xgrid: GridSpec, ygrid: GridSpec, tol: float = 1e-12) -> bool:
    """Numerical test: does the table change along x for some y node?"""
    t = joint_table(func, xgrid, ygrid)
    same_inf = np.all(np.isinf(t) == np.isinf(t[0:1]), axis=0)
    if not np.all(same_inf):
        return True
    fin = np.isfinite(t[0])
    if not fin.any():
        return False
    sub = t[:, fin]
    return bool(np.max(sub.max(axis=0) - sub.min(axis=0)) > tol)


def conj_value_identity(L: LowerLevelProblem, xgrid: GridSpec, xstar, tol: Optional[float] = None) -> tuple:
    """Both sides of phi*(x*) = (f + indicator(X x K))*(x*, 0).

    ``x*`` pairs with the x block and the y slot of the joint conjugate is 0.
    Rejected when any lower constraint depends on x.
    """
    for gj in L.g:
        if depends_on_x(gj, xgrid, L.ygrid):
            raise ValueError("the identity needs a feasible set K that does not depend on x")
    tol = L.default_tol(xgrid) if tol is None else tol
    xstar = np.asarray(xstar, dtype=float).reshape(1, -1)
    phi = value_function(L, xgrid, tol).phi
    lhs = float(conj_at(phi, xstar)[0]) if not phi.improper or np.isfinite(phi.values).any() else -np.inf
    jg = joint_grid(xgrid, L.ygrid)
    ft = L.f_table(xgrid)
    restricted = np.where(L.feasible_mask(xgrid, tol), ft, np.inf).reshape(-1)
    if np.isfinite(restricted).any():
        joint = GridFunction(jg, restricted)
        P = np.concatenate([xstar, np.zeros((1, L.m))], axis=1)
        rhs = float(conj_at(joint, P)[0])
    else:
        rhs = -np.inf
    return XReal(lhs), XReal(rhs)


@dataclass(frozen=True)
class LscProbe:
    """Nodes where phi jumps up against every neighbour (heuristic)."""

    flagged: tuple
    heuristic: bool = True


def lsc_probe(L: LowerLevelProblem, xgrid: GridSpec, tol: Optional[float] = None, factor: float = 10.0) -> LscProbe:
    phi = value_function(L, xgrid, tol).values.reshape(xgrid.shape)
    ft = L.f_table(xgrid).reshape(xgrid.shape + (L.ygrid.size,))
    flagged = []
    for idx in np.ndindex(*xgrid.shape):
        nbrs = []
        for d in range(xgrid.dim):
            for s in (-1, 1):
                j = list(idx)
                j[d] += s
                if 0 <= j[d] < xgrid.shape[d]:
                    nbrs.append(tuple(j))
        if not nbrs:
            continue
        here = phi[idx]
        around = np.array([phi[j] for j in nbrs])
        if not np.isfinite(around).any():
            continue
        local = 0.0
        for j in nbrs:
            both = np.isfinite(ft[idx]) & np.isfinite(ft[j])
            if both.any():
                local = max(local, float(np.max(np.abs(ft[idx][both] - ft[j][both]))))
        jump = here - np.max(around[np.isfinite(around)])
        if jump > factor * local + VALUE_TOL:
            flagged.append(xgrid.flat_index(idx))
    return LscProbe(tuple(flagged))


def lipschitz_estimate(values: np.ndarray, grid: GridSpec) -> float:
    """Largest finite-difference slope between adjacent finite nodes."""
    t = np.asarray(values, dtype=float).reshape(grid.shape)
    best = 0.0
    for d in range(grid.dim):
        h = grid.steps[d]
        if h == 0:
            continue
        with np.errstate(invalid="ignore"):
            diff = np.abs(np.diff(t, axis=d)) / h
        fin = diff[np.isfinite(diff)]
        if fin.size:
            best = max(best, float(fin.max()))
    return best
