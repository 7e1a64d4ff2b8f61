"""Dual schemes for the bilevel reformulations: evaluation, search and gap reports.

Every scheme is evaluated on the joint grid: inner infima are node scans,
conjugates are box-relative (maximum over grid nodes, taken at arbitrary
real slopes). Multipliers live in the box ``[0, MULT_BOUND]`` (or
``[-MULT_BOUND, MULT_BOUND]`` for free variables).

Pure-sup schemes (D_IN, D_EQ, D_EPS, D_GEO) give certified lower bounds on
the matching primal value. The inf-outer schemes (D_LAMBDA, D_LAMBDA_MOD,
D_TFL) are scanned over a finite set of outer points ``x*``; the value at
each ``x*`` is a certified lower bound for the inner primal ``P^lambda(x*)``,
but the minimum over the scan over-estimates the dual, so their reports are
heuristic estimates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import linprog

from .conjcalc import DualGridSpec, conj_at
from .extreal import POS_INF, XReal, render, xadd_array, xscale_array, xsub
from .funcrep import GridFunction
from .reform import (
    BilevelInstance,
    PrimalSolution,
    _json_num,
    solve,
    solve_geometric,
    solve_penalized,
    solve_regularized,
)

MULT_BOUND = 1e3
LEVELS = np.concatenate([[0.0], np.logspace(-3, 3, 12)])


class DualScheme(str, Enum):
    D_IN = "D_IN"
    D_EQ = "D_EQ"
    D_LAMBDA = "D_LAMBDA"
    D_LAMBDA_MOD = "D_LAMBDA_MOD"
    D_TFL = "D_TFL"
    D_EPS = "D_EPS"
    D_GEO = "D_GEO"

    @classmethod
    def parse(cls, text: str) -> "DualScheme":
        key = text.strip().upper().replace("-", "_")
        aliases = {"D_M": "D_LAMBDA_MOD", "D_MOD": "D_LAMBDA_MOD", "D_S": "D_GEO", "D_E": "D_EPS"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown dual scheme {text!r}") from None


class Polarity(str, Enum):
    TRUE_LOWER_BOUND = "TRUE_LOWER_BOUND"
    HEURISTIC_ESTIMATE = "HEURISTIC_ESTIMATE"


PURE_SUP = frozenset({DualScheme.D_IN, DualScheme.D_EQ, DualScheme.D_EPS, DualScheme.D_GEO})
INF_OUTER = frozenset({DualScheme.D_LAMBDA, DualScheme.D_LAMBDA_MOD, DualScheme.D_TFL})


def signature(scheme: DualScheme, inst: BilevelInstance) -> list:
    """(name, shape, sign) of every variable of the scheme; sign is 'nonneg' or 'free'."""
    n, m, k, p = inst.n, inst.m, inst.k, inst.p
    d = n + m
    if scheme is DualScheme.D_IN:
        return [("alpha_star", (d,), "free"), ("beta_star", (k + p + 1,), "nonneg")]
    if scheme is DualScheme.D_EQ:
        return [("beta_star", (k + p,), "nonneg"), ("gamma_star", (1,), "free")]
    if scheme is DualScheme.D_EPS:
        return [("alpha", (k,), "nonneg"), ("beta", (p,), "nonneg"), ("gamma", (1,), "nonneg")]
    if scheme is DualScheme.D_GEO:
        return [("gamma", (1,), "nonneg")]
    base = [("x_star", (n,), "free"), ("z_star", (n,), "free"), ("q_star", (m,), "free"),
            ("alpha", (k,), "nonneg"), ("beta", (p,), "nonneg")]
    if scheme is DualScheme.D_LAMBDA:
        return base
    if scheme is DualScheme.D_LAMBDA_MOD:
        return base + [("u", (k + p, n), "free"), ("v", (k + p, m), "free")]
    if scheme is DualScheme.D_TFL:
        return base[:1] + [("y_star", (m,), "free")] + base[1:]
    raise ValueError(scheme)


@dataclass(frozen=True)
class DualPoint:
    """Variables of one dual scheme; sign constraints checked at construction."""

    scheme: DualScheme
    values: tuple  # ((name, flat tuple, shape), ...)

    def __post_init__(self):
        for name, flat, _shape in self.values:
            arr = np.asarray(flat, dtype=float)
            if np.isnan(arr).any():
                raise ValueError(f"{name} contains NaN")

    @classmethod
    def build(cls, scheme: DualScheme, inst: BilevelInstance, **kw) -> "DualPoint":
        scheme = DualScheme(scheme)
        sig = signature(scheme, inst)
        names = {s[0] for s in sig}
        extra = set(kw) - names
        if extra:
            raise ValueError(f"unexpected variables for {scheme.value}: {sorted(extra)}")
        vals = []
        for name, shape, sign in sig:
            arr = np.zeros(shape) if name not in kw else np.asarray(kw[name], dtype=float).reshape(shape)
            if sign == "nonneg" and np.any(arr < 0):
                raise ValueError(f"{name} must be nonnegative")
            vals.append((name, tuple(float(v) for v in arr.reshape(-1)), shape))
        return cls(scheme, tuple(vals))

    def get(self, name: str) -> np.ndarray:
        for nm, flat, shape in self.values:
            if nm == name:
                return np.asarray(flat, dtype=float).reshape(shape)
        raise KeyError(name)

    def vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(flat, dtype=float) for _, flat, _ in self.values]) if self.values else np.zeros(0)

    @classmethod
    def from_vector(cls, scheme: DualScheme, inst: BilevelInstance, vec) -> "DualPoint":
        vec = np.asarray(vec, dtype=float)
        kw, pos = {}, 0
        for name, shape, sign in signature(scheme, inst):
            size = int(np.prod(shape))
            arr = vec[pos:pos + size]
            if sign == "nonneg":
                arr = np.maximum(arr, 0.0)
            kw[name] = arr.reshape(shape)
            pos += size
        return cls.build(scheme, inst, **kw)

    def to_json(self) -> dict:
        out = {}
        for name, flat, shape in self.values:
            arr = np.asarray(flat).reshape(shape)
            out[name] = [[_json_num(v) for v in row] for row in arr] if len(shape) == 2 else [_json_num(v) for v in arr]
        return out


# ---------------------------------------------------------------------------
# Extended-real helpers for batched linear combinations
# ---------------------------------------------------------------------------

def _lin_comb(base, coefs, tables):
    """``base + sum_c coefs[:, c] * tables[c]`` for a batch of coefficient rows.

    ``base`` has shape (N,) or (B, N); ``coefs`` (B, C); ``tables`` (C, N).
    Infinite entries follow the extended rules: 0 * (+inf) = +inf,
    0 * (-inf) = 0, negative coefficients flip the sign of an infinity, and
    opposite infinities sum to +inf.
    """
    coefs = np.atleast_2d(np.asarray(coefs, dtype=float))
    tables = np.asarray(tables, dtype=float).reshape(coefs.shape[1], -1) if coefs.shape[1] else np.zeros((0, np.shape(base)[-1]))
    base = np.asarray(base, dtype=float)
    B = coefs.shape[0]
    N = tables.shape[1] if tables.size else base.shape[-1]
    fin_tab = np.where(np.isfinite(tables), tables, 0.0)
    out = np.broadcast_to(np.where(np.isfinite(base), base, 0.0), (B, N)) + coefs @ fin_tab
    pos = np.broadcast_to(base == np.inf, (B, N)).copy()
    neg = np.broadcast_to(base == -np.inf, (B, N)).copy()
    for c in range(coefs.shape[1]):
        col = coefs[:, c][:, None]
        tp = (tables[c] == np.inf)[None, :]
        tn = (tables[c] == -np.inf)[None, :]
        if not (tp.any() or tn.any()):
            continue
        pos |= (tp & (col >= 0)) | (tn & (col < 0))
        neg |= (tp & (col < 0)) | (tn & (col > 0))
    out = np.where(neg, -np.inf, out)
    out = np.where(pos, np.inf, out)
    return out


def _batched_conj(Z, vals, P):
    """max over nodes with finite ``vals`` of <P, z> - vals(z); P is (B, d)."""
    fin = np.isfinite(vals)
    if not fin.any():
        return np.full(P.shape[0], -np.inf)
    return np.max(P @ Z[fin].T - vals[fin][None, :], axis=1)


def _support_box(lower, upper, S):
    """sigma of the box at each row of S."""
    return np.sum(np.maximum(S * lower, S * upper), axis=1)


# ---------------------------------------------------------------------------
# Context: precomputed tables for one (instance, scheme, params)
# ---------------------------------------------------------------------------

class _Context:
    def __init__(self, inst: BilevelInstance, lam: Optional[float], eps: Optional[float]):
        self.inst = inst
        self.lam = lam
        self.eps = eps
        self.Z = inst.joint_grid.nodes()
        self.N = self.Z.shape[0]
        self.F = inst.F_table.reshape(-1)
        self.s = inst.penalty.reshape(-1)
        self.G = np.array([t.reshape(-1) for t in inst.G_tables]).reshape(inst.k, self.N)
        self.g = np.array([t.reshape(-1) for t in inst.g_tables]).reshape(inst.p, self.N)
        self.C = np.vstack([self.G, self.g]) if inst.k + inst.p else np.zeros((0, self.N))
        self.lower = np.asarray(inst.joint_grid.box.lower)
        self.upper = np.asarray(inst.joint_grid.box.upper)
        self.phi = GridFunction(inst.xgrid, inst.phi, improper=not np.isfinite(inst.phi).any() or np.isneginf(inst.phi).any())
        if lam is not None:
            # lambda^-1 F + f: the smooth part whose conjugate enters the inf-outer duals
            self.h1 = xadd_array(xscale_array(1.0 / lam, self.F), inst.f_table.reshape(-1))
        self._phistar = {}

    def phistar(self, xstar) -> float:
        key = tuple(np.asarray(xstar, dtype=float).reshape(-1))
        if key not in self._phistar:
            if self.phi.improper and not np.isfinite(self.phi.values).any():
                self._phistar[key] = -np.inf
            else:
                self._phistar[key] = float(conj_at(self.phi, np.asarray(key).reshape(1, -1))[0])
        return self._phistar[key]


def _context(inst: BilevelInstance, lam=None, eps=None) -> _Context:
    cache = inst.__dict__.setdefault("_dual_ctx", {})
    key = (lam, eps)
    if key not in cache:
        cache[key] = _Context(inst, lam, eps)
    return cache[key]


def _params(scheme: DualScheme, params: Optional[dict]) -> tuple:
    params = dict(params or {})
    lam = params.get("lambda")
    eps = params.get("eps")
    if scheme in INF_OUTER:
        if lam is None or not lam > 0:
            raise ValueError(f"{scheme.value} needs a positive lambda")
        return float(lam), None
    if scheme is DualScheme.D_EPS:
        if eps is None or not eps > 0:
            raise ValueError("D_EPS needs a positive eps")
        return None, float(eps)
    return None, None


# ---------------------------------------------------------------------------
# Batched evaluators. Each takes a (B, dim) matrix of packed variables.
# ---------------------------------------------------------------------------

def _eval_geo(ctx: _Context, X):
    if not ctx.inst.geometric:
        raise ValueError("D_GEO needs a geometric instance")
    L = _lin_comb(ctx.F, X[:, :1], ctx.s[None, :])
    return L.min(axis=1)


def _eval_eps(ctx: _Context, X):
    k, p = ctx.inst.k, ctx.inst.p
    alpha, beta, gamma = X[:, :k], X[:, k:k + p], X[:, k + p:k + p + 1]
    shifted = ctx.s - ctx.eps
    L = _lin_comb(ctx.F, np.hstack([gamma, alpha, beta]), np.vstack([shifted[None, :], ctx.C]))
    return L.min(axis=1)


def _eval_eq(ctx: _Context, X):
    L = _lin_comb(ctx.F, X, np.vstack([ctx.C, ctx.s[None, :]]))
    return L.min(axis=1)


def _eval_in(ctx: _Context, X):
    d = ctx.Z.shape[1]
    A = X[:, :d]
    beta = X[:, d:]
    Fstar = _batched_conj(ctx.Z, ctx.F, A)
    psi = np.vstack([ctx.C, ctx.s[None, :]])
    inner = _lin_comb(A @ ctx.Z.T, beta, psi).min(axis=1)
    with np.errstate(invalid="ignore"):
        out = -Fstar + inner
    out = np.where(np.isnan(out), np.inf, out)
    return out


def _constraint_conj(ctx: _Context, U, mult):
    """(sum_i mult_i C_i)* at each row of U (box-relative)."""
    lc = _lin_comb(np.zeros(ctx.N), mult, ctx.C)  # (B, N)
    vals = U @ ctx.Z.T - lc
    vals = np.where(np.isnan(vals), -np.inf, vals)
    return vals.max(axis=1)


def _eval_lambda_inner(ctx: _Context, xstar, X, ystar=None):
    """phi*(x*) - h1*(w) - (alpha G + beta g)*((x*, y*) - w); X rows pack (w, alpha, beta)."""
    n, m, k, p = ctx.inst.n, ctx.inst.m, ctx.inst.k, ctx.inst.p
    d = n + m
    W = X[:, :d]
    mult = X[:, d:d + k + p]
    v = np.concatenate([np.asarray(xstar, dtype=float).reshape(-1), np.zeros(m) if ystar is None else np.asarray(ystar, dtype=float)])
    h1s = _batched_conj(ctx.Z, ctx.h1, W)
    h2s = _constraint_conj(ctx, v[None, :] - W, mult)
    ps = ctx.phistar(xstar)
    with np.errstate(invalid="ignore"):
        out = ps - h1s - h2s
    return np.where(np.isnan(out), -np.inf, out)


def _mod_unpack(ctx: _Context, X):
    n, m, k, p = ctx.inst.n, ctx.inst.m, ctx.inst.k, ctx.inst.p
    d = n + m
    W = X[:, :d]
    mult = X[:, d:d + k + p]
    Ujoint = X[:, d + k + p:].reshape(X.shape[0], k + p, d)
    return W, mult, Ujoint


def _eval_mod_inner(ctx: _Context, xstar, X):
    """phi* - h1*(w) - sum_i mult_i C_i*(u_i) - sigma_box(v - w - sum_i mult_i u_i)."""
    m = ctx.inst.m
    W, mult, Uj = _mod_unpack(ctx, X)
    v = np.concatenate([np.asarray(xstar, dtype=float).reshape(-1), np.zeros(m)])
    h1s = _batched_conj(ctx.Z, ctx.h1, W)
    total = np.zeros(X.shape[0])
    S = v[None, :] - W
    for i in range(mult.shape[1]):
        ci = _batched_conj(ctx.Z, ctx.C[i], Uj[:, i, :])
        # 0 * (finite conjugate) = 0; 0 * (+inf) = +inf
        term = np.where(mult[:, i] > 0, mult[:, i] * ci, np.where(ci == np.inf, np.inf, 0.0))
        total = total + term
        S = S - mult[:, i:i + 1] * Uj[:, i, :]
    sig = _support_box(ctx.lower, ctx.upper, S)
    with np.errstate(invalid="ignore"):
        out = ctx.phistar(xstar) - h1s - total - sig
    return np.where(np.isnan(out), -np.inf, out)


# ---------------------------------------------------------------------------
# Point <-> packed vectors for the inner problems
# ---------------------------------------------------------------------------

def _inner_pack(point: DualPoint) -> np.ndarray:
    parts = [point.get("z_star"), point.get("q_star"), point.get("alpha"), point.get("beta")]
    if point.scheme is DualScheme.D_LAMBDA_MOD:
        U = np.hstack([point.get("u"), point.get("v")])
        parts.append(U.reshape(-1))
    return np.concatenate([np.asarray(x, dtype=float).reshape(-1) for x in parts])


def _inner_point(scheme: DualScheme, inst: BilevelInstance, xstar, vec, ystar=None) -> DualPoint:
    n, m, k, p = inst.n, inst.m, inst.k, inst.p
    d = n + m
    kw = dict(
        x_star=np.asarray(xstar, dtype=float),
        z_star=vec[:n],
        q_star=vec[n:d],
        alpha=np.maximum(vec[d:d + k], 0.0),
        beta=np.maximum(vec[d + k:d + k + p], 0.0),
    )
    if scheme is DualScheme.D_LAMBDA_MOD:
        Uj = vec[d + k + p:].reshape(k + p, d)
        kw["u"] = Uj[:, :n]
        kw["v"] = Uj[:, n:]
    if scheme is DualScheme.D_TFL:
        kw["y_star"] = np.zeros(m) if ystar is None else ystar
    return DualPoint.build(scheme, inst, **kw)


# ---------------------------------------------------------------------------
# Public evaluation
# ---------------------------------------------------------------------------

def eval_dual(scheme, inst: BilevelInstance, params: Optional[dict], point: DualPoint) -> XReal:
    """Exact value of the scheme's objective at ``point``."""
    scheme = DualScheme(scheme)
    if point.scheme is not scheme:
        raise ValueError(f"point belongs to {point.scheme.value}, not {scheme.value}")
    sig = signature(scheme, inst)
    for name, shape, _ in sig:
        if point.get(name).shape != tuple(shape):
            raise ValueError(f"{name} has the wrong shape for this instance")
    lam, eps = _params(scheme, params)
    ctx = _context(inst, lam, eps)
    if scheme in PURE_SUP:
        X = point.vector()[None, :]
        fn = {DualScheme.D_GEO: _eval_geo, DualScheme.D_EPS: _eval_eps,
              DualScheme.D_EQ: _eval_eq, DualScheme.D_IN: _eval_in}[scheme]
        return XReal(float(fn(ctx, X)[0]))
    xstar = point.get("x_star")
    X = _inner_pack(point)[None, :]
    if scheme is DualScheme.D_TFL:
        ystar = point.get("y_star")
        if np.any(ystar != 0.0):
            return POS_INF  # the support function of R^m is +inf away from 0
        return XReal(float(_eval_lambda_inner(ctx, xstar, X, ystar)[0]))
    if scheme is DualScheme.D_LAMBDA:
        return XReal(float(_eval_lambda_inner(ctx, xstar, X)[0]))
    return XReal(float(_eval_mod_inner(ctx, xstar, X)[0]))


def classical_fl_value(inst: BilevelInstance, point: DualPoint) -> XReal:
    """Textbook Fenchel-Lagrange dual value -F*(p) - (beta psi)*(-p) for a D_IN point,
    computed through grid conjugates (independent of the D_IN evaluator)."""
    if point.scheme is not DualScheme.D_IN:
        raise ValueError("classical_fl_value takes a D_IN point")
    ctx = _context(inst)
    a = point.get("alpha_star")
    beta = point.get("beta_star")
    jg = inst.joint_grid
    Fg = GridFunction(jg, ctx.F)
    psi = np.vstack([ctx.C, ctx.s[None, :]])
    comb = _lin_comb(np.zeros(ctx.N), beta[None, :], psi)[0]
    if not np.isfinite(comb).any() or np.isneginf(comb).any():
        second = np.inf if np.isneginf(comb).any() else -np.inf
    else:
        second = float(conj_at(GridFunction(jg, comb), (-a).reshape(1, -1))[0])
    first = float(conj_at(Fg, a.reshape(1, -1))[0])
    return XReal(-first) - XReal(second)


# ---------------------------------------------------------------------------
# Inner primal values for the inf-outer schemes
# ---------------------------------------------------------------------------

def inner_primal_values(inst: BilevelInstance, lam: float, xstars) -> np.ndarray:
    """V(P^lambda(x*)) = min over G,g-feasible nodes of h1 + phi*(x*) - <x*, x>."""
    ctx = _context(inst, float(lam), None)
    xstars = np.atleast_2d(np.asarray(xstars, dtype=float))
    mask = inst.constraint_mask.reshape(-1) & np.isfinite(ctx.h1)
    if not mask.any():
        return np.full(xstars.shape[0], np.inf)
    X = ctx.Z[mask][:, : inst.n]
    h1 = ctx.h1[mask]
    ps = np.array([ctx.phistar(x) for x in xstars])
    return np.min(h1[None, :] - xstars @ X.T, axis=1) + ps


def slope_candidates(inst: BilevelInstance) -> np.ndarray:
    """Finite-difference slopes of phi: for convex phi the subgradients of its
    piecewise-linear interpolant, where inf over x* is attained."""
    phi = inst.phi.reshape(inst.xgrid.shape)
    cands = [np.zeros(inst.n)]
    if inst.n == 1:
        h = inst.xgrid.steps[0]
        if h > 0:
            with np.errstate(invalid="ignore"):
                sl = np.diff(phi) / h
            cands.extend([[v] for v in np.unique(sl[np.isfinite(sl)])])
        return np.unique(np.array(cands, dtype=float), axis=0)
    for idx in np.ndindex(*inst.xgrid.shape):
        g = np.zeros(inst.n)
        ok = True
        for d in range(inst.n):
            j = list(idx)
            j[d] += 1
            if j[d] >= inst.xgrid.shape[d]:
                j[d] -= 2
                if j[d] < 0:
                    ok = False
                    break
                g[d] = (phi[idx] - phi[tuple(j)]) / inst.xgrid.steps[d]
            else:
                g[d] = (phi[tuple(j)] - phi[idx]) / inst.xgrid.steps[d]
        if ok and np.all(np.isfinite(g)):
            cands.append(g)
    return np.unique(np.array(cands, dtype=float), axis=0)


def outer_grid(inst: BilevelInstance, counts=None) -> np.ndarray:
    """x* candidates: nodes of the automatic dual grid of phi, plus the slopes of phi in 1-D."""
    phi = _context(inst).phi
    if not np.isfinite(phi.values).any():
        return np.zeros((1, inst.n))
    fin = GridFunction(phi.grid, np.where(np.isfinite(phi.values), phi.values, np.inf))
    nodes = DualGridSpec.auto(fin, counts).nodes()
    if inst.n == 1:
        nodes = np.unique(np.vstack([nodes, slope_candidates(inst)]), axis=0)
    return nodes


# ---------------------------------------------------------------------------
# Search machinery
# ---------------------------------------------------------------------------

def _levels(sign: str) -> np.ndarray:
    if sign == "nonneg":
        return LEVELS
    return np.concatenate([-LEVELS[:0:-1], LEVELS])


def _coordinate_ascent(fn: Callable, signs: Sequence[str], budget: int, rng, starts: int = 4, x0=None):
    """Multistart coordinate ascent over log-spaced levels, then step-halving refinement.

    Returns (best vector, best value, evaluations used). Ties keep the
    first-found incumbent, so the result is deterministic for a fixed rng.
    """
    dim = len(signs)
    lo = np.array([0.0 if s == "nonneg" else -MULT_BOUND for s in signs])
    hi = np.full(dim, MULT_BOUND)
    used = 0
    zero = np.zeros(dim) if x0 is None else np.clip(np.asarray(x0, dtype=float), lo, hi)
    best_x = zero.copy()
    best_v = float(fn(zero[None, :])[0])
    used += 1
    if dim == 0 or budget <= 1:
        return best_x, best_v, used
    level_sets = [_levels(s) for s in signs]
    start_pts = [zero] + [np.array([rng.choice(level_sets[c]) for c in range(dim)]) for _ in range(starts - 1)]
    for x in start_pts:
        if used >= budget:
            break
        x = x.copy()
        v = float(fn(x[None, :])[0])
        used += 1
        improved = True
        while improved and used < budget:
            improved = False
            for c in range(dim):
                if used >= budget:
                    break
                cand = np.repeat(x[None, :], level_sets[c].size, axis=0)
                cand[:, c] = level_sets[c]
                vals = fn(cand)
                used += cand.shape[0]
                j = int(np.argmax(vals))
                if vals[j] > v + 1e-15:
                    x, v, improved = cand[j].copy(), float(vals[j]), True
        delta = np.maximum(np.abs(x) * 0.5, 1e-3)
        for _ in range(60):
            if used >= budget:
                break
            improved = False
            for c in range(dim):
                if used >= budget:
                    break
                cand = np.repeat(x[None, :], 2, axis=0)
                cand[0, c] = min(x[c] + delta[c], hi[c])
                cand[1, c] = max(x[c] - delta[c], lo[c])
                vals = fn(cand)
                used += 2
                j = int(np.argmax(vals))
                if vals[j] > v + 1e-15:
                    x, v, improved = cand[j].copy(), float(vals[j]), True
            if not improved:
                delta = delta * 0.5
                if np.all(delta < 1e-12):
                    break
        if v > best_v:
            best_x, best_v = x.copy(), v
    return best_x, best_v, used


def _lp(c, A, b, bounds):
    res = linprog(c, A_ub=A, b_ub=b, bounds=bounds, method="highs")
    if res.status != 0:
        return None
    return res.x


def _lp_pure_sup(ctx: _Context, scheme: DualScheme):
    """Exact sup of the grid dual over the multiplier box, as a linear program.

    The solution is returned as a packed vector; callers re-evaluate it with
    the exact evaluator, so LP round-off never leaks into reported values.
    """
    inst = ctx.inst
    U = MULT_BOUND
    if scheme is DualScheme.D_IN:
        d = ctx.Z.shape[1]
        psi = np.vstack([ctx.C, ctx.s[None, :]])
        r = psi.shape[0]
        nv = d + r + 2  # alpha*, beta, t1, t2
        rows, rhs = [], []
        finF = np.isfinite(ctx.F)
        A1 = np.zeros((finF.sum(), nv))
        A1[:, :d] = ctx.Z[finF]
        A1[:, d + r] = -1.0
        rows.append(A1)
        rhs.append(ctx.F[finF])
        finP = np.all(np.isfinite(psi), axis=0)
        A2 = np.zeros((finP.sum(), nv))
        A2[:, :d] = -ctx.Z[finP]
        A2[:, d:d + r] = -psi[:, finP].T
        A2[:, d + r + 1] = 1.0
        rows.append(A2)
        rhs.append(np.zeros(finP.sum()))
        c = np.zeros(nv)
        c[d + r] = 1.0
        c[d + r + 1] = -1.0
        bounds = [(-U, U)] * d + [(0, U)] * r + [(None, None)] * 2
        x = _lp(c, np.vstack(rows), np.concatenate(rhs), bounds)
        return None if x is None else x[: d + r]
    if scheme is DualScheme.D_GEO:
        tabs, signs = ctx.s[None, :], ["nonneg"]
    elif scheme is DualScheme.D_EPS:
        tabs = np.vstack([ctx.C, (ctx.s - ctx.eps)[None, :]])
        signs = ["nonneg"] * (inst.k + inst.p + 1)
    else:  # D_EQ
        tabs = np.vstack([ctx.C, ctx.s[None, :]])
        signs = ["nonneg"] * (inst.k + inst.p) + ["free"]
    fin = np.isfinite(ctx.F) & np.all(np.isfinite(tabs), axis=0)
    nv = tabs.shape[0] + 1
    A = np.zeros((fin.sum(), nv))
    A[:, :-1] = -tabs[:, fin].T
    A[:, -1] = 1.0
    c = np.zeros(nv)
    c[-1] = -1.0
    bounds = [(0, U) if s == "nonneg" else (-U, U) for s in signs] + [(None, None)]
    x = _lp(c, A, ctx.F[fin], bounds)
    if x is None:
        return None
    return x[:-1]


def _lp_lambda_inner(ctx: _Context, xstar):
    """Inner sup of D^lambda at x* over (w, alpha, beta) as one LP."""
    inst = ctx.inst
    n, m, k, p = inst.n, inst.m, inst.k, inst.p
    d = n + m
    r = k + p
    U = MULT_BOUND
    v = np.concatenate([np.asarray(xstar, dtype=float).reshape(-1), np.zeros(m)])
    nv = d + r + 2
    fin1 = np.isfinite(ctx.h1)
    A1 = np.zeros((fin1.sum(), nv))
    A1[:, :d] = ctx.Z[fin1]
    A1[:, d + r] = -1.0
    b1 = ctx.h1[fin1]
    fin2 = np.all(np.isfinite(ctx.C), axis=0) if r else np.ones(ctx.N, dtype=bool)
    A2 = np.zeros((fin2.sum(), nv))
    A2[:, :d] = -ctx.Z[fin2]
    if r:
        A2[:, d:d + r] = -ctx.C[:, fin2].T
    A2[:, d + r + 1] = -1.0
    b2 = -(ctx.Z[fin2] @ v)
    c = np.zeros(nv)
    c[d + r] = 1.0
    c[d + r + 1] = 1.0
    bounds = [(-U, U)] * d + [(0, U)] * r + [(None, None)] * 2
    x = _lp(c, np.vstack([A1, A2]), np.concatenate([b1, b2]), bounds)
    return None if x is None else x[: d + r]


def _lp_mod_inner(ctx: _Context, xstar):
    """Inner sup of the modified dual at x* with perspective variables a_i = mult_i * u_i."""
    inst = ctx.inst
    n, m, k, p = inst.n, inst.m, inst.k, inst.p
    d = n + m
    r = k + p
    U = MULT_BOUND
    v = np.concatenate([np.asarray(xstar, dtype=float).reshape(-1), np.zeros(m)])
    # variables: w(d) mult(r) a(r*d) t1 t_i(r) rho(d)
    iw, im, ia = 0, d, d + r
    it1 = ia + r * d
    iti = it1 + 1
    irho = iti + r
    nv = irho + d
    rows, rhs = [], []
    fin1 = np.isfinite(ctx.h1)
    A = np.zeros((fin1.sum(), nv))
    A[:, iw:iw + d] = ctx.Z[fin1]
    A[:, it1] = -1.0
    rows.append(A)
    rhs.append(ctx.h1[fin1])
    for i in range(r):
        fin = np.isfinite(ctx.C[i])
        A = np.zeros((fin.sum(), nv))
        A[:, ia + i * d: ia + (i + 1) * d] = ctx.Z[fin]
        A[:, im + i] = -ctx.C[i, fin]
        A[:, iti + i] = -1.0
        rows.append(A)
        rhs.append(np.zeros(fin.sum()))
        # |a_i| <= U * mult_i
        for sgn in (1.0, -1.0):
            A = np.zeros((d, nv))
            A[np.arange(d), ia + i * d + np.arange(d)] = sgn
            A[:, im + i] = -U
            rows.append(A)
            rhs.append(np.zeros(d))
    # rho_d >= bound * s_d with s = v - w - sum_i a_i, for bound in (lower, upper)
    for bound in (ctx.lower, ctx.upper):
        A = np.zeros((d, nv))
        idx = np.arange(d)
        A[idx, iw + idx] = -bound
        for i in range(r):
            A[idx, ia + i * d + idx] = -bound
        A[idx, irho + idx] = -1.0
        rows.append(A)
        rhs.append(-bound * v)
    c = np.zeros(nv)
    c[it1] = 1.0
    c[iti:iti + r] = 1.0
    c[irho:irho + d] = 1.0
    bounds = [(-U, U)] * d + [(0, U)] * r + [(-U * U, U * U)] * (r * d) + [(None, None)] * (1 + r + d)
    x = _lp(c, np.vstack(rows), np.concatenate(rhs), bounds)
    if x is None:
        return None
    w = x[iw:iw + d]
    mult = np.maximum(x[im:im + r], 0.0)
    a = x[ia:ia + r * d].reshape(r, d)
    Uj = np.where(mult[:, None] > 0, a / np.where(mult[:, None] > 0, mult[:, None], 1.0), 0.0)
    Uj = np.clip(Uj, -U, U)
    return np.concatenate([w, mult, Uj.reshape(-1)])


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

BOX_NOTE = "conjugates are box-relative over the joint grid box, not over the whole space"


@dataclass
class GapReport:
    scheme: DualScheme
    params: dict
    primal: XReal
    dual: XReal
    polarity: Polarity
    point: Optional[DualPoint]
    budget: int
    notes: list = field(default_factory=list)
    outer: list = field(default_factory=list)  # [(x*, certified inner value, inner primal)]

    @property
    def gap(self) -> XReal:
        return xsub(self.primal, self.dual)

    def to_json(self) -> dict:
        out = {
            "scheme": self.scheme.value,
            "params": {k: _json_num(v) for k, v in sorted(self.params.items())},
            "primal": _json_num(self.primal),
            "dual": _json_num(self.dual),
            "gap": _json_num(self.gap),
            "polarity": self.polarity.value,
            "point": self.point.to_json() if self.point is not None else {},
            "budget": int(self.budget),
            "notes": list(self.notes),
        }
        if self.outer:
            out["outer"] = [
                {"x_star": [_json_num(v) for v in xs], "inner": _json_num(val), "inner_primal": _json_num(pv)}
                for xs, val, pv in self.outer
            ]
        return out


def primal_for(scheme: DualScheme, inst: BilevelInstance, params: Optional[dict]) -> PrimalSolution:
    lam, eps = _params(scheme, params)
    if scheme in INF_OUTER:
        return solve_penalized(inst, lam)
    if scheme is DualScheme.D_EPS:
        return solve_regularized(inst, eps)
    if scheme is DualScheme.D_GEO:
        return solve_geometric(inst)
    return solve(inst)


def _pure_fn(ctx, scheme):
    return {DualScheme.D_GEO: _eval_geo, DualScheme.D_EPS: _eval_eps,
            DualScheme.D_EQ: _eval_eq, DualScheme.D_IN: _eval_in}[scheme]


def search_dual(scheme, inst: BilevelInstance, params: Optional[dict] = None, budget: int = 1000, seed: int = 0,
                outer_counts=None) -> GapReport:
    """Search the scheme's multipliers; deterministic for fixed seed and budget."""
    scheme = DualScheme(scheme)
    if budget < 1:
        raise ValueError("budget must be at least 1")
    lam, eps = _params(scheme, params)
    ctx = _context(inst, lam, eps)
    rng = np.random.default_rng(seed)
    primal = primal_for(scheme, inst, params).value
    pdict = {k: v for k, v in (("lambda", lam), ("eps", eps)) if v is not None}
    notes = [BOX_NOTE]
    if scheme in PURE_SUP:
        fn = _pure_fn(ctx, scheme)
        signs = [s for _, shape, s in signature(scheme, inst) for _ in range(int(np.prod(shape)))]
        x, v, used = _coordinate_ascent(lambda X: fn(ctx, X), signs, budget, rng)
        notes.append(f"coordinate ascent value {render(v)}")
        lpx = _lp_pure_sup(ctx, scheme)
        used += 1
        if lpx is not None:
            lv = float(fn(ctx, lpx[None, :])[0])
            notes.append(f"linear-programming polish value {render(lv)}")
            if lv > v:
                x, v = lpx, lv
        point = DualPoint.from_vector(scheme, inst, x)
        value = eval_dual(scheme, inst, params, point)
        if scheme is DualScheme.D_IN:
            fl = classical_fl_value(inst, point)
            diff = abs(value.value - fl.value) if value.is_finite and fl.is_finite else (0.0 if value == fl else math.inf)
            notes.append(f"D_IN display vs classical Fenchel-Lagrange value: discrepancy {render(diff)}")
        if scheme is DualScheme.D_GEO:
            notes.extend(geo_tail_notes(inst, primal))
        return GapReport(scheme, pdict, primal, value, Polarity.TRUE_LOWER_BOUND, point, used, notes)

    xs_grid = outer_grid(inst, outer_counts)
    notes.append(f"outer variable scanned over {xs_grid.shape[0]} dual-grid nodes; dom phi* widened to the dual grid")
    if scheme is DualScheme.D_TFL:
        notes.append("y* pinned to 0: the support function of R^m is +inf elsewhere")
    inner_fn = _eval_mod_inner if scheme is DualScheme.D_LAMBDA_MOD else _eval_lambda_inner
    lp_fn = _lp_mod_inner if scheme is DualScheme.D_LAMBDA_MOD else _lp_lambda_inner
    n, m, k, p = inst.n, inst.m, inst.k, inst.p
    d = n + m
    signs = ["free"] * d + ["nonneg"] * (k + p)
    if scheme is DualScheme.D_LAMBDA_MOD:
        signs += ["free"] * ((k + p) * d)
    prim_inner = inner_primal_values(inst, lam, xs_grid)
    used = 0
    outer = []
    best = None
    remaining = budget
    for j, xs in enumerate(xs_grid):
        share = max(1, remaining // (xs_grid.shape[0] - j))
        x, v, u = _coordinate_ascent(lambda X: inner_fn(ctx, xs, X), signs, share, rng, starts=2)
        used += u
        remaining = max(0, remaining - u)
        lpx = lp_fn(ctx, xs)
        used += 1
        if lpx is not None:
            lv = float(inner_fn(ctx, xs, lpx[None, :])[0])
            if lv > v:
                x, v = lpx, lv
        outer.append((tuple(float(t) for t in xs), v, float(prim_inner[j])))
        if best is None or v < best[1]:
            best = (xs, v, x)
    point = _inner_point(scheme, inst, best[0], best[2])
    value = eval_dual(scheme, inst, params, point)
    notes.append("minimum over scanned x* over-estimates the inf-outer dual; per-x* values are certified")
    return GapReport(scheme, pdict, primal, value, Polarity.HEURISTIC_ESTIMATE, point, used, notes, outer)


def geo_tail_notes(inst: BilevelInstance, primal: XReal, gap_level: float = 0.1) -> list:
    """Analytic facts about the concave piecewise-linear dual of the geometric problem."""
    if not primal.is_finite:
        return []
    info = geo_dual_profile(inst, primal.value, gap_level)
    notes = []
    if info["closing_gamma"] is not None:
        notes.append(f"gap closes exactly at gamma = {render(info['closing_gamma'])}")
    if info["certified_gamma"] > 0:
        notes.append(f"gap >= {render(gap_level)} is certified for every gamma <= {render(info['certified_gamma'])}")
    return notes


def geo_dual_profile(inst: BilevelInstance, V: float, gap_level: float = 0.1) -> dict:
    """For d(gamma) = min over nodes of F + gamma s (s = f - phi >= 0):

    * closing_gamma: smallest gamma with d(gamma) = V (None when already at 0);
    * certified_gamma: d(gamma) <= V - gap_level for all gamma up to this value.
    """
    F = inst.F_table.reshape(-1)
    s = inst.penalty.reshape(-1)
    below = F < V
    if np.any(below & (s <= 0)):
        raise ValueError("a node below the primal value has zero penalty")
    closing = float(np.max((V - F[below]) / s[below])) if below.any() else None
    deep = F <= V - gap_level
    certified = float(np.max((V - gap_level - F[deep]) / s[deep])) if deep.any() else 0.0
    return {"closing_gamma": closing, "certified_gamma": certified}


# ---------------------------------------------------------------------------
# Weak duality margins and identities
# ---------------------------------------------------------------------------

def weak_duality_margin(scheme, inst: BilevelInstance, params: Optional[dict], sample: Sequence[DualPoint]) -> float:
    """Worst (primal - dual) over the sample; for inf-outer schemes the primal is
    the inner primal V(P^lambda(x*)) at each point's own x*."""
    scheme = DualScheme(scheme)
    if not sample:
        raise ValueError("empty sample")
    worst = math.inf
    if scheme in PURE_SUP:
        primal = primal_for(scheme, inst, params).value
        for pt in sample:
            worst = min(worst, xsub(primal, eval_dual(scheme, inst, params, pt)).value)
        return worst
    lam, _ = _params(scheme, params)
    for pt in sample:
        xs = pt.get("x_star")
        ref = inner_primal_values(inst, lam, xs[None, :])[0]
        worst = min(worst, xsub(XReal(ref), eval_dual(scheme, inst, params, pt)).value)
    return worst


def aggregated_margin(scheme, inst: BilevelInstance, params: dict, sample: Sequence[DualPoint]) -> float:
    """V(P^lambda) minus the sampled inf-outer dual (min over x* of the best sampled inner value)."""
    scheme = DualScheme(scheme)
    if scheme not in INF_OUTER:
        raise ValueError("aggregated margins apply to inf-outer schemes")
    best = {}
    for pt in sample:
        key = tuple(pt.get("x_star"))
        val = eval_dual(scheme, inst, params, pt).value
        best[key] = max(best.get(key, -math.inf), val)
    primal = primal_for(scheme, inst, params).value
    return xsub(primal, XReal(min(best.values()))).value


def random_points(scheme, inst: BilevelInstance, count: int, rng, scale: float = 3.0, xstars=None) -> list:
    """Random dual points: multipliers |N(0, scale)| or N(0, scale) by sign; x* drawn from ``xstars``."""
    scheme = DualScheme(scheme)
    out = []
    for _ in range(count):
        kw = {}
        for name, shape, sign in signature(scheme, inst):
            arr = rng.normal(0.0, scale, size=shape)
            if sign == "nonneg":
                arr = np.abs(arr)
            kw[name] = arr
        if scheme in INF_OUTER:
            if xstars is not None:
                kw["x_star"] = np.asarray(xstars[rng.integers(len(xstars))], dtype=float)
            if scheme is DualScheme.D_TFL:
                kw["y_star"] = np.zeros(inst.m)
        out.append(DualPoint.build(scheme, inst, **kw))
    return out


def toland_check(inst: BilevelInstance, lam: float) -> tuple:
    """Both sides of V(P^lambda) = inf over x* of phi*(x*) - (h1 + indicator(S))*(x*, 0).

    x* runs over the finite-difference slopes of phi (the subgradients of
    its piecewise-linear interpolant), where the infimum is attained for
    convex phi.
    """
    lhs = solve_penalized(inst, lam).value
    cands = slope_candidates(inst)
    ctx = _context(inst, float(lam), None)
    mask = inst.constraint_mask.reshape(-1) & np.isfinite(ctx.h1)
    hs = GridFunction(inst.joint_grid, np.where(mask, ctx.h1, np.inf))
    P = np.hstack([cands, np.zeros((cands.shape[0], inst.m))])
    conj_S = conj_at(hs, P)
    ps = np.array([ctx.phistar(c) for c in cands])
    rhs = float(np.min(ps - conj_S))
    return lhs, XReal(rhs)
