"""Legendre-Fenchel conjugation and epigraph sampling.

Grid conjugates are box-relative: for a grid function ``f`` on box ``D``

    f*_D(p) = max over finite nodes x of <p, x> - f(x),

which is the exact conjugate of the discretised function. Conjugates over
all of R^n exist only for the analytic families handled by
:func:`conj_analytic`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from ._parallel import chunk_ranges, map_ordered
from .extreal import XReal
from .funcrep import (
    Affine,
    AnalyticFunction,
    Box,
    BoxIndicator,
    FuncHandle,
    GridFunction,
    GridSpec,
    MaxAffine,
    Quadratic,
    dump_csv,
    grid_is_convex_1d,
)

CHUNK_ENTRIES = 4_000_000


class NotConvexError(ValueError):
    pass


@dataclass(frozen=True)
class Unsupported:
    """Returned by :func:`conj_analytic` when no closed form is available."""

    reason: str

    def __bool__(self):
        return False


@dataclass(frozen=True)
class DualGridSpec:
    """Grid over slope space on which a conjugate is tabulated."""

    grid: GridSpec

    @property
    def dim(self):
        return self.grid.dim

    def nodes(self):
        return self.grid.nodes()

    @classmethod
    def auto(cls, f: GridFunction, counts: Optional[Sequence[int]] = None) -> "DualGridSpec":
        """Cover the finite-difference slope range of ``f``, padded by one dual step."""
        counts = tuple(counts) if counts is not None else f.grid.counts
        if len(counts) != f.dim:
            raise ValueError("one dual count per dimension is required")
        table = f.table()
        lower, upper = [], []
        for d in range(f.dim):
            h = f.grid.steps[d]
            if h > 0 and f.grid.counts[d] > 1:
                with np.errstate(invalid="ignore"):
                    diff = np.diff(table, axis=d) / h
                s = diff[np.isfinite(diff)]
            else:
                s = np.zeros(0)
            smin, smax = (float(s.min()), float(s.max())) if s.size else (0.0, 0.0)
            width = smax - smin
            if width == 0.0:
                smin, smax, width = smin - 0.5, smax + 0.5, 1.0
            c = counts[d]
            step = width / (c - 1)
            lower.append(smin - step)
            upper.append(smax + step)
        return cls(GridSpec(Box(tuple(lower), tuple(upper)), counts))

    @classmethod
    def uniform(cls, lower, upper, counts) -> "DualGridSpec":
        return cls(GridSpec.uniform(lower, upper, counts))


# ---------------------------------------------------------------------------
# Grid conjugates
# ---------------------------------------------------------------------------

def conj_at(f: GridFunction, P) -> np.ndarray:
    """Box-relative conjugate of a grid function at arbitrary slopes ``P``."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    if P.shape[1] != f.dim:
        raise ValueError("dimension mismatch between slopes and function")
    if np.isneginf(f.values).any():
        return np.full(P.shape[0], np.inf)
    fin = np.isfinite(f.values)
    if not fin.any():
        return np.full(P.shape[0], -np.inf)
    X = f.grid.nodes()[fin]
    v = f.values[fin]
    chunk = max(1, CHUNK_ENTRIES // X.shape[0])

    def block(rng):
        s, e = rng
        return np.max(P[s:e] @ X.T - v[None, :], axis=1)

    parts = map_ordered(block, chunk_ranges(P.shape[0], chunk))
    return np.concatenate(parts) if parts else np.zeros(0)


def conj_argmax(f: GridFunction, P) -> np.ndarray:
    """Flat primal node indices attaining the box-relative conjugate (first tie)."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    fin = np.flatnonzero(np.isfinite(f.values))
    X = f.grid.nodes()[fin]
    return fin[np.argmax(P @ X.T - f.values[fin][None, :], axis=1)]


def conj_brute(f: GridFunction, dual: DualGridSpec) -> GridFunction:
    """Exact conjugate of the discretised function on every dual node."""
    if dual.dim != f.dim:
        raise ValueError("dual grid dimension must match the function")
    vals = conj_at(f, dual.nodes())
    improper = not np.isfinite(vals).any()
    return GridFunction(dual.grid, vals, improper=improper, convex=None)


def conj_fast(f: GridFunction, dual: DualGridSpec) -> GridFunction:
    """Linear-time 1-D conjugate via the lower hull and a monotone pointer."""
    if f.dim != 1 or dual.dim != 1:
        raise NotConvexError("conj_fast handles one-dimensional functions only; use conj_brute")
    if not grid_is_convex_1d(f):
        raise NotConvexError("input is not convex on its grid; use conj_brute")
    fin = np.flatnonzero(np.isfinite(f.values))
    xs = f.grid.axes[0][fin]
    vs = f.values[fin]
    # lower hull, monotone chain (xs already increasing)
    hull = []
    for i in range(xs.size):
        while len(hull) >= 2:
            a, b = hull[-2], hull[-1]
            cross = (xs[b] - xs[a]) * (vs[i] - vs[a]) - (vs[b] - vs[a]) * (xs[i] - xs[a])
            if cross <= 0:
                hull.pop()
            else:
                break
        hull.append(i)
    hx = xs[hull]
    hv = vs[hull]
    ps = dual.grid.axes[0]
    out = np.empty(ps.size)
    j = 0
    last = hx.size - 1
    for k, p in enumerate(ps):
        cur = p * hx[j] - hv[j]
        while j < last:
            nxt = p * hx[j + 1] - hv[j + 1]
            if nxt >= cur:
                j += 1
                cur = nxt
            else:
                break
        out[k] = cur
    return GridFunction(dual.grid, out)


def biconjugate(f: GridFunction, dual: Optional[DualGridSpec] = None) -> GridFunction:
    """Conjugate of the conjugate, tabulated back on the primal grid."""
    dual = dual if dual is not None else DualGridSpec.auto(f)
    fs = conj_brute(f, dual)
    if fs.improper:
        return GridFunction(f.grid, np.full(f.grid.size, np.inf), improper=True)
    vals = conj_at(fs, f.grid.nodes())
    return GridFunction(f.grid, vals, improper=not np.isfinite(vals).any(), convex=True)


def dump_conjugate(fs: GridFunction, primal_box: Box, algorithm: str, stream=None) -> str:
    header = [
        f"primal box lower={list(primal_box.lower)} upper={list(primal_box.upper)}",
        f"dual box lower={list(fs.grid.box.lower)} upper={list(fs.grid.box.upper)}",
        f"algorithm {algorithm}",
    ]
    names = [f"p{d + 1}" for d in range(fs.dim)]
    return dump_csv(fs, stream=stream, names=names, header=header)


# ---------------------------------------------------------------------------
# Closed forms
# ---------------------------------------------------------------------------

def _split_terms(f: AnalyticFunction):
    d = f.dim
    Q = np.zeros((d, d))
    a = np.zeros(d)
    b = 0.0
    boxes = []
    for w, atom in f.terms:
        if isinstance(atom, BoxIndicator):
            boxes.append(atom.box)
        elif w == 0.0:
            continue
        elif isinstance(atom, Affine):
            a += w * np.asarray(atom.a)
            b += w * atom.b
        elif isinstance(atom, Quadratic):
            Q += w * atom.Qm
            a += w * np.asarray(atom.a)
            b += w * atom.b
        else:
            return None
    return Q, a, b, boxes


def _intersect(boxes: Sequence[Box]) -> Optional[Box]:
    lo = np.max([bx.lower for bx in boxes], axis=0)
    hi = np.min([bx.upper for bx in boxes], axis=0)
    if np.any(lo > hi):
        return None
    return Box(tuple(lo), tuple(hi))


def support_terms(box: Box, shift) -> list:
    """Atoms for p -> sigma_box(p - shift), one max-of-two-pieces per coordinate."""
    d = box.dim
    shift = np.asarray(shift, dtype=float)
    terms = []
    for k in range(d):
        e = np.zeros(d)
        e[k] = 1.0
        A = [e * box.lower[k], e * box.upper[k]]
        off = [-box.lower[k] * shift[k], -box.upper[k] * shift[k]]
        terms.append((1.0, MaxAffine(A, off)))
    return terms


def conj_analytic(f: AnalyticFunction):
    """Conjugate over all of R^n for the supported analytic families."""
    split = _split_terms(f)
    if split is None:
        return Unsupported("abs or max-of-affine terms have no closed-form conjugate here")
    Q, a, b, boxes = split
    d = f.dim
    quad = bool(np.any(Q != 0.0))
    if boxes:
        if quad:
            return Unsupported("quadratic restricted to a box")
        box = _intersect(boxes)
        if box is None:
            return Unsupported("empty domain")
        return AnalyticFunction(support_terms(box, a) + [(1.0, Affine(np.zeros(d), -b))])
    if quad:
        eig = np.linalg.eigvalsh(Q)
        if eig.min() <= 1e-12 * max(1.0, abs(eig.max())):
            return Unsupported("quadratic is not strictly convex")
        Qi = np.linalg.inv(Q)
        Qi = 0.5 * (Qi + Qi.T)
        return AnalyticFunction([(1.0, Quadratic(Qi, -Qi @ a, 0.5 * a @ Qi @ a - b))])
    point = Box(tuple(a), tuple(a))
    return AnalyticFunction([(1.0, BoxIndicator(point)), (1.0, Affine(np.zeros(d), -b))])


def inf_convolution_check(fs: Sequence[AnalyticFunction], p) -> tuple:
    """Both sides of (sum f_i)*(p) = (f_1* [] ... [] f_k*)(p) for strictly convex quadratics.

    The left side conjugates the merged quadratic; the right side solves the
    split p_1 + ... + p_k = p through its optimality system and sums the
    individual conjugates at the split.
    """
    fs = list(fs)
    if not fs:
        raise ValueError("at least one function is required")
    p = np.asarray(p, dtype=float).reshape(-1)
    parts = []
    for f in fs:
        split = _split_terms(f)
        if split is None or split[3]:
            raise ValueError("unsupported form: only quadratics are accepted")
        Q, a, b, _ = split
        if np.linalg.eigvalsh(Q).min() <= 0:
            raise ValueError("unsupported form: quadratic is not strictly convex")
        parts.append((Q, a, b))
    total = AnalyticFunction([t for f in fs for t in f.terms])
    lhs = conj_analytic(total).evaluate_many(p.reshape(1, -1))[0]
    Qsum = sum(Q for Q, _, _ in parts)
    asum = sum(a for _, a, _ in parts)
    mu = np.linalg.solve(Qsum, p - asum)
    rhs = 0.0
    for f, (Q, a, _) in zip(fs, parts):
        pi = a + Q @ mu
        rhs += conj_analytic(f).evaluate_many(pi.reshape(1, -1))[0]
    return XReal(lhs), XReal(rhs)


# ---------------------------------------------------------------------------
# Epigraph samples
# ---------------------------------------------------------------------------

KEY_DECIMALS = 9


def _key(point, height):
    return tuple(round(float(v), KEY_DECIMALS) + 0.0 for v in point) + (round(float(height), KEY_DECIMALS) + 0.0,)


class EpiSample:
    """Finite set of (point, height) pairs, compared through rounded keys."""

    def __init__(self, pairs: Iterable = ()):
        self._pairs = {}
        for pt, h in pairs:
            pt = tuple(float(v) for v in np.atleast_1d(pt))
            self._pairs[_key(pt, h)] = (pt, float(h))

    @classmethod
    def _from_keys(cls, mapping):
        out = cls()
        out._pairs = dict(mapping)
        return out

    def __len__(self):
        return len(self._pairs)

    def __iter__(self):
        return iter(self._pairs[k] for k in sorted(self._pairs))

    def __contains__(self, pair):
        pt, h = pair
        return _key(np.atleast_1d(pt), h) in self._pairs

    def keys(self) -> frozenset:
        return frozenset(self._pairs)

    def __eq__(self, other):
        return isinstance(other, EpiSample) and self.keys() == other.keys()

    def __and__(self, other: "EpiSample") -> "EpiSample":
        return EpiSample._from_keys({k: v for k, v in self._pairs.items() if k in other._pairs})

    def translate(self, dpoint, dheight: float) -> "EpiSample":
        dpoint = np.atleast_1d(np.asarray(dpoint, dtype=float))
        return EpiSample((np.asarray(pt) + dpoint, h + dheight) for pt, h in self)

    def restrict_heights(self, lo: float, hi: float) -> "EpiSample":
        return EpiSample._from_keys({k: v for k, v in self._pairs.items() if lo - 1e-12 <= v[1] <= hi + 1e-12})

    def valid_for(self, f: FuncHandle, tol: float = 1e-9) -> bool:
        for pt, h in self:
            if not (h >= float(f(pt)) - tol):
                return False
        return True


def epi_sample(
    f: FuncHandle,
    grid: GridSpec,
    cap: float,
    step: float = 0.5,
    floor: Optional[float] = None,
    tol: float = 1e-9,
) -> EpiSample:
    """All (node, height) pairs with ``f(node) <= height <= cap`` on the
    height lattice ``k * step``; heights start at ``floor`` (default: the
    lowest lattice level at or below min f on the grid)."""
    if step <= 0:
        raise ValueError("height step must be positive")
    nodes = grid.nodes()
    vals = f.evaluate_many(nodes)
    fin = np.isfinite(vals)
    if not fin.any():
        return EpiSample()
    if floor is None:
        floor = np.floor(vals[fin].min() / step) * step
    k0 = int(np.ceil(floor / step - 1e-9))
    k1 = int(np.floor(cap / step + 1e-9))
    heights = np.arange(k0, k1 + 1) * step
    pairs = []
    for i in np.flatnonzero(fin):
        for h in heights[heights >= vals[i] - tol]:
            pairs.append((nodes[i], h))
    return EpiSample(pairs)
