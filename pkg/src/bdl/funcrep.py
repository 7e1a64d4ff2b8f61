"""Extended-real-valued functions on boxed domains.

Two concrete representations share the :class:`FuncHandle` interface:

* :class:`AnalyticFunction` -- a nonnegative-weighted sum of closed-form atoms
  (affine, quadratic, abs-of-affine, max-of-affine, box indicator);
* :class:`GridFunction` -- values tabulated on a uniform :class:`GridSpec`,
  evaluated off-node by multilinear interpolation.

Grid nodes are enumerated row-major with the first coordinate slowest.
For bilevel data the coordinate order is always ``(x1..xn, y1..ym)``.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Optional, Sequence

import numpy as np

from .extreal import (
    XReal,
    format_number,
    parse_xreal,
    render,
    xadd_array,
    xscale_array,
)

MAX_NODES = 10**7
MAX_DIM = 4
SNAP_TOL = 1e-9


# ---------------------------------------------------------------------------
# Domains and grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    """Axis-aligned box with finite bounds, ``lower <= upper`` per axis."""

    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lower))
        hi = tuple(float(v) for v in np.atleast_1d(self.upper))
        if len(lo) != len(hi) or len(lo) == 0:
            raise ValueError("box bounds must be nonempty and of equal length")
        for a, b in zip(lo, hi):
            if not (math.isfinite(a) and math.isfinite(b)):
                raise ValueError("box bounds must be finite")
            if a > b:
                raise ValueError(f"empty box side [{a}, {b}]")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def interval(cls, lo: float, hi: float) -> "Box":
        return cls((lo,), (hi,))

    @property
    def dim(self) -> int:
        return len(self.lower)

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.size != self.dim:
            raise ValueError("dimension mismatch")
        lo = np.asarray(self.lower)
        hi = np.asarray(self.upper)
        return bool(np.all(x >= lo - tol) and np.all(x <= hi + tol))

    def contains_many(self, X, tol: float = 0.0) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        lo = np.asarray(self.lower)
        hi = np.asarray(self.upper)
        return np.all((X >= lo - tol) & (X <= hi + tol), axis=1)

    def product(self, other: "Box") -> "Box":
        return Box(self.lower + other.lower, self.upper + other.upper)

    def project(self, dims: Sequence[int]) -> "Box":
        return Box(tuple(self.lower[d] for d in dims), tuple(self.upper[d] for d in dims))


@dataclass(frozen=True)
class GridSpec:
    """Uniform tensor grid on a box; node 0 is the lower bound, the last node the upper."""

    box: Box
    counts: tuple

    def __post_init__(self):
        counts = tuple(int(c) for c in np.atleast_1d(self.counts))
        if len(counts) != self.box.dim:
            raise ValueError("one node count per box dimension is required")
        if any(c < 2 for c in counts):
            raise ValueError("every grid dimension needs at least 2 nodes")
        if self.box.dim > MAX_DIM:
            raise ValueError(f"grids are limited to {MAX_DIM} dimensions")
        if math.prod(counts) > MAX_NODES:
            raise ValueError(f"grid exceeds the {MAX_NODES} node cap")
        object.__setattr__(self, "counts", counts)

    @classmethod
    def uniform(cls, lower, upper, counts) -> "GridSpec":
        lower = np.atleast_1d(lower)
        counts = np.atleast_1d(counts)
        if counts.size == 1 and lower.size > 1:
            counts = np.repeat(counts, lower.size)
        return cls(Box(tuple(lower), tuple(np.atleast_1d(upper))), tuple(counts))

    @property
    def dim(self) -> int:
        return self.box.dim

    @property
    def shape(self) -> tuple:
        return self.counts

    @property
    def size(self) -> int:
        return math.prod(self.counts)

    @property
    def steps(self) -> tuple:
        return tuple((u - l) / (c - 1) for l, u, c in zip(self.box.lower, self.box.upper, self.counts))

    def axis(self, d: int) -> np.ndarray:
        return self.axes[d]

    @cached_property
    def axes(self) -> tuple:
        out = []
        for l, u, c in zip(self.box.lower, self.box.upper, self.counts):
            i = np.arange(c, dtype=float)
            a = l + (u - l) * i / (c - 1)
            a[-1] = u
            out.append(a)
        return tuple(out)

    @cached_property
    def _nodes(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        pts = np.stack([m.reshape(-1) for m in mesh], axis=1)
        pts.setflags(write=False)
        return pts

    def nodes(self) -> np.ndarray:
        """All node coordinates, shape ``(size, dim)``, row-major order."""
        return self._nodes

    def node(self, index: int) -> np.ndarray:
        return self._nodes[index]

    def multi_index(self, index: int) -> tuple:
        return tuple(int(v) for v in np.unravel_index(index, self.counts))

    def flat_index(self, multi) -> int:
        return int(np.ravel_multi_index(tuple(multi), self.counts))

    def locate(self, x, tol: float = SNAP_TOL) -> Optional[int]:
        """Flat index of the node at ``x`` (within ``tol`` steps), else None."""
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.size != self.dim:
            raise ValueError("dimension mismatch")
        multi = []
        for d in range(self.dim):
            l, h, c = self.box.lower[d], self.steps[d], self.counts[d]
            if h == 0.0:
                if abs(x[d] - l) > tol:
                    return None
                multi.append(0)
                continue
            pos = (x[d] - l) / h
            r = int(round(pos))
            if abs(pos - r) > tol or r < 0 or r >= c:
                return None
            multi.append(r)
        return self.flat_index(multi)

    def product(self, other: "GridSpec") -> "GridSpec":
        return GridSpec(self.box.product(other.box), self.counts + other.counts)

    def project(self, dims: Sequence[int]) -> "GridSpec":
        return GridSpec(self.box.project(dims), tuple(self.counts[d] for d in dims))


# ---------------------------------------------------------------------------
# Function handles
# ---------------------------------------------------------------------------

class FuncHandle:
    """Common interface: an extended-real function of a ``dim``-vector."""

    dim: int

    @property
    def convex(self) -> bool:  # pragma: no cover - overridden
        raise NotImplementedError

    def evaluate_many(self, X) -> np.ndarray:  # pragma: no cover - overridden
        raise NotImplementedError

    def __call__(self, x) -> XReal:
        return evaluate(self, x)


def _as_points(X, dim: int) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1) if X.size == dim else X.reshape(-1, 1)
    if X.shape[1] != dim:
        raise ValueError(f"dimension mismatch: expected {dim}, got {X.shape[1]}")
    return X


# -- analytic atoms -----------------------------------------------------------

@dataclass(frozen=True)
class Affine:
    """``<a, x> + b``."""

    a: tuple
    b: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "a", tuple(float(v) for v in np.atleast_1d(self.a)))
        object.__setattr__(self, "b", float(self.b))

    @property
    def dim(self):
        return len(self.a)

    convex = True

    def evaluate_many(self, X):
        return X @ np.asarray(self.a) + self.b

    def gradient(self, x):
        return np.asarray(self.a, dtype=float)


@dataclass(frozen=True)
class Quadratic:
    """``0.5 <x, Q x> + <a, x> + b`` with symmetric ``Q``."""

    Q: tuple
    a: tuple
    b: float = 0.0

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        a = np.atleast_1d(np.asarray(self.a, dtype=float))
        if Q.shape != (a.size, a.size):
            raise ValueError("Q must be square and match a")
        if not np.allclose(Q, Q.T, rtol=0, atol=1e-12):
            raise ValueError("Q must be symmetric")
        Q = 0.5 * (Q + Q.T)
        object.__setattr__(self, "Q", tuple(tuple(float(v) for v in row) for row in Q))
        object.__setattr__(self, "a", tuple(float(v) for v in a))
        object.__setattr__(self, "b", float(self.b))

    @property
    def dim(self):
        return len(self.a)

    @property
    def Qm(self) -> np.ndarray:
        return np.asarray(self.Q, dtype=float)

    @property
    def convex(self) -> bool:
        return bool(np.linalg.eigvalsh(self.Qm).min() >= -1e-12)

    def evaluate_many(self, X):
        Q = self.Qm
        return 0.5 * np.einsum("ij,jk,ik->i", X, Q, X) + X @ np.asarray(self.a) + self.b

    def gradient(self, x):
        return self.Qm @ np.asarray(x, dtype=float) + np.asarray(self.a)


@dataclass(frozen=True)
class AbsAffine:
    """``|<a, x> + b|``."""

    a: tuple
    b: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "a", tuple(float(v) for v in np.atleast_1d(self.a)))
        object.__setattr__(self, "b", float(self.b))

    @property
    def dim(self):
        return len(self.a)

    convex = True

    def evaluate_many(self, X):
        return np.abs(X @ np.asarray(self.a) + self.b)

    def gradient(self, x):
        s = float(np.dot(self.a, x) + self.b)
        return np.sign(s) * np.asarray(self.a)


@dataclass(frozen=True)
class MaxAffine:
    """``max_i <A_i, x> + b_i``."""

    A: tuple
    b: tuple

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if A.shape[0] != b.size or A.shape[0] == 0:
            raise ValueError("one offset per affine piece is required")
        object.__setattr__(self, "A", tuple(tuple(float(v) for v in row) for row in A))
        object.__setattr__(self, "b", tuple(float(v) for v in b))

    @property
    def dim(self):
        return len(self.A[0])

    convex = True

    def evaluate_many(self, X):
        return np.max(X @ np.asarray(self.A).T + np.asarray(self.b), axis=1)

    def gradient(self, x):
        vals = np.asarray(self.A) @ np.asarray(x, dtype=float) + np.asarray(self.b)
        return np.asarray(self.A[int(np.argmax(vals))])


@dataclass(frozen=True)
class BoxIndicator:
    """0 on the box, +inf outside."""

    box: Box

    @property
    def dim(self):
        return self.box.dim

    convex = True

    def evaluate_many(self, X):
        return np.where(self.box.contains_many(X, tol=1e-12), 0.0, np.inf)

    def gradient(self, x):
        return np.zeros(self.dim)


ATOM_TYPES = (Affine, Quadratic, AbsAffine, MaxAffine, BoxIndicator)


class AnalyticFunction(FuncHandle):
    """Nonnegative-weighted sum of analytic atoms.

    ``source`` optionally keeps the expression the function was parsed from,
    so serialisation can reproduce it verbatim.
    """

    def __init__(self, terms: Iterable, dim: Optional[int] = None, source=None):
        terms = tuple((float(w), atom) for w, atom in terms)
        if not terms:
            raise ValueError("an analytic function needs at least one term")
        for w, atom in terms:
            if not isinstance(atom, ATOM_TYPES):
                raise TypeError(f"unsupported atom {atom!r}")
            if not (w >= 0) or math.isinf(w):
                raise ValueError("term weights must be finite and nonnegative")
        dims = {atom.dim for _, atom in terms}
        if len(dims) != 1:
            raise ValueError("dimension mismatch between terms")
        d = dims.pop()
        if dim is not None and dim != d:
            raise ValueError("dimension mismatch")
        self.terms = terms
        self.dim = d
        self.source = source

    @classmethod
    def of(cls, atom, weight: float = 1.0) -> "AnalyticFunction":
        return cls([(weight, atom)])

    @property
    def convex(self) -> bool:
        return all(atom.convex for _, atom in self.terms)

    @property
    def is_affine(self) -> bool:
        return all(isinstance(atom, Affine) for _, atom in self.terms)

    def evaluate_many(self, X) -> np.ndarray:
        X = _as_points(X, self.dim)
        out = np.zeros(X.shape[0])
        for w, atom in self.terms:
            out = xadd_array(out, xscale_array(w, atom.evaluate_many(X)))
        return out

    def gradient(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        g = np.zeros(self.dim)
        for w, atom in self.terms:
            g = g + w * atom.gradient(x)
        return g

    def __eq__(self, other):
        return isinstance(other, AnalyticFunction) and self.terms == other.terms

    def __hash__(self):
        return hash(self.terms)

    def __repr__(self):
        return f"AnalyticFunction({self.terms!r})"


class GridFunction(FuncHandle):
    """Function tabulated on a :class:`GridSpec` (flat row-major ``values``).

    Proper unless ``improper=True``: at least one finite value and no -inf.
    """

    def __init__(
        self,
        grid: GridSpec,
        values,
        improper: bool = False,
        convex: Optional[bool] = None,
        source=None,
        source_path: Optional[str] = None,
    ):
        vals = np.array(values, dtype=float).reshape(-1)
        if vals.size != grid.size:
            raise ValueError(f"expected {grid.size} values, got {vals.size}")
        if np.isnan(vals).any():
            raise ValueError("NaN is not an extended real")
        if not improper:
            if np.isneginf(vals).any():
                raise ValueError("a proper function never takes the value -inf")
            if not np.isfinite(vals).any():
                raise ValueError("a proper function needs at least one finite value")
        vals.setflags(write=False)
        self.grid = grid
        self.values = vals
        self.improper = improper
        self.dim = grid.dim
        self._convex = convex
        self.source = source
        self.source_path = source_path

    @property
    def convex(self) -> bool:
        if self._convex is None:
            self._convex = self.dim == 1 and grid_is_convex_1d(self)
        return self._convex

    def table(self) -> np.ndarray:
        return self.values.reshape(self.grid.shape)

    def evaluate_many(self, X) -> np.ndarray:
        X = _as_points(X, self.dim)
        g = self.grid
        if not np.all(g.box.contains_many(X, tol=1e-12)):
            raise ValueError("query point outside the grid box")
        n = X.shape[0]
        lo_idx = np.zeros((n, self.dim), dtype=int)
        frac = np.zeros((n, self.dim))
        for d in range(self.dim):
            h = g.steps[d]
            c = g.counts[d]
            if h == 0.0:
                continue
            pos = (X[:, d] - g.box.lower[d]) / h
            r = np.rint(pos)
            pos = np.where(np.abs(pos - r) <= SNAP_TOL, r, pos)
            i0 = np.clip(np.floor(pos).astype(int), 0, c - 2)
            lo_idx[:, d] = i0
            frac[:, d] = np.clip(pos - i0, 0.0, 1.0)
        acc = np.zeros(n)
        pos_inf = np.zeros(n, dtype=bool)
        neg_inf = np.zeros(n, dtype=bool)
        for corner in itertools.product((0, 1), repeat=self.dim):
            w = np.ones(n)
            idx = lo_idx.copy()
            for d, bit in enumerate(corner):
                if bit:
                    w *= frac[:, d]
                    idx[:, d] += 1
                else:
                    w *= 1.0 - frac[:, d]
            part = w > 0
            if not part.any():
                continue
            flat = np.ravel_multi_index(tuple(np.clip(idx[:, d], 0, g.counts[d] - 1) for d in range(self.dim)), g.counts)
            v = self.values[flat]
            pos_inf |= part & (v == np.inf)
            neg_inf |= part & (v == -np.inf)
            fin = part & np.isfinite(v)
            acc[fin] += w[fin] * v[fin]
        out = acc
        out[neg_inf] = -np.inf
        out[pos_inf] = np.inf
        return out

    def gradient(self, x) -> np.ndarray:
        """Central finite-difference gradient (one grid step), +inf-free nodes only."""
        x = np.asarray(x, dtype=float).reshape(-1)
        g = np.zeros(self.dim)
        for d in range(self.dim):
            h = self.grid.steps[d]
            lo = x.copy()
            hi = x.copy()
            lo[d] = max(x[d] - h, self.grid.box.lower[d])
            hi[d] = min(x[d] + h, self.grid.box.upper[d])
            if hi[d] == lo[d]:
                continue
            vals = self.evaluate_many(np.vstack([lo, hi]))
            if np.all(np.isfinite(vals)):
                g[d] = (vals[1] - vals[0]) / (hi[d] - lo[d])
        return g

    def __eq__(self, other):
        return (
            isinstance(other, GridFunction)
            and self.grid == other.grid
            and self.improper == other.improper
            and np.array_equal(self.values, other.values)
        )

    def __hash__(self):
        return hash((self.grid, self.values.tobytes()))

    def __repr__(self):
        return f"GridFunction(grid={self.grid!r}, n={self.values.size})"


def grid_is_convex_1d(f: GridFunction, tol: float = 1e-9) -> bool:
    """Slopes between consecutive finite nodes are nondecreasing (within ``tol``)
    and the finite nodes form one contiguous run."""
    if f.dim != 1:
        return False
    fin = np.flatnonzero(np.isfinite(f.values))
    if fin.size == 0:
        return False
    if fin[-1] - fin[0] + 1 != fin.size:
        return False
    if fin.size <= 2:
        return True
    x = f.grid.axes[0][fin]
    v = f.values[fin]
    s = np.diff(v) / np.diff(x)
    return bool(np.all(np.diff(s) >= -tol))


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def evaluate(f: FuncHandle, x) -> XReal:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != f.dim:
        raise ValueError(f"dimension mismatch: function has dim {f.dim}, point has {x.size}")
    return XReal(float(f.evaluate_many(x.reshape(1, -1))[0]))


def sample(f: FuncHandle, grid: GridSpec, source=None) -> GridFunction:
    if f.dim != grid.dim:
        raise ValueError("dimension mismatch between function and grid")
    vals = f.evaluate_many(grid.nodes())
    improper = not np.isfinite(vals).any() or np.isneginf(vals).any()
    src = source if source is not None else getattr(f, "source", None)
    return GridFunction(grid, vals, improper=improper, source=src)


def combine(terms: Sequence, grid: Optional[GridSpec] = None) -> FuncHandle:
    """Pointwise ``sum_i w_i * f_i`` under the extended-real rules.

    Stays analytic when every term is analytic; otherwise tabulates on
    ``grid`` (or on the grid shared by all grid-valued terms).
    """
    terms = list(terms)
    if not terms:
        raise ValueError("combine needs at least one term")
    dims = {f.dim for _, f in terms}
    if len(dims) != 1:
        raise ValueError("dimension mismatch between terms")
    for w, _ in terms:
        if not (float(w) >= 0) or math.isinf(float(w)):
            raise ValueError("weights must be finite and nonnegative")
    if all(isinstance(f, AnalyticFunction) for _, f in terms):
        flat = []
        for w, f in terms:
            w = float(w)
            for w2, atom in f.terms:
                if w == 0.0 and w2 != 0.0:
                    # 0 * (w2 * atom): keep the zero weight so +inf survives
                    flat.append((0.0, atom))
                else:
                    flat.append((w * w2, atom))
        return AnalyticFunction(flat)
    if grid is None:
        grids = {f.grid for _, f in terms if isinstance(f, GridFunction)}
        if len(grids) != 1:
            raise ValueError("grid-valued terms live on different grids; pass grid=")
        grid = grids.pop()
    nodes = grid.nodes()
    vals = np.zeros(grid.size)
    for w, f in terms:
        vals = xadd_array(vals, xscale_array(float(w), f.evaluate_many(nodes)))
    improper = not np.isfinite(vals).any() or np.isneginf(vals).any()
    return GridFunction(grid, vals, improper=improper)


def restrict(f: FuncHandle, C: Box) -> FuncHandle:
    """``f + indicator(C)``."""
    if C.dim != f.dim:
        raise ValueError("dimension mismatch between function and box")
    if isinstance(f, AnalyticFunction):
        return AnalyticFunction(list(f.terms) + [(1.0, BoxIndicator(C))])
    ind = np.where(C.contains_many(f.grid.nodes(), tol=1e-12), 0.0, np.inf)
    vals = xadd_array(f.values, ind)
    improper = not np.isfinite(vals).any()
    return GridFunction(f.grid, vals, improper=improper or f.improper)


# -- constructors ---------------------------------------------------------------

def affine(a, b=0.0) -> AnalyticFunction:
    return AnalyticFunction.of(Affine(a, b))


def quadratic(Q, a=None, b=0.0) -> AnalyticFunction:
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if a is None:
        a = np.zeros(Q.shape[0])
    return AnalyticFunction.of(Quadratic(Q, a, b))


def abs_affine(a, b=0.0) -> AnalyticFunction:
    return AnalyticFunction.of(AbsAffine(a, b))


def max_affine(A, b) -> AnalyticFunction:
    return AnalyticFunction.of(MaxAffine(A, b))


def box_indicator(box: Box) -> AnalyticFunction:
    return AnalyticFunction.of(BoxIndicator(box))


# ---------------------------------------------------------------------------
# CSV dumps
# ---------------------------------------------------------------------------

def dump_csv(f: GridFunction, stream=None, names: Optional[Sequence[str]] = None, header: Sequence[str] = ()) -> str:
    """Write one row per node: coordinates, then value. Returns the text.

    ``header`` lines are emitted first as ``# ...`` comments.
    """
    names = list(names) if names is not None else [f"c{d + 1}" for d in range(f.dim)]
    if len(names) != f.dim:
        raise ValueError("one column name per dimension is required")
    buf = io.StringIO()
    for line in header:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names + ["value"])
    nodes = f.grid.nodes()
    for k in range(f.grid.size):
        w.writerow([format_number(v) for v in nodes[k]] + [render(f.values[k])])
    text = buf.getvalue()
    if stream is not None:
        stream.write(text)
    return text


def load_csv(source) -> GridFunction:
    """Read a dump produced by :func:`dump_csv` (path, file object or text)."""
    if hasattr(source, "read"):
        text = source.read()
    else:
        s = str(source)
        if "\n" in s:
            text = s
        else:
            with open(s, "r", encoding="utf-8") as fh:
                text = fh.read()
    rows = [r for r in csv.reader(io.StringIO(text)) if r and not r[0].lstrip().startswith("#")]
    if len(rows) < 2:
        raise ValueError("grid dump has no data rows")
    body = rows[1:]
    d = len(rows[0]) - 1
    if d < 1 or any(len(r) != d + 1 for r in body):
        raise ValueError("inconsistent column count in grid dump")
    coords = np.array([[float(v) for v in r[:d]] for r in body])
    values = np.array([parse_xreal(r[d]).value for r in body])
    counts = []
    lower = []
    upper = []
    for k in range(d):
        u = np.unique(coords[:, k])
        counts.append(u.size)
        lower.append(u[0])
        upper.append(u[-1])
    grid = GridSpec(Box(tuple(lower), tuple(upper)), tuple(counts))
    if grid.size != len(body) or not np.array_equal(grid.nodes(), coords):
        raise ValueError("grid dump rows do not form a uniform row-major grid")
    improper = not np.isfinite(values).any() or np.isneginf(values).any()
    return GridFunction(grid, values, improper=improper)
