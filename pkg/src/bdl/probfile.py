"""Plain-text bilevel problem files: parser and canonical serializer.

Example::

    problem "t1"
    dim x 1
    dim y 1
    xdomain -2 2 grid 41
    ydomain -2 2 grid 41
    upper objective: x1^2 + y1^2
    upper constraint G1: 0 - x1
    lower objective: (x1 - y1)^2
    lower constraint g1: y1 - 1

Numbers inside expressions are unsigned (write ``0 - x1``); domain lines
accept signed numbers. ``#`` starts a comment. Expressions that reduce to
a quadratic polynomial plus nonnegative multiples of ``abs``/``max`` of
affine arguments become analytic functions; anything else is tabulated on
the joint grid with a :class:`NonAnalyticWarning`.
"""

from __future__ import annotations

import os
import re
import warnings
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .extreal import format_number
from .funcrep import (
    MAX_DIM,
    AbsAffine,
    Affine,
    AnalyticFunction,
    GridFunction,
    GridSpec,
    MaxAffine,
    Quadratic,
    dump_csv,
    load_csv,
)
from .reform import BilevelInstance


class ParseError(ValueError):
    """Positioned parse failure; line and column are 1-based."""

    def __init__(self, line: int, column: int, message: str, token: str = ""):
        self.line = line
        self.column = column
        self.message = message
        self.token = token
        near = f" (near {token!r})" if token else ""
        super().__init__(f"line {line}, column {column}: {message}{near}")


class NonAnalyticWarning(UserWarning):
    """An expression left the analytic family and was tabulated on the grid."""


# ---------------------------------------------------------------------------
# Tokens
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<string>"[^"\n]*")
  | (?P<sym>[-+*^(),:@])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    line: int
    column: int


def _tokenize(text: str, line: int, col0: int = 1) -> list:
    out = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            bad = text[pos:].split()[0] if text[pos:].split() else text[pos]
            raise ParseError(line, col0 + pos, "unexpected character", bad[:20])
        kind = m.lastgroup
        if m.group() == "@":
            # file reference: the rest of the line is an opaque path
            out.append(Token("sym", "@", line, col0 + pos))
            rest = text[m.end():]
            if rest.strip():
                lead = len(rest) - len(rest.lstrip())
                out.append(Token("path", rest.strip(), line, col0 + m.end() + lead))
            break
        if kind != "ws":
            out.append(Token(kind, m.group(), line, col0 + pos))
        pos = m.end()
    return out


# ---------------------------------------------------------------------------
# Expression AST
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    block: str  # "x" or "y"
    index: int  # 1-based


@dataclass(frozen=True)
class BinOp:
    op: str  # + - *
    left: object
    right: object


@dataclass(frozen=True)
class Pow:
    base: object
    exp: int


@dataclass(frozen=True)
class Call:
    fn: str  # abs or max
    args: tuple


_PREC = {"+": 1, "-": 1, "*": 2}


def to_text(node, parent_prec: int = 0, right_side: bool = False) -> str:
    """Canonical text of an expression (minimal parentheses)."""
    if isinstance(node, Num):
        return format_number(node.value)
    if isinstance(node, Var):
        return f"{node.block}{node.index}"
    if isinstance(node, Call):
        return f"{node.fn}(" + ", ".join(to_text(a) for a in node.args) + ")"
    if isinstance(node, Pow):
        return f"{to_text(node.base, 3)}^{node.exp}"
    prec = _PREC[node.op]
    s = f"{to_text(node.left, prec)} {node.op} {to_text(node.right, prec, True)}"
    if prec < parent_prec or (right_side and prec == parent_prec):
        return f"({s})"
    return s


class _ExprParser:
    def __init__(self, tokens: list, dims: dict, line: int, end_col: int):
        self.toks = tokens
        self.i = 0
        self.dims = dims
        self.line = line
        self.end_col = end_col

    def peek(self) -> Optional[Token]:
        return self.toks[self.i] if self.i < len(self.toks) else None

    def error(self, msg: str):
        t = self.peek()
        if t is None:
            raise ParseError(self.line, self.end_col, msg, "end of line")
        raise ParseError(t.line, t.column, msg, t.text)

    def take(self, text: str):
        t = self.peek()
        if t is None or t.text != text:
            self.error(f"expected '{text}'")
        self.i += 1
        return t

    def parse(self):
        if self.peek() is None:
            self.error("expected an expression")
        node = self.expr()
        if self.peek() is not None:
            self.error("unexpected token after expression")
        return node

    def expr(self):
        node = self.term()
        while self.peek() is not None and self.peek().text in ("+", "-"):
            op = self.peek().text
            self.i += 1
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.factor()
        while self.peek() is not None and self.peek().text == "*":
            self.i += 1
            node = BinOp("*", node, self.factor())
        return node

    def factor(self):
        node = self.atom()
        t = self.peek()
        if t is not None and t.text == "^":
            self.i += 1
            e = self.peek()
            if e is None or e.kind != "number" or not re.fullmatch(r"\d+", e.text):
                self.error("expected an unsigned integer exponent")
            self.i += 1
            node = Pow(node, int(e.text))
        return node

    def atom(self):
        t = self.peek()
        if t is None:
            self.error("expected a number, variable, '(' , abs( or max(")
        if t.kind == "number":
            self.i += 1
            return Num(float(t.text))
        if t.text == "(":
            self.i += 1
            node = self.expr()
            self.take(")")
            return node
        if t.kind == "name":
            if t.text in ("abs", "max"):
                self.i += 1
                self.take("(")
                first = self.expr()
                if t.text == "max":
                    self.take(",")
                    second = self.expr()
                    self.take(")")
                    return Call("max", (first, second))
                self.take(")")
                return Call("abs", (first,))
            m = re.fullmatch(r"([xy])(\d+)", t.text)
            if m:
                block, idx = m.group(1), int(m.group(2))
                if idx < 1 or idx > self.dims[block]:
                    raise ParseError(t.line, t.column, f"variable index out of range for dim {block} {self.dims[block]}", t.text)
                self.i += 1
                return Var(block, idx)
        self.error("expected a number, variable, '(' , abs( or max(")


# ---------------------------------------------------------------------------
# Classification: quadratic polynomial + nonnegative abs/max atoms
# ---------------------------------------------------------------------------

class _NotAnalytic(Exception):
    pass


class _Form:
    """poly: {(i,) or (i, j) or (): coef}, atoms: [(weight, atom)]."""

    def __init__(self, poly=None, atoms=()):
        self.poly = dict(poly or {})
        self.atoms = list(atoms)

    @property
    def degree(self) -> int:
        return max((len(k) for k, v in self.poly.items() if v != 0.0), default=0)

    @property
    def pure(self) -> bool:
        return not self.atoms

    def scaled(self, c: float) -> "_Form":
        return _Form({k: c * v for k, v in self.poly.items()}, [(c * w, a) for w, a in self.atoms])

    def plus(self, other: "_Form") -> "_Form":
        poly = dict(self.poly)
        for k, v in other.poly.items():
            poly[k] = poly.get(k, 0.0) + v
        return _Form(poly, self.atoms + other.atoms)

    def affine(self, d: int):
        if not self.pure or self.degree > 1:
            raise _NotAnalytic
        a = np.zeros(d)
        for k, v in self.poly.items():
            if len(k) == 1:
                a[k[0]] += v
        return a, self.poly.get((), 0.0)


def _mul(p: _Form, q: _Form) -> _Form:
    if p.pure and p.degree == 0:
        return q.scaled(p.poly.get((), 0.0))
    if q.pure and q.degree == 0:
        return p.scaled(q.poly.get((), 0.0))
    if not (p.pure and q.pure) or p.degree + q.degree > 2:
        raise _NotAnalytic
    out = {}
    for k1, v1 in p.poly.items():
        for k2, v2 in q.poly.items():
            k = tuple(sorted(k1 + k2))
            out[k] = out.get(k, 0.0) + v1 * v2
    return _Form(out)


def _form(node, n: int, d: int) -> _Form:
    if isinstance(node, Num):
        return _Form({(): node.value})
    if isinstance(node, Var):
        idx = node.index - 1 + (n if node.block == "y" else 0)
        return _Form({(idx,): 1.0})
    if isinstance(node, BinOp):
        a, b = _form(node.left, n, d), _form(node.right, n, d)
        if node.op == "+":
            return a.plus(b)
        if node.op == "-":
            return a.plus(b.scaled(-1.0))
        return _mul(a, b)
    if isinstance(node, Pow):
        base = _form(node.base, n, d)
        if node.exp == 0:
            return _Form({(): 1.0})
        if node.exp == 1:
            return base
        if node.exp == 2:
            return _mul(base, base)
        if base.pure and base.degree == 0:
            return _Form({(): base.poly.get((), 0.0) ** node.exp})
        raise _NotAnalytic
    if isinstance(node, Call):
        if node.fn == "abs":
            a, b = _form(node.args[0], n, d).affine(d)
            return _Form({}, [(1.0, AbsAffine(a, b))])
        rows, consts = [], []
        for arg in node.args:
            f = _form(arg, n, d)
            if f.pure and f.degree <= 1:
                a, b = f.affine(d)
                rows.append(a)
                consts.append(b)
            elif not f.poly and len(f.atoms) == 1 and f.atoms[0][0] == 1.0 and isinstance(f.atoms[0][1], MaxAffine):
                m = f.atoms[0][1]
                rows.extend(np.asarray(m.A, dtype=float))
                consts.extend(m.b)
            else:
                raise _NotAnalytic
        return _Form({}, [(1.0, MaxAffine(np.array(rows), np.array(consts)))])
    raise TypeError(node)


def _analytic_terms(node, n: int, m: int) -> list:
    d = n + m
    form = _form(node, n, d)
    terms = []
    deg = form.degree
    const = form.poly.get((), 0.0)
    a = np.zeros(d)
    Q = np.zeros((d, d))
    for k, v in form.poly.items():
        if len(k) == 1:
            a[k[0]] += v
        elif len(k) == 2:
            i, j = k
            if i == j:
                Q[i, i] += 2.0 * v
            else:
                Q[i, j] += v
                Q[j, i] += v
    nonzero_poly = deg > 0 or const != 0.0
    if deg == 2:
        terms.append((1.0, Quadratic(Q, a, const)))
    elif nonzero_poly or not form.atoms:
        terms.append((1.0, Affine(a, const)))
    for w, atom in form.atoms:
        if w < 0:
            raise _NotAnalytic
        if w > 0:
            terms.append((w, atom))
    if not terms:
        terms.append((1.0, Affine(a, 0.0)))
    return terms


def _eval_ast(node, Z: np.ndarray, n: int) -> np.ndarray:
    if isinstance(node, Num):
        return np.full(Z.shape[0], node.value)
    if isinstance(node, Var):
        return Z[:, node.index - 1 + (n if node.block == "y" else 0)].copy()
    if isinstance(node, BinOp):
        a, b = _eval_ast(node.left, Z, n), _eval_ast(node.right, Z, n)
        return a + b if node.op == "+" else a - b if node.op == "-" else a * b
    if isinstance(node, Pow):
        with np.errstate(over="ignore"):
            return np.power(_eval_ast(node.base, Z, n), node.exp)
    if node.fn == "abs":
        return np.abs(_eval_ast(node.args[0], Z, n))
    return np.maximum(_eval_ast(node.args[0], Z, n), _eval_ast(node.args[1], Z, n))


def build_function(node, n: int, m: int, jgrid: GridSpec, label: str = "expression"):
    """Analytic function when the expression stays in the family, else a grid table."""
    text = to_text(node)
    try:
        return AnalyticFunction(_analytic_terms(node, n, m), source=text)
    except _NotAnalytic:
        warnings.warn(f"{label} '{text}' is outside the analytic family; tabulated on the grid "
                      "(convexity not guaranteed)", NonAnalyticWarning, stacklevel=3)
        vals = _eval_ast(node, jgrid.nodes(), n)
        if np.isnan(vals).any() or np.isinf(vals).any():
            raise _Overflow(text)
        return GridFunction(jgrid, vals, source=text)


class _Overflow(Exception):
    pass


# ---------------------------------------------------------------------------
# File parser
# ---------------------------------------------------------------------------

_SECTION_ORDER = ["problem", "dim x", "dim y", "xdomain", "ydomain", "tolerance", "upper objective",
                  "lower objective", "geometric"]


def _strip_comment(line: str) -> str:
    # '#' inside a quoted name is kept
    out, quoted = [], False
    for ch in line:
        if ch == '"':
            quoted = not quoted
        if ch == "#" and not quoted:
            break
        out.append(ch)
    return "".join(out)


def _signed_numbers(toks: list, line: int) -> list:
    vals = []
    i = 0
    while i < len(toks):
        sign = 1.0
        t = toks[i]
        if t.text in ("+", "-"):
            sign = -1.0 if t.text == "-" else 1.0
            i += 1
            if i >= len(toks):
                raise ParseError(line, t.column + 1, "expected a number after sign", t.text)
            t = toks[i]
        if t.kind != "number":
            raise ParseError(line, t.column, "expected a number", t.text)
        vals.append((sign * float(t.text), t))
        i += 1
    return vals


def parse(text: Union[str, bytes], base_dir: Optional[str] = None, name: Optional[str] = None) -> BilevelInstance:
    """Parse a problem file; ``base_dir`` resolves ``@file`` references."""
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as exc:
            line = bytes(text)[: exc.start].count(b"\n") + 1
            col = exc.start - (bytes(text)[: exc.start].rfind(b"\n") + 1) + 1
            raise ParseError(line, col, "invalid UTF-8 byte", repr(bytes(text)[exc.start:exc.start + 1])) from None
    lines = text.split("\n")
    seen = {}
    dims = {}
    domains = {}
    exprs = {}  # key -> (line, tokens after the colon)
    cons = {"G": {}, "g": {}}
    geometric = False
    tol = None
    pname = None
    for ln, raw in enumerate(lines, start=1):
        body = _strip_comment(raw)
        if "\x00" in body:
            raise ParseError(ln, body.index("\x00") + 1, "unexpected character", "\\x00")
        if not body.strip():
            continue
        # split a possible '@file' payload so paths are not tokenized
        toks = _tokenize(body, ln)
        head = toks[0]

        def dup(key):
            if key in seen:
                raise ParseError(ln, head.column, f"duplicate section '{key}' (first on line {seen[key]})", head.text)
            seen[key] = ln

        if head.text == "problem":
            dup("problem")
            if len(toks) != 2 or toks[1].kind != "string":
                bad = toks[1] if len(toks) > 1 else None
                raise ParseError(ln, bad.column if bad else len(body) + 1, 'expected problem "<name>"',
                                 bad.text if bad else "end of line")
            pname = toks[1].text[1:-1]
        elif head.text == "dim":
            if len(toks) != 3 or toks[1].text not in ("x", "y") or toks[2].kind != "number" or not toks[2].text.isdigit():
                bad = toks[min(len(toks) - 1, 1 if len(toks) < 2 or toks[1].text not in ("x", "y") else 2)]
                raise ParseError(ln, bad.column, "expected 'dim x <n>' or 'dim y <m>'", bad.text)
            dup(f"dim {toks[1].text}")
            v = int(toks[2].text)
            if not 1 <= v <= MAX_DIM:
                raise ParseError(ln, toks[2].column, f"dimension must be between 1 and {MAX_DIM}", toks[2].text)
            dims[toks[1].text] = v
        elif head.text in ("xdomain", "ydomain"):
            dup(head.text)
            gi = [i for i, t in enumerate(toks) if t.text == "grid"]
            if len(gi) != 1:
                bad = toks[gi[1]] if len(gi) > 1 else toks[-1]
                raise ParseError(ln, bad.column, "expected '<bounds> grid <counts>'", bad.text)
            bounds = _signed_numbers(toks[1:gi[0]], ln)
            counts_t = toks[gi[0] + 1:]
            for t in counts_t:
                if t.kind != "number" or not t.text.isdigit():
                    raise ParseError(ln, t.column, "expected an integer node count", t.text)
            if not counts_t:
                raise ParseError(ln, len(body) + 1, "expected node counts after 'grid'", "end of line")
            domains[head.text[0]] = (ln, bounds, [(int(t.text), t) for t in counts_t])
        elif head.text == "tolerance":
            dup("tolerance")
            vals = _signed_numbers(toks[1:], ln)
            if len(vals) != 1 or not vals[0][0] > 0:
                bad = toks[1] if len(toks) > 1 else head
                raise ParseError(ln, bad.column, "expected one positive tolerance", bad.text)
            tol = vals[0][0]
        elif head.text == "geometric":
            dup("geometric")
            if len(toks) != 3 or toks[1].text != ":" or toks[2].text not in ("true", "false"):
                bad = toks[min(len(toks) - 1, 1 if len(toks) < 2 or toks[1].text != ":" else 2)]
                raise ParseError(ln, bad.column, "expected 'geometric: true' or 'geometric: false'", bad.text)
            geometric = toks[2].text == "true"
        elif head.text in ("upper", "lower"):
            if len(toks) < 3:
                bad = toks[-1]
                raise ParseError(ln, bad.column, "expected 'objective:' or 'constraint <name>:'", bad.text)
            if toks[1].text == "objective":
                if toks[2].text != ":":
                    raise ParseError(ln, toks[2].column, "expected ':'", toks[2].text)
                key = f"{head.text} objective"
                dup(key)
                exprs[key] = (ln, toks[3:])
            elif toks[1].text == "constraint":
                letter = "G" if head.text == "upper" else "g"
                m = re.fullmatch(letter + r"(\d+)", toks[2].text)
                if not m:
                    raise ParseError(ln, toks[2].column, f"expected a constraint name {letter}<i>", toks[2].text)
                if len(toks) < 4 or toks[3].text != ":":
                    bad = toks[3] if len(toks) > 3 else toks[2]
                    raise ParseError(ln, bad.column, "expected ':'", bad.text)
                idx = int(m.group(1))
                key = f"{head.text} constraint {letter}{idx}"
                dup(key)
                cons[letter][idx] = (ln, toks[4:], toks[2])
            else:
                raise ParseError(ln, toks[1].column, "expected 'objective' or 'constraint'", toks[1].text)
        else:
            raise ParseError(ln, head.column, "unknown section", head.text)

    end = len(lines) + (0 if lines[-1] == "" else 1)
    for key, label in (("x", "dim x"), ("y", "dim y")):
        if key not in dims:
            raise ParseError(end, 1, f"missing section '{label}'")
    grids = {}
    for key in ("x", "y"):
        if key not in domains:
            raise ParseError(end, 1, f"missing section '{key}domain'")
        ln, bounds, counts = domains[key]
        d = dims[key]
        if len(bounds) != 2 * d:
            tok = bounds[-1][1] if bounds else counts[0][1]
            raise ParseError(ln, tok.column, f"expected {2 * d} bounds for dim {key} {d}", tok.text)
        if len(counts) != d:
            tok = counts[-1][1]
            raise ParseError(ln, tok.column, f"expected {d} node counts for dim {key} {d}", tok.text)
        lo = [bounds[2 * i][0] for i in range(d)]
        hi = [bounds[2 * i + 1][0] for i in range(d)]
        for i in range(d):
            if not lo[i] <= hi[i]:
                raise ParseError(ln, bounds[2 * i][1].column, "lower bound exceeds upper bound", bounds[2 * i][1].text)
            if counts[i][0] < 1 or (lo[i] < hi[i] and counts[i][0] < 2):
                raise ParseError(ln, counts[i][1].column, "invalid node count", counts[i][1].text)
        try:
            grids[key] = GridSpec.uniform(lo, hi, [c for c, _ in counts])
        except ValueError as exc:
            raise ParseError(ln, counts[0][1].column, str(exc), counts[0][1].text) from None
    n, m = dims["x"], dims["y"]
    try:
        jgrid = grids["x"].product(grids["y"])
    except ValueError as exc:
        raise ParseError(domains["y"][0], 1, str(exc), "ydomain") from None

    def build(ln, toks, label):
        if toks and toks[0].text == "@":
            mfile = re.fullmatch(r"file\s+(\S.*)", toks[1].text) if len(toks) > 1 else None
            if not mfile:
                raise ParseError(ln, toks[0].column, "expected '@file <path>'", toks[0].text)
            path = mfile.group(1).strip()
            full = path if os.path.isabs(path) or base_dir is None else os.path.join(base_dir, path)
            try:
                gf = load_csv(full)
            except (OSError, ValueError) as exc:
                raise ParseError(ln, toks[0].column, f"cannot load grid file: {exc}", path) from None
            if gf.grid != jgrid:
                raise ParseError(ln, toks[0].column, "grid file does not match the joint grid", path)
            return GridFunction(jgrid, gf.values, improper=gf.improper, source_path=path)
        node = _ExprParser(toks, dims, ln, len(lines[ln - 1]) + 1).parse()
        try:
            return build_function(node, n, m, jgrid, label)
        except _Overflow:
            raise ParseError(ln, toks[0].column, "expression overflows on the grid", to_text(node)) from None

    for key in ("upper objective", "lower objective"):
        if key not in exprs:
            raise ParseError(end, 1, f"missing section '{key}:'")
    F = build(*exprs["upper objective"], "upper objective")
    f = build(*exprs["lower objective"], "lower objective")
    funcs = {}
    for letter in ("G", "g"):
        idxs = sorted(cons[letter])
        for want, idx in enumerate(idxs, start=1):
            if idx != want:
                ln, _, tok = cons[letter][idx]
                raise ParseError(ln, tok.column, f"constraint indices must run 1..k without gaps; expected {letter}{want}", tok.text)
        funcs[letter] = [build(cons[letter][i][0], cons[letter][i][1], f"constraint {letter}{i}")
                         for i in idxs]
    if geometric and (funcs["G"] or funcs["g"]):
        ln = seen["geometric"]
        raise ParseError(ln, 1, "geometric instances cannot have constraints", "geometric")
    return BilevelInstance(F=F, f=f, G=funcs["G"], g=funcs["g"], xgrid=grids["x"], ygrid=grids["y"],
                           geometric=geometric, name=pname if pname is not None else (name or "instance"), tol=tol)


def parse_file(path: str) -> BilevelInstance:
    with open(path, "rb") as fh:
        data = fh.read()
    stem = os.path.splitext(os.path.basename(path))[0]
    return parse(data, base_dir=os.path.dirname(os.path.abspath(path)), name=stem)


# ---------------------------------------------------------------------------
# Serializer
# ---------------------------------------------------------------------------

def _var_names(n: int, m: int) -> list:
    return [f"x{i + 1}" for i in range(n)] + [f"y{j + 1}" for j in range(m)]


def _linear_text(pieces: list) -> str:
    """pieces: [(coef, monomial text or '')] -> 'a*x1 - b*y1 + c' with unsigned numbers."""
    out = []
    for c, mono in pieces:
        if c == 0.0:
            continue
        mag = abs(c)
        body = mono if mag == 1.0 and mono else (f"{format_number(mag)}*{mono}" if mono else format_number(mag))
        if not out:
            out.append(body if c > 0 else f"0 - {body}")
        else:
            out.append(("+ " if c > 0 else "- ") + body)
    return " ".join(out) if out else "0"


def _affine_text(a, b, names) -> str:
    return _linear_text([(float(v), names[i]) for i, v in enumerate(a)] + [(float(b), "")])


def _term_text(w: float, atom, names) -> str:
    if isinstance(atom, Affine):
        body = _affine_text(atom.a, atom.b, names)
    elif isinstance(atom, Quadratic):
        Q = atom.Qm
        d = len(atom.a)
        pieces = []
        for i in range(d):
            for j in range(i, d):
                c = 0.5 * Q[i, i] if i == j else Q[i, j]
                mono = f"{names[i]}^2" if i == j else f"{names[i]}*{names[j]}"
                pieces.append((c, mono))
        pieces += [(float(v), names[i]) for i, v in enumerate(atom.a)] + [(float(atom.b), "")]
        body = _linear_text(pieces)
    elif isinstance(atom, AbsAffine):
        body = f"abs({_affine_text(atom.a, atom.b, names)})"
    elif isinstance(atom, MaxAffine):
        A = np.asarray(atom.A, dtype=float)
        parts = [_affine_text(A[r], atom.b[r], names) for r in range(A.shape[0])]
        body = parts[0] if len(parts) == 1 else f"max({parts[0]}, {parts[1]})"
        for p in parts[2:]:
            body = f"max({body}, {p})"
    else:
        raise ValueError(f"{type(atom).__name__} has no text form")
    if w == 1.0:
        return body
    if isinstance(atom, (Affine, Quadratic)):
        body = f"({body})"
    return f"{format_number(w)}*{body}"


def function_text(func, names, csv_dir: Optional[str] = None, stem: str = "f") -> str:
    """Canonical text of one function.

    Analytic functions are written from their terms, so structurally equal
    instances serialize identically; tabulated expressions keep their
    canonical expression text, other tables become ``@file`` references.
    """
    if isinstance(func, AnalyticFunction):
        return " + ".join(_term_text(w, atom, names) for w, atom in func.terms)
    if isinstance(func, GridFunction):
        if func.source:
            return func.source
        path = func.source_path
        if csv_dir is not None:
            path = f"{stem}.csv"
            with open(os.path.join(csv_dir, path), "w", encoding="utf-8", newline="") as fh:
                dump_csv(func, fh, names=names)
        if path is None:
            raise ValueError("grid function without a file reference; pass csv_dir to write one")
        return f"@file {path}"
    raise ValueError(f"cannot serialize {type(func).__name__}")


def _grid_line(key: str, grid: GridSpec) -> str:
    b = []
    for lo, hi in zip(grid.box.lower, grid.box.upper):
        b += [format_number(lo), format_number(hi)]
    return f"{key}domain {' '.join(b)} grid {' '.join(str(c) for c in grid.counts)}"


def serialize(inst: BilevelInstance, csv_dir: Optional[str] = None) -> str:
    """Canonical text: header, domains, objectives, constraints, flags."""
    names = _var_names(inst.n, inst.m)
    lines = [
        f'problem "{inst.name}"',
        f"dim x {inst.n}",
        f"dim y {inst.m}",
        _grid_line("x", inst.xgrid),
        _grid_line("y", inst.ygrid),
    ]
    if inst._tol is not None:
        lines.append(f"tolerance {format_number(inst._tol)}")
    lines.append(f"upper objective: {function_text(inst.F, names, csv_dir, inst.name + '_F')}")
    for i, Gi in enumerate(inst.G, start=1):
        lines.append(f"upper constraint G{i}: {function_text(Gi, names, csv_dir, f'{inst.name}_G{i}')}")
    lines.append(f"lower objective: {function_text(inst.f, names, csv_dir, inst.name + '_f')}")
    for j, gj in enumerate(inst.g, start=1):
        lines.append(f"lower constraint g{j}: {function_text(gj, names, csv_dir, f'{inst.name}_g{j}')}")
    if inst.geometric:
        lines.append("geometric: true")
    return "\n".join(lines) + "\n"


def instance_hash(inst: BilevelInstance) -> str:
    import hashlib

    return hashlib.sha256(serialize(inst).encode("utf-8")).hexdigest()
