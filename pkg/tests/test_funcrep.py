import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bdl.extreal import POS_INF, XReal
from bdl.funcrep import (
    Box,
    GridFunction,
    GridSpec,
    abs_affine,
    affine,
    box_indicator,
    combine,
    dump_csv,
    evaluate,
    load_csv,
    max_affine,
    quadratic,
    restrict,
    sample,
)


def test_evaluate_half_square():
    assert evaluate(quadratic([[1.0]]), [2.0]) == XReal(2)


def test_indicator_outside():
    assert evaluate(box_indicator(Box.interval(-1, 1)), [2.0]) == POS_INF


def test_grid_interpolation():
    g = GridSpec.uniform([-1], [1], [3])
    f = sample(abs_affine([1.0]), g)
    assert evaluate(f, [0.5]) == XReal(0.5)


def test_grid_interpolation_touching_inf():
    g = GridSpec.uniform([-1], [1], [3])
    f = GridFunction(g, [np.inf, 0.0, 1.0])
    assert evaluate(f, [-0.5]) == POS_INF
    assert evaluate(f, [0.0]) == XReal(0)
    assert evaluate(f, [0.5]) == XReal(0.5)


def test_grid_out_of_box_and_dim_errors():
    g = GridSpec.uniform([-1], [1], [3])
    f = sample(abs_affine([1.0]), g)
    with pytest.raises(ValueError):
        evaluate(f, [1.5])
    with pytest.raises(ValueError):
        evaluate(f, [0.0, 0.0])


def test_sample_examples():
    g3 = GridSpec.uniform([-1], [1], [3])
    assert list(sample(quadratic([[1.0]]), g3).values) == [0.5, 0.0, 0.5]
    assert list(sample(box_indicator(Box.interval(0, 1)), g3).values) == [np.inf, 0.0, 0.0]
    g5 = GridSpec.uniform([-2], [2], [5])
    assert list(sample(affine([1.0]), g5).values) == [-2, -1, 0, 1, 2]


def test_combine_examples():
    ind = box_indicator(Box.interval(0, 1))
    assert evaluate(combine([(0.0, ind)]), [2.0]) == POS_INF
    h = combine([(1, quadratic([[1.0]])), (1, affine([1.0]))])
    assert evaluate(h, [1.0]) == XReal(1.5)
    F = quadratic([[2.0]])  # x^2
    assert evaluate(combine([(2.0, F)]), [3.0]) == XReal(18)


def test_combine_errors():
    with pytest.raises(ValueError):
        combine([])
    with pytest.raises(ValueError):
        combine([(1, affine([1.0])), (1, affine([1.0, 2.0]))])
    with pytest.raises(ValueError):
        combine([(-1, affine([1.0]))])


def test_restrict_examples():
    r = restrict(affine([1.0]), Box.interval(0, 1))
    assert evaluate(r, [-1.0]) == POS_INF
    assert evaluate(r, [0.5]) == XReal(0.5)
    g = GridSpec.uniform([0], [1], [3])
    f = GridFunction(g, [np.inf, 0.0, 1.0])
    rf = restrict(f, Box.interval(0, 1))
    assert rf.values[0] == np.inf


def test_grid_nodes_row_major():
    g = GridSpec.uniform([0, 10], [1, 12], [2, 3])
    nodes = g.nodes()
    assert nodes.shape == (6, 2)
    assert nodes[1].tolist() == [0, 11]
    assert nodes[3].tolist() == [1, 10]
    assert g.locate([1, 11]) == 4
    assert g.locate([0.5, 11]) is None


def test_symmetric_grid_hits_zero():
    g = GridSpec.uniform([-2], [2], [41])
    assert g.axes[0][20] == 0.0
    assert g.axes[0][-1] == 2.0


def test_grid_caps():
    with pytest.raises(ValueError):
        GridSpec.uniform([0] * 5, [1] * 5, [2] * 5)
    with pytest.raises(ValueError):
        GridSpec.uniform([0, 0], [1, 1], [5000, 5000])
    with pytest.raises(ValueError):
        GridSpec.uniform([0], [1], [1])


def test_proper_checks():
    g = GridSpec.uniform([0], [1], [2])
    with pytest.raises(ValueError):
        GridFunction(g, [np.inf, np.inf])
    with pytest.raises(ValueError):
        GridFunction(g, [-np.inf, 0.0])
    GridFunction(g, [-np.inf, -np.inf], improper=True)


def test_convexity_flags():
    assert quadratic([[1.0]]).convex
    assert not quadratic([[-1.0]]).convex
    assert max_affine([[1.0], [-1.0]], [0, 0]).convex
    g = GridSpec.uniform([-2], [2], [9])
    assert sample(quadratic([[1.0]]), g).convex
    dw = GridFunction(g, np.minimum((g.axes[0] + 1) ** 2, (g.axes[0] - 1) ** 2))
    assert not dw.convex


def test_csv_roundtrip_bit_exact(tmp_path):
    g = GridSpec.uniform([-1, 0], [1, 0.3], [5, 4])
    rng = np.random.default_rng(3)
    vals = rng.normal(size=g.size)
    vals[2] = np.inf
    f = GridFunction(g, vals)
    text = dump_csv(f, header=["primal box [-1, 1]"])
    back = load_csv(io.StringIO(text))
    assert back == f
    path = tmp_path / "f.csv"
    path.write_text(text)
    assert load_csv(str(path)) == f


@st.composite
def grid_and_values(draw):
    n = draw(st.integers(2, 9))
    vals = draw(st.lists(st.floats(-100, 100), min_size=n, max_size=n))
    return GridSpec.uniform([-1], [1], [n]), np.array(vals)


@given(grid_and_values())
def test_sample_exact_at_nodes(gv):
    g, _ = gv
    f = quadratic([[3.0]], [1.0], 0.25)
    s = sample(f, g)
    assert np.array_equal(s.evaluate_many(g.nodes()), f.evaluate_many(g.nodes()))


@given(grid_and_values(), grid_and_values())
def test_combine_order_independent(a, b):
    g, v1 = a
    v2 = np.resize(b[1], g.size)
    f1 = GridFunction(g, v1)
    f2 = GridFunction(g, v2)
    h1 = combine([(0.5, f1), (2.0, f2)])
    h2 = combine([(2.0, f2), (0.5, f1)])
    assert np.array_equal(h1.values, h2.values)


@settings(max_examples=50)
@given(grid_and_values(), st.floats(-1, 1), st.floats(0, 1))
def test_restrict_domain_intersection(gv, lo, width):
    g, v = gv
    v = v.copy()
    v[0] = np.inf
    if np.isinf(v).all():
        return
    f = GridFunction(g, v)
    C = Box.interval(lo, min(lo + width, 1.0))
    r = restrict(f, C)
    inside = C.contains_many(g.nodes(), tol=1e-12)
    assert np.array_equal(np.isfinite(r.values), np.isfinite(v) & inside)
