import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bdl.conjcalc import (
    DualGridSpec,
    NotConvexError,
    Unsupported,
    biconjugate,
    conj_analytic,
    conj_at,
    conj_brute,
    conj_fast,
    dump_conjugate,
    epi_sample,
    inf_convolution_check,
)
from bdl.extreal import XReal
from bdl.funcrep import (
    Box,
    GridFunction,
    GridSpec,
    abs_affine,
    affine,
    box_indicator,
    evaluate,
    load_csv,
    quadratic,
    sample,
)


def lower_envelope_oracle(xs, vs):
    """Convex envelope by brute force over all node pairs (O(N^3))."""
    out = vs.copy()
    n = xs.size
    for i in range(n):
        for a in range(i + 1):
            for b in range(i, n):
                if a == b:
                    continue
                t = (xs[i] - xs[a]) / (xs[b] - xs[a])
                out[i] = min(out[i], (1 - t) * vs[a] + t * vs[b])
    return out


def random_convex_1d(rng, n=257):
    g = GridSpec.uniform([-3], [3], [n])
    x = g.axes[0]
    a = rng.uniform(0, 2)
    c = rng.uniform(-1, 1)
    vals = a * (x - c) ** 2 + rng.uniform(0, 1) * np.abs(x - rng.uniform(-2, 2)) + rng.uniform(-1, 1) * x
    return GridFunction(g, vals)


def test_half_square_dense():
    g = GridSpec.uniform([-4], [4], [801])
    f = sample(quadratic([[1.0]]), g)
    dual = DualGridSpec.uniform([-2], [2], [5])
    fs = conj_brute(f, dual)
    assert abs(fs.values[3] - 0.5) <= g.steps[0]


def test_indicator_support():
    g = GridSpec.uniform([-4], [4], [81])
    f = sample(box_indicator(Box.interval(-1, 1)), g)
    assert conj_at(f, [[2.0]])[0] == 2.0


def test_abs_box_relative():
    # brute-force oracle: max over every node of 2x - |x| on [-4, 4]
    g = GridSpec.uniform([-4], [4], [81])
    f = sample(abs_affine([1.0]), g)
    x = g.axes[0]
    oracle = max(2 * xi - abs(xi) for xi in x)
    assert oracle == 4.0
    assert conj_at(f, [[2.0]])[0] == oracle
    assert conj_at(f, [[0.5]])[0] == 0.0


def test_fast_matches_brute_and_affine():
    g = GridSpec.uniform([-4], [4], [801])
    f = sample(quadratic([[1.0]]), g)
    dual = DualGridSpec.auto(f)
    assert np.max(np.abs(conj_fast(f, dual).values - conj_brute(f, dual).values)) <= 1e-12
    g2 = GridSpec.uniform([-1], [1], [11])
    aff = sample(affine([2.0]), g2)
    assert conj_fast(aff, DualGridSpec.uniform([2], [3], [2])).values[0] == 0.0


def test_fast_rejects_double_well():
    g = GridSpec.uniform([-2], [2], [41])
    x = g.axes[0]
    dw = GridFunction(g, np.minimum((x + 1) ** 2, (x - 1) ** 2))
    with pytest.raises(NotConvexError, match="not convex"):
        conj_fast(dw, DualGridSpec.auto(dw))


def test_fast_brute_random_convex():
    rng = np.random.default_rng(11)
    for _ in range(20):
        f = random_convex_1d(rng)
        dual = DualGridSpec.auto(f)
        assert np.max(np.abs(conj_fast(f, dual).values - conj_brute(f, dual).values)) <= 1e-12


def test_dual_grid_covers_slopes():
    g = GridSpec.uniform([-2], [2], [21])
    f = sample(quadratic([[1.0]]), g)
    d = DualGridSpec.auto(f)
    pad = 3.8 / 20
    assert abs(d.grid.box.lower[0] - (-1.9 - pad)) <= 1e-12
    assert abs(d.grid.box.upper[0] - (1.9 + pad)) <= 1e-12


def test_conj_analytic_forms():
    h = conj_analytic(quadratic([[1.0]]))
    assert evaluate(h, [3.0]) == XReal(4.5)
    c = conj_analytic(affine([1.0, 2.0], 3.0))
    assert evaluate(c, [1.0, 2.0]) == XReal(-3)
    assert evaluate(c, [1.0, 2.5]).is_pos_inf
    s = conj_analytic(box_indicator(Box((-1, -1), (1, 1))))
    assert evaluate(s, [1.0, 1.0]) == XReal(2)
    assert isinstance(conj_analytic(abs_affine([1.0])), Unsupported)
    assert not conj_analytic(quadratic([[1.0, 0.0], [0.0, 0.0]]))


def test_conj_analytic_matches_grid_inside_box():
    f = quadratic([[2.0, 0.5], [0.5, 1.0]], [0.3, -0.2], 0.7)
    cf = conj_analytic(f)
    g = GridSpec.uniform([-6, -6], [6, 6], [241, 241])
    fg = sample(f, g)
    P = np.array([[0.1, 0.2], [-1.0, 0.5], [1.5, -0.5]])
    approx = conj_at(fg, P)
    exact = cf.evaluate_many(P)
    assert np.all(approx <= exact + 1e-12)
    assert np.all(exact - approx <= 0.01)


def test_biconjugate_double_well():
    g = GridSpec.uniform([-2], [2], [401])
    x = g.axes[0]
    vals = np.minimum((x + 1) ** 2, (x - 1) ** 2)
    f = GridFunction(g, vals)
    fb = biconjugate(f)
    assert abs(fb.values[200]) <= 1e-6
    assert np.all(fb.values <= vals + 1e-12)
    hull = lower_envelope_oracle(x[::8], vals[::8])
    fb_coarse = biconjugate(GridFunction(GridSpec.uniform([-2], [2], [51]), vals[::8]))
    assert np.max(np.abs(fb_coarse.values - hull)) <= 0.05


def test_biconjugate_convex_and_idempotent():
    g = GridSpec.uniform([-2], [2], [101])
    f = sample(quadratic([[1.0]]), g)
    fb = biconjugate(f)
    assert np.max(np.abs(fb.values[5:-5] - f.values[5:-5])) <= 1e-6
    fbb = biconjugate(fb, DualGridSpec.auto(f))
    assert np.max(np.abs(fbb.values - fb.values)) <= 1e-9
    assert not np.isneginf(fb.values).any()


def test_inf_convolution_examples():
    lhs, rhs = inf_convolution_check([quadratic([[1.0]]), quadratic([[1.0]])], [2.0])
    assert lhs == XReal(1.0) and abs(rhs.value - 1.0) <= 1e-12
    f2 = quadratic([[1.0]], [-1.0], 0.5)  # 0.5 (x - 1)^2
    lhs, rhs = inf_convolution_check([quadratic([[1.0]]), f2], [0.0])
    # one-dimensional oracle: minimise over the split p1 + p2 = 0
    p1 = np.linspace(-3, 3, 600001)
    oracle = np.min(0.5 * p1**2 + (0.5 * (-p1) ** 2 + (-p1)))
    assert abs(lhs.value - (-0.25)) <= 1e-12
    assert abs(rhs.value - oracle) <= 1e-9
    lhs, rhs = inf_convolution_check([f2], [1.5])
    assert lhs == rhs


def test_inf_convolution_rejects():
    with pytest.raises(ValueError):
        inf_convolution_check([abs_affine([1.0])], [0.0])


def test_epi_sample_examples():
    g = GridSpec.uniform([-1], [1], [3])
    zero = affine([0.0])
    assert len(epi_sample(zero, g, cap=1.0, step=0.5)) == 9
    mid = box_indicator(Box.interval(0, 0))
    e = epi_sample(mid, g, cap=1.0, step=0.5)
    assert {pt for pt, _ in e} == {(0.0,)}


def test_epi_shift_identity():
    # (h + <p,.> + a)* = h*(. - p) - a; the epigraph moves by (p, -a)
    g = GridSpec.uniform([-2], [2], [41])
    h = sample(abs_affine([1.0], -0.5), g)
    p, a = 0.5, 1.0
    shifted = GridFunction(g, h.values + p * g.axes[0] + a)
    dual_h = GridSpec.uniform([-3], [3], [61])
    dual_s = GridSpec.uniform([-3 + p], [3 + p], [61])
    hs = conj_brute(h, DualGridSpec(dual_h))
    ss = conj_brute(shifted, DualGridSpec(dual_s))
    assert np.max(np.abs(ss.values - (hs.values - a))) <= 1e-12
    e_h = epi_sample(hs, dual_h, cap=4.0, step=0.25, floor=-4.0)
    e_s = epi_sample(ss, dual_s, cap=3.0, step=0.25, floor=-5.0)
    assert e_h.translate([p], -a) == e_s


def test_epi_of_max_is_intersection():
    g = GridSpec.uniform([-1], [1], [21])
    f1 = sample(quadratic([[1.0]]), g)
    f2 = sample(affine([0.5], 0.1), g)
    fmax = GridFunction(g, np.maximum(f1.values, f2.values))
    kw = dict(cap=2.0, step=0.125, floor=-1.0)
    assert epi_sample(fmax, g, **kw) == epi_sample(f1, g, **kw) & epi_sample(f2, g, **kw)


def test_epi_sample_valid():
    g = GridSpec.uniform([-1], [1], [11])
    f = sample(quadratic([[1.0]]), g)
    assert epi_sample(f, g, cap=1.0, step=0.1).valid_for(f)


def test_improper_conjugate():
    g = GridSpec.uniform([-1], [1], [3])
    f = GridFunction(g, [np.inf] * 3, improper=True)
    fs = conj_brute(f, DualGridSpec.uniform([-1], [1], [3]))
    assert fs.improper and np.all(np.isneginf(fs.values))


def test_dump_conjugate_header():
    g = GridSpec.uniform([-1], [1], [5])
    f = sample(quadratic([[1.0]]), g)
    fs = conj_brute(f, DualGridSpec.auto(f))
    text = dump_conjugate(fs, g.box, "brute")
    assert "# algorithm brute" in text
    assert load_csv(text) == fs


# -- properties -----------------------------------------------------------------

@st.composite
def grid_fn(draw, n=15):
    vals = draw(st.lists(st.floats(-5, 5), min_size=n, max_size=n))
    return GridFunction(GridSpec.uniform([-1], [1], [n]), np.array(vals))


@settings(max_examples=60)
@given(grid_fn())
def test_young_fenchel(f):
    dual = DualGridSpec.auto(f)
    fs = conj_brute(f, dual)
    X = f.grid.axes[0]
    P = dual.grid.axes[0]
    margin = f.values[:, None] + fs.values[None, :] - np.outer(X, P)
    assert margin.min() >= -1e-9


@settings(max_examples=60)
@given(grid_fn(), st.lists(st.floats(0, 3), min_size=15, max_size=15))
def test_conjugate_antitone(f, bump):
    g = GridFunction(f.grid, f.values + np.array(bump))
    dual = DualGridSpec.auto(f)
    assert np.all(conj_brute(f, dual).values >= conj_brute(g, dual).values)


@settings(max_examples=60)
@given(grid_fn())
def test_biconjugate_below(f):
    fb = biconjugate(f)
    assert np.all(fb.values <= f.values + 1e-12)


@settings(max_examples=30)
@given(grid_fn(), st.integers(1, 4))
def test_brute_independent_of_sharding(f, threads):
    import os

    dual = DualGridSpec.auto(f, counts=[301])
    base = conj_brute(f, dual).values
    import bdl.conjcalc as cc

    old_env, old_chunk = os.environ.get("BDL_THREADS"), cc.CHUNK_ENTRIES
    try:
        os.environ["BDL_THREADS"] = str(threads)
        cc.CHUNK_ENTRIES = 15 * 7
        assert np.array_equal(conj_brute(f, dual).values, base)
    finally:
        cc.CHUNK_ENTRIES = old_chunk
        if old_env is None:
            os.environ.pop("BDL_THREADS", None)
        else:
            os.environ["BDL_THREADS"] = old_env


def test_fenchel_equality_at_gradient():
    rng = np.random.default_rng(5)
    for _ in range(20):
        M = rng.normal(size=(2, 2))
        Q = M @ M.T + 0.5 * np.eye(2)
        f = quadratic(Q, rng.normal(size=2), rng.normal())
        cf = conj_analytic(f)
        x = rng.normal(size=2)
        p = f.gradient(x)
        lhs = p @ x - f(x).value - cf(p).value
        assert abs(lhs) <= 1e-8
