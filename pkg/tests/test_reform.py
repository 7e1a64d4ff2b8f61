import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bdl.extreal import POS_INF, XReal
from bdl.funcrep import GridSpec, affine, quadratic
from bdl.reform import (
    BilevelInstance,
    Problem,
    classify_sets,
    llvf_feasible,
    perturbed_feasible,
    regularization_table,
    solve_geometric,
    solve_llvf,
    solve_penalized,
    solve_regularized,
)
from instances import calm_abs, calm_linear, geometric, t1, t2


def brute_llvf(inst):
    """Independent double loop over every node pair."""
    best, arg = np.inf, []
    xs, ys = inst.xgrid.nodes(), inst.ygrid.nodes()
    phi = []
    for x in xs:
        vals = [inst.f(np.r_[x, y]).value for y in ys if all(gj(np.r_[x, y]).value <= 1e-9 for gj in inst.g)]
        phi.append(min(vals) if vals else np.inf)
    for ix, x in enumerate(xs):
        for iy, y in enumerate(ys):
            z = np.r_[x, y]
            if any(h(z).value > 1e-9 for h in inst.G + inst.g):
                continue
            if inst.f(z).value - phi[ix] > 1e-9:
                continue
            v = inst.F(z).value
            if v < best - 1e-9:
                best, arg = v, [(ix, iy)]
            elif abs(v - best) <= 1e-9:
                arg.append((ix, iy))
    return best, arg


def test_t1_feasibility():
    inst = t1()
    assert llvf_feasible(inst, [0.0], [0.0])
    assert not llvf_feasible(inst, [0.0], [0.5])
    assert not llvf_feasible(inst, [-1.0], [-1.0])


def test_t1_solve():
    sol = solve_llvf(t1())
    assert sol.value == XReal(0)
    assert sol.points() == [([0.0], [0.0])]


def test_t2_solve_geometric():
    inst = t2()
    for sol in (solve_llvf(inst), solve_geometric(inst)):
        assert sol.value == XReal(-1)
        assert ([1.0], [-1.0]) in sol.points()
    assert solve_geometric(inst).problem is Problem.LLVF_S


def test_matches_double_loop():
    for inst in (t1(11), t2(11), calm_linear(11), calm_abs(11)):
        best, arg = brute_llvf(inst)
        sol = solve_llvf(inst)
        assert sol.value.value == best
        assert sol.argmin == arg


def test_empty_feasible_set():
    inst = t1(11)
    bad = BilevelInstance(inst.F, inst.f, [affine([0.0, 0.0], 1.0)], inst.g, inst.xgrid, inst.ygrid)
    sol = solve_llvf(bad)
    assert sol.value == POS_INF and sol.argmin == []


def test_perturbed_feasible():
    inst = t1()
    assert perturbed_feasible(inst, [0.0], [0.5], -0.25)
    assert perturbed_feasible(inst, [0.0], [0.0], 0.0)
    # every feasible triple has t <= tol
    for ix in range(inst.xgrid.size):
        for iy in range(inst.ygrid.size):
            if inst.constraint_mask[ix, iy]:
                t = -inst.penalty[ix, iy]
                assert perturbed_feasible(inst, ix, iy, t)
                assert t <= 1e-9


def test_penalized_t1():
    inst = t1()
    sol = solve_penalized(inst, 1.0)
    assert sol.value == XReal(0) and sol.points() == [([0.0], [0.0])]
    for lam in (10.0, 0.1):
        assert solve_penalized(inst, lam).argmin == solve_llvf(inst).argmin
    with pytest.raises(ValueError):
        solve_penalized(inst, 0.0)


def test_penalty_vanishes_on_lower_optima():
    inst = calm_abs(21)
    lam = 2.0
    obj = inst.F_table / lam + inst.penalty
    for ix in range(inst.xgrid.size):
        for iy in range(inst.ygrid.size):
            if inst.penalty[ix, iy] == 0.0:
                assert obj[ix, iy] == inst.F_table[ix, iy] / lam


def test_penalization_lower_bound():
    for inst in (t1(21), calm_linear(21), calm_abs(21)):
        V = solve_llvf(inst).value.value
        for lam in (0.1, 1.0, 7.0):
            assert solve_penalized(inst, lam).value.value <= V / lam + 1e-12


def test_regularized():
    inst = t1()
    sol = solve_regularized(inst, 0.25)
    assert sol.value == XReal(0) and sol.points() == [([0.0], [0.0])]
    vals = [solve_regularized(inst, e).value.value for e in (4.0, 1.0, 0.5, 0.1, 0.01)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))
    big = float(np.max(np.where(inst.constraint_mask, inst.penalty, -np.inf))) + 1.0
    dropped = np.where(inst.constraint_mask, inst.F_table, np.inf).min()
    assert solve_regularized(inst, big).value.value == dropped
    with pytest.raises(ValueError):
        solve_regularized(inst, 0.0)


def test_geometric_special_cases():
    c = geometric(affine([0.0, 0.0], 3.5), quadratic([[0.0, 1.0], [1.0, 0.0]]))
    assert solve_geometric(c).value == XReal(3.5)
    with pytest.raises(ValueError):
        solve_geometric(t1(11))
    # single x node: min of F over S(x0)
    g1 = GridSpec.uniform([0.5], [0.5], [2])
    gy = GridSpec.uniform([-1], [1], [21])
    inst = BilevelInstance(affine([0.0, 1.0]), quadratic([[0.0, 1.0], [1.0, 0.0]]), xgrid=g1, ygrid=gy, geometric=True)
    assert solve_geometric(inst).value == XReal(-1)


def test_classify_t2():
    inst = t2()
    cls = classify_sets(inst)
    assert cls.F_minus == []
    feasible = [tuple(r) for r in np.argwhere(inst.penalty <= 1e-9)]
    assert set(feasible) <= set(cls.F_eq)
    node = inst.locate([1.0], [-1.0])
    assert node in cls.Xi_eq
    # (1, 1): phi(1) = -1 and f(1, 1) = 1, so f - phi = 2 and the node is in F+
    n11 = inst.locate([1.0], [1.0])
    assert n11 in cls.Xi_plus and n11 in cls.F_plus
    # (-1, 1): f - phi = -1 + 1 = 0 and F = 1 > -1
    assert inst.locate([-1.0], [1.0]) in set(cls.Xi_plus) & set(cls.F_eq)
    total = inst.xgrid.size * inst.ygrid.size
    assert len(cls.F_minus) + len(cls.F_eq) + len(cls.F_plus) == total
    assert len(cls.Xi_minus) + len(cls.Xi_eq) + len(cls.Xi_plus) == total
    assert set(cls.O) <= set(cls.F_eq) | set(cls.F_minus)


def test_classify_constant():
    c = geometric(affine([0.0, 0.0], 2.0), quadratic([[0.0, 1.0], [1.0, 0.0]]), nodes=11)
    cls = classify_sets(c)
    assert cls.Xi_minus == [] and cls.Xi_plus == []
    assert len(cls.Xi_eq) == 121


def test_regularization_convergence_table():
    rows = regularization_table(calm_abs(41), 10)
    assert [r.k for r in rows] == list(range(11))
    assert rows[-1].distance_steps <= 2
    vals = [r.value.value for r in rows]
    assert all(a <= b + 1e-12 for a, b in zip(vals, vals[1:]))


def test_to_json_shape():
    sol = solve_penalized(t1(11), 0.5)
    js = sol.to_json()
    assert js["problem"] == "P_lambda"
    assert js["params"] == {"lambda": 0.5}
    assert js["argmin"] == [{"x": [0], "y": [0]}]


@settings(max_examples=25, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.2, 2))
def test_random_geometric_invariants(a, b, q):
    inst = geometric(affine([a, b]), quadratic([[q, -q], [-q, q]], [b, a]), nodes=9)
    cls = classify_sets(inst)
    assert cls.F_minus == []
    sol = solve_geometric(inst)
    for ix, iy in sol.argmin:
        assert inst.penalty[ix, iy] <= 1e-9
        assert abs(inst.F_table[ix, iy] - sol.value.value) <= 1e-9
