import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bdl import dualeval as de
from bdl.cqcheck import (
    HEURISTIC_KINDS,
    CQKind,
    FeatureCloud,
    Verdict,
    characteristic_set,
    characterize_geo,
    check,
    geo_cloud,
    partial_calmness_probe,
    pointedness_2d,
)
from bdl.funcrep import GridSpec, affine, quadratic
from bdl.reform import BilevelInstance, solve_geometric, solve_llvf

from instances import calm_abs, calm_linear, geometric, t1, t2
from test_dualeval import kkt_instance, saddle_instance


def test_kind_parse_accepts_cli_spelling():
    assert CQKind.parse("slater_llvf_failure") is CQKind.SLATER_LLVF_FAILURE
    assert CQKind.parse("pointed-high-dim") is CQKind.POINTED_HIGH_DIM
    with pytest.raises(ValueError):
        CQKind.parse("nonsense")


def test_slater_lambda_on_t1():
    inst = t1()
    rep = check(CQKind.SLATER_LAMBDA, inst)
    assert rep.verdict is Verdict.HOLDS and not rep.heuristic
    # independent re-evaluation of the witness: strictly negative constraints in the open box
    x, y = rep.witness["point"]["x"][0], rep.witness["point"]["y"][0]
    assert -2 < x < 2 and -2 < y < 2
    assert -x < -rep.tol and y - 1 < -rep.tol
    # the hand-picked point (1, 0.5) is also strict
    assert inst.G[0]([1.0, 0.5]).value == -1.0 and inst.g[0]([1.0, 0.5]).value == -0.5


def test_slater_lambda_fails_with_equality_constraint_pair():
    g = GridSpec.uniform([-1], [1], [11])
    inst = BilevelInstance(F=affine([1.0, 1.0]), f=quadratic(np.eye(2)),
                           G=[affine([1.0, 0.0]), affine([-1.0, 0.0])], xgrid=g, ygrid=g)
    assert check("SLATER_LAMBDA", inst).verdict is Verdict.FAILS


@pytest.mark.parametrize("builder", [t1, t2, calm_linear, calm_abs, kkt_instance, saddle_instance])
def test_slater_llvf_failure_everywhere(builder):
    inst = builder()
    rep = check(CQKind.SLATER_LLVF_FAILURE, inst)
    assert rep.verdict is Verdict.FAILS and rep.label == "FAILS-for-Slater"
    assert rep.witness["min_penalty"] == 0.0
    assert rep.witness["strict_points"] == 0
    # re-evaluate: the penalty is nonnegative on the lower-level feasible nodes
    lower_ok = np.ones(inst.shape, dtype=bool)
    for t in inst.g_tables:
        lower_ok &= t <= inst.tol
    assert inst.penalty[lower_ok].min() >= 0.0


def test_cone_34_failure_certificate():
    inst = t1()
    rep = check("CONE_34_FAILURE", inst)
    assert rep.verdict is Verdict.FAILS and not rep.heuristic
    assert rep.witness["min_first_coordinate"] == 0.0


def test_generalized_slater_fails_for_the_value_constraint():
    inst = t1()
    assert check("SLATER_GENERALIZED", inst).verdict is Verdict.FAILS
    rep = check("SLATER_GENERALIZED", inst, {"family": "constraints"})
    assert rep.verdict is Verdict.HOLDS
    assert all(v <= rep.tol for v in rep.witness["constraint_values"])
    with pytest.raises(ValueError):
        check("SLATER_GENERALIZED", inst, {"family": "other"})


def test_regul_on_t1_and_monotone():
    inst = t1()
    rep = check("REGUL", inst)
    assert rep.verdict is Verdict.HOLDS
    assert rep.witness["subsets"] == {"1": True}
    # y = -2 gives g1 = -3 at every x
    assert inst.g[0]([0.0, -2.0]).value == -3.0


def test_regul_monotone_over_subsets():
    g = GridSpec.uniform([-1], [1], [11])
    # g1 strict somewhere, g2 = -y and g3 = y never strict together with g2 at y = 0 only
    inst = BilevelInstance(
        F=affine([1.0, 1.0]), f=quadratic(np.eye(2)),
        g=[affine([0.0, 1.0], -2.0), affine([0.0, -1.0]), affine([0.0, 1.0])],
        xgrid=g, ygrid=g,
    )
    rep = check("REGUL", inst)
    assert rep.verdict is Verdict.FAILS
    subsets = rep.witness["subsets"]
    for key, ok in subsets.items():
        if ok:
            J = key.split(",")
            for size in range(1, len(J)):
                for sub in itertools.combinations(J, size):
                    assert subsets[",".join(sub)]
    assert subsets["2,3"] is False and subsets["1,2"] is True


def test_partial_calmness_t1_every_lambda():
    inst = t1()
    res = partial_calmness_probe(inst, (0.0, 0.0))
    assert res.lam == 0.1 and res.counterexample is None
    assert partial_calmness_probe(inst, (0.0, 0.0), lam_grid=(0.0,)).lam == 0.0


def test_partial_calmness_calm_linear_finite_modulus():
    inst = calm_linear()
    cand = solve_llvf(inst).argmin[0]
    res = partial_calmness_probe(inst, cand)
    assert res.lam is not None and res.lam > 0


def test_partial_calmness_zero_grid_counterexample():
    inst = calm_abs()
    cand = solve_llvf(inst).argmin[0]
    res = partial_calmness_probe(inst, cand, lam_grid=(0.0,))
    assert res.lam is None
    x, y, t = res.counterexample
    assert inst.F([x[0], y[0]]).value < inst.F_table[cand] - 1e-12
    assert partial_calmness_probe(inst, cand).lam == 0.5


def test_partial_calmness_rejects_infeasible_candidate():
    with pytest.raises(ValueError):
        partial_calmness_probe(t1(), (1.0, 0.0))


def test_pointedness_on_t2():
    inst = t2()
    rep = pointedness_2d(geo_cloud(inst), solve_geometric(inst).value.value)
    assert rep.verdict is Verdict.HOLDS and not rep.heuristic
    assert rep.witness["span"] < math.pi


def test_pointedness_single_point_at_vertex():
    cloud = FeatureCloud(np.array([[2.0, 0.0]]), ((0, 0),), "psi")
    rep = pointedness_2d(cloud, 2.0)
    assert rep.verdict is Verdict.HOLDS
    assert rep.witness["span"] == pytest.approx(math.pi / 2)


def test_pointedness_negative_point_fails_and_errors():
    cloud = FeatureCloud(np.array([[0.0, -1.0], [1.0, 1.0]]), ((0, 0), (0, 1)), "psi")
    rep = pointedness_2d(cloud, 0.5)
    assert rep.verdict is Verdict.FAILS
    assert rep.witness["negative_point"] == [-0.5, -1.0]
    with pytest.raises(ValueError):
        pointedness_2d(FeatureCloud(np.zeros((0, 2)), (), "psi"), 0.0)
    with pytest.raises(ValueError):
        pointedness_2d(FeatureCloud(np.zeros((1, 3)), ((0, 0),), "psi_eps"), 0.0)


def test_pointedness_opposite_directions_fail():
    # directions at angles -pi/4 and 3pi/4 + a bit span more than pi
    cloud = FeatureCloud(np.array([[1.0, -1.0], [-1.0, 0.9]]), ((0, 0), (0, 1)), "psi")
    assert pointedness_2d(cloud, 0.0).verdict is Verdict.FAILS


def test_characterize_t2_agrees():
    rep = characterize_geo(t2())
    assert rep.verdict is Verdict.HOLDS
    assert rep.witness["predicted_pointed"] and rep.witness["agree"]


def test_characterize_constant_upper_objective_disagreement():
    inst = geometric(affine([0.0, 0.0], 1.0), quadratic([[0.0, 1.0], [1.0, 0.0]]))
    rep = characterize_geo(inst)
    assert rep.witness["predicted_pointed"] is False
    assert rep.verdict is Verdict.HOLDS
    assert any("DISAGREEMENT" in n for n in rep.notes)
    # strong duality holds, consistent with the angular verdict
    assert abs(de.search_dual("D_GEO", inst, {}, budget=300).gap.value) <= 1e-6


def test_crafted_flat_lower_level_verdict_matches_gap():
    inst = geometric(affine([0.0, 1.0]), affine([0.0, 0.0]))
    rep = characterize_geo(inst)
    gap = de.search_dual("D_GEO", inst, {}, budget=300).gap.value
    assert (rep.verdict is Verdict.HOLDS) == (gap <= 1e-6)


def test_characterize_requires_geometric():
    with pytest.raises(ValueError):
        characterize_geo(t1())


def test_heuristic_flags_forced():
    inst = t1(21)
    for kind in HEURISTIC_KINDS:
        rep = check(kind, inst, {"lambda": 1.0, "eps": 0.1})
        assert rep.heuristic, kind
        js = rep.to_json()
        assert set(js) >= {"kind", "verdict", "heuristic", "witness", "tol"}


def test_characteristic_set_decomposition():
    cs = characteristic_set(t1(21), 1.0)
    assert cs.entries and cs.verify()


def test_sfrc_holds_and_margins_on_convex_instances():
    for inst in (t1(21), kkt_instance()):
        rep = check("SFRC", inst, {"lambda": 1.0})
        assert rep.verdict is Verdict.HOLDS
        pts = de.random_points("D_LAMBDA_MOD", inst, 100, np.random.default_rng(1), xstars=de.outer_grid(inst))
        assert de.weak_duality_margin("D_LAMBDA_MOD", inst, {"lambda": 1.0}, pts) >= -1e-8
        best = de.search_dual("D_LAMBDA_MOD", inst, {"lambda": 1.0}, budget=500)
        assert de.aggregated_margin("D_LAMBDA_MOD", inst, {"lambda": 1.0}, [best.point]) >= -1e-8


def test_sfrc_fails_on_saddle_with_negative_margin():
    inst = saddle_instance()
    rep = check("SFRC", inst, {"lambda": 1.0})
    assert rep.verdict is Verdict.FAILS
    assert rep.witness["threshold_R"] < rep.witness["threshold_epi"]
    best = de.search_dual("D_LAMBDA_MOD", inst, {"lambda": 1.0}, budget=500)
    assert de.aggregated_margin("D_LAMBDA_MOD", inst, {"lambda": 1.0}, [best.point]) < 0


def test_frc_requires_lambda():
    with pytest.raises(ValueError):
        check("FRC", t1(), {})


def test_cc_probe_and_topological_checks_on_convex_instance():
    inst = t1(21)
    assert check("CC_PROBE", inst, {"lambda": 1.0}).verdict in (Verdict.HOLDS, Verdict.INCONCLUSIVE)
    assert check("CONTINGENT_PROBE", inst).heuristic
    rep = check("POINTED_HIGH_DIM", inst, {"eps": 0.1})
    assert rep.verdict in (Verdict.FAILS, Verdict.INCONCLUSIVE) and rep.heuristic


def test_interior_and_separation():
    inst = t1(21)
    rep = check("INTERIOR_NONEMPTY", inst, {"eps": 0.1})
    assert rep.verdict is Verdict.HOLDS
    c = np.array(rep.witness["centre"])
    assert np.all(c - 1.0 >= np.array(rep.witness["base_point"]) - 1e-12)
    sep = check("ASSUM_NOT_INTERIOR", inst, {"eps": 0.1})
    mult = np.array(list(sep.witness["multipliers"].values()))
    assert np.all(mult >= -1e-12) and mult.sum() == pytest.approx(1.0)


@settings(max_examples=20, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_slater_llvf_failure_property(a, b):
    inst = geometric(affine([a, b]), quadratic([[2.0, -1.0], [-1.0, 2.0]]), nodes=9)
    assert check("SLATER_LLVF_FAILURE", inst).label == "FAILS-for-Slater"
