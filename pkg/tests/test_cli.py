import glob
import json
import os

import jsonschema
import pytest

from bdl import cli

CORPUS = os.path.join(os.path.dirname(__file__), "..", "src", "bdl", "corpus")
SCHEMAS = os.path.join(os.path.dirname(__file__), "..", "src", "bdl", "schemas")


def corpus(name):
    return os.path.join(CORPUS, name + ".blp")


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def schema(command):
    with open(os.path.join(SCHEMAS, command + ".schema.json")) as fh:
        return json.load(fh)


def test_solve_t1_text(capsys):
    code, out, _ = run(capsys, "solve", corpus("t1"))
    assert code == 0
    assert out == "value 0 at (0,0)\n"


def test_dual_t2_geo_json(capsys):
    code, out, _ = run(capsys, "dual", corpus("t2"), "--scheme", "d_geo", "--budget", "1000", "--seed", "0")
    assert code == 0
    doc = json.loads(out)
    assert abs(doc["report"]["gap"]) <= 1e-9
    assert doc["report"]["polarity"] == "TRUE_LOWER_BOUND"
    assert len(doc["instance"]["hash"]) == 64


def test_check_cq_slater_llvf_failure(capsys):
    code, out, _ = run(capsys, "check-cq", corpus("t1"), "--kind", "slater_llvf_failure")
    assert code == 0
    assert "FAILS-for-Slater" in out


def test_penalize_and_calmness(capsys):
    code, out, _ = run(capsys, "penalize", corpus("calm_abs"), "--lambda-sweep", "0.5,1", "--format", "json")
    assert code == 0
    doc = json.loads(out)
    assert [s["params"]["lambda"] for s in doc["solutions"]] == [0.5, 1]
    assert doc["calmness"]["lambda"] == 0.5


def test_regularize_table(capsys):
    code, out, _ = run(capsys, "regularize", corpus("regul"), "--eps-seq", "10", "--format", "json")
    assert code == 0
    table = json.loads(out)["table"]
    assert len(table) == 11 and table[-1]["distance_steps"] <= 2


def test_gap_recomputes_primal(capsys):
    code, out, _ = run(capsys, "gap", corpus("t1"), "--scheme", "d_eps", "--eps", "0.1", "--budget", "300")
    assert code == 0
    doc = json.loads(out)
    assert doc["recomputed"]["primal_agrees"]
    assert doc["recomputed"]["dual_at_point"] == pytest.approx(doc["report"]["dual"])


def test_parse_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.blp"
    bad.write_text(open(corpus("t1")).read().replace("x1^2", "x1^^2"))
    code, out, err = run(capsys, "solve", str(bad))
    assert code == 2 and out == ""
    assert "bad.blp:6:" in err


def test_infeasible_exit_code(tmp_path, capsys):
    text = open(corpus("t1")).read().replace("G1: 0 - x1", "G1: x1 + 5")
    path = tmp_path / "infeasible.blp"
    path.write_text(text)
    code, out, _ = run(capsys, "solve", str(path))
    assert code == 3
    assert out.startswith("value +inf")


def test_invariant_violation_exit_code(monkeypatch, capsys):
    monkeypatch.setattr(cli, "validate_instance", lambda inst, seed=0: [("forced", "violated", "test")])
    code, _, err = run(capsys, "validate", corpus("t1"))
    assert code == 4 and "invariant" in err


@pytest.mark.parametrize(
    "argv",
    [
        ["dual", "t1", "--scheme", "d_bogus"],
        ["dual", "t1", "--scheme", "d_lambda"],
        ["dual", "t1", "--scheme", "d_geo"],
        ["penalize", "t1"],
        ["regularize", "t1", "--eps-seq", "-1"],
        ["check-cq", "t1", "--kind", "nonsense"],
        ["check-cq", "t1", "--kind", "sfrc"],
        ["solve", "missing"],
        ["frobnicate", "t1"],
        ["dual", "t1", "--scheme", "d_in", "--budget", "zero"],
    ],
)
def test_bad_flags_exit_code(argv, capsys):
    argv = [corpus(a) if a in ("t1", "missing") else a for a in argv]
    code, _, err = run(capsys, *argv)
    assert code == 5
    assert err


def test_reports_are_byte_identical(tmp_path, capsys):
    args = ["dual", corpus("t1"), "--scheme", "d_lambda", "--lambda", "1", "--budget", "400", "--seed", "7"]
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert cli.main(args + ["--output", str(a)]) == 0
    assert cli.main(args + ["--output", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_thread_count_does_not_change_reports(monkeypatch, capsys):
    args = ["gap", corpus("kkt2"), "--scheme", "d_lambda_mod", "--lambda", "1", "--budget", "300"]
    _, one, _ = run(capsys, *args)
    monkeypatch.setenv("BDL_THREADS", "4")
    _, four, _ = run(capsys, *args)
    assert one == four


def test_csv_format(capsys):
    code, out, _ = run(capsys, "solve", corpus("t1"), "--format", "csv")
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "key,value"
    assert "solution.value,0" in lines


def test_tolerance_override_changes_hash(capsys):
    _, a, _ = run(capsys, "solve", corpus("t1"), "--format", "json")
    _, b, _ = run(capsys, "solve", corpus("t1"), "--format", "json", "--tol", "0.5")
    assert json.loads(a)["instance"]["hash"] != json.loads(b)["instance"]["hash"]


@pytest.mark.parametrize(
    "argv",
    [
        ["solve", "t1"],
        ["solve", "t2"],
        ["penalize", "t1", "--lambda", "1"],
        ["regularize", "t1", "--eps-seq", "3"],
        ["dual", "t1", "--scheme", "d_tfl", "--lambda", "1", "--budget", "200"],
        ["gap", "t2", "--scheme", "d_s", "--budget", "200"],
        ["check-cq", "t1", "--kind", "frc", "--lambda", "1"],
        ["check-cq", "t2", "--kind", "pointed_high_dim"],
        ["validate", "t1"],
    ],
)
def test_json_reports_match_schemas(argv, capsys):
    argv = [corpus(a) if a in ("t1", "t2") else a for a in argv]
    code, out, _ = run(capsys, *argv, "--format", "json")
    assert code == 0
    doc = json.loads(out)
    jsonschema.validate(doc, schema(argv[0]))


@pytest.mark.parametrize("path", sorted(glob.glob(os.path.join(CORPUS, "*.blp"))), ids=os.path.basename)
def test_validate_corpus(path, capsys):
    code, out, _ = run(capsys, "validate", path)
    assert code == 0, out
    assert out.endswith("all invariants hold\n")
