import json
import shutil

import numpy as np
import pytest

from lpvmpc import harness
from lpvmpc.mpc import ClosedLoopLog, LOG_COLUMNS

TINY = dict(ident_cycles=400, tune_budget=6, eval_cycles=80, imitation_speeds=(1400.0, 1500.0),
            imitation_cycles=150, train={"epochs": 2, "window_stride": 16})


def fake_log(name, nox, fq, tout=None, n=4, ref=200.0):
    rows = {c: np.zeros(n) for c in LOG_COLUMNS}
    rows["cycle"] = np.arange(n, dtype=float)
    rows["tref_nm"] = np.full(n, ref)
    rows["nox"] = np.asarray(nox, dtype=float) * np.ones(n)
    rows["fq"] = np.asarray(fq, dtype=float) * np.ones(n)
    rows["tout"] = np.full(n, ref) if tout is None else np.asarray(tout, dtype=float)
    rows["solve_us"] = np.full(n, 1000.0)
    return ClosedLoopLog(name, np.full(n, 1500.0), rows)


def test_report_percentages():
    rep = harness.compute_report(fake_log("benchmark", 400, 40), [fake_log("a", 200, 38), fake_log("b", 600, 40)])
    assert [r.controller for r in rep.rows] == ["benchmark", "a", "b"]
    assert rep.row("benchmark").nox_pct == 0.0
    assert rep.row("a").nox_pct == pytest.approx(-50.0) and rep.row("a").fq_pct == pytest.approx(-5.0)
    assert rep.row("b").violations == 4 and rep.row("a").time_ms == 1.0
    assert rep.row("a").load_error_pct == 0.0


def test_report_requires_identical_profiles():
    with pytest.raises(ValueError, match="reference profile"):
        harness.compute_report(fake_log("benchmark", 400, 40), [fake_log("a", 200, 38, ref=201.0)])
    other = fake_log("a", 200, 38)
    other.speed[:] = 1200.0
    with pytest.raises(ValueError, match="speed profile"):
        harness.compute_report(fake_log("benchmark", 400, 40), [other])


def test_tracking_error_of_a_constant_reference_uses_its_level():
    assert harness.tracking_error([190.0, 210.0], [200.0, 200.0]) == pytest.approx(5.0)
    assert harness.tracking_error([0.0, 1.0], [0.0, 2.0]) == pytest.approx(100 * np.sqrt(0.5) / 2)


def test_report_file_roundtrip(tmp_path):
    rep = harness.compute_report(fake_log("benchmark", 400, 40), [fake_log("a", 200, 38)])
    harness.write_report([rep], tmp_path / "r.json")
    assert harness.read_report(tmp_path / "r.json")[0] == rep
    (tmp_path / "bad.json").write_text(json.dumps({"format": "improvement-report", "version": 99}))
    with pytest.raises(ValueError):
        harness.read_report(tmp_path / "bad.json")


def test_random_reference_levels_and_holds():
    ref = harness.random_reference(2000, np.random.default_rng(1))
    assert ref.min() >= 50 and ref.max() <= 350
    change = np.flatnonzero(np.diff(ref)) + 1
    holds = np.diff(np.r_[0, change])
    assert np.all(holds >= 50) and np.all(holds <= 200)
    assert np.array_equal(ref, harness.random_reference(2000, np.random.default_rng(1)))


def test_cycles_for_seconds():
    assert harness.cycles_for_seconds(2000, 1500) == 25000
    assert harness.cycles_for_seconds(1, 1200) == 10


def test_reference_file_roundtrip(tmp_path):
    ref = harness.random_reference(30, np.random.default_rng(0))
    harness.save_reference(ref, tmp_path / "r.csv")
    assert np.array_equal(harness.load_reference(tmp_path / "r.csv"), ref)


def test_recipe_validation(tmp_path):
    (tmp_path / "r.json").write_text(json.dumps({"seed": 1, "bogus": 2}))
    with pytest.raises(ValueError, match="bogus"):
        harness.Recipe.load(tmp_path / "r.json")
    with pytest.raises(ValueError):
        harness.Recipe(tune_budget=3)
    with pytest.raises(TypeError):
        harness.Recipe(mpc={"Nq": 3})


def test_content_digest_ignores_timing_only(tmp_path):
    (tmp_path / "a.csv").write_text("x,solve_us\n1,5\n")
    (tmp_path / "b.csv").write_text("x,solve_us\n1,7\n")
    (tmp_path / "c.csv").write_text("x,solve_us\n2,5\n")
    d = [harness.content_digest(tmp_path / f"{n}.csv") for n in "abc"]
    assert d[0] == d[1] != d[2]


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    return root, harness.run_experiment(harness.Recipe(**TINY), root)


def test_pipeline_writes_every_artifact(tiny_run):
    root, pipe = tiny_run
    assert [r.name for r in pipe.results] == list(harness.Pipeline.STAGES)
    for rel in ("simulate/ident.csv", "identify/lpv.json", "identify/arx.json", "tune/history.csv",
                "control/lpv-mpc_1500rpm.csv", "control/benchmark_1200rpm.csv", "imitate/network.json",
                "imitate/dataset.csv", "imitate/imitative_1200rpm.csv", "report/report.json"):
        assert (root / rel).exists(), rel
    reps = harness.read_report(root / "report" / "report.json")
    assert [r.speed for r in reps] == [1500.0, 1200.0]
    assert [r.controller for r in reps[0].rows] == ["benchmark", "lmpc", "lpv-mpc", "imitative"]


def test_pipeline_reuses_up_to_date_stages(tiny_run):
    root, _ = tiny_run
    before = harness.artifact_digests(root)
    again = harness.run_experiment(harness.Recipe(**TINY), root)
    assert all(r.cached for r in again.results)
    assert harness.artifact_digests(root) == before


def test_changing_the_controller_reruns_downstream_only(tiny_run, tmp_path):
    root, _ = tiny_run
    copy = tmp_path / "copy"
    shutil.copytree(root, copy)
    pipe = harness.run_experiment(harness.Recipe(**TINY, mpc={"w_fq": 0.05}), copy, stop_after="control")
    assert [r.cached for r in pipe.results] == [True, True, True, False]


def test_stage_failure_names_the_stage(tmp_path, monkeypatch):
    def boom(self, d):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(harness.Pipeline, "_run_identify", boom)
    with pytest.raises(harness.StageError, match="identify") as err:
        harness.run_experiment(harness.Recipe(**TINY), tmp_path)
    assert err.value.stage == "identify"
    assert not (tmp_path / "identify" / "stamp.json").exists()
    assert (tmp_path / "simulate" / "stamp.json").exists()
