"""
test_cli.py
===========
End-to-end runs of the command-line pipelines through cli.main().
"""

import io
import json

import numpy as np
import numpy.testing as npt
import pandas as pd
import pytest

from cli import EXIT_ERROR, EXIT_NOT_CONVERGED, EXIT_OK, main
from pointcloud_io import read_point_set, read_transforms
from run_manifest import dump_run_section, read_manifest
from synthesis_eval import synth_scene


def synth(out_dir, *extra):
    args = ["synth", "--shape", "composite", "--sets", "3", "--points", "400", "--seed", "1",
            "--out-dir", str(out_dir), *extra]
    assert main(args) == EXIT_OK
    return sorted(str(p) for p in out_dir.glob("set_*.ply"))


@pytest.fixture(autouse=True)
def _no_thread_env(monkeypatch):
    monkeypatch.delenv("EMPMR_THREADS", raising=False)
    monkeypatch.delenv("EMPMR_LOG_LEVEL", raising=False)


class TestSynth:
    def test_writes_sets_truth_and_manifest(self, tmp_path):
        files = synth(tmp_path / "scene")
        assert len(files) == 3
        truth = read_transforms(tmp_path / "scene" / "truth.json")
        assert truth.names == ["set_00", "set_01", "set_02"]
        manifest = read_manifest(tmp_path / "scene" / "manifest.json")
        assert manifest["run"]["command"] == "synth"
        assert manifest["run"]["seeds"] == {"seed": 1}
        assert "started_at" in manifest["provenance"]

    def test_same_seed_same_files(self, tmp_path):
        first = synth(tmp_path / "a")
        second = synth(tmp_path / "b")
        for fa, fb in zip(first, second):
            assert open(fa, "rb").read() == open(fb, "rb").read()
        assert (tmp_path / "a" / "truth.json").read_text() == (tmp_path / "b" / "truth.json").read_text()

    def test_zero_perturbation(self, tmp_path):
        synth(tmp_path / "s", "--perturb-deg", "0", "--perturb-trans", "0")
        for T in read_transforms(tmp_path / "s" / "truth.json").transforms:
            npt.assert_array_equal(T.as_matrix(), np.eye(4))

    def test_files_reload_into_the_scene(self, tmp_path):
        files = synth(tmp_path / "s")
        scene = synth_scene("composite", 3, 400, seed=1)
        for path, point_set in zip(files, scene.sets):
            npt.assert_array_equal(read_point_set(path).points, point_set.points)


class TestRegister:
    def test_synthetic_scene_recovered(self, tmp_path, capsys):
        files = synth(tmp_path / "s")
        out = tmp_path / "est.json"
        assert main(["register", "--inputs", *files, "--out", str(out), "--downsample", "off",
                     "--trace", str(tmp_path / "trace.csv"), "--merged", str(tmp_path / "merged.ply")]) == EXIT_OK

        trace = pd.read_csv(tmp_path / "trace.csv")
        assert {"objective", "sigma2", "max_delta"} <= set(trace.columns)
        assert len(read_point_set(tmp_path / "merged.ply")) == sum(len(read_point_set(f)) for f in files)
        assert read_transforms(out).names == ["set_00", "set_01", "set_02"]

        capsys.readouterr()
        assert main(["eval", "--estimated", str(out), "--truth", str(tmp_path / "s" / "truth.json")]) == EXIT_OK
        row = pd.read_csv(io.StringIO(capsys.readouterr().out)).iloc[0]
        assert row["e_R_fixed"] < 1e-3
        assert row["e_R"] == row["e_R_fixed"]

    def test_identical_files_stay_at_identity(self, tmp_path):
        pts = np.random.default_rng(0).normal(size=(300, 3))
        for name in ("a.xyz", "b.xyz"):
            np.savetxt(tmp_path / name, pts, fmt="%.17g")
        out = tmp_path / "t.json"
        assert main(["register", "--inputs", str(tmp_path / "a.xyz"), str(tmp_path / "b.xyz"),
                     "--out", str(out)]) == EXIT_OK
        for T in read_transforms(out).transforms:
            npt.assert_allclose(T.as_matrix(), np.eye(4), atol=1e-9)

    def test_iteration_cap_exit_code(self, tmp_path):
        files = synth(tmp_path / "s", "--perturb-deg", "25")
        code = main(["register", "--inputs", *files, "--out", str(tmp_path / "t.json"), "--max-iters", "1"])
        assert code == EXIT_NOT_CONVERGED

    def test_manifest_is_reproducible(self, tmp_path):
        files = synth(tmp_path / "s")
        for name in ("one", "two"):
            assert main(["register", "--inputs", *files, "--out", str(tmp_path / f"{name}.json"),
                         "--max-iters", "10", "--manifest", str(tmp_path / f"{name}.manifest.json")]) in (0, 2)
        a = read_manifest(tmp_path / "one.manifest.json")
        b = read_manifest(tmp_path / "two.manifest.json")
        assert a["run"]["outcome"] == b["run"]["outcome"]
        assert a["run"]["config"] == b["run"]["config"]
        ta = json.loads((tmp_path / "one.json").read_text())
        tb = json.loads((tmp_path / "two.json").read_text())
        assert ta["sets"] == tb["sets"]
        assert dump_run_section(a) == dump_run_section(b)

    def test_threads_match_single_thread(self, tmp_path, monkeypatch):
        files = synth(tmp_path / "s")
        assert main(["register", "--inputs", *files, "--out", str(tmp_path / "one.json"), "--max-iters", "10"]) in (0, 2)
        monkeypatch.setenv("EMPMR_THREADS", "3")
        assert main(["register", "--inputs", *files, "--out", str(tmp_path / "three.json"), "--max-iters", "10"]) in (0, 2)
        assert read_manifest(tmp_path / "three.manifest.json")["run"]["config"]["threads"] == 3
        for Ta, Tb in zip(read_transforms(tmp_path / "one.json").transforms,
                          read_transforms(tmp_path / "three.json").transforms):
            npt.assert_allclose(Ta.as_matrix(), Tb.as_matrix(), atol=1e-9)

    def test_missing_input_exits_1(self, tmp_path, capsys):
        code = main(["register", "--inputs", str(tmp_path / "nope.ply"), str(tmp_path / "nope2.ply"),
                     "--out", str(tmp_path / "t.json")])
        assert code == EXIT_ERROR
        assert "Error" in capsys.readouterr().err

    def test_single_input_rejected(self, tmp_path):
        files = synth(tmp_path / "s")
        assert main(["register", "--inputs", files[0], "--out", str(tmp_path / "t.json")]) == EXIT_ERROR

    def test_bad_thread_env(self, tmp_path, monkeypatch):
        files = synth(tmp_path / "s")
        monkeypatch.setenv("EMPMR_THREADS", "many")
        assert main(["register", "--inputs", *files, "--out", str(tmp_path / "t.json")]) == EXIT_ERROR


class TestEval:
    def test_truth_against_itself(self, tmp_path, capsys):
        synth(tmp_path / "s")
        truth = str(tmp_path / "s" / "truth.json")
        capsys.readouterr()
        assert main(["eval", "--estimated", truth, "--truth", truth, "--no-gauge-fix"]) == EXIT_OK
        row = pd.read_csv(io.StringIO(capsys.readouterr().out)).iloc[0]
        assert row["e_R"] == 0.0 and row["e_t"] == 0.0
        assert row["e_R_raw"] == 0.0

    def test_writes_manifest_beside_estimate(self, tmp_path):
        synth(tmp_path / "s")
        truth = str(tmp_path / "s" / "truth.json")
        assert main(["eval", "--estimated", truth, "--truth", truth]) == EXIT_OK
        manifest = read_manifest(tmp_path / "s" / "truth.eval.manifest.json")
        assert manifest["run"]["command"] == "eval"
        assert manifest["run"]["inputs"] == [truth, truth]
        assert manifest["run"]["outcome"]["e_R_fixed"] < 1e-12

    def test_manifest_follows_out(self, tmp_path):
        synth(tmp_path / "s")
        truth = str(tmp_path / "s" / "truth.json")
        assert main(["eval", "--estimated", truth, "--truth", truth, "--out", str(tmp_path / "err.csv")]) == EXIT_OK
        assert read_manifest(tmp_path / "err.manifest.json")["run"]["config"] == {"gauge_fix": True}


class TestExperiments:
    def test_sweep_single_value(self, tmp_path):
        out = tmp_path / "sweep.csv"
        assert main(["sweep", "--param", "w", "--values", "0.01", "--sets", "3", "--points", "150",
                     "--max-iters", "5", "--out", str(out), "--plot", str(tmp_path / "sweep.png")]) == EXIT_OK
        table = pd.read_csv(out)
        assert len(table) == 1
        assert list(table.columns) == ["w", "e_R", "e_t", "runtime_s", "iterations"]
        assert (tmp_path / "sweep.png").exists()
        assert (tmp_path / "sweep.manifest.json").exists()

    def test_sweep_no_values(self, tmp_path):
        out = tmp_path / "sweep.csv"
        assert main(["sweep", "--values", "--sets", "3", "--points", "50", "--out", str(out)]) == EXIT_OK
        assert pd.read_csv(out).empty

    def test_sweep_other_parameter_rejected(self, tmp_path):
        assert main(["sweep", "--param", "tol", "--values", "0.1", "--out", str(tmp_path / "x.csv")]) == EXIT_ERROR

    def test_trials(self, tmp_path):
        out = tmp_path / "trials.csv"
        assert main(["trials", "--snr", "40", "--trials", "2", "--sets", "3", "--points", "150",
                     "--max-iters", "5", "--out", str(out)]) == EXIT_OK
        assert len(pd.read_csv(out)) == 2

    def test_bench(self, tmp_path):
        out = tmp_path / "bench.csv"
        assert main(["bench", "--sizes", "100", "200", "--sets", "2", "--max-iters", "2",
                     "--out", str(out), "--plot", str(tmp_path / "bench.png")]) == EXIT_OK
        table = pd.read_csv(out)
        assert table["points_per_set"].tolist() == [100, 200]
        assert "size_ratio" in table.columns

    def test_usage_error_exits_1(self):
        assert main(["register"]) == EXIT_ERROR
        assert main([]) == EXIT_ERROR

    @pytest.mark.parametrize("argv", [
        ["sweep", "--values", "0.01", "--sets", "3", "--points", "100", "--max-iters", "2"],
        ["trials", "--snr", "40", "--trials", "1", "--sets", "3", "--points", "100", "--max-iters", "2"],
        ["bench", "--sizes", "100", "--sets", "2", "--max-iters", "1"],
    ])
    def test_manifest_without_out(self, tmp_path, monkeypatch, argv):
        monkeypatch.chdir(tmp_path)
        assert main(argv) == EXIT_OK
        manifest = read_manifest(tmp_path / f"{argv[0]}.manifest.json")
        assert manifest["run"]["command"] == argv[0]
