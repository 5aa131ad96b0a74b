"""
End-to-end tests for run_dff.py: generate, evaluate, calibrate and report on
a tiny seeded run, exit codes and the RESULT line.

Run with: python -m pytest toolkit/tests/test_cli.py -v
"""

import json
import os
import shutil
import sys

import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from conftest import TINY_CONFIG
from numerics import Rng
from pipeline import CSV_FIELDS
from run_dff import main
from sut import build_sut, save_weights
from toolkit_utils import TOOLKIT_VERSION, read_csv_rows, read_provenance


def run_cli(capsys, *argv):
    """(exit code, parsed RESULT dict, stdout) for one runner invocation."""
    code = main(list(argv))
    out = capsys.readouterr().out
    lines = [line for line in out.splitlines() if line.startswith("RESULT:")]
    result = json.loads(lines[-1][len("RESULT:"):]) if lines else None
    return code, result, out


def read_bytes(path):
    with open(path, "rb") as f:
        return f.read()


@pytest.fixture(scope="module")
def base(tmp_path_factory):
    """One generated tiny run plus weight files, shared read-only by the tests."""
    root = tmp_path_factory.mktemp("cli")
    config = root / "tiny.ini"
    config.write_text(TINY_CONFIG)
    weights = root / "weights"
    weights.mkdir()
    save_weights(build_sut("steering", Rng(11)).freeze(), str(weights / "steer.mfwt"))
    save_weights(build_sut("segmentation", Rng(12), name="da").freeze(), str(weights / "da.mfwt"))
    out = root / "run"
    assert main(["generate", "--config", str(config), "--out", str(out)]) == 0
    return {"config": str(config), "weights": str(weights), "out": str(out)}


@pytest.fixture
def run(base, tmp_path):
    """A private copy of the generated run."""
    out = tmp_path / "run"
    shutil.copytree(base["out"], str(out))
    return dict(base, out=str(out))


def evaluate_args(run, *extra):
    return ["evaluate", "--config", run["config"], "--out", run["out"], "--weights-dir", run["weights"], *extra]


# =========================================================================
# generate
# =========================================================================

class TestGenerate:
    def test_layout(self, base):
        with open(os.path.join(base["out"], "manifest.json")) as f:
            manifest = json.load(f)
        assert manifest["counts"] == {"calibration": 5, "heldout": 1}
        assert len(manifest["pairs"]) == 6
        assert len(os.listdir(os.path.join(base["out"], "images"))) == 12
        assert len(manifest["config_hash"]) == 12

    def test_rerun_is_byte_identical(self, capsys, base, tmp_path):
        again = str(tmp_path / "again")
        code, result, _ = run_cli(capsys, "generate", "--config", base["config"], "--out", again, "--previews")
        assert code == 0
        assert result == {"command": "generate", "status": "ok", "count": 6,
                          "config_hash": result["config_hash"]}
        assert read_bytes(os.path.join(again, "manifest.json")) == read_bytes(
            os.path.join(base["out"], "manifest.json"))
        for name in os.listdir(os.path.join(base["out"], "images")):
            assert read_bytes(os.path.join(again, "images", name)) == read_bytes(
                os.path.join(base["out"], "images", name))
        assert len(os.listdir(os.path.join(again, "previews"))) == 12

    def test_invalid_config_writes_nothing(self, capsys, tmp_path):
        config = tmp_path / "bad.ini"
        config.write_text("[scene]\nbogus = 1\n")
        out = str(tmp_path / "out")
        code, result, _ = run_cli(capsys, "generate", "--config", str(config), "--out", out)
        assert code == 1
        assert result["status"] == "error"
        assert not os.path.exists(out)

    def test_seed_override_changes_hash(self, capsys, base, tmp_path):
        _, result, _ = run_cli(capsys, "generate", "--config", base["config"], "--seed", "4",
                               "--out", str(tmp_path / "other"))
        with open(os.path.join(base["out"], "manifest.json")) as f:
            assert result["config_hash"] != json.load(f)["config_hash"]


# =========================================================================
# evaluate
# =========================================================================

class TestEvaluate:
    def test_writes_csv_and_json(self, capsys, run):
        code, result, _ = run_cli(capsys, *evaluate_args(run))
        assert code == 0
        assert (result["command"], result["count"], result["sut"], result["variant"]) == (
            "evaluate", 6, "steer", "baseline")

        rows = read_csv_rows(os.path.join(run["out"], "eval", "steer-baseline.csv"))
        assert len(rows) == 6
        assert tuple(rows[0]) == CSV_FIELDS
        assert read_provenance(os.path.join(run["out"], "eval", "steer-baseline.csv")) == {
            "toolkit_version": TOOLKIT_VERSION, "config_hash": result["config_hash"]}
        for row in rows:
            flags = [row[k] == "true" for k in ("pass_iv", "pass_ov", "pass_dff")]
            assert (row["pass_all"] == "true") == all(flags)

        with open(os.path.join(run["out"], "eval", "steer-baseline.json")) as f:
            summary = json.load(f)
        assert summary["n_pairs"] == 6
        assert summary["thresholds"]["provenance"] == "user"
        assert summary["correlations"] is None
        assert summary["calibrator_checksum"] is None

    def test_jobs_do_not_change_outputs(self, capsys, run, tmp_path):
        other = str(tmp_path / "other")
        shutil.copytree(run["out"], other)
        assert run_cli(capsys, *evaluate_args(run, "--jobs", "1"))[0] == 0
        assert run_cli(capsys, *evaluate_args(dict(run, out=other), "--jobs", "4"))[0] == 0
        for name in ("steer-baseline.csv", "steer-baseline.json"):
            assert read_bytes(os.path.join(run["out"], "eval", name)) == read_bytes(
                os.path.join(other, "eval", name))

    def test_progress_lines_follow_pair_order(self, capsys, run, tmp_path):
        other = str(tmp_path / "other")
        shutil.copytree(run["out"], other)
        _, _, serial = run_cli(capsys, *evaluate_args(run, "--jobs", "1"))
        _, _, parallel = run_cli(capsys, *evaluate_args(dict(run, out=other), "--jobs", "4"))

        def progress(out):
            return [line for line in out.splitlines() if line.startswith("  pair-")]

        ids = [line.split(":")[0].strip() for line in progress(parallel)]
        assert ids == [f"pair-{i:05d}" for i in range(6)]
        assert progress(parallel) == progress(serial)

    def test_segmentation_sut(self, capsys, run):
        code, _, _ = run_cli(capsys, *evaluate_args(run, "--sut", "da"))
        assert code == 0
        rows = read_csv_rows(os.path.join(run["out"], "eval", "da-baseline.csv"))
        assert all(0.0 <= float(r["ov_score"]) <= 1.0 for r in rows)

    def test_identical_pairs_pass_everything(self, capsys, run):
        path = os.path.join(run["out"], "manifest.json")
        with open(path) as f:
            manifest = json.load(f)
        for pair in manifest["pairs"]:
            pair["synthetic"] = pair["real"]
        with open(path, "w") as f:
            json.dump(manifest, f)

        assert run_cli(capsys, *evaluate_args(run))[0] == 0
        for row in read_csv_rows(os.path.join(run["out"], "eval", "steer-baseline.csv")):
            assert row["pass_all"] == "true"
            assert float(row["dff"]) == 0.0
            assert float(row["ov_score"]) == 1.0

    def test_percentile_needs_twenty_calibration_pairs(self, capsys, run):
        code, result, _ = run_cli(capsys, *evaluate_args(run, "--thresholds", "percentile:90,95"))
        assert code == 1
        assert "20" in result["error"]

    def test_percentile_thresholds(self, capsys, tmp_path, base):
        config = tmp_path / "pairs25.ini"
        config.write_text(TINY_CONFIG.replace("pairs = 6", "pairs = 25"))
        out = str(tmp_path / "run25")
        assert main(["generate", "--config", str(config), "--out", out]) == 0
        code, _, _ = run_cli(capsys, "evaluate", "--config", str(config), "--out", out,
                             "--weights-dir", base["weights"], "--thresholds", "percentile:90,95")
        assert code == 0
        with open(os.path.join(out, "eval", "steer-baseline.json")) as f:
            summary = json.load(f)
        assert set(summary["threshold_levels"]) == {"p90", "p95"}
        assert summary["threshold_levels"]["p90"] <= summary["threshold_levels"]["p95"]
        assert summary["thresholds"]["eps_dff"] == summary["threshold_levels"]["p95"]
        assert summary["pass_rates"]["calibration"]["n"] == 20
        assert summary["pass_rates"]["calibration"]["dff_at"]["p90"] >= 0.9
        assert summary["thresholds"]["provenance"].startswith("percentile:90,95")

    def test_cache_dir_from_environment(self, capsys, run, tmp_path, monkeypatch):
        shared = tmp_path / "shared-cache"
        monkeypatch.setenv("MFID_CACHE_DIR", str(shared))
        assert run_cli(capsys, *evaluate_args(run))[0] == 0
        assert any(name.endswith(".mfdm") for name in os.listdir(str(shared)))
        assert not os.path.exists(os.path.join(run["out"], "cache"))

    def test_corrupt_cache_entry_is_recomputed(self, capsys, run):
        assert run_cli(capsys, *evaluate_args(run))[0] == 0
        csv_path = os.path.join(run["out"], "eval", "steer-baseline.csv")
        first = read_bytes(csv_path)
        cache = os.path.join(run["out"], "cache")
        victim = sorted(os.listdir(cache))[0]
        with open(os.path.join(cache, victim), "r+b") as f:
            f.seek(50)
            f.write(b"\xff\xff\xff\xff")

        code, _, out = run_cli(capsys, *evaluate_args(run))
        assert code == 0
        assert "WARNING" in out
        assert read_bytes(csv_path) == first

    def test_calibrated_variant_needs_calibration(self, capsys, run):
        code, result, _ = run_cli(capsys, *evaluate_args(run, "--variant", "dff"))
        assert code == 1
        assert "run calibrate first" in result["error"]


# =========================================================================
# calibrate and report
# =========================================================================

class TestCalibrateAndReport:
    def test_ovf_variant_round_trip(self, capsys, run):
        args = ["calibrate", "--config", run["config"], "--out", run["out"], "--weights-dir", run["weights"],
                "--variant", "ovf"]
        code, result, out = run_cli(capsys, *args)
        assert code == 0
        assert result["count"] == 4
        assert "no non-inferiority verdict" in out

        with open(os.path.join(run["out"], "calibration", "steer-ovf.json")) as f:
            summary = json.load(f)
        assert summary["effective_calibration"]["lambda_dff"] == 0.0
        assert summary["heldout"]["n"] == 1
        assert summary["heldout"]["non_inferiority"] is None
        assert os.path.exists(os.path.join(run["out"], "calibration", "steer-ovf.mfck"))
        assert len(read_csv_rows(os.path.join(run["out"], "calibration", "steer-ovf.log.csv"))) == 4
        log_hash = read_provenance(os.path.join(run["out"], "calibration", "steer-ovf.log.csv"))["config_hash"]
        assert log_hash == summary["config_hash"]

        assert run_cli(capsys, *evaluate_args(run, "--variant", "ovf"))[0] == 0
        with open(os.path.join(run["out"], "eval", "steer-ovf.json")) as f:
            assert json.load(f)["calibrator_checksum"] == summary["calibrator_checksum"]

        code, result, out = run_cli(capsys, "report", "--out", run["out"])
        assert code == 0
        assert result["count"] == 2
        assert "DECISIVE-FEATURE FIDELITY REPORT" in out
        assert os.path.exists(os.path.join(run["out"], "report", "cdf.csv"))
        cdf = read_provenance(os.path.join(run["out"], "report", "cdf.csv"))
        assert cdf == {"toolkit_version": TOOLKIT_VERSION, "config_hash": summary["config_hash"]}

    def test_report_refuses_mixed_configs(self, capsys, run, tmp_path):
        assert run_cli(capsys, *evaluate_args(run))[0] == 0
        first = str(tmp_path / "first.json")
        shutil.copy(os.path.join(run["out"], "eval", "steer-baseline.json"), first)

        other = tmp_path / "other.ini"
        other.write_text(TINY_CONFIG + "seed = 1\n")
        assert run_cli(capsys, *evaluate_args(dict(run, config=str(other))))[0] == 0

        code, result, _ = run_cli(capsys, "report", "--out", run["out"], first,
                                  os.path.join(run["out"], "eval", "steer-baseline.json"))
        assert code == 1
        assert "different configurations" in result["error"]
        assert not os.path.exists(os.path.join(run["out"], "report"))


# =========================================================================
# Command-line surface
# =========================================================================

class TestSurface:
    def test_list(self, capsys):
        code = main(["--list"])
        out = capsys.readouterr().out
        assert code == 0
        assert "steer" in out and "da" in out and "ll" in out

    def test_no_command(self, capsys):
        assert main([]) == 1

    def test_bad_jobs(self, capsys, run):
        code, result, _ = run_cli(capsys, *evaluate_args(run, "--jobs", "0"))
        assert code == 1
        assert result["status"] == "error"

    def test_unknown_sut(self, capsys, run):
        assert run_cli(capsys, *evaluate_args(run, "--sut", "radar"))[0] == 1

    def test_missing_weights(self, capsys, run, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        code, result, _ = run_cli(capsys, *evaluate_args(dict(run, weights=str(empty))))
        assert code == 2
        assert "train_suts.py" in result["error"]

    def test_missing_manifest(self, capsys, base, tmp_path):
        code, _, _ = run_cli(capsys, "evaluate", "--config", base["config"], "--out", str(tmp_path / "none"),
                             "--weights-dir", base["weights"])
        assert code == 2

    def test_seed_mismatch_with_manifest(self, capsys, run):
        code, result, _ = run_cli(capsys, *evaluate_args(run, "--seed", "99"))
        assert code == 1
        assert "different [scene] config" in result["error"]

    def test_error_result_carries_exit_code(self, capsys, run):
        _, result, _ = run_cli(capsys, *evaluate_args(run, "--variant", "dff"))
        assert result["exit_code"] == 1
        assert result["command"] == "evaluate"
