"""Tests for the fidelity report formatters."""

import json
import os
import sys

import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from pipeline import report
from report import cdf_rows, format_cdf_csv, format_effects_table, format_summary
from toolkit_utils import TOOLKIT_VERSION, ConfigurationError, read_csv_rows, read_provenance


@pytest.fixture
def sample_evaluation():
    """An evaluate output as written to eval/{sut}-{variant}.json."""
    return {
        "kind": "evaluation",
        "config_hash": "abc123abc123",
        "sut": "steer",
        "variant": "baseline",
        "thresholds": {"provenance": "percentile:90,95 of calibration-split dff (n=20)"},
        "threshold_levels": {"p90": 0.0125, "p95": 0.02},
        "pass_rates": {
            "calibration": {"n": 20, "pass_iv": 0.8, "pass_ov": 0.9, "pass_dff": 0.95, "pass_all": 0.7,
                            "dff_at": {"p90": 0.9, "p95": 0.95}},
            "heldout": {"n": 5, "pass_iv": 0.6, "pass_ov": 1.0, "pass_dff": 0.8, "pass_all": 0.6,
                        "dff_at": {"p90": 0.8, "p95": 0.8}},
        },
        "correlations": {
            "ov_score~dff_distance": {"rho": -0.5, "ci_low": -0.9, "ci_high": 0.1, "n": 5},
        },
        "dff": {"calibration": [0.01, 0.02, 0.02, 0.005], "heldout": [0.03, 0.001]},
    }


@pytest.fixture
def sample_calibration():
    return {
        "kind": "calibration",
        "config_hash": "abc123abc123",
        "sut": "steer",
        "variant": "dff",
        "ni_margin": -0.005,
        "heldout": {
            "n": 12,
            "effects": {"delta_iv": 0.01, "delta_ov": 0.002, "delta_dff": -0.004, "n": 12},
            "non_inferiority": {"ci_low_one_sided": -0.001, "pass": True},
            "decoy": {"n": 3, "baseline_dff": 0.02, "calibrated_dff": 0.01},
        },
    }


class TestFormatSummary:
    def test_contains_header(self, sample_evaluation):
        text = format_summary([sample_evaluation], [], "abc123abc123", "0.4.0")
        assert "DECISIVE-FEATURE FIDELITY REPORT" in text
        assert "config abc123abc123" in text

    def test_contains_tables(self, sample_evaluation, sample_calibration):
        text = format_summary([sample_evaluation], [sample_calibration], "abc123abc123", "0.4.0")
        for title in ("THRESHOLDS", "PASS RATES", "COUPLING", "EFFECTS"):
            assert title in text

    def test_values_have_six_decimals(self, sample_evaluation):
        text = format_summary([sample_evaluation], [], "abc123abc123", "0.4.0")
        assert "0.012500" in text
        assert "-0.500000" in text

    def test_provenance_is_printed(self, sample_evaluation):
        text = format_summary([sample_evaluation], [], "abc123abc123", "0.4.0")
        assert "percentile:90,95" in text

    def test_missing_correlations(self, sample_evaluation):
        sample_evaluation["correlations"] = None
        text = format_summary([sample_evaluation], [], "abc123abc123", "0.4.0")
        assert "too few held-out pairs" in text

    def test_widened_interval_is_marked(self, sample_evaluation):
        text = format_summary([sample_evaluation], [], "abc123abc123", "0.4.0")
        assert "CI widened" not in text
        sample_evaluation["correlations"]["ov_score~dff_distance"]["widened"] = True
        text = format_summary([sample_evaluation], [], "abc123abc123", "0.4.0")
        assert "5 *" in text
        assert "CI widened to include it" in text

    def test_no_inputs(self):
        assert "No inputs" in format_summary([], [], "abc123abc123", "0.4.0")


class TestEffectsTable:
    def test_pass_verdict_and_decoy_line(self, sample_calibration):
        text = "\n".join(format_effects_table([sample_calibration]))
        assert "pass" in text
        assert "decoy scenes (n=3)" in text

    def test_fail_verdict(self, sample_calibration):
        sample_calibration["heldout"]["non_inferiority"]["pass"] = False
        assert "FAIL" in "\n".join(format_effects_table([sample_calibration]))

    def test_no_ni_verdict(self, sample_calibration):
        sample_calibration["heldout"]["non_inferiority"] = None
        text = "\n".join(format_effects_table([sample_calibration]))
        assert "FAIL" not in text and " pass" not in text

    def test_empty_heldout(self, sample_calibration):
        sample_calibration["heldout"] = None
        assert "no held-out pairs" in "\n".join(format_effects_table([sample_calibration]))


class TestCdf:
    def test_rows_are_monotone_per_split(self, sample_evaluation):
        rows = cdf_rows([sample_evaluation])
        for split in ("calibration", "heldout"):
            points = [(eps, frac) for _, _, s, eps, frac in rows if s == split]
            eps = [p[0] for p in points]
            fractions = [p[1] for p in points]
            assert eps == sorted(eps)
            assert fractions == sorted(fractions)
            assert fractions[-1] == 1.0

    def test_ties_collapse(self, sample_evaluation):
        rows = [r for r in cdf_rows([sample_evaluation]) if r[2] == "calibration"]
        assert [r[3] for r in rows] == [0.005, 0.01, 0.02]
        assert [r[4] for r in rows] == [0.25, 0.5, 1.0]

    def test_csv_header(self, sample_evaluation):
        lines = format_cdf_csv(cdf_rows([sample_evaluation]), "abc123abc123").splitlines()
        assert lines[0] == f"# toolkit_version={TOOLKIT_VERSION} config_hash=abc123abc123"
        assert lines[1] == "sut,variant,split,epsilon,fraction"


class TestReportFiles:
    def _write(self, path, data):
        with open(path, "w") as f:
            json.dump(data, f)
        return str(path)

    def test_writes_summary_and_cdf(self, tmp_path, sample_evaluation, sample_calibration):
        paths = [self._write(tmp_path / "e.json", sample_evaluation),
                 self._write(tmp_path / "c.json", sample_calibration)]
        text = report(paths, str(tmp_path / "out"))
        assert (tmp_path / "out" / "report" / "summary.txt").read_text() == text + "\n"
        assert (tmp_path / "out" / "report" / "cdf.csv").exists()
        cdf_path = str(tmp_path / "out" / "report" / "cdf.csv")
        assert read_provenance(cdf_path)["config_hash"] == "abc123abc123"
        assert len(read_csv_rows(cdf_path)) == len(cdf_rows([sample_evaluation]))
        assert f"toolkit {TOOLKIT_VERSION}   config abc123abc123" in text

    def test_refuses_mixed_config_hashes(self, tmp_path, sample_evaluation, sample_calibration):
        sample_calibration["config_hash"] = "ffffffffffff"
        paths = [self._write(tmp_path / "e.json", sample_evaluation),
                 self._write(tmp_path / "c.json", sample_calibration)]
        with pytest.raises(ConfigurationError, match="different configurations"):
            report(paths, str(tmp_path / "out"))
        assert not (tmp_path / "out" / "report").exists()

    def test_refuses_foreign_json(self, tmp_path):
        path = self._write(tmp_path / "x.json", {"hello": 1})
        with pytest.raises(ConfigurationError):
            report([path], str(tmp_path / "out"))
