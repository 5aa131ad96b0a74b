"""
Tests for the SUT registry.

Validates that registry.yaml is well-formed, every entry names a known SUT
kind and training target, and the runner resolves keys and weight paths.

Run with: python -m pytest toolkit/tests/test_registry.py -v
"""

import os
import sys

import pytest
import yaml

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from pipeline import weights_path
from run_dff import load_registry, resolve_sut, show_registry
from scene_gen import ScenarioDescription
from sut import KINDS, load_weights
from toolkit_utils import ConfigurationError
from train_suts import evaluate_reference_sut, label_for, train_reference_sut
from train_suts import main as train_main

REGISTRY_PATH = os.path.join(os.path.dirname(__file__), "..", "registry.yaml")
TARGETS = {"steering", "drivable", "lane"}


@pytest.fixture
def registry():
    """Load and return the registry data."""
    with open(REGISTRY_PATH) as f:
        data = yaml.safe_load(f)
    return data


class TestRegistryStructure:
    """Verify registry.yaml is valid and complete."""

    def test_registry_file_exists(self):
        assert os.path.exists(REGISTRY_PATH), "registry.yaml not found"

    def test_has_suts_key(self, registry):
        assert "suts" in registry, "registry.yaml must have a 'suts' key"
        assert isinstance(registry["suts"], dict)

    def test_required_fields(self, registry):
        """Every SUT entry must have name, kind, target, weights, ni_margin, enabled."""
        required = {"name", "kind", "target", "weights", "ni_margin", "enabled"}
        for key, config in registry["suts"].items():
            missing = required - set(config.keys())
            assert not missing, f"SUT '{key}' missing fields: {missing}"

    def test_kind_is_valid(self, registry):
        for key, config in registry["suts"].items():
            assert config["kind"] in KINDS, f"SUT '{key}' has invalid kind '{config['kind']}'"

    def test_target_matches_kind(self, registry):
        for key, config in registry["suts"].items():
            assert config["target"] in TARGETS, f"SUT '{key}' has invalid target '{config['target']}'"
            if config["kind"] == "steering":
                assert config["target"] == "steering", f"SUT '{key}' regresses an angle"
            else:
                assert config["target"] != "steering", f"SUT '{key}' needs a mask target"

    def test_ni_margin_is_negative(self, registry):
        """Margins are pre-declared tolerated losses, so they sit below zero."""
        for key, config in registry["suts"].items():
            assert isinstance(config["ni_margin"], float)
            assert config["ni_margin"] < 0, f"SUT '{key}' ni_margin must be negative"

    def test_enabled_is_bool(self, registry):
        for key, config in registry["suts"].items():
            assert isinstance(config["enabled"], bool), (
                f"SUT '{key}' enabled must be bool, got {type(config['enabled'])}"
            )

    def test_weight_files_are_mfwt(self, registry):
        for key, config in registry["suts"].items():
            assert config["weights"].endswith(".mfwt"), f"SUT '{key}' weights must be an .mfwt file"

    def test_reference_suts_registered(self, registry):
        kinds = {config["kind"] for config in registry["suts"].values()}
        assert kinds == set(KINDS)


class TestRegistryRunner:
    """Verify the runner reads the registry the same way the tests do."""

    def test_load_registry_matches_file(self, registry):
        assert load_registry() == registry["suts"]

    def test_resolve_known_key(self):
        entry = resolve_sut(load_registry(), "steer")
        assert entry["kind"] == "steering"

    def test_resolve_unknown_key(self):
        with pytest.raises(ConfigurationError, match="unknown SUT"):
            resolve_sut(load_registry(), "nope")

    def test_weights_path_override_keeps_file_name(self, tmp_path):
        entry = {"weights": "weights/steer.mfwt"}
        assert weights_path(entry, str(tmp_path)) == os.path.join(str(tmp_path), "steer.mfwt")

    def test_weights_path_env_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MFID_WEIGHTS_DIR", str(tmp_path))
        assert weights_path({"weights": "weights/da.mfwt"}) == os.path.join(str(tmp_path), "da.mfwt")

    def test_show_registry_lists_every_key(self, capsys, tmp_path):
        registry = load_registry()
        show_registry(registry, weights_dir=str(tmp_path))
        out = capsys.readouterr().out
        for key in registry:
            assert key in out
        assert "missing" in out


class TestTrainingTargets:
    def test_label_shapes(self):
        sd = ScenarioDescription(road_curvature=0.01)
        assert label_for(sd, "steering").shape == ()
        assert label_for(sd, "drivable").shape == (128, 128)
        assert label_for(sd, "lane").shape == (128, 128)

    def test_every_registered_target_has_labels(self, registry):
        sd = ScenarioDescription()
        for config in registry["suts"].values():
            label_for(sd, config["target"])

    def test_unknown_target(self):
        with pytest.raises(ValueError):
            label_for(ScenarioDescription(), "horizon")


class TestTrainingRun:
    def test_short_run_writes_loadable_weights(self, tmp_path, capsys):
        code = train_main(["steer", "--steps", "2", "--scenes", "4", "--weights-dir", str(tmp_path)])
        assert code == 0
        sut = load_weights(str(tmp_path / "steer.mfwt"))
        assert sut.frozen and sut.kind == "steering"
        assert "mae_rad=" in capsys.readouterr().out

    def test_unknown_key(self, tmp_path):
        assert train_main(["radar", "--weights-dir", str(tmp_path)]) == 1

    def test_training_changes_weights(self):
        entry = load_registry()["da"]
        before = train_reference_sut("da", entry, steps=0, scenes=4, verbose=False)
        after = train_reference_sut("da", entry, steps=1, scenes=4, verbose=False)
        assert before.architecture() == after.architecture()
        assert before.checksum() != after.checksum()

    def test_quality_metric_ranges(self, steer_sut, seg_sut):
        assert evaluate_reference_sut(steer_sut, "steering", n=16) >= 0.0
        assert 0.0 <= evaluate_reference_sut(seg_sut, "drivable", n=16) <= 1.0
