"""Shared fixtures: small seeded SUTs, scenes and configs that keep the fast suite fast."""

import os
import sys

import pytest

# Add toolkit directory to path so the flat modules import by name
sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from cf_explainer import CfConfig
from numerics import Rng
from scene_gen import ScenarioDescription, render_real
from sut import build_segmentation_sut, build_steering_sut

TINY_CONFIG = """
[scene]
pairs = 6
seed = 3

[cf]
k_cf = 1
steps = 2
mask_resolution = 8

[calibration]
total_steps = 4
es_every = 2
es_population = 2
dff_every = 2
cf_k_cf = 1
cf_steps = 2
checkpoint_every = 2

[stats]
bootstrap_resamples = 100
"""


@pytest.fixture(autouse=True)
def _isolated_env(monkeypatch):
    """Tests never pick up a developer's cache or weights override."""
    monkeypatch.delenv("MFID_CACHE_DIR", raising=False)
    monkeypatch.delenv("MFID_WEIGHTS_DIR", raising=False)


@pytest.fixture(scope="session")
def steer_sut():
    return build_steering_sut(Rng(11)).freeze()


@pytest.fixture(scope="session")
def seg_sut():
    return build_segmentation_sut(Rng(12)).freeze()


@pytest.fixture
def tiny_cf():
    return CfConfig(k_cf=2, steps=4, mask_resolution=8)


@pytest.fixture(scope="session")
def scene():
    return ScenarioDescription(road_curvature=0.01, obstacle_present=True,
                               obstacle_lateral_offset=1.0, decoy_sign_present=True)


@pytest.fixture(scope="session")
def real_image(scene):
    return render_real(scene, Rng(5))


@pytest.fixture
def tiny_config_path(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_CONFIG)
    return str(path)
