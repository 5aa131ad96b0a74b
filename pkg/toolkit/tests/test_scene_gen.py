"""
Tests for the procedural scene generator: scenario validation, knob
clamping, ground-truth masks, real/synthetic rendering and dataset splits.

Run with: python -m pytest toolkit/tests/test_scene_gen.py -v
"""

import math
import os
import sys

import numpy as np
import pytest
from pydantic import ValidationError

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from numerics import Rng, perceptual_distance
from scene_gen import (KNOB_BOUNDS, GeneratorKnobs, PairedSample, ScenarioDescription, build_paired_dataset,
                       decoy_region, post_process, render_masks, render_real, render_synthetic,
                       sample_scenario_grid, scene_layout, split_indices)


# =========================================================================
# Scenario description and knobs
# =========================================================================

class TestScenarioDescription:
    def test_defaults_are_valid(self):
        sd = ScenarioDescription()
        assert sd.lane_count == 3
        assert not sd.obstacle_present

    def test_out_of_range_rejected(self):
        with pytest.raises(ValidationError):
            ScenarioDescription(road_curvature=0.5)
        with pytest.raises(ValidationError):
            ScenarioDescription(lane_count=5)

    def test_unknown_attribute_rejected(self):
        with pytest.raises(ValidationError):
            ScenarioDescription(weather="rain")

    def test_duplicate_attributes_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            ScenarioDescription.from_attributes([("lane_count", 2), ("lane_count", 3)])

    def test_attribute_round_trip(self):
        sd = ScenarioDescription(lane_count=4, decoy_sign_present=True)
        assert ScenarioDescription.from_attributes(sd.attributes()) == sd

    def test_encoding_length(self):
        assert ScenarioDescription().encode().shape == (6,)


class TestGeneratorKnobs:
    def test_clamped_on_construction(self):
        knobs = GeneratorKnobs(contrast=5.0, brightness=-1.0, blur_radius=-2.0)
        assert knobs.contrast == KNOB_BOUNDS["contrast"][1]
        assert knobs.brightness == KNOB_BOUNDS["brightness"][0]
        assert knobs.blur_radius == 0.0

    def test_non_finite_rejected(self):
        with pytest.raises(ValidationError):
            GeneratorKnobs(contrast=float("nan"))

    def test_with_continuous_clamps(self):
        knobs = GeneratorKnobs(seed=4).with_continuous([2.0, 2.0, 2.0, 9.0, 2.0])
        assert knobs.seed == 4
        assert knobs.style_strength == 1.0
        assert knobs.blur_radius == 3.0


# =========================================================================
# Ground truth
# =========================================================================

class TestMasks:
    def test_three_lanes_have_two_dividers(self):
        _, lane, _ = render_masks(ScenarioDescription(lane_count=3))
        bottom = lane[-1].astype(np.int8)
        runs = int(np.sum(np.diff(np.concatenate([[0], bottom])) == 1))
        assert runs == 2

    def test_no_obstacle_means_empty_obstacle_mask(self):
        assert not scene_layout(ScenarioDescription(obstacle_present=False)).obstacle.any()

    def test_obstacle_is_not_drivable(self):
        sd = ScenarioDescription(obstacle_present=True)
        drivable, _, _ = render_masks(sd)
        obstacle = scene_layout(sd).obstacle
        assert obstacle.any()
        assert not (drivable & obstacle).any()

    def test_lane_inside_road(self):
        sd = ScenarioDescription(lane_count=4, road_curvature=-0.015)
        layout = scene_layout(sd)
        assert not (layout.lane & ~layout.road).any()

    def test_straight_road_label_is_zero(self):
        assert render_masks(ScenarioDescription())[2] == 0.0

    def test_label_geometry(self):
        assert render_masks(ScenarioDescription(road_curvature=0.01))[2] == pytest.approx(math.atan(0.1))

    def test_mirrored_label_negated(self):
        sd = ScenarioDescription(road_curvature=0.012, obstacle_present=True, obstacle_lateral_offset=1.2)
        assert render_masks(sd.mirrored())[2] == pytest.approx(-render_masks(sd)[2])

    def test_drivable_area_covers_a_fifth(self):
        for sd in sample_scenario_grid(100, Rng(8)):
            drivable, _, _ = render_masks(sd)
            assert drivable.mean() >= 0.2, sd

    def test_masks_do_not_depend_on_knobs(self, scene):
        first = render_masks(scene)
        render_synthetic(scene, GeneratorKnobs(seed=1, blur_radius=2.0))
        second = render_masks(scene)
        assert np.array_equal(first[0], second[0]) and np.array_equal(first[1], second[1])


# =========================================================================
# Rendering
# =========================================================================

class TestRendering:
    def test_real_is_deterministic(self, scene):
        assert np.array_equal(render_real(scene, Rng(5)), render_real(scene, Rng(5)))

    def test_real_shape_and_range(self, real_image):
        assert real_image.shape == (128, 128, 3)
        assert real_image.min() >= 0.0 and real_image.max() <= 1.0

    def test_seeds_change_texture(self, scene):
        assert not np.array_equal(render_real(scene, Rng(5)), render_real(scene, Rng(6)))

    def test_perfect_knobs_reproduce_real(self, scene, real_image):
        x_s = render_synthetic(scene, GeneratorKnobs.perfect(5))
        assert perceptual_distance(x_s, real_image) < 0.05
        assert np.array_equal(x_s, real_image)

    def test_no_texture_is_flat(self, scene):
        x_s = render_synthetic(scene, GeneratorKnobs(seed=3, style_strength=0.0, texture_gain=0.0))
        asphalt = scene_layout(scene).region_index() == 2
        assert x_s[asphalt].var(axis=0).max() < 1e-4

    def test_style_strength_closes_the_gap(self):
        strengths = (0.0, 0.5, 1.0)
        totals = np.zeros(len(strengths))
        for i, sd in enumerate(sample_scenario_grid(10, Rng(2))):
            seed = 100 + i
            x_r = render_real(sd, Rng(seed))
            totals += [perceptual_distance(render_synthetic(sd, GeneratorKnobs(
                seed=seed, style_strength=s, texture_gain=1.0)), x_r) for s in strengths]
        assert totals[0] > totals[1] > totals[2]
        assert totals[2] == 0.0

    def test_decoy_changes_only_its_region(self):
        base = ScenarioDescription(road_curvature=0.01, decoy_sign_present=False)
        decoy = base.model_copy(update={"decoy_sign_present": True})
        for knobs in (GeneratorKnobs(seed=9, texture_gain=0.5),
                      GeneratorKnobs(seed=9, texture_gain=0.5, blur_radius=1.5, contrast=1.2)):
            diff = np.abs(render_synthetic(decoy, knobs) - render_synthetic(base, knobs)).max(axis=2)
            outside = ~decoy_region(knobs)
            assert diff[outside].max() == 0.0
            assert diff[~outside].max() > 0.0


class TestPostProcess:
    def test_neutral_is_identity(self, real_image):
        assert np.array_equal(post_process(real_image, GeneratorKnobs()), real_image)

    def test_brightness_offset(self):
        img = np.full((8, 8, 3), 0.4)
        out = post_process(img, GeneratorKnobs(brightness=0.3))
        assert out.mean() == pytest.approx(0.7)

    def test_contrast_spreads_values(self):
        img = np.linspace(0.3, 0.7, 48).reshape(4, 4, 3)
        out = post_process(img, GeneratorKnobs(contrast=1.5))
        assert out.std() > img.std()

    def test_blur_smooths(self, real_image):
        out = post_process(real_image, GeneratorKnobs(blur_radius=2.0))
        assert np.abs(np.diff(out, axis=1)).mean() < np.abs(np.diff(real_image, axis=1)).mean()


# =========================================================================
# Sampling and datasets
# =========================================================================

class TestSampling:
    def test_grid_is_deterministic(self):
        assert sample_scenario_grid(10, Rng(1)) == sample_scenario_grid(10, Rng(1))

    def test_grid_stays_in_range(self):
        for sd in sample_scenario_grid(64, Rng(4)):
            ScenarioDescription(**sd.model_dump())

    def test_grid_covers_lane_counts(self):
        assert {sd.lane_count for sd in sample_scenario_grid(30, Rng(4))} == {2, 3, 4}

    def test_grid_ignores_parent_consumption(self):
        rng = Rng(6)
        first = sample_scenario_grid(8, rng)
        rng.uniform(size=50)
        assert sample_scenario_grid(8, rng) == first

    def test_grid_seeds_differ(self):
        assert sample_scenario_grid(8, Rng(1)) != sample_scenario_grid(8, Rng(2))

    def test_grid_rejects_empty(self):
        with pytest.raises(ValueError):
            sample_scenario_grid(0, Rng(1))

    def test_split_sizes(self):
        calibration, heldout = split_indices(2126, 0.8, Rng(1))
        assert (len(calibration), len(heldout)) == (1701, 425)
        assert not set(calibration) & set(heldout)
        assert sorted(calibration + heldout) == list(range(2126))


class TestPairedDataset:
    @pytest.fixture(scope="class")
    def dataset(self):
        return build_paired_dataset(6, seed=3)

    def test_split_counts(self, dataset):
        splits = [s.split for s in dataset]
        assert splits.count("calibration") == 5
        assert splits.count("heldout") == 1

    def test_pairs_match_renderers(self, dataset):
        sample = dataset[0]
        assert sample.id == "pair-00000"
        assert np.array_equal(sample.x_r, render_real(sample.sd, Rng(sample.real_seed)))
        assert np.array_equal(sample.x_s_init, render_synthetic(sample.sd, sample.knobs_init))

    def test_deterministic(self, dataset):
        again = build_paired_dataset(6, seed=3)
        assert [s.knobs_init for s in again] == [s.knobs_init for s in dataset]
        assert all(np.array_equal(a.x_s_init, b.x_s_init) for a, b in zip(again, dataset))

    def test_scenarios_come_from_the_grid(self, dataset):
        assert [s.sd for s in dataset] == sample_scenario_grid(6, Rng(3))

    def test_context_has_no_real_image(self, dataset):
        assert not hasattr(dataset[0].context(), "x_r")

    def test_real_candidates(self):
        sample = build_paired_dataset(2, seed=3, rw_candidates=3)[0]
        assert len(sample.candidates()) == 3
        assert np.array_equal(sample.candidates()[0], sample.x_r)

    def test_shape_mismatch_rejected(self, dataset):
        s = dataset[0]
        with pytest.raises(ValueError):
            PairedSample(id="bad", sd=s.sd, x_r=s.x_r, x_s_init=s.x_s_init[:64], knobs_init=s.knobs_init)
