"""
Procedural paired-domain road scenes.

A ScenarioDescription fixes the scene geometry. render_real() draws the
"real-style" reference (textured, mild sensor noise, weathered signage) and
render_synthetic() draws the knob-controlled "synthetic-style" image (flat
shading, reduced texture, crisp signage, then contrast/brightness/blur). Both
share one geometry, so the ground-truth masks depend only on the scenario.

At style_strength=1, texture_gain=1, neutral post-processing and the real
render's seed, render_synthetic reproduces render_real exactly.
"""

import functools
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import ndimage
from scipy.stats import qmc

from numerics import Rng

IMAGE_SIZE = 128
HORIZON = 48            # first ground row
Z_NEAR = 5.0            # metres to the ground point seen by the bottom row
PX_PER_M = 13.0         # lateral pixels per metre at the bottom row
LANE_WIDTH = 3.5
STRIPE_WIDTH = 0.15
LOOKAHEAD = 10.0        # metres, steering label geometry
OBSTACLE_DEPTH = 15.0
OBSTACLE_SIZE = (1.8, 1.5)  # width, height in metres
AVOID_GAIN = 0.12
AVOID_SCALE = 1.5

# rows y0:y1, cols x0:x1 holding the roadside sign, its post and its glyph
DECOY_BOX = (18, 47, 100, 124)
_SIGN_CENTER = (30, 111)
_SIGN_HALF = 9

SENSOR_NOISE = 0.015
BLUR_TRUNCATE = 4.0

# Region order used for palettes and texture amplitudes
REGIONS = ("sky", "grass", "asphalt", "lane", "obstacle", "sign", "arrow", "post")

REAL_PALETTE = {
    "grass": (0.30, 0.42, 0.22),
    "asphalt": (0.36, 0.36, 0.38),
    "lane": (0.85, 0.85, 0.80),
    "obstacle": (0.55, 0.15, 0.12),
    "sign": (0.74, 0.72, 0.60),
    "arrow": (0.52, 0.52, 0.50),
    "post": (0.45, 0.45, 0.47),
}
SYNTH_PALETTE = {
    "grass": (0.25, 0.55, 0.20),
    "asphalt": (0.30, 0.30, 0.33),
    "lane": (0.98, 0.98, 0.98),
    "obstacle": (0.80, 0.10, 0.10),
    "sign": (0.98, 0.82, 0.08),
    "arrow": (0.05, 0.05, 0.05),
    "post": (0.60, 0.60, 0.62),
}
SKY_TOP = np.array([0.45, 0.62, 0.85])
SKY_HORIZON = np.array([0.78, 0.85, 0.92])

TEXTURE_AMPLITUDE = {
    "sky": 0.03, "grass": 0.35, "asphalt": 0.25, "lane": 0.08,
    "obstacle": 0.15, "sign": 0.15, "arrow": 0.10, "post": 0.10,
}


# =============================================================================
# Scenario description and generator knobs
# =============================================================================

class ScenarioDescription(BaseModel):
    """Attribute/value description of one scene; ranges are validated."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    road_curvature: float = Field(0.0, ge=-0.02, le=0.02)
    lane_count: int = Field(3, ge=2, le=4)
    sun_elevation: float = Field(45.0, ge=5.0, le=85.0)
    obstacle_lateral_offset: float = Field(0.0, ge=-3.0, le=3.0)
    obstacle_present: bool = False
    decoy_sign_present: bool = False

    def attributes(self):
        return [(name, getattr(self, name)) for name in type(self).model_fields]

    @classmethod
    def from_attributes(cls, pairs):
        names = [name for name, _ in pairs]
        duplicates = sorted({n for n in names if names.count(n) > 1})
        if duplicates:
            raise ValueError(f"duplicate scenario attributes: {duplicates}")
        return cls(**dict(pairs))

    def encode(self):
        """Numeric encoding fed to the calibrator, roughly unit-scaled."""
        return np.array([
            self.road_curvature / 0.02,
            self.lane_count - 3.0,
            (self.sun_elevation - 45.0) / 40.0,
            self.obstacle_lateral_offset / 3.0,
            float(self.obstacle_present),
            float(self.decoy_sign_present),
        ])

    def mirrored(self):
        return self.model_copy(update={
            "road_curvature": -self.road_curvature,
            "obstacle_lateral_offset": -self.obstacle_lateral_offset,
        })


KNOB_BOUNDS = {
    "style_strength": (0.0, 1.0),
    "contrast": (0.5, 1.5),
    "brightness": (-0.3, 0.3),
    "blur_radius": (0.0, 3.0),
    "texture_gain": (0.0, 1.0),
}
CONTINUOUS_KNOBS = tuple(KNOB_BOUNDS)
KNOB_LOW = np.array([KNOB_BOUNDS[k][0] for k in CONTINUOUS_KNOBS])
KNOB_HIGH = np.array([KNOB_BOUNDS[k][1] for k in CONTINUOUS_KNOBS])


class GeneratorKnobs(BaseModel):
    """Generator configuration: one discrete seed plus bounded continuous knobs.

    Continuous knobs are clamped into their bounds on construction.
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    seed: int = Field(0, ge=0, lt=2 ** 64)
    style_strength: float = 0.0
    contrast: float = 1.0
    brightness: float = 0.0
    blur_radius: float = 0.0
    texture_gain: float = 0.0

    @field_validator(*CONTINUOUS_KNOBS, mode="before")
    @classmethod
    def _clamp(cls, value, info):
        value = float(value)
        if not math.isfinite(value):
            raise ValueError(f"{info.field_name} must be finite")
        low, high = KNOB_BOUNDS[info.field_name]
        return min(max(value, low), high)

    @classmethod
    def perfect(cls, seed):
        return cls(seed=seed, style_strength=1.0, contrast=1.0, brightness=0.0,
                   blur_radius=0.0, texture_gain=1.0)

    def continuous(self):
        return np.array([getattr(self, k) for k in CONTINUOUS_KNOBS], dtype=np.float64)

    def with_continuous(self, values):
        return GeneratorKnobs(seed=self.seed, **dict(zip(CONTINUOUS_KNOBS, map(float, values))))

    def with_seed(self, seed):
        return self.model_copy(update={"seed": int(seed)})


# =============================================================================
# Geometry
# =============================================================================

@dataclass(frozen=True)
class SceneLayout:
    """Boolean region masks for one scenario at IMAGE_SIZE x IMAGE_SIZE."""
    sky: np.ndarray
    road: np.ndarray
    lane: np.ndarray
    obstacle: np.ndarray
    sign: np.ndarray
    arrow: np.ndarray
    post: np.ndarray

    @property
    def drivable(self):
        return self.road & ~self.obstacle

    def region_index(self):
        """Per-pixel index into REGIONS; later regions paint over earlier ones."""
        idx = np.where(self.sky, 0, 1)
        idx = np.where(self.road, 2, idx)
        idx = np.where(self.lane, 3, idx)
        idx = np.where(self.obstacle, 4, idx)
        idx = np.where(self.sign, 5, idx)
        idx = np.where(self.arrow, 6, idx)
        idx = np.where(self.post, 7, idx)
        return idx


def _ground_rows(size):
    rows = np.arange(size, dtype=np.float64)
    t = (rows - HORIZON + 1) / (size - HORIZON)
    return np.where(rows >= HORIZON, t, 0.0)


def _road_center(t, curvature, size):
    """Column of the road centre line for ground rows with depth factor t > 0."""
    z = Z_NEAR / t
    return (size - 1) / 2.0 + 0.5 * curvature * z ** 2 * PX_PER_M * t


def _arrow_mask(dy, dx, direction):
    if direction == 0:
        shaft = (np.abs(dx) <= 1) & (dy >= -3) & (dy <= 5)
        s = -dy
        head = (s >= 3) & (s <= 6) & (np.abs(dx) <= 6 - s)
    else:
        shaft = (np.abs(dy) <= 1) & (np.abs(dx) <= 3)
        s = dx * direction
        head = (s >= 3) & (s <= 6) & (np.abs(dy) <= 6 - s)
    return shaft | head


def scene_layout(sd, size=IMAGE_SIZE):
    """Compute all region masks for a scenario (pure function of sd; read-only arrays)."""
    return _layout(_as_scenario(sd), size)


@functools.lru_cache(maxsize=256)
def _layout(sd, size):
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    t_rows = _ground_rows(size)
    ground = t_rows[:, None] > 0
    t = np.where(ground, t_rows[:, None], 1.0)

    scale = PX_PER_M * t
    center = _road_center(t, sd.road_curvature, size)
    lateral = (cols - center) / scale
    road_width = sd.lane_count * LANE_WIDTH

    road = ground & (np.abs(lateral) <= road_width / 2.0)

    lane = np.zeros((size, size), dtype=bool)
    half_stripe = np.maximum(STRIPE_WIDTH / 2.0, 0.5 / scale)
    for k in range(1, sd.lane_count):
        position = -road_width / 2.0 + k * LANE_WIDTH
        lane |= np.abs(lateral - position) <= half_stripe
    lane &= road

    obstacle = np.zeros((size, size), dtype=bool)
    if sd.obstacle_present:
        t_obs = Z_NEAR / OBSTACLE_DEPTH
        base_row = round(HORIZON - 1 + t_obs * (size - HORIZON))
        obs_scale = PX_PER_M * t_obs
        obs_center = _road_center(t_obs, sd.road_curvature, size) + sd.obstacle_lateral_offset * obs_scale
        width_px = OBSTACLE_SIZE[0] * obs_scale
        height_px = OBSTACLE_SIZE[1] * obs_scale
        obstacle = ((rows <= base_row) & (rows >= base_row - height_px)
                    & (np.abs(cols - obs_center) <= width_px / 2.0))

    sign = np.zeros((size, size), dtype=bool)
    arrow = np.zeros((size, size), dtype=bool)
    post = np.zeros((size, size), dtype=bool)
    if sd.decoy_sign_present:
        cy, cx = _SIGN_CENTER
        dy, dx = rows - cy, cols - cx
        face = np.abs(dy) + np.abs(dx) <= _SIGN_HALF
        direction = 0 if abs(sd.road_curvature) < 0.004 else int(np.sign(sd.road_curvature))
        arrow = face & _arrow_mask(dy, dx, direction)
        sign = face & ~arrow
        y0, y1, _, _ = DECOY_BOX
        post = (rows > cy + _SIGN_HALF) & (rows < y1) & (cols >= cx - 1) & (cols <= cx)

    masks = dict(sky=~ground, road=road, lane=lane, obstacle=obstacle, sign=sign, arrow=arrow, post=post)
    for mask in masks.values():
        mask.setflags(write=False)
    return SceneLayout(**masks)


def decoy_region(knobs=None, size=IMAGE_SIZE):
    """Boolean mask of pixels the decoy sign can influence under these knobs."""
    y0, y1, x0, x1 = DECOY_BOX
    pad = 0
    if knobs is not None and knobs.blur_radius > 0:
        pad = int(BLUR_TRUNCATE * knobs.blur_radius + 0.5)
    region = np.zeros((size, size), dtype=bool)
    region[max(0, y0 - pad):min(size, y1 + pad), max(0, x0 - pad):min(size, x1 + pad)] = True
    return region


def render_masks(sd, size=IMAGE_SIZE):
    """Ground truth: (drivable mask, lane-divider mask, steering label in radians)."""
    sd = _as_scenario(sd)
    layout = scene_layout(sd, size)
    return layout.drivable, layout.lane.copy(), steering_label(sd)


def steering_label(sd):
    angle = math.atan(LOOKAHEAD * sd.road_curvature)
    if sd.obstacle_present:
        o = sd.obstacle_lateral_offset / AVOID_SCALE
        angle -= AVOID_GAIN * o * math.exp(-0.5 * o * o)
    return angle


# =============================================================================
# Rendering
# =============================================================================

@functools.lru_cache(maxsize=64)
def _texture_fields(seed, size):
    """Seeded luminance texture (unit std) and per-channel sensor noise; read-only."""
    rng = Rng(seed)
    fine = rng.substream("texture-fine").normal(size=(size, size))
    coarse = ndimage.gaussian_filter(rng.substream("texture-coarse").normal(size=(size, size)), 2.0)
    coarse /= coarse.std() + 1e-12
    texture = 0.6 * fine + 0.4 * coarse
    noise = rng.substream("sensor-noise").normal(0.0, SENSOR_NOISE, size=(size, size, 3))
    texture.setflags(write=False)
    noise.setflags(write=False)
    return texture, noise


def _palette_image(layout, palette, sd, size):
    regions = layout.region_index()
    colours = np.zeros((len(REGIONS), 3))
    for i, name in enumerate(REGIONS[1:], start=1):
        colours[i] = palette[name]
    img = colours[regions]

    light = 0.55 + 0.45 * math.sin(math.radians(sd.sun_elevation))
    img *= light

    height = np.clip(np.arange(size) / max(HORIZON - 1, 1), 0.0, 1.0)[:, None]
    sky = (1.0 - height) * SKY_TOP + height * SKY_HORIZON
    sky = sky * (0.8 + 0.2 * math.sin(math.radians(sd.sun_elevation)))
    sky_img = np.broadcast_to(sky[:, None, :], (size, size, 3))
    return np.where((regions == 0)[:, :, None], sky_img, img)


def _compose(sd, seed, style_strength, texture_gain, size=IMAGE_SIZE):
    layout = scene_layout(sd, size)
    texture, noise = _texture_fields(seed, size)
    amplitude = np.array([TEXTURE_AMPLITUDE[name] for name in REGIONS])[layout.region_index()]
    detail = (texture_gain * amplitude * texture)[:, :, None]

    synth = _palette_image(layout, SYNTH_PALETTE, sd, size) * (1.0 + 0.5 * detail)
    real = _palette_image(layout, REAL_PALETTE, sd, size) * (1.0 + detail) + texture_gain * noise
    img = (1.0 - style_strength) * synth + style_strength * real
    return np.clip(img, 0.0, 1.0)


def post_process(img, knobs):
    """Contrast about mid-grey, brightness offset, Gaussian blur, then clamp."""
    out = img
    # neutral settings leave pixels bit-identical
    if knobs.contrast != 1.0 or knobs.brightness != 0.0:
        out = np.clip((img - 0.5) * knobs.contrast + 0.5 + knobs.brightness, 0.0, 1.0)
    if knobs.blur_radius > 0:
        sigma = (knobs.blur_radius, knobs.blur_radius, 0.0)
        out = ndimage.gaussian_filter(out, sigma=sigma, mode="nearest", truncate=BLUR_TRUNCATE)
    return np.clip(out, 0.0, 1.0)


def render_real(sd, rng, size=IMAGE_SIZE):
    """Real-style reference render, deterministic in (sd, rng.seed)."""
    sd = _as_scenario(sd)
    return _compose(sd, rng.seed, style_strength=1.0, texture_gain=1.0, size=size)


def render_synthetic(sd, knobs, size=IMAGE_SIZE):
    """Synthetic-style render x_s = G_knobs(sd), deterministic in (sd, knobs)."""
    sd = _as_scenario(sd)
    if not isinstance(knobs, GeneratorKnobs):
        knobs = GeneratorKnobs(**knobs)
    img = _compose(sd, knobs.seed, knobs.style_strength, knobs.texture_gain, size=size)
    return post_process(img, knobs)


def real_candidates(sd, seed, k=1, size=IMAGE_SIZE):
    """Empirical RW(sd): k real-style renders; candidate 0 is the canonical one."""
    root = Rng(seed)
    rngs = [root] + [root.substream("rw-candidate", j) for j in range(1, k)]
    return [render_real(sd, r, size) for r in rngs]


def _as_scenario(sd):
    if isinstance(sd, ScenarioDescription):
        return sd
    if isinstance(sd, dict):
        return ScenarioDescription(**sd)
    return ScenarioDescription.from_attributes(sd)


# =============================================================================
# Scenario sampling and paired datasets
# =============================================================================

def sample_scenario_grid(n, rng, decoy_fraction=0.25):
    """Low-discrepancy (scrambled Halton) scenarios covering every attribute range."""
    if n < 1:
        raise ValueError("n must be >= 1")
    # qmc engines spawn child streams from the seed, so they take a plain integer
    grid_seed = int(rng.substream("scenario-grid").integers(0, 2 ** 63))
    sampler = qmc.Halton(d=6, scramble=True, seed=grid_seed)
    u = sampler.random(n)
    scenarios = []
    for row in u:
        scenarios.append(ScenarioDescription(
            road_curvature=float(np.clip(-0.02 + 0.04 * row[0], -0.02, 0.02)),
            lane_count=int(min(2 + math.floor(3 * row[1]), 4)),
            sun_elevation=float(np.clip(5.0 + 80.0 * row[2], 5.0, 85.0)),
            obstacle_lateral_offset=float(np.clip(-3.0 + 6.0 * row[3], -3.0, 3.0)),
            obstacle_present=bool(row[4] < 0.5),
            decoy_sign_present=bool(row[5] < decoy_fraction),
        ))
    return scenarios


def split_indices(n, ratio, rng):
    """Disjoint (calibration, held-out) index lists; calibration gets round(ratio*n)."""
    n_cal = int(math.floor(ratio * n + 0.5))
    order = rng.substream("split").permutation(n)
    return sorted(int(i) for i in order[:n_cal]), sorted(int(i) for i in order[n_cal:])


def sample_initial_knobs(rng):
    """Uncalibrated baseline knobs: a deliberate, varied domain gap."""
    return GeneratorKnobs(
        seed=int(rng.integers(0, 2 ** 63)),
        style_strength=rng.uniform(0.0, 0.4),
        contrast=rng.uniform(0.85, 1.25),
        brightness=rng.uniform(-0.08, 0.08),
        blur_radius=rng.uniform(0.0, 1.2),
        texture_gain=rng.uniform(0.2, 0.6),
    )


@dataclass(frozen=True)
class SyntheticContext:
    """Everything a calibrator may see at inference: no real image."""
    id: str
    sd: ScenarioDescription
    x_s_init: np.ndarray
    knobs_init: GeneratorKnobs


@dataclass(frozen=True)
class PairedSample:
    id: str
    sd: ScenarioDescription
    x_r: np.ndarray
    x_s_init: np.ndarray
    knobs_init: GeneratorKnobs
    split: str = "calibration"
    real_seed: int = 0
    rw: Optional[List[np.ndarray]] = field(default=None, compare=False)

    def __post_init__(self):
        if self.x_r.shape != self.x_s_init.shape:
            raise ValueError(f"{self.id}: x_r {self.x_r.shape} and x_s_init {self.x_s_init.shape} differ")

    def candidates(self):
        return self.rw if self.rw else [self.x_r]

    def context(self):
        return SyntheticContext(self.id, self.sd, self.x_s_init, self.knobs_init)


def build_paired_dataset(n, seed, ratio=0.8, decoy_fraction=0.25, rw_candidates=1, size=IMAGE_SIZE):
    """Render n (real, synthetic-init) pairs with an 80/20-style split."""
    root = Rng(seed)
    scenarios = sample_scenario_grid(n, root, decoy_fraction)
    calibration, _ = split_indices(n, ratio, root)
    calibration = set(calibration)
    samples = []
    for i, sd in enumerate(scenarios):
        real_seed = root.substream("real", i).seed
        rw = real_candidates(sd, real_seed, rw_candidates, size)
        knobs = sample_initial_knobs(root.substream("knobs", i))
        samples.append(PairedSample(
            id=f"pair-{i:05d}",
            sd=sd,
            x_r=rw[0],
            x_s_init=render_synthetic(sd, knobs, size),
            knobs_init=knobs,
            split="calibration" if i in calibration else "heldout",
            real_seed=real_seed,
            rw=rw if rw_candidates > 1 else None,
        ))
    return samples
