"""
Run configuration: a plain-text INI file with [scene], [cf], [fidelity],
[calibration] and [stats] sections, validated into one frozen model.

Missing keys take the defaults below; unknown sections or keys are rejected.
The config hash (12 hex chars of the canonical JSON) is written into every
artifact so outputs from different configurations are never combined.
"""

import configparser
import os
from typing import Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from calibration import CalibrationConfig
from cf_explainer import CfConfig
from fidelity import Thresholds
from toolkit_utils import ConfigurationError, short_hash

DEFAULT_CONFIG_PATH = os.path.join(os.path.dirname(__file__), "default.ini")


class SceneConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    pairs: int = Field(200, ge=1)
    seed: int = Field(7, ge=0, lt=2 ** 64)
    split_ratio: float = Field(0.8, gt=0, lt=1)
    decoy_fraction: float = Field(0.25, ge=0, le=1)
    rw_candidates: int = Field(1, ge=1)


class FidelityConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    eps_in: float = Field(0.25, gt=0)
    eps_out: float = Field(0.3, gt=0)
    eps_dff: float = Field(0.3, gt=0)
    eps_lf: Optional[float] = Field(None, gt=0)
    thresholds: str = "user"

    @field_validator("thresholds")
    @classmethod
    def _mode(cls, value):
        parse_threshold_mode(value)
        return value

    def user_thresholds(self):
        return Thresholds(eps_in=self.eps_in, eps_out=self.eps_out, eps_dff=self.eps_dff,
                          eps_lf=self.eps_lf, provenance="user")


class StatsConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    bootstrap_resamples: int = Field(2000, ge=100)
    confidence: float = Field(0.95, gt=0, lt=1)
    ni_alpha: float = Field(0.05, gt=0, lt=1)
    seed: int = Field(0, ge=0)


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    scene: SceneConfig = SceneConfig()
    cf: CfConfig = CfConfig()
    fidelity: FidelityConfig = FidelityConfig()
    calibration: CalibrationConfig = CalibrationConfig()
    stats: StatsConfig = StatsConfig()

    def config_hash(self):
        return short_hash(self.model_dump(mode="json"))

    def with_overrides(self, seed=None, thresholds=None):
        """Effective config after CLI flags; overrides are part of the hash."""
        config = self
        if seed is not None:
            config = config.model_copy(update={"scene": config.scene.model_copy(update={"seed": seed})})
        if thresholds is not None:
            parse_threshold_mode(thresholds)
            config = config.model_copy(
                update={"fidelity": config.fidelity.model_copy(update={"thresholds": thresholds})})
        return config


def parse_threshold_mode(text):
    """"user" -> ("user", ()); "percentile:90,95" -> ("percentile", (90.0, 95.0))."""
    if text == "user":
        return "user", ()
    mode, _, rest = text.partition(":")
    if mode != "percentile" or not rest:
        raise ValueError(f"thresholds must be 'user' or 'percentile:p1,p2,...', got {text!r}")
    try:
        percentiles = tuple(float(p) for p in rest.split(","))
    except ValueError:
        raise ValueError(f"bad percentile list in {text!r}")
    if any(not 0 < p <= 100 for p in percentiles):
        raise ValueError(f"percentiles must lie in (0, 100], got {percentiles}")
    return "percentile", percentiles


def parse_config_text(text, source="<string>"):
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigurationError(f"{source}: {e}")

    known = set(RunConfig.model_fields)
    unknown = [s for s in parser.sections() if s not in known]
    if unknown:
        raise ConfigurationError(f"{source}: unknown section(s) {unknown}")

    sections = {}
    for name in parser.sections():
        sections[name] = {k: v for k, v in parser[name].items() if v.strip() != ""}
    try:
        return RunConfig(**sections)
    except ValidationError as e:
        raise ConfigurationError(f"{source}: {e}")


def load_config(path=None):
    """Validated RunConfig from an INI file (defaults when path is None)."""
    if path is None:
        return RunConfig()
    try:
        with open(path) as f:
            text = f.read()
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}")
    return parse_config_text(text, path)


def config_summary(config) -> Tuple[str, ...]:
    return (
        f"pairs={config.scene.pairs} seed={config.scene.seed} split={config.scene.split_ratio}",
        f"cf: k={config.cf.k_cf} steps={config.cf.steps} infill={config.cf.infill}",
        f"thresholds: {config.fidelity.thresholds}",
        f"config hash: {config.config_hash()}",
    )
