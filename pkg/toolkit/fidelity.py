"""
Fidelity metrics: IV (input), OV (output), LF (latent) and DFF distances,
their threshold predicates, percentile threshold calibration and pass-rates.

Acceptance for virtual testing is IV and OV and DFF. LF is computed and
reported but never gates the verdict.
"""

import math
from typing import Dict, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from numerics import mse, perceptual_distance

OV_SCORE_RATE = 5.0
MIN_CALIBRATION_SAMPLES = 20


class Thresholds(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    eps_in: float = Field(0.25, gt=0)
    # distance on the score scale: OV passes iff 1 - ov_score <= eps_out
    eps_out: float = Field(0.3, gt=0)
    eps_dff: float = Field(0.3, gt=0)
    eps_lf: Optional[float] = Field(None, gt=0)
    provenance: str = "user"


class FidelityRecord(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    pair_id: str
    split: str = "heldout"
    iv_distance: float = Field(ge=0)
    iv_score: float = Field(ge=0, le=1)
    rw_index: int = 0
    ov_distance: float = Field(ge=0)
    ov_score: float = Field(ge=0, le=1)
    lf_distances: Dict[str, float] = Field(default_factory=dict)
    dff_distance: float = Field(ge=0)
    pass_iv: bool
    pass_ov: bool
    pass_dff: bool
    pass_lf: Optional[bool] = None
    pass_all: bool

    @property
    def lf_max(self):
        return max(self.lf_distances.values()) if self.lf_distances else 0.0


# =============================================================================
# Per-criterion checks
# =============================================================================

def iv_score(distance):
    return 1.0 - min(max(distance, 0.0), 1.0)


def iv_check(x_s, rw, eps_in):
    """Nearest real candidate by perceptual distance: (min distance, index, pass).

    Ties go to the lowest index.
    """
    if len(rw) == 0:
        raise ValueError("the real-candidate set must not be empty")
    distances = [perceptual_distance(x_s, x_r) for x_r in rw]
    index = int(np.argmin(distances))
    return distances[index], index, distances[index] <= eps_in


def ov_distance_and_score(kind, out_s, out_r):
    """Task loss and similarity score between two SUT outputs of one kind."""
    if out_s.kind != kind or out_r.kind != kind:
        raise ValueError(f"output kinds ({out_s.kind}, {out_r.kind}) do not match {kind!r}")
    if kind == "steering":
        diff = abs(out_s.angle - out_r.angle)
        return diff * diff, math.exp(-OV_SCORE_RATE * diff)
    if kind == "segmentation":
        mask_s = out_s.values > 0
        mask_r = out_r.values > 0
        union = np.logical_or(mask_s, mask_r).sum()
        # two empty masks agree perfectly
        iou = 1.0 if union == 0 else float(np.logical_and(mask_s, mask_r).sum() / union)
        return 1.0 - iou, iou
    raise ValueError(f"unknown SUT kind {kind!r}")


def lf_check(acts_s, acts_r, eps_lf=None):
    """Per-tap activation MSE; passes only if every tap is within eps_lf."""
    if set(acts_s) != set(acts_r):
        raise ValueError(f"tap sets differ: {sorted(acts_s)} vs {sorted(acts_r)}")
    distances = {str(layer): mse(acts_s[layer], acts_r[layer]) for layer in sorted(acts_s)}
    if eps_lf is None:
        return distances, None
    return distances, all(d <= eps_lf for d in distances.values())


def dff_check(dff_distance, eps_dff):
    return dff_distance <= eps_dff


# =============================================================================
# Records and acceptance
# =============================================================================

def build_record(pair_id, iv_distance, rw_index, ov_distance, ov_score, lf_distances,
                 dff_distance, thresholds, split="heldout"):
    """Assemble a record whose pass flags follow from the distances and thresholds."""
    iv_distance = max(float(iv_distance), 0.0)
    lf_distances = {str(k): float(v) for k, v in lf_distances.items()}
    pass_iv = iv_distance <= thresholds.eps_in
    pass_ov = 1.0 - ov_score <= thresholds.eps_out
    pass_dff = dff_check(dff_distance, thresholds.eps_dff)
    pass_lf = None
    if thresholds.eps_lf is not None:
        pass_lf = all(d <= thresholds.eps_lf for d in lf_distances.values())
    return FidelityRecord(
        pair_id=pair_id, split=split,
        iv_distance=iv_distance, iv_score=iv_score(iv_distance), rw_index=rw_index,
        ov_distance=float(ov_distance), ov_score=float(ov_score),
        lf_distances=lf_distances, dff_distance=float(dff_distance),
        pass_iv=pass_iv, pass_ov=pass_ov, pass_dff=pass_dff, pass_lf=pass_lf,
        pass_all=pass_iv and pass_ov and pass_dff,
    )


def rethreshold(record, thresholds):
    """The same measurements judged against different thresholds."""
    return build_record(record.pair_id, record.iv_distance, record.rw_index, record.ov_distance,
                        record.ov_score, record.lf_distances, record.dff_distance, thresholds,
                        split=record.split)


def acceptability(record, thresholds):
    """Top-level verdict and per-criterion breakdown (LF reported, not gating)."""
    missing = [name for name in ("iv_distance", "ov_score", "dff_distance")
               if getattr(record, name, None) is None]
    if missing:
        raise ValueError(f"record {getattr(record, 'pair_id', '?')} lacks {missing}")
    judged = rethreshold(record, thresholds)
    breakdown = {"iv": judged.pass_iv, "ov": judged.pass_ov, "dff": judged.pass_dff, "lf": judged.pass_lf}
    return judged.pass_all, breakdown


# =============================================================================
# Thresholds and pass-rates
# =============================================================================

def calibrate_thresholds(distances, percentiles=(90, 95)):
    """Empirical percentiles (linear interpolation between order statistics)."""
    distances = np.asarray(distances, dtype=np.float64)
    if distances.size < MIN_CALIBRATION_SAMPLES:
        raise ValueError(f"need at least {MIN_CALIBRATION_SAMPLES} distances, got {distances.size}")
    if any(not 0 <= p <= 100 for p in percentiles):
        raise ValueError(f"percentiles must lie in [0, 100], got {percentiles}")
    values = np.percentile(distances, list(percentiles), method="linear")
    return tuple(float(v) for v in values)


def _dff_values(records):
    return np.array([r.dff_distance if hasattr(r, "dff_distance") else float(r) for r in records])


def pass_rate(records, eps_dff):
    """Fraction of records with dff_distance <= eps_dff."""
    if len(records) == 0:
        raise ValueError("pass_rate needs at least one record")
    return float(np.mean(_dff_values(records) <= eps_dff))


def empirical_cdf(distances):
    """(epsilon, P(D <= epsilon)) at every distinct distance, ascending."""
    values = np.sort(np.asarray(distances, dtype=np.float64))
    if values.size == 0:
        return []
    unique = np.unique(values)
    counts = np.searchsorted(values, unique, side="right")
    return [(float(eps), float(c / values.size)) for eps, c in zip(unique, counts)]
