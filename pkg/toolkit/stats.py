"""
Statistical protocol: Spearman rank correlation with bootstrap CIs, one-sided
non-inferiority tests against pre-declared margins, and calibrated-minus-
baseline effect tables.

Every bootstrap draws its resample indices from a seeded Rng substream and
reduces in resample order, so intervals are reproducible.
"""

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.stats import rankdata

from numerics import Rng

BOOTSTRAP_RESAMPLES = 2000
MIN_SPEARMAN_SAMPLES = 5
MIN_NI_SAMPLES = 10

# metric pairs reported in the coupling table
METRIC_PAIRS = (
    ("ov_score", "dff_distance"),
    ("iv_score", "dff_distance"),
    ("iv_score", "ov_score"),
)


class CorrelationResult(BaseModel):
    """rho with its reported CI.

    boot_low and boot_high are the raw percentile bounds; the reported CI is
    their hull with rho, and widened is set when that hull differs from them.
    """
    model_config = ConfigDict(frozen=True)

    rho: float = Field(ge=-1, le=1)
    ci_low: float
    ci_high: float
    boot_low: float
    boot_high: float
    widened: bool
    n: int

    @model_validator(mode="after")
    def _ordered(self):
        if not self.ci_low <= self.rho <= self.ci_high:
            raise ValueError(f"CI [{self.ci_low}, {self.ci_high}] does not contain rho={self.rho}")
        if self.widened == (self.boot_low <= self.rho <= self.boot_high):
            raise ValueError("widened flag disagrees with the bootstrap bounds")
        return self


class NiResult(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    delta_mean: float
    ci_low_one_sided: float
    margin: float
    alpha: float
    n: int
    passed: bool = Field(alias="pass")

    @model_validator(mode="after")
    def _consistent(self):
        if self.passed != (self.ci_low_one_sided > self.margin):
            raise ValueError("pass flag disagrees with the lower bound and margin")
        return self


def _row_pearson(a, b):
    """Pearson per row of two (rows, n) arrays; nan where a row is constant."""
    a = a - a.mean(axis=1, keepdims=True)
    b = b - b.mean(axis=1, keepdims=True)
    denom = np.sqrt((a * a).sum(axis=1) * (b * b).sum(axis=1))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = (a * b).sum(axis=1) / denom
    return np.clip(np.where(denom > 0, r, np.nan), -1.0, 1.0)


def spearman(xs, ys, seed=0, resamples=BOOTSTRAP_RESAMPLES, confidence=0.95):
    """Spearman rho (average ranks for ties) with a percentile bootstrap CI."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError(f"spearman needs two equal-length 1-D samples, got {xs.shape} and {ys.shape}")
    n = xs.size
    if n < MIN_SPEARMAN_SAMPLES:
        raise ValueError(f"spearman needs at least {MIN_SPEARMAN_SAMPLES} pairs, got {n}")

    rho = _row_pearson(rankdata(xs)[None], rankdata(ys)[None])[0]
    rho = 0.0 if np.isnan(rho) else float(rho)

    idx = Rng(seed).substream("spearman-bootstrap").integers(0, n, size=(resamples, n))
    boot = _row_pearson(rankdata(xs[idx], axis=1), rankdata(ys[idx], axis=1))
    boot = boot[~np.isnan(boot)]
    if boot.size == 0:
        low = high = rho
    else:
        tail = 100.0 * (1.0 - confidence) / 2.0
        low, high = (float(v) for v in np.percentile(boot, [tail, 100.0 - tail]))
    return CorrelationResult(rho=rho, ci_low=min(low, rho), ci_high=max(high, rho), boot_low=low, boot_high=high,
                             widened=not low <= rho <= high, n=n)


def non_inferiority(deltas, margin, alpha=0.05, seed=0, resamples=BOOTSTRAP_RESAMPLES):
    """One-sided bootstrap lower bound on the mean delta; passes iff it exceeds margin."""
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.ndim != 1 or deltas.size < MIN_NI_SAMPLES:
        raise ValueError(f"non-inferiority needs at least {MIN_NI_SAMPLES} deltas, got {deltas.size}")
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    idx = Rng(seed).substream("ni-bootstrap").integers(0, deltas.size, size=(resamples, deltas.size))
    means = deltas[idx].mean(axis=1)
    lower = float(np.percentile(means, 100.0 * alpha))
    return NiResult(delta_mean=float(deltas.mean()), ci_low_one_sided=lower, margin=float(margin),
                    alpha=alpha, n=int(deltas.size), passed=lower > margin)


# =============================================================================
# Effects (calibrated minus baseline)
# =============================================================================

def paired_deltas(baseline, calibrated):
    """Per-pair (iv_score, ov_score, dff_distance) differences in pair-id order."""
    base = {r.pair_id: r for r in baseline}
    cal = {r.pair_id: r for r in calibrated}
    if set(base) != set(cal) or len(base) != len(baseline) or len(cal) != len(calibrated):
        unmatched = sorted(set(base) ^ set(cal))
        raise ValueError(f"records are not paired one-to-one by pair id (unmatched: {unmatched[:5]})")
    ids = sorted(base)
    return {
        "pair_ids": ids,
        "iv": np.array([cal[i].iv_score - base[i].iv_score for i in ids]),
        "ov": np.array([cal[i].ov_score - base[i].ov_score for i in ids]),
        "dff": np.array([cal[i].dff_distance - base[i].dff_distance for i in ids]),
    }


def effect_table(baseline, calibrated):
    """Mean deltas; positive delta_iv/delta_ov and negative delta_dff are improvements."""
    deltas = paired_deltas(baseline, calibrated)
    if not deltas["pair_ids"]:
        raise ValueError("effect_table needs at least one paired record")
    return {
        "delta_iv": float(deltas["iv"].mean()),
        "delta_ov": float(deltas["ov"].mean()),
        "delta_dff": float(deltas["dff"].mean()),
        "n": len(deltas["pair_ids"]),
    }


def correlation_table(records, seed=0, pairs=METRIC_PAIRS, resamples=BOOTSTRAP_RESAMPLES, confidence=0.95):
    """Spearman result for every metric pair, keyed "a~b"."""
    table = {}
    for a, b in pairs:
        xs = [getattr(r, a) for r in records]
        ys = [getattr(r, b) for r in records]
        table[f"{a}~{b}"] = spearman(xs, ys, seed=seed, resamples=resamples, confidence=confidence).model_dump()
    return table
