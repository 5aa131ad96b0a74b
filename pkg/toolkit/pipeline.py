"""
Pipeline commands behind run_dff.py.

    generate   render the paired dataset, write images + manifest.json
    evaluate   IV/OV/LF/DFF for every pair under one SUT and variant
    calibrate  train a calibrator variant, then score it on the held-out split
    report     plain-text tables and CDF points from evaluate/calibrate outputs

Layout under --out:
    manifest.json
    images/{pair}_real.mfid, images/{pair}_synth.mfid   ({pair}_real{j}.mfid for extra candidates)
    previews/{pair}_real.png, previews/{pair}_synth.png (generate --previews)
    cache/*.mfdm                                        (MFID_CACHE_DIR overrides)
    eval/{sut}-{variant}.csv, eval/{sut}-{variant}.json
    calibration/{sut}-{variant}.mfck, .log.csv, .json
    report/summary.txt, report/cdf.csv

Every JSON artifact carries toolkit_version and config_hash; every CSV
starts with a "# toolkit_version=... config_hash=..." line. Nothing
time- or path-dependent is written, so reruns are byte-identical.
"""

import asyncio
import csv
import io
import json
import os
from dataclasses import dataclass
from typing import Dict, List

import numpy as np
from dotenv import load_dotenv

from calibration import apply_calibrator, load_checkpoint, train_calibrator, training_run_hash
from cf_explainer import MapCache, decisive_map, dff_distance
from fidelity import (build_record, calibrate_thresholds, iv_check, lf_check, ov_distance_and_score,
                      pass_rate)
from image_io import read_raw, write_png, write_raw
from numerics import Rng
from report import cdf_rows, format_cdf_csv, format_summary
from run_config import parse_threshold_mode
from scene_gen import IMAGE_SIZE, GeneratorKnobs, PairedSample, ScenarioDescription, build_paired_dataset
from stats import MIN_NI_SAMPLES, MIN_SPEARMAN_SAMPLES, correlation_table, effect_table, non_inferiority, paired_deltas
from sut import forward_with_taps, load_weights
from toolkit_utils import (TOOLKIT_VERSION, ConfigurationError, ContractViolation, CorruptFileError,
                           atomic_write_text, provenance_line, short_hash, write_json)

load_dotenv()

TOOLKIT_DIR = os.path.dirname(os.path.abspath(__file__))
MANIFEST_NAME = "manifest.json"
SPLITS = ("calibration", "heldout")
VARIANTS = ("baseline", "ovf", "dff")
CALIBRATED_VARIANTS = ("ovf", "dff")
# percentile thresholds must stay strictly positive
THRESHOLD_FLOOR = 1e-12

CSV_FIELDS = ("pair_id", "iv_distance", "iv_score", "ov_loss", "ov_score", "dff", "lf_max",
              "pass_iv", "pass_ov", "pass_dff", "pass_all", "split")


@dataclass(frozen=True)
class PairMeasurement:
    """Raw distances for one pair, before any threshold is applied."""
    pair_id: str
    split: str
    iv_distance: float
    rw_index: int
    ov_distance: float
    ov_score: float
    lf_distances: Dict[str, float]
    dff_distance: float


# =============================================================================
# Locations
# =============================================================================

def weights_path(entry, weights_dir=None):
    """Weight file for a registry entry; --weights-dir or $MFID_WEIGHTS_DIR replace the directory."""
    override = weights_dir or os.getenv("MFID_WEIGHTS_DIR")
    if override:
        return os.path.join(override, os.path.basename(entry["weights"]))
    return os.path.join(TOOLKIT_DIR, entry["weights"])


def cache_dir(out_dir):
    return os.getenv("MFID_CACHE_DIR") or os.path.join(out_dir, "cache")


def open_cache(out_dir):
    directory = cache_dir(out_dir)
    if not os.path.isdir(directory):
        print(f"  Cache directory {directory} missing; creating it")
    return MapCache(directory)


def eval_paths(out_dir, sut_key, variant):
    stem = os.path.join(out_dir, "eval", f"{sut_key}-{variant}")
    return stem + ".csv", stem + ".json"


def calibration_paths(out_dir, sut_key, variant):
    stem = os.path.join(out_dir, "calibration", f"{sut_key}-{variant}")
    return {"checkpoint": stem + ".mfck", "log": stem + ".log.csv", "summary": stem + ".json"}


def load_sut(sut_key, entry, weights_dir=None):
    path = weights_path(entry, weights_dir)
    if not os.path.exists(path):
        raise FileNotFoundError(f"weights for {sut_key} not found at {path}; run: python train_suts.py {sut_key}")
    sut = load_weights(path)
    if sut.kind != entry["kind"]:
        raise ConfigurationError(f"{path} holds a {sut.kind} SUT but registry entry {sut_key} is {entry['kind']}")
    return sut


# =============================================================================
# Dataset and manifest
# =============================================================================

def scene_hash(config):
    return short_hash(config.scene.model_dump())


def generate(config, out_dir, previews=False):
    """Render every pair and write images plus manifest.json; returns the manifest."""
    scene = config.scene
    samples = build_paired_dataset(scene.pairs, scene.seed, scene.split_ratio, scene.decoy_fraction,
                                   scene.rw_candidates)
    pairs = []
    for sample in samples:
        candidates = sample.candidates()
        real_paths = [f"images/{sample.id}_real.mfid"]
        real_paths += [f"images/{sample.id}_real{j}.mfid" for j in range(1, len(candidates))]
        synth_path = f"images/{sample.id}_synth.mfid"
        for rel, img in zip(real_paths, candidates):
            write_raw(os.path.join(out_dir, rel), img)
        write_raw(os.path.join(out_dir, synth_path), sample.x_s_init)
        if previews:
            write_png(os.path.join(out_dir, "previews", f"{sample.id}_real.png"), sample.x_r)
            write_png(os.path.join(out_dir, "previews", f"{sample.id}_synth.png"), sample.x_s_init)
        pairs.append({
            "id": sample.id,
            "sd": sample.sd.model_dump(),
            "real": real_paths[0],
            "rw": real_paths,
            "synthetic": synth_path,
            "knobs": sample.knobs_init.model_dump(),
            "split": sample.split,
            "real_seed": sample.real_seed,
        })

    manifest = {
        "toolkit_version": TOOLKIT_VERSION,
        "config_hash": config.config_hash(),
        "scene_hash": scene_hash(config),
        "image_size": IMAGE_SIZE,
        "counts": {split: sum(1 for p in pairs if p["split"] == split) for split in SPLITS},
        "pairs": pairs,
    }
    write_json(os.path.join(out_dir, MANIFEST_NAME), manifest)
    return manifest


def load_manifest(path):
    """(manifest dict, PairedSample list); image paths resolve relative to the manifest."""
    try:
        with open(path) as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise CorruptFileError(f"{path}: not valid JSON ({e})")
    base = os.path.dirname(os.path.abspath(path))
    images = {}

    def image(rel):
        if rel not in images:
            images[rel] = read_raw(os.path.join(base, rel))
        return images[rel]

    samples = []
    for rec in manifest.get("pairs", []):
        if rec["split"] not in SPLITS:
            raise ValueError(f"{path}: pair {rec['id']} has unknown split {rec['split']!r}")
        rw_paths = rec.get("rw") or [rec["real"]]
        samples.append(PairedSample(
            id=rec["id"],
            sd=ScenarioDescription(**rec["sd"]),
            x_r=image(rec["real"]),
            x_s_init=image(rec["synthetic"]),
            knobs_init=GeneratorKnobs(**rec["knobs"]),
            split=rec["split"],
            real_seed=int(rec.get("real_seed", 0)),
            rw=[image(p) for p in rw_paths] if len(rw_paths) > 1 else None,
        ))
    if not samples:
        raise ConfigurationError(f"{path}: manifest lists no pairs")
    return manifest, samples


def check_manifest(manifest, config):
    """Refuse a manifest rendered under a different [scene] section."""
    recorded = manifest.get("scene_hash")
    if recorded is not None and recorded != scene_hash(config):
        raise ConfigurationError(
            f"manifest was generated with a different [scene] config ({recorded} != {scene_hash(config)}); "
            "rerun generate or pass the same --config/--seed")


# =============================================================================
# Measurement
# =============================================================================

def measure_pair(sample, x_s, sut, cf, cache, eps_in):
    iv_distance, rw_index, _ = iv_check(x_s, sample.candidates(), eps_in)
    out_s, acts_s = forward_with_taps(sut, x_s)
    out_r, acts_r = forward_with_taps(sut, sample.x_r)
    ov_loss, ov_score = ov_distance_and_score(sut.kind, out_s, out_r)
    lf_distances, _ = lf_check(acts_s, acts_r)
    dff = dff_distance(decisive_map(sut, sample.x_r, cf, cache), decisive_map(sut, x_s, cf, cache))
    return PairMeasurement(sample.id, sample.split, float(iv_distance), int(rw_index), float(ov_loss),
                           float(ov_score), lf_distances, float(dff))


def _progress(m):
    print(f"  {m.pair_id}: iv={m.iv_distance:.4f} ov_score={m.ov_score:.4f} dff={m.dff_distance:.6f}")


async def _measure_batch(batch, sut, cf, cache, eps_in):
    # gather keeps input order, so results never depend on completion order
    return await asyncio.gather(*(asyncio.to_thread(measure_pair, s, x, sut, cf, cache, eps_in) for s, x in batch))


def measure_pairs(samples, images, sut, cf, cache, eps_in, jobs=1) -> List[PairMeasurement]:
    """Measure every pair, jobs at a time; progress is printed in pair order."""
    pairs = list(zip(samples, images))
    size = max(jobs, 1)
    results = []
    for start in range(0, len(pairs), size):
        batch = pairs[start:start + size]
        if jobs <= 1:
            done = [measure_pair(s, x, sut, cf, cache, eps_in) for s, x in batch]
        else:
            done = asyncio.run(_measure_batch(batch, sut, cf, cache, eps_in))
        for m in done:
            _progress(m)
        results.extend(done)
    return results


def to_records(measurements, thresholds):
    return [build_record(m.pair_id, m.iv_distance, m.rw_index, m.ov_distance, m.ov_score,
                         m.lf_distances, m.dff_distance, thresholds, split=m.split)
            for m in measurements]


def resolve_thresholds(config, measurements):
    """(Thresholds, {level: eps_dff}); percentile levels come from the calibration split only."""
    mode, percentiles = parse_threshold_mode(config.fidelity.thresholds)
    user = config.fidelity.user_thresholds()
    if mode == "user":
        return user, {"user": user.eps_dff}
    distances = [m.dff_distance for m in measurements if m.split == "calibration"]
    eps = [max(e, THRESHOLD_FLOOR) for e in calibrate_thresholds(distances, percentiles)]
    levels = {f"p{p:g}": e for p, e in zip(percentiles, eps)}
    provenance = f"{config.fidelity.thresholds} of calibration-split dff (n={len(distances)})"
    return user.model_copy(update={"eps_dff": eps[-1], "provenance": provenance}), levels


def pass_rates(records, levels):
    rates = {}
    for split in SPLITS:
        subset = [r for r in records if r.split == split]
        if not subset:
            continue
        rates[split] = {
            "n": len(subset),
            "pass_iv": float(np.mean([r.pass_iv for r in subset])),
            "pass_ov": float(np.mean([r.pass_ov for r in subset])),
            "pass_dff": float(np.mean([r.pass_dff for r in subset])),
            "pass_all": float(np.mean([r.pass_all for r in subset])),
            "dff_at": {name: pass_rate(subset, eps) for name, eps in levels.items()},
        }
    return rates


def _flag(value):
    return "true" if value else "false"


def format_records_csv(records, config_hash):
    buffer = io.StringIO()
    buffer.write(provenance_line(config_hash))
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for r in records:
        writer.writerow([r.pair_id, repr(r.iv_distance), repr(r.iv_score), repr(r.ov_distance),
                         repr(r.ov_score), repr(r.dff_distance), repr(float(r.lf_max)),
                         _flag(r.pass_iv), _flag(r.pass_ov), _flag(r.pass_dff), _flag(r.pass_all), r.split])
    return buffer.getvalue()


# =============================================================================
# evaluate
# =============================================================================

def calibration_rng(config):
    return Rng(config.scene.seed).substream("calibrator")


def variant_calibration(calibration, variant):
    """Effective calibration config: the OV-only variant drops the DFF term."""
    if variant == "ovf":
        return calibration.model_copy(update={"lambda_dff": 0.0})
    return calibration


def load_calibrator(config, samples, sut, sut_key, variant, out_dir):
    """Trained calibrator params for a variant, checked against this run's data and config."""
    path = calibration_paths(out_dir, sut_key, variant)["checkpoint"]
    if not os.path.exists(path):
        raise ConfigurationError(f"no {variant} calibrator for {sut_key} at {path}; run calibrate first")
    state = load_checkpoint(path)
    cfg = variant_calibration(config.calibration, variant)
    dataset = [s for s in samples if s.split == "calibration"]
    expected = training_run_hash(dataset, sut, cfg, calibration_rng(config), config.cf)
    if state.config_hash != expected:
        raise ConfigurationError(f"{path} was trained under a different config or manifest")
    if state.step < cfg.total_steps:
        raise ConfigurationError(f"{path} stopped at step {state.step}/{cfg.total_steps}; rerun calibrate")
    return state.params


def evaluate(config, manifest_path, sut_key, entry, out_dir, variant="baseline", jobs=1, weights_dir=None):
    """Score every manifest pair; writes the per-pair CSV and the aggregate JSON."""
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    manifest, samples = load_manifest(manifest_path)
    check_manifest(manifest, config)
    sut = load_sut(sut_key, entry, weights_dir)
    checksum = sut.checksum()

    params = None
    if variant == "baseline":
        images = [s.x_s_init for s in samples]
    else:
        params = load_calibrator(config, samples, sut, sut_key, variant, out_dir)
        images = [apply_calibrator(params, s.context()) for s in samples]

    cache = open_cache(out_dir)
    measurements = measure_pairs(samples, images, sut, config.cf, cache, config.fidelity.eps_in, jobs)
    if sut.checksum() != checksum:
        raise ContractViolation(f"{sut.name} weights changed during evaluation")
    print(f"  Cache: {cache.hits} hits, {cache.misses} misses, {cache.recovered} recomputed")

    thresholds, levels = resolve_thresholds(config, measurements)
    records = to_records(measurements, thresholds)
    heldout = [r for r in records if r.split == "heldout"]
    correlations = None
    if len(heldout) >= MIN_SPEARMAN_SAMPLES:
        correlations = correlation_table(heldout, seed=config.stats.seed,
                                         resamples=config.stats.bootstrap_resamples,
                                         confidence=config.stats.confidence)

    summary = {
        "kind": "evaluation",
        "toolkit_version": TOOLKIT_VERSION,
        "config_hash": config.config_hash(),
        "sut": sut_key,
        "sut_name": entry["name"],
        "sut_kind": sut.kind,
        "sut_checksum": f"{checksum:08x}",
        "variant": variant,
        "calibrator_checksum": params.checksum() if params is not None else None,
        "n_pairs": len(records),
        "thresholds": thresholds.model_dump(),
        "threshold_levels": levels,
        "pass_rates": pass_rates(records, levels),
        "splits": {split: [r.pair_id for r in records if r.split == split] for split in SPLITS},
        "correlations": correlations,
        "dff": {split: [r.dff_distance for r in records if r.split == split] for split in SPLITS},
    }
    csv_path, json_path = eval_paths(out_dir, sut_key, variant)
    atomic_write_text(csv_path, format_records_csv(records, summary["config_hash"]))
    write_json(json_path, summary)
    return summary, records


# =============================================================================
# calibrate
# =============================================================================

def _decile_mean(values, last=False):
    k = max(1, len(values) // 10)
    chunk = values[-k:] if last else values[:k]
    return float(np.mean(chunk)) if chunk else None


def _mean(records, field, predicate=lambda r: True):
    values = [getattr(r, field) for r in records if predicate(r)]
    return float(np.mean(values)) if values else None


def calibrate(config, manifest_path, sut_key, entry, out_dir, variant="dff", jobs=1, weights_dir=None,
              resume=True):
    """Train one calibrator variant on the calibration split and score it on the held-out split."""
    if variant not in CALIBRATED_VARIANTS:
        raise ConfigurationError(f"calibrate takes variant ovf or dff, got {variant!r}")
    manifest, samples = load_manifest(manifest_path)
    check_manifest(manifest, config)
    dataset = [s for s in samples if s.split == "calibration"]
    heldout = [s for s in samples if s.split == "heldout"]
    if not dataset:
        raise ConfigurationError("the calibration split is empty")
    sut = load_sut(sut_key, entry, weights_dir)
    cfg = variant_calibration(config.calibration, variant)
    cache = open_cache(out_dir)
    paths = calibration_paths(out_dir, sut_key, variant)
    os.makedirs(os.path.dirname(paths["checkpoint"]), exist_ok=True)

    params, log = train_calibrator(dataset, sut, cfg, calibration_rng(config), cf=config.cf,
                                   checkpoint_path=paths["checkpoint"], log_path=paths["log"],
                                   resume=resume, cache=cache, verbose=True,
                                   config_hash=config.config_hash())
    totals = [e.l_total for e in log]

    held = None
    if heldout:
        print(f"\n  Held-out evaluation ({len(heldout)} pairs)")
        th = config.fidelity.user_thresholds()
        eps_in = config.fidelity.eps_in
        baseline = to_records(measure_pairs(heldout, [s.x_s_init for s in heldout], sut, config.cf, cache,
                                            eps_in, jobs), th)
        calibrated_images = [apply_calibrator(params, s.context()) for s in heldout]
        calibrated = to_records(measure_pairs(heldout, calibrated_images, sut, config.cf, cache, eps_in, jobs), th)
        deltas = paired_deltas(baseline, calibrated)
        ni = None
        if len(deltas["ov"]) >= MIN_NI_SAMPLES:
            ni = non_inferiority(deltas["ov"], entry["ni_margin"], alpha=config.stats.ni_alpha,
                                 seed=config.stats.seed,
                                 resamples=config.stats.bootstrap_resamples).model_dump(by_alias=True)
        decoy_ids = {s.id for s in heldout if s.sd.decoy_sign_present}

        def in_decoy(r):
            return r.pair_id in decoy_ids

        held = {
            "n": len(heldout),
            "effects": effect_table(baseline, calibrated),
            "non_inferiority": ni,
            "mean_dff": {"baseline": _mean(baseline, "dff_distance"),
                         "calibrated": _mean(calibrated, "dff_distance")},
            "mean_iv_score": {"baseline": _mean(baseline, "iv_score"),
                              "calibrated": _mean(calibrated, "iv_score")},
            "mean_ov_score": {"baseline": _mean(baseline, "ov_score"),
                              "calibrated": _mean(calibrated, "ov_score")},
            "decoy": {"n": len(decoy_ids),
                      "baseline_dff": _mean(baseline, "dff_distance", in_decoy),
                      "calibrated_dff": _mean(calibrated, "dff_distance", in_decoy)},
        }

    summary = {
        "kind": "calibration",
        "toolkit_version": TOOLKIT_VERSION,
        "config_hash": config.config_hash(),
        "sut": sut_key,
        "sut_name": entry["name"],
        "sut_checksum": f"{sut.checksum():08x}",
        "variant": variant,
        "ni_margin": entry["ni_margin"],
        "effective_calibration": cfg.model_dump(),
        "calibrator_checksum": params.checksum(),
        "training": {
            "steps": len(log),
            "first_decile_l_total": _decile_mean(totals),
            "last_decile_l_total": _decile_mean(totals, last=True),
        },
        "heldout": held,
    }
    write_json(paths["summary"], summary)
    return summary


# =============================================================================
# report
# =============================================================================

def load_output(path):
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise CorruptFileError(f"{path}: not valid JSON ({e})")
    if data.get("kind") not in ("evaluation", "calibration"):
        raise ConfigurationError(f"{path} is not an evaluate or calibrate output")
    return data


def report(paths, out_dir):
    """Summary tables and CDF points from outputs that share one config hash."""
    if not paths:
        raise ConfigurationError("report needs at least one evaluate or calibrate output")
    outputs = [load_output(p) for p in paths]
    hashes = sorted({o["config_hash"] for o in outputs})
    if len(hashes) > 1:
        listing = ", ".join(f"{p} ({o['config_hash']})" for p, o in zip(paths, outputs))
        raise ConfigurationError(f"inputs come from different configurations and cannot be combined: {listing}")

    evaluations = [o for o in outputs if o["kind"] == "evaluation"]
    calibrations = [o for o in outputs if o["kind"] == "calibration"]
    text = format_summary(evaluations, calibrations, hashes[0], TOOLKIT_VERSION)
    report_dir = os.path.join(out_dir, "report")
    atomic_write_text(os.path.join(report_dir, "summary.txt"), text + "\n")
    atomic_write_text(os.path.join(report_dir, "cdf.csv"), format_cdf_csv(cdf_rows(evaluations), hashes[0]))
    return text
