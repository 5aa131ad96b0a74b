"""
Fidelity Report
Formats evaluate/calibrate outputs as plain-text tables plus empirical-CDF
points (CSV) for external plotting.

Tables:
  THRESHOLDS  eps_dff per level and the DFF pass-rate it gives on each split
  PASS RATES  per-criterion and overall pass-rates per split
  COUPLING    held-out Spearman rho with bootstrap CI per metric pair
  EFFECTS     calibrated-minus-baseline deltas and the non-inferiority verdict

Values are printed with six decimals, the same numbers as in the JSON inputs.
"""

import csv
import io

from fidelity import empirical_cdf
from toolkit_utils import provenance_line

CDF_FIELDS = ("sut", "variant", "split", "epsilon", "fraction")


def _num(value):
    return "-" if value is None else f"{value:.6f}"


def _sorted(outputs):
    return sorted(outputs, key=lambda o: (o["sut"], o["variant"]))


def format_thresholds_table(evaluations):
    lines = ["\nTHRESHOLDS:"]
    lines.append(f"  {'SUT':<8} {'Variant':<9} {'Level':<6} {'eps_dff':>12} {'Calib pass':>11} {'Held pass':>10}")
    lines.append(f"  {'-'*8} {'-'*9} {'-'*6} {'-'*12} {'-'*11} {'-'*10}")
    for ev in _sorted(evaluations):
        rates = ev["pass_rates"]
        for level, eps in ev["threshold_levels"].items():
            cal = rates.get("calibration", {}).get("dff_at", {}).get(level)
            held = rates.get("heldout", {}).get("dff_at", {}).get(level)
            lines.append(f"  {ev['sut']:<8} {ev['variant']:<9} {level:<6} {_num(eps):>12} {_num(cal):>11} {_num(held):>10}")
        lines.append(f"  {'':<8} provenance: {ev['thresholds']['provenance']}")
    return lines


def format_pass_rates_table(evaluations):
    lines = ["\nPASS RATES:"]
    lines.append(f"  {'SUT':<8} {'Variant':<9} {'Split':<12} {'n':>5} {'IV':>9} {'OV':>9} {'DFF':>9} {'ALL':>9}")
    lines.append(f"  {'-'*8} {'-'*9} {'-'*12} {'-'*5} {'-'*9} {'-'*9} {'-'*9} {'-'*9}")
    for ev in _sorted(evaluations):
        for split, r in ev["pass_rates"].items():
            lines.append(f"  {ev['sut']:<8} {ev['variant']:<9} {split:<12} {r['n']:>5} {_num(r['pass_iv']):>9} "
                         f"{_num(r['pass_ov']):>9} {_num(r['pass_dff']):>9} {_num(r['pass_all']):>9}")
    return lines


def format_coupling_table(evaluations):
    lines = ["\nCOUPLING (held-out Spearman):"]
    lines.append(f"  {'SUT':<8} {'Variant':<9} {'Pair':<26} {'rho':>10} {'CI low':>10} {'CI high':>10} {'n':>5}")
    lines.append(f"  {'-'*8} {'-'*9} {'-'*26} {'-'*10} {'-'*10} {'-'*10} {'-'*5}")
    widened = False
    for ev in _sorted(evaluations):
        if not ev.get("correlations"):
            lines.append(f"  {ev['sut']:<8} {ev['variant']:<9} (too few held-out pairs)")
            continue
        for pair, c in ev["correlations"].items():
            mark = " *" if c.get("widened") else ""
            widened = widened or bool(mark)
            lines.append(f"  {ev['sut']:<8} {ev['variant']:<9} {pair:<26} {_num(c['rho']):>10} "
                         f"{_num(c['ci_low']):>10} {_num(c['ci_high']):>10} {c['n']:>5}{mark}")
    if widened:
        lines.append("  * bootstrap percentile interval excluded rho; CI widened to include it")
    return lines


def format_effects_table(calibrations):
    lines = ["\nEFFECTS (calibrated - baseline, held-out):"]
    lines.append(f"  {'SUT':<8} {'Variant':<9} {'n':>5} {'dIV':>10} {'dOV':>10} {'dDFF':>10} "
                 f"{'NI low':>10} {'Margin':>8} {'NI':<5}")
    lines.append(f"  {'-'*8} {'-'*9} {'-'*5} {'-'*10} {'-'*10} {'-'*10} {'-'*10} {'-'*8} {'-'*5}")
    for cal in _sorted(calibrations):
        held = cal.get("heldout")
        if not held:
            lines.append(f"  {cal['sut']:<8} {cal['variant']:<9} (no held-out pairs)")
            continue
        e, ni = held["effects"], held.get("non_inferiority")
        low = ni["ci_low_one_sided"] if ni else None
        verdict = "-" if ni is None else ("pass" if ni["pass"] else "FAIL")
        lines.append(f"  {cal['sut']:<8} {cal['variant']:<9} {e['n']:>5} {_num(e['delta_iv']):>10} "
                     f"{_num(e['delta_ov']):>10} {_num(e['delta_dff']):>10} {_num(low):>10} "
                     f"{cal['ni_margin']:>8} {verdict:<5}")
        decoy = held.get("decoy") or {}
        if decoy.get("n"):
            lines.append(f"  {'':<8} decoy scenes (n={decoy['n']}): mean dff {_num(decoy['baseline_dff'])} "
                         f"-> {_num(decoy['calibrated_dff'])}")
    return lines


def format_summary(evaluations, calibrations, config_hash, version):
    """The full plain-text report for outputs that share one config hash."""
    lines = []
    lines.append("=" * 70)
    lines.append("DECISIVE-FEATURE FIDELITY REPORT")
    lines.append(f"toolkit {version}   config {config_hash}")
    lines.append("=" * 70)
    if evaluations:
        lines += format_thresholds_table(evaluations)
        lines += format_pass_rates_table(evaluations)
        lines += format_coupling_table(evaluations)
    if calibrations:
        lines += format_effects_table(calibrations)
    if not evaluations and not calibrations:
        lines.append("\nNo inputs.")
    return "\n".join(lines)


def cdf_rows(evaluations):
    """(sut, variant, split, epsilon, fraction) for every distinct DFF distance."""
    rows = []
    for ev in _sorted(evaluations):
        for split, distances in ev["dff"].items():
            for eps, fraction in empirical_cdf(distances):
                rows.append((ev["sut"], ev["variant"], split, eps, fraction))
    return rows


def format_cdf_csv(rows, config_hash):
    buffer = io.StringIO()
    buffer.write(provenance_line(config_hash))
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CDF_FIELDS)
    for sut, variant, split, eps, fraction in rows:
        writer.writerow([sut, variant, split, repr(eps), repr(fraction)])
    return buffer.getvalue()
