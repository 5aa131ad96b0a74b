"""
Decisive-Feature Fidelity Runner — Registry-Driven
Reads registry.yaml for the SUTs, validates the run config, then runs one
pipeline command.

Usage:
    python run_dff.py generate --out runs/desk --previews
    python run_dff.py evaluate --out runs/desk --sut steer
    python run_dff.py evaluate --out runs/desk --sut da --thresholds percentile:90,95 --jobs 8
    python run_dff.py calibrate --out runs/desk --sut steer --variant dff
    python run_dff.py evaluate --out runs/desk --sut steer --variant dff
    python run_dff.py report --out runs/desk              # every output under runs/desk
    python run_dff.py --list                              # Show all registered SUTs

Exit codes: 0 success, 1 config/usage error, 2 I/O error, 3 numeric failure.
Set MFID_CACHE_DIR (environment or .env) to share decisive maps between runs.
"""

import argparse
import glob
import os
import sys

import yaml
from dotenv import load_dotenv

from pipeline import (MANIFEST_NAME, VARIANTS, calibrate, evaluate, generate, report, weights_path)
from run_config import config_summary, load_config
from toolkit_utils import ConfigurationError, ToolkitError, banner, print_result

load_dotenv()

REGISTRY_PATH = os.path.join(os.path.dirname(__file__), "registry.yaml")


def load_registry():
    """Load SUT definitions from registry.yaml."""
    with open(REGISTRY_PATH) as f:
        data = yaml.safe_load(f)
    return data["suts"]


def show_registry(registry, weights_dir=None):
    """Print a table of all registered SUTs."""
    print(f"\n{'Key':<8} {'Name':<16} {'Kind':<14} {'Target':<10} {'NI margin':>9} {'Weights':<8} {'Enabled'}")
    print("-" * 80)
    for key, entry in registry.items():
        trained = "yes" if os.path.exists(weights_path(entry, weights_dir)) else "missing"
        enabled = "yes" if entry.get("enabled", True) else "no"
        print(f"{key:<8} {entry['name']:<16} {entry['kind']:<14} {entry['target']:<10} "
              f"{entry['ni_margin']:>9} {trained:<8} {enabled}")
    print()


def resolve_sut(registry, key):
    if key not in registry:
        raise ConfigurationError(f"unknown SUT {key!r}; registered: {', '.join(registry)}")
    return registry[key]


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with code 1 like every other configuration problem."""

    def error(self, message):
        raise ConfigurationError(f"{self.prog}: {message}")


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def build_parser(registry):
    common = _Parser(add_help=False)
    common.add_argument("--config", default=None, help="RunConfig INI file (default: built-in defaults)")
    common.add_argument("--out", default="runs/default", help="Output directory")
    common.add_argument("--seed", type=int, default=None, help="Override [scene] seed")

    scoring = _Parser(add_help=False)
    scoring.add_argument("--sut", choices=sorted(registry), default="steer")
    scoring.add_argument("--manifest", default=None, help=f"Dataset manifest (default: OUT/{MANIFEST_NAME})")
    scoring.add_argument("--thresholds", default=None, help="user | percentile:p1,p2 (overrides [fidelity])")
    scoring.add_argument("--jobs", type=_positive_int, default=1, help="Pairs evaluated in parallel")
    scoring.add_argument("--weights-dir", default=None, help="Directory holding the MFWT weight files")

    parser = _Parser(description="Decisive-feature fidelity toolkit.")
    parser.add_argument("--list", action="store_true", help="Show all registered SUTs and exit")
    sub = parser.add_subparsers(dest="command")

    gen = sub.add_parser("generate", parents=[common], help="Render the paired dataset")
    gen.add_argument("--previews", action="store_true", help="Also write 8-bit PNG previews")

    ev = sub.add_parser("evaluate", parents=[common, scoring], help="IV/OV/LF/DFF per pair")
    ev.add_argument("--variant", choices=VARIANTS, default="baseline")

    cal = sub.add_parser("calibrate", parents=[common, scoring], help="Train a calibrator variant")
    cal.add_argument("--variant", choices=("ovf", "dff"), default="dff")
    cal.add_argument("--no-resume", action="store_true", help="Ignore an existing checkpoint")

    rep = sub.add_parser("report", help="Tables and CDF points from evaluate/calibrate outputs")
    rep.add_argument("inputs", nargs="*", help="Output JSON files (default: all under --out)")
    rep.add_argument("--out", default="runs/default", help="Output directory")
    return parser


def effective_config(args):
    config = load_config(args.config)
    return config.with_overrides(seed=args.seed, thresholds=getattr(args, "thresholds", None))


def _manifest_path(args):
    return args.manifest or os.path.join(args.out, MANIFEST_NAME)


def _print_config(config):
    for line in config_summary(config):
        print(f"  {line}")


# =============================================================================
# Commands
# =============================================================================

def cmd_generate(args, registry):
    config = effective_config(args)
    banner(f"GENERATE - {config.scene.pairs} pairs -> {args.out}")
    _print_config(config)
    manifest = generate(config, args.out, previews=args.previews)
    counts = manifest["counts"]
    print(f"\n  calibration: {counts['calibration']}  heldout: {counts['heldout']}")
    print_result("generate", "ok", len(manifest["pairs"]), config_hash=manifest["config_hash"])
    return 0


def cmd_evaluate(args, registry):
    config = effective_config(args)
    entry = resolve_sut(registry, args.sut)
    banner(f"EVALUATE - {entry['name']} ({args.sut}), variant {args.variant}")
    _print_config(config)
    summary, records = evaluate(config, _manifest_path(args), args.sut, entry, args.out,
                                variant=args.variant, jobs=args.jobs, weights_dir=args.weights_dir)

    banner("SUMMARY")
    for split, rates in summary["pass_rates"].items():
        print(f"  {split.upper()}: n={rates['n']} pass_all={rates['pass_all']:.3f} "
              f"iv={rates['pass_iv']:.3f} ov={rates['pass_ov']:.3f} dff={rates['pass_dff']:.3f}")
    print(f"  thresholds: {summary['thresholds']['provenance']}")
    print_result("evaluate", "ok", len(records), sut=args.sut, variant=args.variant,
                 config_hash=summary["config_hash"])
    return 0


def cmd_calibrate(args, registry):
    config = effective_config(args)
    entry = resolve_sut(registry, args.sut)
    banner(f"CALIBRATE - {entry['name']} ({args.sut}), variant {args.variant}")
    _print_config(config)
    summary = calibrate(config, _manifest_path(args), args.sut, entry, args.out, variant=args.variant,
                        jobs=args.jobs, weights_dir=args.weights_dir, resume=not args.no_resume)

    banner("SUMMARY")
    training = summary["training"]
    print(f"  L_total first 10%: {training['first_decile_l_total']:.6f}  "
          f"last 10%: {training['last_decile_l_total']:.6f}")
    held = summary["heldout"]
    warnings = []
    if held:
        e = held["effects"]
        print(f"  dIV={e['delta_iv']:+.6f} dOV={e['delta_ov']:+.6f} dDFF={e['delta_dff']:+.6f} (n={e['n']})")
        ni = held["non_inferiority"]
        if ni is None:
            warnings.append("fewer than 10 held-out pairs; no non-inferiority verdict")
        else:
            print(f"  non-inferiority (dOV > {ni['margin']}): {'pass' if ni['pass'] else 'FAIL'} "
                  f"(lower bound {ni['ci_low_one_sided']:.6f})")
    else:
        warnings.append("held-out split is empty; no post-training evaluation")
    for w in warnings:
        print(f"  WARNING: {w}")
    print_result("calibrate", "ok", training["steps"], sut=args.sut, variant=args.variant,
                 config_hash=summary["config_hash"])
    return 0


def cmd_report(args, registry):
    inputs = args.inputs or (sorted(glob.glob(os.path.join(args.out, "eval", "*.json")))
                             + sorted(glob.glob(os.path.join(args.out, "calibration", "*.json"))))
    text = report(inputs, args.out)
    print(text)
    print(f"\n  Written to {os.path.join(args.out, 'report')}")
    print_result("report", "ok", len(inputs))
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "calibrate": cmd_calibrate,
    "report": cmd_report,
}


def _fail(command, error, code):
    print(f"ERROR: {error}", file=sys.stderr)
    print_result(command or "run_dff", "error", error=error, exit_code=code)
    return code


def main(argv=None):
    command = None
    try:
        registry = load_registry()
        parser = build_parser(registry)
        args = parser.parse_args(argv)
        command = args.command
        if args.list:
            show_registry(registry)
            return 0
        if command is None:
            parser.print_help()
            return 1
        return COMMANDS[command](args, registry)
    except ToolkitError as e:
        return _fail(command, e, e.exit_code)
    except (ValueError, yaml.YAMLError) as e:
        return _fail(command, e, 1)
    except OSError as e:
        return _fail(command, e, 2)
    except ArithmeticError as e:
        return _fail(command, e, 3)


if __name__ == "__main__":
    sys.exit(main())
