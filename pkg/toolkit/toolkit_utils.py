"""
Shared utilities for all toolkit commands.

Provides structured output so run_dff.py and CI jobs can reliably parse
results without fragile regex on log text, plus the error types, hashing and
atomic-write helpers every module uses.
"""

import csv
import hashlib
import json
import os
import tempfile
import zlib

TOOLKIT_VERSION = "0.4.0"


# =============================================================================
# Errors (each carries the CLI exit code it maps to)
# =============================================================================

class ToolkitError(Exception):
    exit_code = 1


class DimensionError(ToolkitError, ValueError):
    """Shape mismatch or input too small for the operation."""
    exit_code = 1


class ConfigurationError(ToolkitError, ValueError):
    exit_code = 1


class NumericError(ToolkitError, ArithmeticError):
    """Non-finite value during a computation.

    layer is the index of the SUT layer where it appeared, when known.
    """
    exit_code = 3

    def __init__(self, message, layer=None):
        if layer is not None:
            message = f"{message} (layer {layer})"
        super().__init__(message)
        self.layer = layer


class ContractViolation(ToolkitError, RuntimeError):
    exit_code = 3


class CorruptFileError(ToolkitError, IOError):
    exit_code = 2


# =============================================================================
# Structured output
# =============================================================================

def print_result(command, status, count=0, error=None, **fields):
    """Print a machine-readable result line at the end of a command run.

    Format: RESULT:{"command":"evaluate","status":"ok","count":20,"sut":"steer"}

    Args:
        command: Subcommand name (e.g., "generate", "evaluate")
        status: "ok" or "error"
        count: Number of pairs / entries processed
        error: Error message string (only when status="error")
        **fields: Extra keys (sut, variant, config_hash, ...)
    """
    result = {
        "command": command,
        "status": status,
        "count": count,
    }
    result.update(fields)
    if error:
        result["error"] = str(error)
    print(f"RESULT:{json.dumps(result, sort_keys=True)}")


def banner(title):
    print(f"\n{'=' * 70}")
    print(title)
    print("=" * 70)


# =============================================================================
# Hashing and files
# =============================================================================

def short_hash(payload):
    """Deterministic 12-char id for bytes, str, or JSON-serialisable data."""
    if isinstance(payload, str):
        payload = payload.encode()
    elif not isinstance(payload, (bytes, bytearray, memoryview)):
        payload = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.md5(payload).hexdigest()[:12]


def hash_to_u64(text):
    return int.from_bytes(hashlib.md5(text.encode()).digest()[:8], "little")


def crc32(data):
    return zlib.crc32(data) & 0xFFFFFFFF


def atomic_write_bytes(path, data):
    """Write-temp-then-rename so readers never see a partial file."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode())


def write_json(path, data):
    atomic_write_text(path, json.dumps(data, indent=2, sort_keys=True) + "\n")


# =============================================================================
# Binary artifacts: 4-byte magic + payload + trailing CRC32 of everything before it
# =============================================================================

def seal(magic, payload):
    body = magic + payload
    return body + crc32(body).to_bytes(4, "little")


def unseal(data, magic, path="<bytes>"):
    """Check magic and CRC32; returns the payload between them."""
    if len(data) < len(magic) + 4 or data[:len(magic)] != magic:
        raise CorruptFileError(f"{path}: bad magic, expected {magic!r}")
    body, stored = data[:-4], int.from_bytes(data[-4:], "little")
    if crc32(body) != stored:
        raise CorruptFileError(f"{path}: CRC32 mismatch")
    return body[len(magic):]


# =============================================================================
# CSV artifacts: one "# toolkit_version=... config_hash=..." line above the header
# =============================================================================

def provenance_line(config_hash):
    return f"# toolkit_version={TOOLKIT_VERSION} config_hash={config_hash}\n"


def read_provenance(path):
    """{"toolkit_version": ..., "config_hash": ...} from a CSV artifact's first line."""
    with open(path) as f:
        first = f.readline()
    if not first.startswith("#"):
        raise CorruptFileError(f"{path}: no provenance line")
    return dict(field.split("=", 1) for field in first[1:].split())


def read_csv_rows(path):
    """DictReader rows of a CSV artifact, skipping comment lines."""
    with open(path, newline="") as f:
        return list(csv.DictReader(line for line in f if not line.startswith("#")))
