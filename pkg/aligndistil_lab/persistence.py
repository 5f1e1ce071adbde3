"""Artifact files: checkpoints, CSV curves, JSON-lines data, manifest.

Every writer is byte-deterministic: floats use 17 significant digits,
JSON keys are sorted and line endings are ``\\n``.
"""

import csv
import hashlib
import json
import logging
import math
from datetime import datetime, timezone
from pathlib import Path

import jsonschema

from aligndistil_lab.errors import ConfigError, NonFiniteError
from aligndistil_lab.policy import from_checkpoint, to_checkpoint
from aligndistil_lab.rewards import (
    REWARD_MODEL,
    PreferencePair,
    RewardModel,
    rm_from_checkpoint,
    rm_to_checkpoint,
)

logger = logging.getLogger(__name__)

PACKAGE_DIR = Path(__file__).parent
CHECKPOINT_SCHEMA = PACKAGE_DIR / "checkpoint.schema.json"


def format_float(x):
    """17 significant digits, enough to round-trip any float64."""
    return format(float(x), ".17g")


def format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format_float(value)
    return str(value)


def canonical_json(doc):
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def sha256_bytes(data):
    return hashlib.sha256(data).hexdigest()


def sha256_file(path):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def load_schema(path):
    with open(path) as f:
        return json.load(f)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def dumps_checkpoint(doc):
    """Checkpoint text: sorted metadata, then params in 17-digit decimals."""
    params = doc["params"]
    if not all(math.isfinite(x) for x in params):
        raise NonFiniteError("refusing to write non-finite parameters")
    lines = ["{"]
    for key in sorted(k for k in doc if k != "params"):
        lines.append(f"  {json.dumps(key)}: {json.dumps(doc[key])},")
    lines.append(
        '  "params": [' + ", ".join(format_float(x) for x in params) + "]"
    )
    lines.append("}")
    return "\n".join(lines) + "\n"


def write_checkpoint(path, model):
    if isinstance(model, RewardModel):
        doc = rm_to_checkpoint(model)
    else:
        doc = to_checkpoint(model)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_checkpoint(doc))
    logger.debug("wrote checkpoint %s (%d params)", path, len(doc["params"]))
    return path


def read_checkpoint(path):
    """Load a Policy or RewardModel, validating the document first."""
    with open(path) as f:
        doc = json.load(f)
    try:
        jsonschema.validate(doc, load_schema(CHECKPOINT_SCHEMA))
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"invalid checkpoint {path}: {exc.message}")
    if doc["kind"] == REWARD_MODEL:
        return rm_from_checkpoint(doc)
    return from_checkpoint(doc)


# ---------------------------------------------------------------------------
# Tables and data
# ---------------------------------------------------------------------------


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            if isinstance(row, dict):
                row = [row[name] for name in header]
            writer.writerow([format_value(v) for v in row])
    return path


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def write_pairs(path, pairs):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for pair in pairs:
            f.write(json.dumps(pair.to_record(), sort_keys=True) + "\n")
    return path


def read_pairs(path):
    with open(path) as f:
        return [
            PreferencePair.from_record(json.loads(line))
            for line in f
            if line.strip()
        ]


def write_json(path, doc):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return path


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


def utc_now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def build_manifest(out_dir, config_hashes, stages, started, finished):
    """Every file under ``out_dir`` with its SHA-256, except the manifest."""
    out_dir = Path(out_dir)
    files = {}
    for path in sorted(out_dir.rglob("*")):
        if path.is_file() and path.name != "manifest.json":
            files[path.relative_to(out_dir).as_posix()] = sha256_file(path)
    return {
        "files": files,
        "config_hashes": config_hashes,
        "stages": stages,
        "started": started,
        "finished": finished,
    }


def write_manifest(out_dir, config_hashes, stages, started):
    manifest = build_manifest(
        out_dir, config_hashes, stages, started, utc_now()
    )
    return write_json(Path(out_dir) / "manifest.json", manifest)
