"""Experiment configuration documents.

One JSON document describes a whole experiment. Missing keys are filled
from :func:`default_spec`, the result is validated against
``config.schema.json``, and command-line flags override single keys.
"""

import copy
import json
import logging

import jsonschema

from aligndistil_lab.errors import ConfigError
from aligndistil_lab.persistence import (
    PACKAGE_DIR,
    canonical_json,
    load_schema,
    sha256_bytes,
)
from aligndistil_lab.teacher import TeacherConfig
from aligndistil_lab.training import TrainConfig

logger = logging.getLogger(__name__)

CONFIG_SCHEMA = PACKAGE_DIR / "config.schema.json"

STAGES = (
    "gen-data",
    "train-rm",
    "train-dpo",
    "train-reverse-dpo",
    "align-on",
    "align-off",
    "baseline-sentence",
    "baseline-token",
    "verify",
    "eval-reward-acc",
    "convergence-bench",
    "ablation",
)

# Constant extrapolation weights of the ablation table.
ABLATION_WEIGHTS = [1.0, 1.2, 1.5, 1.8, 2.0]

_DEFAULT_SPEC = {
    "name": "reference",
    "output_dir": "runs/reference",
    "seed": 0,
    "stages": list(STAGES),
    "task": {
        "vocab_size": 6,
        "max_context": 6,
        "prompt_len": 2,
        "label_noise": 0.1,
        "label_mode": "bt",
        "n_buckets": 64,
        "reward_scale": 1.0,
        "n_train": 2000,
        "n_test": 500,
        "warmup_steps": 30,
        "warmup_k": 4,
        "warmup_batch": 64,
        "warmup_lr": 1.0,
    },
    "policy": {
        "kind": "tiny_neural",
        "embed_dim": 8,
        "hidden": 32,
        "init_scale": None,
    },
    "train": {
        "steps": 200,
        "batch_size": 32,
        "lr": 0.5,
        "beta0": 0.1,
        "beta": 0.08,
        "momentum": 0.0,
        "probe_prompts": 64,
        "probe_samples": 4,
        "probe_seed": 1729,
        "offpolicy_responses": "chosen",
    },
    "teacher": {
        "mode": "adaptive_extrapolate",
        "beta": None,
        "weight": None,
        "r": 15.0,
        "epsilon": 0.001,
    },
    "stage_overrides": {
        "train-rm": {"lr": 0.5, "steps": 300},
        "train-dpo": {"lr": 2.0},
        "train-reverse-dpo": {"lr": 2.0},
    },
    "verify": {
        "instances": 100,
        "vocab_sizes": [2, 3, 4],
        "max_contexts": [2, 3, 4],
        "contrastive": False,
    },
    "convergence": {"steps": 200, "beta": 0.08},
    "ablation": {"weights": ABLATION_WEIGHTS, "steps": 200},
}

# Flag name -> dotted key it overrides.
FLAG_KEYS = {
    "seed": "seed",
    "output_dir": "output_dir",
    "steps": "train.steps",
    "batch_size": "train.batch_size",
    "lr": "train.lr",
    "beta0": "train.beta0",
    "beta": "train.beta",
    "momentum": "train.momentum",
    "r": "teacher.r",
    "epsilon": "teacher.epsilon",
    "weight": "teacher.weight",
    "label_noise": "task.label_noise",
    "instances": "verify.instances",
}


def default_spec():
    return copy.deepcopy(_DEFAULT_SPEC)


def merge(base, override):
    """Deep-merge ``override`` into a copy of ``base``."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def set_key(doc, dotted, value):
    target = doc
    *parents, leaf = dotted.split(".")
    for key in parents:
        target = target.setdefault(key, {})
    target[leaf] = value


def get_key(doc, dotted):
    value = doc
    for key in dotted.split("."):
        value = value[key]
    return value


def validate_spec(doc):
    validator = jsonschema.Draft7Validator(load_schema(CONFIG_SCHEMA))
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.path))
    if errors:
        first = errors[0]
        where = ".".join(str(p) for p in first.path) or "<root>"
        raise ConfigError(f"config {where}: {first.message}")
    unknown = set(doc["stage_overrides"]) - set(STAGES)
    if unknown:
        raise ConfigError(
            f"stage_overrides name unknown stages: {sorted(unknown)}"
        )
    return doc


def load_spec(path=None, overrides=None):
    """Default spec, merged with the JSON file at ``path`` and ``overrides``.

    ``overrides`` maps dotted keys (``train.lr``) to values.
    """
    doc = default_spec()
    if path is not None:
        try:
            with open(path) as f:
                user = json.load(f)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}")
        if not isinstance(user, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        doc = merge(doc, user)
    for dotted, value in (overrides or {}).items():
        set_key(doc, dotted, value)
    return validate_spec(doc)


def config_hash(section):
    return sha256_bytes(canonical_json(section).encode())


def train_config(doc, stage=None, **changes):
    """TrainConfig of ``stage``: train section, stage override, changes."""
    section = dict(doc["train"])
    if stage is not None:
        section.update(doc["stage_overrides"].get(stage, {}))
    section.update(changes)
    section.setdefault("seed", doc["seed"])
    return TrainConfig(**section)


def teacher_config(doc, **changes):
    section = dict(doc["teacher"])
    section.update(changes)
    if section.get("beta") is None and section["mode"] != (
        "adaptive_extrapolate"
    ):
        section["beta"] = doc["train"]["beta"]
    return TeacherConfig(beta0=doc["train"]["beta0"], **section)
