"""Shared pytest fixtures and configuration for aligndistil-lab tests."""

import importlib.machinery
import importlib.util
import sys
from pathlib import Path
from unittest.mock import patch

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from aligndistil_lab import config as cfgmod  # noqa: E402
from aligndistil_lab.policy import TABULAR, init_policy  # noqa: E402
from aligndistil_lab.rewards import PreferencePair  # noqa: E402
from aligndistil_lab.training import Teacher, TrainData  # noqa: E402


def pytest_addoption(parser):
    """Add custom command line options."""
    parser.addoption(
        "--update-golden",
        action="store_true",
        default=False,
        help="Update golden snapshot files instead of comparing",
    )
    parser.addoption(
        "--run-slow",
        action="store_true",
        default=False,
        help="Run the statistical seed-sweep tests",
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


# ---------------------------------------------------------------------------
# Import the launcher script (which has no .py extension)
# ---------------------------------------------------------------------------


def load_launcher_module():
    """Load the aligndistil-lab launcher despite lacking .py extension."""
    script_path = Path(__file__).parent.parent / "aligndistil-lab"

    loader = importlib.machinery.SourceFileLoader(
        "aligndistil_launcher", str(script_path)
    )
    spec = importlib.util.spec_from_loader("aligndistil_launcher", loader)
    module = importlib.util.module_from_spec(spec)
    sys.modules["aligndistil_launcher"] = module

    with patch.object(sys, "exit"):
        spec.loader.exec_module(module)

    return module


# ---------------------------------------------------------------------------
# Small models
# ---------------------------------------------------------------------------


def tabular(vocab_size=3, max_context=3, seed=0, scale=1.0, prompt_len=1):
    return init_policy(
        TABULAR,
        vocab_size,
        max_context,
        prompt_len=prompt_len,
        seed=seed,
        init_scale=scale,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def small_models():
    """(reference, dpo, reverse) tabular policies with V=3, T_max=3."""
    return tabular(seed=1), tabular(seed=2), tabular(seed=3)


@pytest.fixture
def small_teacher(small_models):
    _, dpo, reverse = small_models
    return Teacher(dpo, reverse)


@pytest.fixture
def small_pairs():
    """Hand-written preference pairs over V=3, T_max=3 (EOS=2)."""
    return [
        PreferencePair((0,), (0, 2), (1, 2), 0.5),
        PreferencePair((1,), (2,), (1, 1, 2), 1.0),
        PreferencePair((2,), (1, 0, 2), (0, 2), -0.25),
        PreferencePair((0,), (0, 0, 2), (1, 1, 2), 0.75),
    ]


@pytest.fixture
def small_data(small_models, small_pairs):
    reference, dpo, reverse = small_models
    return TrainData(
        reference=reference,
        pairs=small_pairs,
        prompts=[pair.prompt for pair in small_pairs],
        probe_prompts=[(0,), (1,), (2,)],
        dpo=dpo,
        negative=reverse,
    )


# ---------------------------------------------------------------------------
# Experiment documents
# ---------------------------------------------------------------------------


def tiny_doc(output_dir, **changes):
    """A complete experiment that runs in a few seconds."""
    doc = cfgmod.merge(
        cfgmod.default_spec(),
        {
            "name": "tiny",
            "output_dir": str(output_dir),
            "task": {
                "vocab_size": 3,
                "max_context": 3,
                "prompt_len": 1,
                "n_train": 24,
                "n_test": 12,
                "warmup_steps": 2,
                "warmup_k": 2,
                "warmup_batch": 8,
            },
            "policy": {"embed_dim": 4, "hidden": 6},
            "train": {
                "steps": 3,
                "batch_size": 4,
                "probe_prompts": 3,
                "probe_samples": 2,
            },
            "stage_overrides": {
                "train-rm": {"steps": 3},
                "train-dpo": {"steps": 3},
                "train-reverse-dpo": {"steps": 3},
            },
            "verify": {
                "instances": 3,
                "vocab_sizes": [2, 3],
                "max_contexts": [2, 3],
            },
            "convergence": {"steps": 2},
            "ablation": {"weights": [1.0, 2.0], "steps": 2},
        },
    )
    return cfgmod.merge(doc, changes)


@pytest.fixture
def tiny_spec(tmp_path):
    from aligndistil_lab.harness import ExperimentSpec

    return ExperimentSpec.from_doc(tiny_doc(tmp_path / "run"))
