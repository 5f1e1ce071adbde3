"""Synthetic gold task, preference data and the experiment pipeline.

A run executes the stages listed in the experiment document in order.
Each stage reads the artifacts of earlier stages from the output
directory and writes its own::

    gen-data            data/{train,test}.jsonl, checkpoints/reference.json
    train-rm            checkpoints/rm.json, curves/rm.csv
    train-dpo           checkpoints/dpo.json, curves/dpo.csv
    train-reverse-dpo   checkpoints/reverse_dpo.json, curves/reverse_dpo.csv
    align-on/-off       checkpoints/align_{on,off}.json, curves/...
    baseline-*          checkpoints/baseline_*.json, curves/...
    verify              verify.csv
    eval-reward-acc     reward_accuracy.csv
    convergence-bench   convergence/{sentence,token,aligndistil}.csv
    ablation            ablation/{reward_accuracy,extrapolation}.csv

``manifest.json`` lists every file with its SHA-256 and is the only file
holding timestamps.
"""

import contextlib
import functools
import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Tuple

import numpy as np
import torch

from aligndistil_lab import config as cfgmod
from aligndistil_lab.errors import (
    CheckFailure,
    ConfigError,
    DependencyError,
    DivergenceError,
    LabError,
    StageError,
)
from aligndistil_lab.persistence import (
    read_checkpoint,
    read_csv,
    read_pairs,
    utc_now,
    write_checkpoint,
    write_csv,
    write_manifest,
    write_pairs,
)
from aligndistil_lab.policy import (
    Sequence,
    init_policy,
    sample_batch,
    seq_log_probs,
    value_and_grad,
)
from aligndistil_lab.rewards import (
    ContrastiveReward,
    DpoReward,
    PreferencePair,
    RmReward,
    gold_margin_reads,
    init_reward_model,
    reset_gold_margin_audit,
    reward_accuracy,
)
from aligndistil_lab.teacher import (
    ADAPTIVE_EXTRAPOLATE,
    CONSTANT_EXTRAPOLATE,
    TeacherConfig,
)
from aligndistil_lab.training import (
    ALIGN_OFF,
    ALIGN_ON,
    BASELINE_SENTENCE,
    BASELINE_TOKEN,
    DPO,
    REVERSE_DPO,
    RunRecord,
    Sgd,
    TrainData,
    train,
    train_reward_model,
)
from aligndistil_lab.verify import REPORT_FIELDS, verify_sweep

logger = logging.getLogger(__name__)

LABEL_MODES = ("bt", "gold")
RUN_RECORD_FIELDS = list(RunRecord._fields)
RM_RECORD_FIELDS = ["step", "loss", "batch_accuracy"]
ACCURACY_FIELDS = ["reward", "train_accuracy", "test_accuracy"]
EXTRAPOLATION_FIELDS = [
    "teacher",
    "weight",
    "kl_to_dpo",
    "response_len_mean",
    "token_avg_reward",
]
CONVERGENCE_RUNS = (
    ("sentence", BASELINE_SENTENCE),
    ("token", BASELINE_TOKEN),
    ("aligndistil", ALIGN_ON),
)

# Attempts at redrawing the second response of a pair before falling
# back to a fixed distinct response.
MAX_RESAMPLE = 16


# ---------------------------------------------------------------------------
# Gold task
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GoldTask:
    """Synthetic preference task with a hidden token-level gold reward.

    The gold reward of a response is the sum of table entries
    ``gold[bucket(prompt, prefix), token]`` over all its tokens, where the
    bucket hashes the prompt, the position and the previous token.
    """

    seed: int = 0
    vocab_size: int = 6
    max_context: int = 6
    prompt_len: int = 2
    label_noise: float = 0.1
    label_mode: str = "bt"
    n_buckets: int = 64
    reward_scale: float = 1.0

    def __post_init__(self):
        if not 0 <= self.label_noise < 0.5:
            raise ConfigError(
                f"label_noise must be in [0, 0.5), got {self.label_noise}"
            )
        if self.label_mode not in LABEL_MODES:
            raise ConfigError(f"unknown label_mode {self.label_mode!r}")
        if self.vocab_size < 2 or self.max_context < 2:
            raise ConfigError("gold task needs V >= 2 and T_max >= 2")

    @functools.cached_property
    def gold_table(self):
        rng = np.random.default_rng(self.seed)
        return rng.normal(
            0.0, self.reward_scale, size=(self.n_buckets, self.vocab_size)
        )

    @property
    def eos(self):
        return self.vocab_size - 1

    def bucket(self, prompt, prefix):
        key = tuple(prompt) + (self.vocab_size, len(prefix))
        key += tuple(prefix[-1:])
        return zlib.crc32(bytes(key)) % self.n_buckets

    def gold_token_reward(self, prompt, prefix, token):
        return float(self.gold_table[self.bucket(prompt, prefix), token])

    def gold_reward(self, prompt, response):
        return sum(
            self.gold_token_reward(prompt, response[:t], token)
            for t, token in enumerate(response)
        )

    def score(self, seqs):
        return np.array(
            [self.gold_reward(s.prompt, s.response) for s in seqs]
        )

    def __call__(self, prompt, response):
        return self.gold_reward(prompt, response)

    def sample_prompts(self, rng, n):
        tokens = rng.integers(0, self.vocab_size, size=(n, self.prompt_len))
        return [tuple(int(t) for t in row) for row in tokens]

    def probe_prompts(self, n):
        """Fixed held-out prompts, independent of every training stream."""
        return self.sample_prompts(np.random.default_rng(self.seed + 1), n)


def task_from_spec(doc):
    task = doc["task"]
    return GoldTask(
        seed=doc["seed"],
        vocab_size=task["vocab_size"],
        max_context=task["max_context"],
        prompt_len=task["prompt_len"],
        label_noise=task["label_noise"],
        label_mode=task["label_mode"],
        n_buckets=task["n_buckets"],
        reward_scale=task["reward_scale"],
    )


def initial_policy(doc, task):
    section = doc["policy"]
    return init_policy(
        section["kind"],
        task.vocab_size,
        task.max_context,
        prompt_len=task.prompt_len,
        seed=doc["seed"],
        embed_dim=section["embed_dim"],
        hidden=section["hidden"],
        init_scale=section["init_scale"],
    )


def warm_up_reference(task, policy, rng, steps, k=4, batch=64, lr=1.0):
    """Best-of-k supervised warm-up on gold reward: a mildly trained policy.

    Each step samples ``k`` responses per prompt, keeps the best under the
    gold reward and takes one SGD step on their per-token log-likelihood.
    """
    optimizer = Sgd(lr)
    for step in range(steps):
        prompts = task.sample_prompts(rng, batch)
        candidates = sample_batch(
            policy, [p for p in prompts for _ in range(k)], rng
        )
        scores = task.score(candidates).reshape(batch, k)
        best = [
            candidates[i * k + int(np.argmax(scores[i]))]
            for i in range(batch)
        ]
        lengths = torch.tensor(
            [len(s.response) for s in best], dtype=torch.float64
        )
        loss, gradient = value_and_grad(
            policy, lambda p: -(seq_log_probs(p, best) / lengths).mean()
        )
        policy = policy.with_params(optimizer.step(policy.params, gradient))
        logger.debug("warm-up step %d: nll/token %.6f", step + 1, loss)
    return policy


# ---------------------------------------------------------------------------
# Preference data
# ---------------------------------------------------------------------------


def _distinct_fallback(task, response):
    eos = task.eos
    return (0, eos) if response == (eos,) else (eos,)


def label_pairs(task, firsts, seconds, rng):
    """Preference labels for (first, second) Sequence pairs.

    ``bt`` draws "first wins" with probability sigmoid(gold margin);
    ``gold`` takes the gold ordering. Labels then flip with probability
    ``label_noise``.
    """
    margins = task.score(firsts) - task.score(seconds)
    if task.label_mode == "gold":
        first_wins = margins >= 0
    else:
        first_wins = rng.random(len(margins)) < 1.0 / (1.0 + np.exp(-margins))
    flips = rng.random(len(margins)) < task.label_noise
    first_wins = first_wins ^ flips
    pairs = []
    for a, b, m, wins in zip(firsts, seconds, margins, first_wins):
        if wins:
            pairs.append(PreferencePair(a.prompt, a.response, b.response, m))
        else:
            pairs.append(PreferencePair(a.prompt, b.response, a.response, -m))
    return pairs


def gen_preferences(task, n_pairs, rng, reference=None):
    """``n_pairs`` labelled pairs of distinct responses from ``reference``."""
    if n_pairs < 1:
        raise ConfigError("n_pairs must be >= 1")
    if reference is None:
        reference = init_policy(
            "tiny_neural",
            task.vocab_size,
            task.max_context,
            prompt_len=task.prompt_len,
            seed=task.seed,
        )
    prompts = task.sample_prompts(rng, n_pairs)
    firsts = sample_batch(reference, prompts, rng)
    seconds = sample_batch(reference, prompts, rng)
    for _ in range(MAX_RESAMPLE):
        clash = [
            i
            for i in range(n_pairs)
            if firsts[i].response == seconds[i].response
        ]
        if not clash:
            break
        redrawn = sample_batch(reference, [prompts[i] for i in clash], rng)
        for i, seq in zip(clash, redrawn):
            seconds[i] = seq
    for i in range(n_pairs):
        if firsts[i].response == seconds[i].response:
            seconds[i] = Sequence(
                prompts[i], _distinct_fallback(task, firsts[i].response)
            )
    return label_pairs(task, firsts, seconds, rng)


# ---------------------------------------------------------------------------
# Experiment spec and stages
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ExperimentSpec:
    """A validated experiment document."""

    doc: dict

    @classmethod
    def from_doc(cls, doc=None):
        merged = cfgmod.merge(cfgmod.default_spec(), doc or {})
        return cls(cfgmod.validate_spec(merged))

    @classmethod
    def load(cls, path=None, overrides=None):
        return cls(cfgmod.load_spec(path, overrides))

    @property
    def name(self):
        return self.doc["name"]

    @property
    def stages(self):
        return list(self.doc["stages"])

    @property
    def output_dir(self):
        return Path(self.doc["output_dir"])

    @property
    def seed(self):
        return self.doc["seed"]

    def task(self):
        return task_from_spec(self.doc)

    def with_changes(self, **changes):
        return ExperimentSpec.from_doc(cfgmod.merge(self.doc, changes))

    def config_hashes(self):
        return {
            section: cfgmod.config_hash(self.doc[section])
            for section in sorted(self.doc)
            if isinstance(self.doc[section], dict)
        }


class RunContext:
    """Paths and loaders shared by the stages of one run."""

    def __init__(self, spec, on_progress=None):
        self.spec = spec
        self.doc = spec.doc
        self.out = spec.output_dir
        self.task = spec.task()
        self.on_progress = on_progress
        self.stage = None

    def path(self, rel):
        return self.out / rel

    def require(self, rel):
        path = self.path(rel)
        if not path.exists():
            raise DependencyError(self.stage, PRODUCERS[rel], rel)
        return path

    def policy(self, name):
        return read_checkpoint(self.require(f"checkpoints/{name}.json"))

    def pairs(self, split):
        return read_pairs(self.require(f"data/{split}.jsonl"))

    def report(self, message):
        if self.on_progress is not None:
            self.on_progress(message)

    def step_reporter(self, label, total):
        def on_step(record):
            if record.step % 10 == 0 or record.step == total:
                self.report(f"{label}: step {record.step}/{total}")

        return on_step

    def train_config(self, **changes):
        changes.setdefault("teacher", cfgmod.teacher_config(self.doc))
        return cfgmod.train_config(self.doc, self.stage, **changes)

    def train_data(self, config, **models):
        pairs = self.pairs("train")
        return TrainData(
            reference=self.policy("reference"),
            pairs=pairs,
            prompts=[pair.prompt for pair in pairs],
            probe_prompts=self.task.probe_prompts(config.probe_prompts),
            **models,
        )


def stage_gen_data(ctx):
    task_cfg = ctx.doc["task"]
    rng = np.random.default_rng(ctx.spec.seed)
    reference = warm_up_reference(
        ctx.task,
        initial_policy(ctx.doc, ctx.task),
        rng,
        task_cfg["warmup_steps"],
        k=task_cfg["warmup_k"],
        batch=task_cfg["warmup_batch"],
        lr=task_cfg["warmup_lr"],
    )
    write_checkpoint(ctx.path("checkpoints/reference.json"), reference)
    train_pairs = gen_preferences(
        ctx.task, task_cfg["n_train"], rng, reference
    )
    test_pairs = gen_preferences(
        ctx.task, task_cfg["n_test"], rng, reference
    )
    write_pairs(ctx.path("data/train.jsonl"), train_pairs)
    write_pairs(ctx.path("data/test.jsonl"), test_pairs)


@contextlib.contextmanager
def partial_curve(path, fields):
    """On divergence, write the records so far (diagnostic row last)."""
    try:
        yield
    except DivergenceError as exc:
        write_csv(path, fields, exc.records)
        logger.warning("%s: partial curve written to %s", exc, path)
        raise


def stage_train_rm(ctx):
    config = ctx.train_config()
    pairs = ctx.pairs("train")
    reference = ctx.policy("reference")
    rm = init_reward_model(
        reference.vocab_size,
        reference.max_context,
        prompt_len=reference.prompt_len,
        seed=ctx.spec.seed,
        embed_dim=ctx.doc["policy"]["embed_dim"],
        hidden=ctx.doc["policy"]["hidden"],
    )
    curve = ctx.path("curves/rm.csv")
    with partial_curve(curve, RM_RECORD_FIELDS):
        rm, records = train_reward_model(
            config, pairs, rm, ctx.step_reporter("train-rm", config.steps)
        )
    write_checkpoint(ctx.path("checkpoints/rm.json"), rm)
    write_csv(curve, RM_RECORD_FIELDS, records)


def training_stage(objective, name, models=()):
    """Stage that trains ``objective`` from the reference policy.

    ``models`` pairs TrainData fields with the checkpoints filling them.
    """

    def run(ctx):
        config = ctx.train_config()
        loaded = {field: ctx.policy(ckpt) for field, ckpt in models}
        data = ctx.train_data(config, **loaded)
        curve = ctx.path(f"curves/{name}.csv")
        with partial_curve(curve, RUN_RECORD_FIELDS):
            policy, records = train(
                config,
                objective,
                data,
                ctx.step_reporter(ctx.stage, config.steps),
            )
        write_checkpoint(ctx.path(f"checkpoints/{name}.json"), policy)
        write_csv(curve, RUN_RECORD_FIELDS, records)

    return run


DPO_PAIR = (("dpo", "dpo"), ("negative", "reverse_dpo"))


def stage_verify(ctx):
    section = ctx.doc["verify"]
    rng = np.random.default_rng(ctx.spec.seed)
    reports = verify_sweep(
        rng,
        section["instances"],
        section["vocab_sizes"],
        section["max_contexts"],
        section["contrastive"],
    )
    write_csv(
        ctx.path("verify.csv"),
        REPORT_FIELDS,
        [report.to_row() for report in reports],
    )
    failed = [report for report in reports if not report.passed]
    if failed:
        raise CheckFailure(
            f"{len(failed)} of {len(reports)} identity checks failed",
            failed[0],
        )


def reward_accuracy_rows(task, rm, dpo, negative, reference, beta0, splits):
    """Accuracy of gold, RM, DPO and contrastive rewards on each split."""
    rewards = [
        ("gold", task),
        ("rm", RmReward(rm)),
        ("dpo", DpoReward(dpo, reference, beta0)),
        ("contrastive", ContrastiveReward(dpo, negative, beta0)),
    ]
    return [
        [name] + [reward_accuracy(fn, pairs) for pairs in splits]
        for name, fn in rewards
    ]


def _accuracy_rows(ctx):
    return reward_accuracy_rows(
        ctx.task,
        ctx.policy("rm"),
        ctx.policy("dpo"),
        ctx.policy("reverse_dpo"),
        ctx.policy("reference"),
        ctx.doc["train"]["beta0"],
        [ctx.pairs("train"), ctx.pairs("test")],
    )


def stage_eval_reward_acc(ctx):
    write_csv(
        ctx.path("reward_accuracy.csv"), ACCURACY_FIELDS, _accuracy_rows(ctx)
    )


def convergence_bench(config, data, on_step=None):
    """Sentence-level PG, token REINFORCE and AlignDistil from one init.

    ``config`` carries the shared static beta and step count; returns
    ``{run name: [RunRecord]}``.
    """
    curves = {}
    for name, objective in CONVERGENCE_RUNS:
        _, curves[name] = train(config, objective, data, on_step)
    return curves


def stage_convergence(ctx):
    section = ctx.doc["convergence"]
    steps = section["steps"]
    dpo, negative = ctx.policy("dpo"), ctx.policy("reverse_dpo")
    if steps == 0:
        curves = {name: [] for name, _ in CONVERGENCE_RUNS}
    else:
        teacher = cfgmod.teacher_config(
            ctx.doc,
            mode=CONSTANT_EXTRAPOLATE,
            beta=section["beta"],
            weight=None,
        )
        config = ctx.train_config(
            steps=steps, beta=section["beta"], teacher=teacher
        )
        data = ctx.train_data(config, dpo=dpo, negative=negative)
        curves = convergence_bench(
            config, data, ctx.step_reporter(ctx.stage, steps)
        )
    for name, records in curves.items():
        write_csv(
            ctx.path(f"convergence/{name}.csv"), RUN_RECORD_FIELDS, records
        )


def extrapolation_rows(config, data, weights, adaptive_teacher, on_step=None):
    """Final KL to pi_dpo, length and reward per extrapolation teacher.

    Every row trains off-policy on the preference responses, so all
    teachers see the same data.
    """
    runs = [
        (
            "constant",
            weight,
            TeacherConfig(
                mode=CONSTANT_EXTRAPOLATE,
                beta0=config.beta0,
                beta=config.beta,
                weight=weight,
            ),
        )
        for weight in weights
    ]
    runs.append(("adaptive", "", adaptive_teacher))
    rows = []
    for label, weight, teacher in runs:
        run_config = replace(config, teacher=teacher)
        _, records = train(run_config, ALIGN_OFF, data, on_step)
        final = records[-1]
        rows.append(
            [
                label,
                weight,
                final.kl_to_anchor,
                final.response_len_mean,
                final.token_avg_reward,
            ]
        )
    return rows


def ablation_tables(ctx):
    """Reward-accuracy rows and extrapolation-weight rows of one run."""
    section = ctx.doc["ablation"]
    accuracy = _accuracy_rows(ctx)
    config = ctx.train_config(steps=section["steps"])
    data = ctx.train_data(
        config, dpo=ctx.policy("dpo"), negative=ctx.policy("reverse_dpo")
    )
    extrapolation = extrapolation_rows(
        config,
        data,
        section["weights"],
        cfgmod.teacher_config(ctx.doc, mode=ADAPTIVE_EXTRAPOLATE),
        ctx.step_reporter(ctx.stage, section["steps"]),
    )
    return accuracy, extrapolation


def stage_ablation(ctx):
    accuracy, extrapolation = ablation_tables(ctx)
    write_csv(
        ctx.path("ablation/reward_accuracy.csv"), ACCURACY_FIELDS, accuracy
    )
    write_csv(
        ctx.path("ablation/extrapolation.csv"),
        EXTRAPOLATION_FIELDS,
        extrapolation,
    )


class Stage(NamedTuple):
    run: Callable
    outputs: Tuple[str, ...]


def _trained(name):
    return (f"checkpoints/{name}.json", f"curves/{name}.csv")


STAGES = {
    "gen-data": Stage(
        stage_gen_data,
        (
            "checkpoints/reference.json",
            "data/train.jsonl",
            "data/test.jsonl",
        ),
    ),
    "train-rm": Stage(stage_train_rm, _trained("rm")),
    "train-dpo": Stage(training_stage(DPO, "dpo"), _trained("dpo")),
    "train-reverse-dpo": Stage(
        training_stage(REVERSE_DPO, "reverse_dpo"), _trained("reverse_dpo")
    ),
    "align-on": Stage(
        training_stage(ALIGN_ON, "align_on", DPO_PAIR), _trained("align_on")
    ),
    "align-off": Stage(
        training_stage(ALIGN_OFF, "align_off", DPO_PAIR),
        _trained("align_off"),
    ),
    "baseline-sentence": Stage(
        training_stage(BASELINE_SENTENCE, "baseline_sentence", DPO_PAIR),
        _trained("baseline_sentence"),
    ),
    "baseline-token": Stage(
        training_stage(BASELINE_TOKEN, "baseline_token", DPO_PAIR),
        _trained("baseline_token"),
    ),
    "verify": Stage(stage_verify, ("verify.csv",)),
    "eval-reward-acc": Stage(stage_eval_reward_acc, ("reward_accuracy.csv",)),
    "convergence-bench": Stage(
        stage_convergence,
        tuple(f"convergence/{name}.csv" for name, _ in CONVERGENCE_RUNS),
    ),
    "ablation": Stage(
        stage_ablation,
        ("ablation/reward_accuracy.csv", "ablation/extrapolation.csv"),
    ),
}

PRODUCERS = {
    output: name for name, stage in STAGES.items() for output in stage.outputs
}


# ---------------------------------------------------------------------------
# Running experiments
# ---------------------------------------------------------------------------


def run_experiment(spec, on_progress=None):
    """Run every stage of ``spec`` in order; return the manifest path.

    Library errors that already name their cause (missing dependency,
    failed check, bad config) propagate unchanged; anything else is
    wrapped in a StageError naming the stage.
    """
    torch.set_num_threads(1)
    spec.output_dir.mkdir(parents=True, exist_ok=True)
    started = utc_now()
    reset_gold_margin_audit()
    ctx = RunContext(spec, on_progress)
    for name in spec.stages:
        ctx.stage = name
        ctx.report(f"Running {name}...")
        logger.info("%s: stage %s", spec.name, name)
        try:
            STAGES[name].run(ctx)
        except (DependencyError, CheckFailure, ConfigError, StageError):
            raise
        except (LabError, ArithmeticError, ValueError, RuntimeError) as exc:
            raise StageError(name, exc) from exc
        reads = gold_margin_reads()
        if reads:
            raise CheckFailure(
                f"stage '{name}' read gold_margin {reads} time(s)"
            )
    return write_manifest(
        spec.output_dir, spec.config_hashes(), spec.stages, started
    )


def seed_sweep(spec, seeds, workers=None, stages=None):
    """Run ``spec`` once per seed in a thread pool.

    Each seed writes to ``<output_dir>/seed-<seed>``; output directories
    are returned in seed order.
    """

    def run_one(seed):
        changes = {
            "seed": int(seed),
            "output_dir": str(spec.output_dir / f"seed-{seed}"),
        }
        if stages is not None:
            changes["stages"] = list(stages)
        child = spec.with_changes(**changes)
        run_experiment(child)
        return child.output_dir

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_one, seeds))


def read_curve(path, column="token_avg_reward"):
    return np.array([float(row[column]) for row in read_csv(path)])


def auc(curve):
    """Area under a per-step curve (unit step width)."""
    return float(np.sum(np.asarray(curve, dtype=float)))


def steps_to_reach(curve, target) -> Optional[int]:
    """First 1-based step whose value reaches ``target``, or None."""
    hits = np.nonzero(np.asarray(curve, dtype=float) >= target)[0]
    return int(hits[0]) + 1 if hits.size else None


def convergence_summary(out_dir):
    """AUC and final token-averaged reward of each convergence curve."""
    summary = {}
    for name, _ in CONVERGENCE_RUNS:
        curve = read_curve(Path(out_dir) / "convergence" / f"{name}.csv")
        summary[name] = {
            "auc": auc(curve),
            "final": float(curve[-1]) if curve.size else float("nan"),
        }
    return summary
