"""Training objectives and the SGD loop.

Objectives (``train(config, objective, data)``):

==================  ==========================================  ==========
objective           loss                                        anchor
==================  ==========================================  ==========
dpo                 -log sigmoid(beta0 * log-ratio margin)      pi_ref
reverse-dpo         dpo on chosen/rejected swapped              pi_ref
align-off           sum_t beta_t KL(pi_theta || pi*) / |y|       pi_dpo
align-on            align-off over responses sampled from theta pi_dpo
baseline-sentence   -(sequence-level contrastive PG surrogate)  pi_dpo
baseline-token      -(token-level REINFORCE surrogate)          pi_dpo
==================  ==========================================  ==========

Every step records the pre-update loss and probe metrics of the updated
policy. The on-policy gradient treats sampled prefixes as data.
"""

import logging
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional

import numpy as np
import torch

from aligndistil_lab.errors import (
    ConfigError,
    DivergenceError,
    EmptyBatchError,
    NonFiniteError,
)
from aligndistil_lab.policy import (
    DTYPE,
    MAX_SPACE,
    PrefixTree,
    Sequence,
    check_same_space,
    context_logits,
    count_responses,
    grad,
    kl_rows,
    log_softmax,
    per_sequence,
    sample_batch,
    seq_log_probs,
    token_log_probs,
    unroll,
    value_and_grad,
)
from aligndistil_lab.rewards import (
    ContrastiveReward,
    DpoReward,
    bradley_terry_loss,
    bt_loss,
    rm_scores,
    score_sequences,
    split_pairs,
    swap_pairs,
)
from aligndistil_lab.teacher import (
    RLHF_COMBINE,
    TeacherConfig,
    teacher_steps,
)

logger = logging.getLogger(__name__)

DPO = "dpo"
REVERSE_DPO = "reverse-dpo"
ALIGN_ON = "align-on"
ALIGN_OFF = "align-off"
BASELINE_SENTENCE = "baseline-sentence"
BASELINE_TOKEN = "baseline-token"
OBJECTIVES = (
    DPO,
    REVERSE_DPO,
    ALIGN_ON,
    ALIGN_OFF,
    BASELINE_SENTENCE,
    BASELINE_TOKEN,
)
PAIR_OBJECTIVES = (DPO, REVERSE_DPO)
ALIGN_OBJECTIVES = (ALIGN_ON, ALIGN_OFF)
SAMPLING_OBJECTIVES = (ALIGN_ON, BASELINE_SENTENCE, BASELINE_TOKEN)

OFFPOLICY_SOURCES = ("chosen", "both")

# Probes with at most this many contexts are measured by exact enumeration.
EXACT_PROBE_LIMIT = 4096


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    batch_size: int = 32
    lr: float = 0.5
    seed: int = 0
    beta0: float = 0.1
    beta: float = 0.08
    momentum: float = 0.0
    teacher: Optional[TeacherConfig] = None
    probe_prompts: int = 64
    probe_samples: int = 4
    probe_seed: int = 1729
    offpolicy_responses: str = "chosen"

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be >= 1")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(
                f"momentum must be in [0, 1), got {self.momentum}"
            )
        if not self.beta0 > 0 or not self.beta > 0:
            raise ConfigError("beta0 and beta must be > 0")
        if self.probe_prompts < 1 or self.probe_samples < 1:
            raise ConfigError("probe sizes must be >= 1")
        if self.offpolicy_responses not in OFFPOLICY_SOURCES:
            raise ConfigError(
                "offpolicy_responses must be one of "
                f"{', '.join(OFFPOLICY_SOURCES)}"
            )

    @property
    def teacher_config(self):
        if self.teacher is not None:
            return self.teacher
        return TeacherConfig(beta0=self.beta0)


class RunRecord(NamedTuple):
    step: int
    loss: float
    token_avg_reward: float
    kl_to_anchor: float
    response_len_mean: float


class RmRecord(NamedTuple):
    step: int
    loss: float
    batch_accuracy: float


class Teacher(NamedTuple):
    """The policies a teacher is built from: (pi_dpo, pi_rev or pi_ref)."""

    dpo: object
    other: object


@dataclass
class TrainData:
    """Everything a training run reads besides its config."""

    reference: object
    pairs: list = field(default_factory=list)
    prompts: list = field(default_factory=list)
    probe_prompts: list = field(default_factory=list)
    init: Optional[object] = None
    dpo: Optional[object] = None
    negative: Optional[object] = None


def as_sequences(batch):
    return [
        s if isinstance(s, Sequence) else Sequence(s[0], s[1]) for s in batch
    ]


# ---------------------------------------------------------------------------
# Losses and gradients
# ---------------------------------------------------------------------------


def dpo_margins(pi_theta, pi_ref, beta0, pairs):
    """beta0 * [log-ratio(y_w) - log-ratio(y_l)] per pair."""
    if not pairs:
        raise EmptyBatchError("empty preference batch")
    check_same_space(pi_theta, pi_ref)
    chosen, rejected = split_pairs(pairs)
    unrolled = unroll(pi_theta, chosen + rejected)
    ratios = per_sequence(
        unrolled,
        token_log_probs(pi_theta, unrolled)
        - token_log_probs(pi_ref, unrolled).detach(),
    )
    n = len(pairs)
    return beta0 * (ratios[:n] - ratios[n:])


def dpo_loss(pi_theta, pi_ref, beta0, pairs):
    return bradley_terry_loss(dpo_margins(pi_theta, pi_ref, beta0, pairs))


def reverse_dpo_loss(pi_theta, pi_ref, beta0, pairs):
    return dpo_loss(pi_theta, pi_ref, beta0, swap_pairs(pairs))


def distill_terms(pi_theta, teacher, cfg, seqs):
    """(1/|y|) sum_t beta_t KL(pi_theta || pi*) per sequence."""
    check_same_space(pi_theta, teacher.dpo, teacher.other)
    unrolled = unroll(pi_theta, seqs)
    target = teacher_steps(teacher.dpo, teacher.other, cfg, unrolled.contexts)
    target.check_alpha(cfg)
    logp = log_softmax(context_logits(pi_theta, unrolled.contexts))
    kl = kl_rows(logp, target.log_pi_star)
    per_seq = per_sequence(unrolled, target.beta_t * kl) / unrolled.lengths
    return per_seq, target


def aligndistil_off_loss(pi_theta, teacher, cfg, batch):
    seqs = as_sequences(batch)
    if not seqs:
        raise EmptyBatchError("empty distillation batch")
    per_seq, _ = distill_terms(pi_theta, teacher, cfg, seqs)
    return per_seq.mean()


def aligndistil_on_loss(pi_theta, teacher, cfg, prompts, rng):
    """Off-policy body over responses sampled from ``pi_theta`` itself."""
    if not prompts:
        raise EmptyBatchError("empty prompt batch")
    with torch.no_grad():
        frozen = pi_theta.with_params(pi_theta.params.detach())
        seqs = sample_batch(frozen, prompts, rng)
    return aligndistil_off_loss(pi_theta, teacher, cfg, seqs)


def sequence_rewards(r_ctr, seqs):
    """Per-sequence rewards from a RewardFn or a list of floats."""
    if hasattr(r_ctr, "score") or callable(r_ctr):
        values = score_sequences(r_ctr, seqs)
    else:
        values = np.asarray(r_ctr, dtype=np.float64).reshape(-1)
    if len(values) != len(seqs):
        raise ConfigError(
            f"{len(values)} rewards for {len(seqs)} sequences"
        )
    return torch.as_tensor(values, dtype=DTYPE)


def sentence_pg_surrogate(pi_theta, pi_dpo, r_ctr, beta, batch):
    """mean (1/|y|) [r(x,y) log pi_theta(y) - beta log(pi_theta/pi_dpo)(y)].

    Rewards and pi_dpo are constants; the gradient is the sequence-level
    policy-gradient direction.
    """
    seqs = as_sequences(batch)
    if not seqs:
        raise EmptyBatchError("empty sample batch")
    check_same_space(pi_theta, pi_dpo)
    rewards = sequence_rewards(r_ctr, seqs)
    unrolled = unroll(pi_theta, seqs)
    logp = per_sequence(unrolled, token_log_probs(pi_theta, unrolled))
    with torch.no_grad():
        anchor = seq_log_probs(pi_dpo, seqs)
    body = rewards * logp - beta * (logp - anchor)
    return (body / unrolled.lengths).mean()


def sentence_pg_grad(pi_theta, pi_dpo, r_ctr, beta, batch):
    return grad(
        pi_theta,
        lambda p: sentence_pg_surrogate(p, pi_dpo, r_ctr, beta, batch),
    )


def token_returns(unrolled, rewards):
    """G_t = sum_{i >= t} r_i within each sequence of ``unrolled``."""
    counts = torch.bincount(
        unrolled.seq_index, minlength=unrolled.n_seqs
    ).tolist()
    returns = [
        torch.flip(torch.cumsum(torch.flip(chunk, [0]), 0), [0])
        for chunk in torch.split(rewards, counts)
    ]
    if not returns:
        return rewards
    return torch.cat(returns)


def token_rewards_for(r_ctr, seqs):
    """Per-position rewards: a DpoReward-like fn or a flat list of floats."""
    if hasattr(r_ctr, "token_rewards"):
        _, values = r_ctr.token_rewards(seqs)
        return values.detach()
    return torch.as_tensor(np.asarray(r_ctr, dtype=np.float64))


def token_reinforce_surrogate(pi_theta, pi_dpo, r_ctr, beta, batch):
    """mean (1/|y|) sum_t [G_t log pi_theta(y_t|.) - beta KL(theta||dpo)]."""
    seqs = as_sequences(batch)
    if not seqs:
        raise EmptyBatchError("empty sample batch")
    check_same_space(pi_theta, pi_dpo)
    unrolled = unroll(pi_theta, seqs)
    rewards = token_rewards_for(r_ctr, seqs)
    if rewards.numel() != len(unrolled.contexts):
        raise ConfigError(
            f"{rewards.numel()} token rewards for "
            f"{len(unrolled.contexts)} positions"
        )
    returns = token_returns(unrolled, rewards)
    logp = log_softmax(context_logits(pi_theta, unrolled.contexts))
    chosen = logp.gather(1, unrolled.targets.view(-1, 1)).squeeze(1)
    with torch.no_grad():
        anchor = log_softmax(context_logits(pi_dpo, unrolled.contexts))
    body = returns * chosen - beta * kl_rows(logp, anchor)
    return (per_sequence(unrolled, body) / unrolled.lengths).mean()


def token_reinforce_grad(pi_theta, pi_dpo, r_ctr, beta, batch):
    return grad(
        pi_theta,
        lambda p: token_reinforce_surrogate(p, pi_dpo, r_ctr, beta, batch),
    )


# ---------------------------------------------------------------------------
# Probe telemetry
# ---------------------------------------------------------------------------


class Probe:
    """Fixed held-out prompts measuring reward, KL to anchor and length.

    Small spaces are measured exactly by enumeration; larger ones by
    rollouts re-drawn from the same seed at every call.
    """

    def __init__(
        self,
        prompts,
        anchor,
        reward_fn=None,
        implicit_reference=None,
        beta0=0.1,
        samples=4,
        seed=0,
    ):
        if not prompts:
            raise EmptyBatchError("empty probe set")
        self.prompts = [tuple(p) for p in prompts]
        self.anchor = anchor
        self.reward_fn = reward_fn
        self.implicit_reference = implicit_reference
        self.beta0 = beta0
        self.samples = samples
        self.seed = seed
        V, T = anchor.vocab_size, anchor.max_context
        self.tree = None
        if (
            V**T <= MAX_SPACE
            and len(self.prompts) * count_responses(V, T) <= EXACT_PROBE_LIMIT
        ):
            self.tree = PrefixTree(V, T, self.prompts)
            with torch.no_grad():
                self._anchor_logp = self.tree.step_log_probs(anchor)
            self._fixed_rewards = None

    @property
    def exact(self):
        return self.tree is not None

    def _reward_fn(self, policy):
        if self.reward_fn is not None:
            return self.reward_fn
        return DpoReward(policy, self.implicit_reference, self.beta0)

    def measure(self, policy):
        """(token_avg_reward, kl_to_anchor, response_len_mean)."""
        with torch.no_grad():
            policy = policy.with_params(policy.params.detach())
            if self.exact:
                return self._measure_exact(policy)
            return self._measure_sampled(policy)

    def _measure_exact(self, policy):
        tree = self.tree
        n = len(self.prompts)
        logp = tree.step_log_probs(policy)
        reach = tree.reach_log_probs(logp)
        weights = torch.exp(tree.sequence_log_probs(logp, reach))
        if self.reward_fn is not None:
            if self._fixed_rewards is None:
                self._fixed_rewards = torch.as_tensor(
                    score_sequences(self.reward_fn, tree.sequences)
                )
            rewards = self._fixed_rewards
        else:
            rewards = torch.as_tensor(
                score_sequences(self._reward_fn(policy), tree.sequences)
            )
        kl = torch.where(
            tree.forced,
            torch.zeros(len(tree), dtype=DTYPE),
            kl_rows(logp, self._anchor_logp),
        )
        return (
            float((weights * rewards / tree.lengths).sum()) / n,
            float((torch.exp(reach) * kl).sum()) / n,
            float((weights * tree.lengths).sum()) / n,
        )

    def _measure_sampled(self, policy):
        rng = np.random.default_rng(self.seed)
        prompts = [p for p in self.prompts for _ in range(self.samples)]
        seqs = sample_batch(policy, prompts, rng)
        unrolled = unroll(policy, seqs)
        logp = log_softmax(context_logits(policy, unrolled.contexts))
        anchor = log_softmax(context_logits(self.anchor, unrolled.contexts))
        kl = per_sequence(unrolled, kl_rows(logp, anchor))
        rewards = score_sequences(self._reward_fn(policy), seqs)
        lengths = unrolled.lengths.numpy()
        return (
            float(np.mean(rewards / lengths)),
            float(kl.mean()),
            float(np.mean(lengths)),
        )


def build_probe(config, objective, data):
    prompts = data.probe_prompts[: config.probe_prompts] or data.prompts[
        : config.probe_prompts
    ]
    common = dict(
        prompts=prompts,
        beta0=config.beta0,
        samples=config.probe_samples,
        seed=config.probe_seed,
    )
    if objective in PAIR_OBJECTIVES or data.dpo is None:
        return Probe(
            anchor=data.reference, implicit_reference=data.reference, **common
        )
    if data.negative is not None:
        reward = ContrastiveReward(data.dpo, data.negative, config.beta0)
    else:
        reward = DpoReward(data.dpo, data.reference, config.beta0)
    return Probe(anchor=data.dpo, reward_fn=reward, **common)


# ---------------------------------------------------------------------------
# Optimizer loop
# ---------------------------------------------------------------------------


class Sgd:
    """Plain SGD with optional heavy-ball momentum."""

    def __init__(self, lr, momentum=0.0):
        self.lr = lr
        self.momentum = momentum
        self.velocity = None

    def step(self, params, gradient):
        if self.momentum:
            if self.velocity is None:
                self.velocity = torch.zeros_like(gradient)
            self.velocity = self.momentum * self.velocity + gradient
            gradient = self.velocity
        return params - self.lr * gradient


def _teacher_for(config, data):
    cfg = config.teacher_config
    if data.dpo is None:
        raise ConfigError("alignment objectives need a trained pi_dpo")
    if cfg.mode == RLHF_COMBINE:
        return cfg, Teacher(data.dpo, data.reference)
    if data.negative is None:
        raise ConfigError(
            "extrapolating teachers need a reverse-DPO policy"
        )
    return cfg, Teacher(data.dpo, data.negative)


def _contrastive(config, data):
    if data.dpo is None or data.negative is None:
        raise ConfigError("baselines need pi_dpo and pi_dpo_neg")
    return ContrastiveReward(data.dpo, data.negative, config.beta0)


def _draw(rng, items, batch_size, what):
    if not items:
        raise EmptyBatchError(f"no {what} to train on")
    picks = rng.integers(0, len(items), size=batch_size)
    return [items[i] for i in picks]


def make_step_loss(config, objective, data, rng):
    """Return ``next_loss(policy)``: draws a batch and returns its closure.

    The batch is drawn (and, for sampling objectives, rolled out from the
    current policy) once per step; the closure is then differentiable.
    """
    if objective not in OBJECTIVES:
        raise ConfigError(
            f"objective must be one of {', '.join(OBJECTIVES)}, "
            f"got {objective!r}"
        )
    beta0, beta = config.beta0, config.beta

    if objective in PAIR_OBJECTIVES:
        loss_fn = dpo_loss if objective == DPO else reverse_dpo_loss

        def next_loss(policy):
            pairs = _draw(rng, data.pairs, config.batch_size, "pairs")
            return lambda p: loss_fn(p, data.reference, beta0, pairs)

        return next_loss

    if objective == ALIGN_OFF:
        cfg, teacher = _teacher_for(config, data)

        def next_loss(policy):
            pairs = _draw(rng, data.pairs, config.batch_size, "pairs")
            chosen, rejected = split_pairs(pairs)
            seqs = chosen
            if config.offpolicy_responses == "both":
                seqs = chosen + rejected
            return lambda p: aligndistil_off_loss(p, teacher, cfg, seqs)

        return next_loss

    if objective == ALIGN_ON:
        cfg, teacher = _teacher_for(config, data)

        def next_loss(policy):
            prompts = _draw(rng, data.prompts, config.batch_size, "prompts")
            seqs = sample_batch(policy, prompts, rng)
            return lambda p: aligndistil_off_loss(p, teacher, cfg, seqs)

        return next_loss

    r_ctr = _contrastive(config, data)

    if objective == BASELINE_SENTENCE:

        def next_loss(policy):
            prompts = _draw(rng, data.prompts, config.batch_size, "prompts")
            seqs = sample_batch(policy, prompts, rng)
            rewards = r_ctr.score(seqs)
            return lambda p: -sentence_pg_surrogate(
                p, data.dpo, rewards, beta, seqs
            )

        return next_loss

    def next_loss(policy):
        prompts = _draw(rng, data.prompts, config.batch_size, "prompts")
        seqs = sample_batch(policy, prompts, rng)
        _, rewards = r_ctr.token_rewards(seqs)
        return lambda p: -token_reinforce_surrogate(
            p, data.dpo, rewards, beta, seqs
        )

    return next_loss


def train(config, objective, data, on_step=None):
    """Run ``config.steps`` SGD steps; return (policy, [RunRecord]).

    A non-finite loss raises DivergenceError whose records end with a
    diagnostic record (loss NaN, metrics of the last finite policy).
    """
    policy = data.init if data.init is not None else data.reference
    check_same_space(policy, data.reference)
    rng = np.random.default_rng(config.seed)
    next_loss = make_step_loss(config, objective, data, rng)
    probe = build_probe(config, objective, data)
    optimizer = Sgd(config.lr, config.momentum)
    records: List[RunRecord] = []
    logger.info(
        "training %s: %d steps, batch %d, lr %g, probe %s",
        objective,
        config.steps,
        config.batch_size,
        config.lr,
        "exact" if probe.exact else "sampled",
    )
    for step in range(1, config.steps + 1):
        try:
            closure = next_loss(policy)
            loss, gradient = value_and_grad(policy, closure)
        except NonFiniteError as exc:
            metrics = probe.measure(policy)
            records.append(RunRecord(step, float("nan"), *metrics))
            logger.error("%s diverged at step %d: %s", objective, step, exc)
            raise DivergenceError(step, records) from exc
        policy = policy.with_params(optimizer.step(policy.params, gradient))
        record = RunRecord(step, loss, *probe.measure(policy))
        records.append(record)
        logger.debug("%s step %d: %s", objective, step, record)
        if on_step is not None:
            on_step(record)
    return policy, records


def train_reward_model(config, pairs, rm, on_step=None):
    """Bradley-Terry training of ``rm`` on ``pairs``."""
    rng = np.random.default_rng(config.seed)
    optimizer = Sgd(config.lr, config.momentum)
    records: List[RmRecord] = []
    for step in range(1, config.steps + 1):
        batch = _draw(rng, pairs, config.batch_size, "pairs")
        try:
            loss, gradient = value_and_grad(rm, lambda m: bt_loss(m, batch))
        except NonFiniteError as exc:
            records.append(RmRecord(step, float("nan"), float("nan")))
            raise DivergenceError(step, records) from exc
        with torch.no_grad():
            chosen, rejected = split_pairs(batch)
            margins = rm_scores(rm, chosen) - rm_scores(rm, rejected)
            accuracy = float(
                ((margins > 0).sum() + 0.5 * (margins == 0).sum())
                / len(batch)
            )
        rm = rm.with_params(optimizer.step(rm.params, gradient))
        record = RmRecord(step, loss, accuracy)
        records.append(record)
        if on_step is not None:
            on_step(record)
    return rm, records
