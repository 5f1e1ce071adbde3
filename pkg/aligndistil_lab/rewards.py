"""Reward definitions: Bradley-Terry reward model, DPO and contrastive
rewards (sequence and token level), and the reward-accuracy evaluator."""

import logging
import threading
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F

from aligndistil_lab.errors import (
    ConfigError,
    EmptyBatchError,
    InvalidContextError,
)
from aligndistil_lab.policy import (
    CHECKPOINT_FORMAT,
    DTYPE,
    Sequence,
    check_same_space,
    check_sequence,
    is_forced,
    layout_size,
    log_softmax,
    logits,
    neural_layout,
    per_sequence,
    token_log_probs,
    trunk_hidden,
    unpack,
    unroll,
)

logger = logging.getLogger(__name__)

REWARD_MODEL = "reward_model"


# ---------------------------------------------------------------------------
# Preference pairs
# ---------------------------------------------------------------------------

# One counter per thread; a run stays on the thread that started it.
_audit = threading.local()


def reset_gold_margin_audit():
    _audit.reads = 0


def gold_margin_reads():
    """How often ``PreferencePair.gold_margin`` was read since the reset."""
    return getattr(_audit, "reads", 0)


class PreferencePair:
    """(x, y_w, y_l) with the generator's true reward gap.

    ``gold_margin`` is diagnostic only: every read is counted so pipelines
    can assert that no training stage looked at it.
    """

    __slots__ = ("prompt", "chosen", "rejected", "_gold_margin")

    def __init__(self, prompt, chosen, rejected, gold_margin=0.0):
        self.prompt = tuple(int(t) for t in prompt)
        self.chosen = tuple(int(t) for t in chosen)
        self.rejected = tuple(int(t) for t in rejected)
        if self.chosen == self.rejected:
            raise InvalidContextError("chosen and rejected are identical")
        self._gold_margin = float(gold_margin)

    @property
    def gold_margin(self):
        _audit.reads = gold_margin_reads() + 1
        return self._gold_margin

    @property
    def chosen_seq(self):
        return Sequence(self.prompt, self.chosen)

    @property
    def rejected_seq(self):
        return Sequence(self.prompt, self.rejected)

    def swapped(self):
        return PreferencePair(
            self.prompt, self.rejected, self.chosen, -self._gold_margin
        )

    def to_record(self):
        return {
            "prompt": list(self.prompt),
            "chosen": list(self.chosen),
            "rejected": list(self.rejected),
            "gold_margin": self._gold_margin,
        }

    @classmethod
    def from_record(cls, record):
        return cls(
            record["prompt"],
            record["chosen"],
            record["rejected"],
            record.get("gold_margin", 0.0),
        )

    def __eq__(self, other):
        if not isinstance(other, PreferencePair):
            return NotImplemented
        return (
            self.prompt == other.prompt
            and self.chosen == other.chosen
            and self.rejected == other.rejected
            and self._gold_margin == other._gold_margin
        )

    def __hash__(self):
        return hash((self.prompt, self.chosen, self.rejected))

    def __repr__(self):
        return (
            f"PreferencePair(prompt={self.prompt}, chosen={self.chosen}, "
            f"rejected={self.rejected})"
        )


def swap_pairs(pairs):
    return [pair.swapped() for pair in pairs]


def split_pairs(pairs):
    """Chosen and rejected Sequences of a batch, in batch order."""
    return (
        [pair.chosen_seq for pair in pairs],
        [pair.rejected_seq for pair in pairs],
    )


# ---------------------------------------------------------------------------
# Reward model
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RewardModel:
    """TinyNeural trunk over the whole (x, y) with a scalar head."""

    vocab_size: int
    max_context: int
    params: torch.Tensor
    prompt_len: int = 1
    seed: int = 0
    embed_dim: int = 8
    hidden: int = 32

    @property
    def layout(self):
        return neural_layout(
            self.vocab_size,
            self.max_context,
            self.embed_dim,
            self.hidden,
            head="scalar",
        )

    def __post_init__(self):
        expected = layout_size(self.layout)
        if self.params.dim() != 1 or self.params.numel() != expected:
            raise ConfigError(
                f"reward model expects {expected} parameters, got "
                f"{tuple(self.params.shape)}"
            )
        if self.params.dtype != DTYPE:
            object.__setattr__(self, "params", self.params.to(DTYPE))

    # Same (V, T_max, prompt_len) checks as Policy.
    @property
    def eos(self):
        return self.vocab_size - 1

    @property
    def n_params(self):
        return self.params.numel()

    def with_params(self, params):
        return replace(self, params=params)

    def same_space(self, other):
        return (
            self.vocab_size == other.vocab_size
            and self.max_context == other.max_context
            and self.prompt_len == other.prompt_len
        )


def init_reward_model(
    vocab_size, max_context, prompt_len=1, seed=0, embed_dim=8, hidden=32
):
    rng = np.random.default_rng(seed)
    chunks = []
    for name, shape in neural_layout(
        vocab_size, max_context, embed_dim, hidden, head="scalar"
    ):
        size = layout_size([(name, shape)])
        if name.startswith("b_"):
            chunks.append(np.zeros(size))
        else:
            fan_in = shape[-1] if name.startswith("w_") else 1
            if name == "head":
                fan_in = hidden
            chunks.append(rng.normal(0.0, 1.0, size) / np.sqrt(fan_in))
    return RewardModel(
        vocab_size=vocab_size,
        max_context=max_context,
        params=torch.from_numpy(np.concatenate(chunks)),
        prompt_len=prompt_len,
        seed=seed,
        embed_dim=embed_dim,
        hidden=hidden,
    )


def rm_scores(rm, seqs):
    """r_phi(x, y) for a batch of Sequences, shape (B,)."""
    if not seqs:
        return torch.zeros(0, dtype=DTYPE)
    for seq in seqs:
        check_sequence(rm, seq)
    weights = unpack(rm.params, rm.layout)
    hidden = trunk_hidden(
        weights,
        [seq.prompt + seq.response for seq in seqs],
        [len(seq.response) - 1 for seq in seqs],
    )
    return hidden @ weights["head"]


def bradley_terry_loss(margins):
    """mean(-log sigmoid(margin)) over a batch of reward margins."""
    if margins.numel() == 0:
        raise EmptyBatchError("empty preference batch")
    return -F.logsigmoid(margins).mean()


def bt_loss(rm, pairs):
    if not pairs:
        raise EmptyBatchError("empty preference batch")
    chosen, rejected = split_pairs(pairs)
    return bradley_terry_loss(rm_scores(rm, chosen) - rm_scores(rm, rejected))


def rm_to_checkpoint(rm):
    return {
        "format": CHECKPOINT_FORMAT,
        "kind": REWARD_MODEL,
        "vocab_size": rm.vocab_size,
        "max_context": rm.max_context,
        "prompt_len": rm.prompt_len,
        "seed": rm.seed,
        "embed_dim": rm.embed_dim,
        "hidden": rm.hidden,
        "params": rm.params.detach().tolist(),
    }


def rm_from_checkpoint(doc):
    return RewardModel(
        vocab_size=doc["vocab_size"],
        max_context=doc["max_context"],
        params=torch.tensor([float(x) for x in doc["params"]], dtype=DTYPE),
        prompt_len=doc["prompt_len"],
        seed=doc["seed"],
        embed_dim=doc["embed_dim"],
        hidden=doc["hidden"],
    )


# ---------------------------------------------------------------------------
# DPO and contrastive rewards
# ---------------------------------------------------------------------------


def check_beta0(beta0):
    if not beta0 > 0:
        raise ConfigError(f"beta0 must be > 0, got {beta0}")


def token_log_ratios(numerator, denominator, seqs):
    """log(num(y_t|.) / den(y_t|.)) at every free position of ``seqs``."""
    check_same_space(numerator, denominator)
    unrolled = unroll(numerator, seqs)
    ratios = token_log_probs(numerator, unrolled) - token_log_probs(
        denominator, unrolled
    )
    return unrolled, ratios


def seq_rewards(numerator, denominator, beta0, seqs):
    """beta0 * log(num(y|x) / den(y|x)) per Sequence, shape (B,)."""
    unrolled, ratios = token_log_ratios(numerator, denominator, seqs)
    return beta0 * per_sequence(unrolled, ratios)


def dpo_seq_reward(pi_dpo, pi_ref, beta0, seq):
    with torch.no_grad():
        return float(seq_rewards(pi_dpo, pi_ref, beta0, [seq])[0])


def dpo_token_reward(pi_dpo, pi_ref, beta0, prompt, prefix, token):
    """beta0 * log(pi_dpo(y_t | .) / pi_ref(y_t | .)); 0 at a forced EOS."""
    check_same_space(pi_dpo, pi_ref)
    if is_forced(len(prefix), pi_dpo.max_context):
        if token != pi_dpo.eos:
            raise InvalidContextError("only EOS may follow a full prefix")
        # Validates the context.
        logits(pi_dpo, prompt, prefix)
        return 0.0
    with torch.no_grad():
        num = log_softmax(logits(pi_dpo, prompt, prefix))[token]
        den = log_softmax(logits(pi_ref, prompt, prefix))[token]
    return float(beta0 * (num - den))


def ctr_reward(pi_dpo, pi_neg, beta0, seq):
    """Contrastive reward beta0 * log(pi_dpo(y|x) / pi_neg(y|x))."""
    return dpo_seq_reward(pi_dpo, pi_neg, beta0, seq)


def ctr_token_reward(pi_dpo, pi_neg, beta0, prompt, prefix, token):
    return dpo_token_reward(pi_dpo, pi_neg, beta0, prompt, prefix, token)


@dataclass(frozen=True, eq=False)
class RmReward:
    model: RewardModel

    def score(self, seqs):
        with torch.no_grad():
            return rm_scores(self.model, seqs).numpy()

    def __call__(self, prompt, response):
        return float(self.score([Sequence(prompt, response)])[0])


@dataclass(frozen=True, eq=False)
class DpoReward:
    policy: object
    reference: object
    beta0: float

    def __post_init__(self):
        check_beta0(self.beta0)
        check_same_space(self.policy, self.reference)

    def score(self, seqs):
        with torch.no_grad():
            return seq_rewards(
                self.policy, self.reference, self.beta0, seqs
            ).numpy()

    def token_rewards(self, seqs):
        """Per-position rewards and the unrolled positions they belong to."""
        with torch.no_grad():
            unrolled, ratios = token_log_ratios(
                self.policy, self.reference, seqs
            )
        return unrolled, self.beta0 * ratios

    def __call__(self, prompt, response):
        return float(self.score([Sequence(prompt, response)])[0])


@dataclass(frozen=True, eq=False)
class ContrastiveReward(DpoReward):
    """DpoReward whose denominator is the reverse-DPO model."""

    @property
    def negative(self):
        return self.reference


def score_sequences(fn, seqs):
    if hasattr(fn, "score"):
        return np.asarray(fn.score(seqs), dtype=np.float64)
    return np.array([fn(s.prompt, s.response) for s in seqs], dtype=float)


def reward_accuracy(fn, pairs):
    """Fraction of pairs with fn(x, y_w) > fn(x, y_l); ties count 0.5."""
    if not pairs:
        raise EmptyBatchError("empty evaluation set")
    chosen, rejected = split_pairs(pairs)
    win = score_sequences(fn, chosen)
    lose = score_sequences(fn, rejected)
    hits = (win > lose).sum() + 0.5 * (win == lose).sum()
    return float(hits) / len(pairs)
