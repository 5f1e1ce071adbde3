"""Tiny differentiable autoregressive policies over a small vocabulary.

Two kinds share one interface:

* ``tabular`` stores one logit row per reachable (prompt, prefix) context.
* ``tiny_neural`` is a fixed small network::

      f = [mean(E[context]); E[context[-1]]; P[len(prefix)]]
      h = tanh(W_h f + b_h)
      z = W_o h + b_o

  with the flat parameter layout ``E, P, W_h, b_h, W_o, b_o`` (row-major),
  where ``context`` is the prompt followed by the prefix.

Token ``V - 1`` is EOS. At the last position (``len(prefix) == T_max - 1``)
the sequence distribution is forced onto EOS, so the probabilities of
:func:`enumerate_responses` sum to one. ``logits`` and ``next_dist`` always
return the raw model output.
"""

import functools
import itertools
import logging
from dataclasses import dataclass, replace
from typing import Dict, List, NamedTuple, Tuple

import numpy as np
import torch

from aligndistil_lab.errors import (
    ConfigError,
    ContextTooLongError,
    InstanceTooLargeError,
    InvalidContextError,
    NonFiniteError,
    TokenOutOfRangeError,
    VocabularyMismatchError,
)

logger = logging.getLogger(__name__)

DTYPE = torch.float64
TABULAR = "tabular"
TINY_NEURAL = "tiny_neural"
KINDS = (TABULAR, TINY_NEURAL)

# Limit on V ** T_max for tabular storage and exact enumeration.
MAX_SPACE = 10**6

CHECKPOINT_FORMAT = "aligndistil-lab/checkpoint@1"

Tokens = Tuple[int, ...]
Context = Tuple[Tokens, Tokens]


@dataclass(frozen=True)
class Sequence:
    """A prompt ``x`` and a response ``y`` whose last token is EOS."""

    prompt: Tokens
    response: Tokens

    def __post_init__(self):
        object.__setattr__(self, "prompt", tuple(int(t) for t in self.prompt))
        object.__setattr__(
            self, "response", tuple(int(t) for t in self.response)
        )


# ---------------------------------------------------------------------------
# Parameter layouts
# ---------------------------------------------------------------------------


def free_prefixes(vocab_size, max_context):
    """EOS-free prefixes of length 0..T_max-1, by length then lexically."""
    prefixes = []
    for length in range(max_context):
        prefixes.extend(
            itertools.product(range(vocab_size - 1), repeat=length)
        )
    return prefixes


def count_responses(vocab_size, max_context):
    """Number of EOS-terminated responses: sum_k (V-1)^k, k < T_max."""
    return sum((vocab_size - 1) ** k for k in range(max_context))


@functools.lru_cache(maxsize=32)
def tabular_index(vocab_size, max_context, prompt_len) -> Dict[Context, int]:
    """Row of every reachable (prompt, prefix) context in a tabular policy."""
    prefixes = free_prefixes(vocab_size, max_context)
    index = {}
    for prompt in itertools.product(range(vocab_size), repeat=prompt_len):
        for prefix in prefixes:
            index[(prompt, prefix)] = len(index)
    return index


def neural_layout(vocab_size, max_context, embed_dim, hidden, head="policy"):
    """(name, shape) pairs of the flat parameter vector, in storage order.

    ``head="policy"`` ends with the output projection; ``head="scalar"``
    ends with the reward-model score vector.
    """
    layout = [
        ("embed", (vocab_size, embed_dim)),
        ("position", (max_context, embed_dim)),
        ("w_hidden", (hidden, 3 * embed_dim)),
        ("b_hidden", (hidden,)),
    ]
    if head == "policy":
        layout += [("w_out", (vocab_size, hidden)), ("b_out", (vocab_size,))]
    else:
        layout += [("head", (hidden,))]
    return layout


def layout_size(layout):
    total = 0
    for _, shape in layout:
        n = 1
        for dim in shape:
            n *= dim
        total += n
    return total


def unpack(params, layout):
    """Split a flat parameter tensor into named views."""
    views = {}
    offset = 0
    for name, shape in layout:
        n = layout_size([(name, shape)])
        views[name] = params[offset : offset + n].view(*shape)
        offset += n
    return views


def param_count(
    kind, vocab_size, max_context, prompt_len=1, embed_dim=8, hidden=32
):
    if kind == TABULAR:
        rows = vocab_size**prompt_len * count_responses(
            vocab_size, max_context
        )
        return rows * vocab_size
    return layout_size(
        neural_layout(vocab_size, max_context, embed_dim, hidden)
    )


# ---------------------------------------------------------------------------
# Policy
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Policy:
    """An autoregressive policy; immutable, so evaluation is thread-safe."""

    kind: str
    vocab_size: int
    max_context: int
    params: torch.Tensor
    prompt_len: int = 1
    seed: int = 0
    embed_dim: int = 8
    hidden: int = 32

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown policy kind: {self.kind!r}")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be at least 2")
        if self.max_context < 1 or self.prompt_len < 1:
            raise ConfigError("max_context and prompt_len must be >= 1")
        if (
            self.kind == TABULAR
            and self.vocab_size**self.max_context > MAX_SPACE
        ):
            raise InstanceTooLargeError(
                f"tabular policy needs V^T_max <= {MAX_SPACE}, got "
                f"{self.vocab_size}^{self.max_context}"
            )
        expected = param_count(
            self.kind,
            self.vocab_size,
            self.max_context,
            self.prompt_len,
            self.embed_dim,
            self.hidden,
        )
        if self.params.dim() != 1 or self.params.numel() != expected:
            raise ConfigError(
                f"{self.kind} policy expects {expected} parameters, got "
                f"{tuple(self.params.shape)}"
            )
        if self.params.dtype != DTYPE:
            object.__setattr__(self, "params", self.params.to(DTYPE))

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


def check_same_space(*models):
    first = models[0]
    for other in models[1:]:
        if not first.same_space(other):
            raise VocabularyMismatchError(
                "models disagree on (V, T_max, prompt_len): "
                f"({first.vocab_size}, {first.max_context}, "
                f"{first.prompt_len}) vs ({other.vocab_size}, "
                f"{other.max_context}, {other.prompt_len})"
            )


def init_policy(
    kind,
    vocab_size,
    max_context,
    prompt_len=1,
    seed=0,
    embed_dim=8,
    hidden=32,
    init_scale=None,
):
    """Seeded initial policy.

    Tabular rows are N(0, init_scale^2) (zeros by default, i.e. uniform).
    TinyNeural weights are N(0, 1/fan_in) times ``init_scale`` (default 1),
    biases start at zero.
    """
    rng = np.random.default_rng(seed)
    n = param_count(
        kind, vocab_size, max_context, prompt_len, embed_dim, hidden
    )
    if kind == TABULAR:
        scale = 0.0 if init_scale is None else float(init_scale)
        values = rng.normal(0.0, 1.0, n) * scale
    else:
        scale = 1.0 if init_scale is None else float(init_scale)
        chunks = []
        for name, shape in neural_layout(
            vocab_size, max_context, embed_dim, hidden
        ):
            size = layout_size([(name, shape)])
            if name.startswith("b_"):
                chunks.append(np.zeros(size))
            else:
                fan_in = shape[1] if name.startswith("w_") else 1
                chunks.append(
                    rng.normal(0.0, 1.0, size) * scale / np.sqrt(fan_in)
                )
        values = np.concatenate(chunks)
    return Policy(
        kind=kind,
        vocab_size=vocab_size,
        max_context=max_context,
        params=torch.from_numpy(np.asarray(values, dtype=np.float64)),
        prompt_len=prompt_len,
        seed=seed,
        embed_dim=embed_dim,
        hidden=hidden,
    )


# ---------------------------------------------------------------------------
# Numerics
# ---------------------------------------------------------------------------


def logsumexp(z):
    """Max-subtracted log-sum-exp over the last dimension."""
    m = z.max(dim=-1, keepdim=True).values
    return (m + torch.log(torch.exp(z - m).sum(dim=-1, keepdim=True))).squeeze(
        -1
    )


def softmax(z):
    e = torch.exp(z - z.max(dim=-1, keepdim=True).values)
    return e / e.sum(dim=-1, keepdim=True)


def log_softmax(z):
    return z - logsumexp(z).unsqueeze(-1)


def kl_rows(logp, logq):
    """KL(p || q) per row, from log-probabilities, over the full vocab."""
    return (torch.exp(logp) * (logp - logq)).sum(dim=-1)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def check_context(policy, prompt, prefix):
    prompt = tuple(int(t) for t in prompt)
    prefix = tuple(int(t) for t in prefix)
    if len(prefix) >= policy.max_context:
        raise ContextTooLongError(
            f"prefix length {len(prefix)} >= T_max {policy.max_context}"
        )
    if len(prompt) != policy.prompt_len:
        raise InvalidContextError(
            f"prompt length {len(prompt)} != {policy.prompt_len}"
        )
    for token in prompt + prefix:
        if not 0 <= token < policy.vocab_size:
            raise TokenOutOfRangeError(
                f"token {token} outside [0, {policy.vocab_size})"
            )
    if policy.eos in prefix:
        raise InvalidContextError("EOS inside a prefix")
    return prompt, prefix


def trunk_hidden(weights, token_rows, positions):
    """Hidden layer of the TinyNeural trunk for a batch of contexts."""
    n = len(token_rows)
    width = max(len(row) for row in token_rows)
    padded = np.zeros((n, width), dtype=np.int64)
    mask = np.zeros((n, width))
    lengths = np.zeros(n, dtype=np.int64)
    for i, row in enumerate(token_rows):
        padded[i, : len(row)] = row
        mask[i, : len(row)] = 1.0
        lengths[i] = len(row)
    last = padded[np.arange(n), lengths - 1]
    embed = weights["embed"]
    m = torch.from_numpy(mask)
    mean = (embed[torch.from_numpy(padded)] * m.unsqueeze(-1)).sum(
        dim=1
    ) / m.sum(dim=1, keepdim=True)
    features = torch.cat(
        [
            mean,
            embed[torch.from_numpy(last)],
            weights["position"][torch.from_numpy(np.asarray(positions))],
        ],
        dim=1,
    )
    return torch.tanh(features @ weights["w_hidden"].T + weights["b_hidden"])


def context_logits(policy, contexts):
    """LogitVectors for a batch of (prompt, prefix) contexts, shape (N, V)."""
    checked = [check_context(policy, p, q) for p, q in contexts]
    if not checked:
        return torch.zeros((0, policy.vocab_size), dtype=DTYPE)
    if policy.kind == TABULAR:
        index = tabular_index(
            policy.vocab_size, policy.max_context, policy.prompt_len
        )
        rows = torch.tensor([index[c] for c in checked], dtype=torch.long)
        return policy.params.view(-1, policy.vocab_size).index_select(
            0, rows
        )
    weights = unpack(
        policy.params,
        neural_layout(
            policy.vocab_size,
            policy.max_context,
            policy.embed_dim,
            policy.hidden,
        ),
    )
    hidden = trunk_hidden(
        weights,
        [prompt + prefix for prompt, prefix in checked],
        [len(prefix) for _, prefix in checked],
    )
    return hidden @ weights["w_out"].T + weights["b_out"]


def logits(policy, prompt, prefix):
    """LogitVector z_t of one context."""
    return context_logits(policy, [(prompt, prefix)])[0]


def next_dist(policy, prompt, prefix):
    """ProbVector pi(. | prefix, prompt): softmax of the raw logits."""
    return softmax(logits(policy, prompt, prefix))


def check_sequence(policy, seq):
    response = seq.response
    if not response:
        raise InvalidContextError("empty response")
    if len(response) > policy.max_context:
        raise ContextTooLongError(
            f"response length {len(response)} > T_max {policy.max_context}"
        )
    if response[-1] != policy.eos or policy.eos in response[:-1]:
        raise InvalidContextError("response must end with its only EOS")
    if len(seq.prompt) != policy.prompt_len:
        raise InvalidContextError(
            f"prompt length {len(seq.prompt)} != {policy.prompt_len}"
        )
    for token in seq.prompt + response:
        if not 0 <= token < policy.vocab_size:
            raise TokenOutOfRangeError(
                f"token {token} outside [0, {policy.vocab_size})"
            )


def is_forced(prefix_len, max_context):
    return prefix_len == max_context - 1


class Unrolled(NamedTuple):
    """Free (non-forced) positions of a batch of sequences."""

    contexts: List[Context]
    seq_index: torch.Tensor
    targets: torch.Tensor
    lengths: torch.Tensor
    n_seqs: int


def unroll(policy, seqs):
    contexts, seq_index, targets = [], [], []
    for b, seq in enumerate(seqs):
        check_sequence(policy, seq)
        for t, token in enumerate(seq.response):
            if is_forced(t, policy.max_context):
                break
            contexts.append((seq.prompt, seq.response[:t]))
            seq_index.append(b)
            targets.append(token)
    return Unrolled(
        contexts=contexts,
        seq_index=torch.tensor(seq_index, dtype=torch.long),
        targets=torch.tensor(targets, dtype=torch.long),
        lengths=torch.tensor(
            [len(s.response) for s in seqs], dtype=DTYPE
        ),
        n_seqs=len(seqs),
    )


def token_log_probs(policy, unrolled):
    """log pi(y_t | y_<t, x) at every free position of ``unrolled``."""
    logp = log_softmax(context_logits(policy, unrolled.contexts))
    return logp.gather(1, unrolled.targets.view(-1, 1)).squeeze(1)


def per_sequence(unrolled, values):
    """Sum per-position values into their sequences (fixed order)."""
    return torch.zeros(unrolled.n_seqs, dtype=DTYPE).index_add(
        0, unrolled.seq_index, values
    )


def seq_log_probs(policy, seqs):
    unrolled = unroll(policy, seqs)
    return per_sequence(unrolled, token_log_probs(policy, unrolled))


def seq_log_prob(policy, seq):
    """log pi(y | x) = sum_t log pi(y_t | y_<t, x), as a 0-dim tensor."""
    return seq_log_probs(policy, [seq])[0]


# ---------------------------------------------------------------------------
# Sampling and enumeration
# ---------------------------------------------------------------------------


def sample_batch(policy, prompts, rng, max_context=None):
    """Sample one response per prompt; one uniform draw per token."""
    limit = policy.max_context if max_context is None else max_context
    if not 1 <= limit <= policy.max_context:
        raise ContextTooLongError(
            f"sampling limit {limit} outside [1, {policy.max_context}]"
        )
    prompts = [tuple(int(t) for t in p) for p in prompts]
    responses = [[] for _ in prompts]
    active = list(range(len(prompts)))
    with torch.no_grad():
        for t in range(limit):
            if not active:
                break
            if t == limit - 1:
                for i in active:
                    responses[i].append(policy.eos)
                break
            contexts = [(prompts[i], tuple(responses[i])) for i in active]
            probs = softmax(context_logits(policy, contexts)).numpy()
            cdf = np.cumsum(probs, axis=1)
            u = rng.random(len(active)) * cdf[:, -1]
            picks = np.minimum(
                (cdf <= u[:, None]).sum(axis=1), policy.vocab_size - 1
            )
            still = []
            for i, token in zip(active, picks):
                responses[i].append(int(token))
                if token != policy.eos:
                    still.append(i)
            active = still
    return [Sequence(p, tuple(r)) for p, r in zip(prompts, responses)]


def sample(policy, prompt, rng, max_context=None):
    return sample_batch(policy, [prompt], rng, max_context)[0]


def check_enumerable(vocab_size, max_context):
    if vocab_size**max_context > MAX_SPACE:
        raise InstanceTooLargeError(
            f"enumeration needs V^T_max <= {MAX_SPACE}, got "
            f"{vocab_size}^{max_context}"
        )


def enumerate_responses(vocab_size, max_context):
    """Every EOS-terminated response of length 1..T_max, each once."""
    check_enumerable(vocab_size, max_context)
    eos = vocab_size - 1
    return [
        prefix + (eos,) for prefix in free_prefixes(vocab_size, max_context)
    ]


class PrefixTree:
    """All contexts reachable from a list of prompts, ordered by depth.

    Each context ``(prompt, prefix)`` also stands for the response
    ``prefix + (EOS,)``, so sums over contexts double as sums over
    :func:`enumerate_responses`.
    """

    def __init__(self, vocab_size, max_context, prompts):
        check_enumerable(vocab_size, max_context)
        self.vocab_size = vocab_size
        self.max_context = max_context
        self.prompts = [tuple(int(t) for t in p) for p in prompts]
        eos = vocab_size - 1
        by_length = [
            list(itertools.product(range(vocab_size - 1), repeat=k))
            for k in range(max_context)
        ]
        self.contexts = []
        self.offsets = []
        position = {}
        prompt_index, depth = [], []
        self._parents, self._tokens = [None], [None]
        for k, prefixes in enumerate(by_length):
            self.offsets.append(len(self.contexts))
            parents, tokens = [], []
            for pi, prompt in enumerate(self.prompts):
                for prefix in prefixes:
                    position[(pi, prefix)] = len(self.contexts)
                    self.contexts.append((prompt, prefix))
                    prompt_index.append(pi)
                    depth.append(k)
                    if k:
                        parents.append(position[(pi, prefix[:-1])])
                        tokens.append(prefix[-1])
            if k:
                self._parents.append(torch.tensor(parents, dtype=torch.long))
                self._tokens.append(torch.tensor(tokens, dtype=torch.long))
        self.prompt_index = torch.tensor(prompt_index, dtype=torch.long)
        self.depth = torch.tensor(depth, dtype=torch.long)
        self.forced = self.depth == max_context - 1
        self.sequences = [
            Sequence(prompt, prefix + (eos,))
            for prompt, prefix in self.contexts
        ]
        self.lengths = (self.depth + 1).to(DTYPE)

    def __len__(self):
        return len(self.contexts)

    def step_log_probs(self, policy):
        """Raw log pi(. | context) for every context, shape (N, V)."""
        return log_softmax(context_logits(policy, self.contexts))

    def reach_log_probs(self, step_logp):
        """log P(prefix | prompt) under the policy of ``step_logp``."""
        levels = [torch.zeros(len(self.prompts), dtype=DTYPE)]
        for k in range(1, self.max_context):
            parents = self._parents[k]
            local = parents - self.offsets[k - 1]
            levels.append(
                levels[k - 1][local] + step_logp[parents, self._tokens[k]]
            )
        return torch.cat(levels)

    def path_sums(self, values):
        """Sum of per-context ``values`` along each root-to-context path."""
        levels = [values[: self.offsets[1] if self.max_context > 1 else None]]
        for k in range(1, self.max_context):
            local = self._parents[k] - self.offsets[k - 1]
            end = (
                self.offsets[k + 1] if k + 1 < self.max_context else None
            )
            levels.append(levels[k - 1][local] + values[self.offsets[k] : end])
        return torch.cat(levels)

    def sequence_log_probs(self, step_logp, reach=None):
        """log pi(prefix + EOS | prompt) for every context's response."""
        if reach is None:
            reach = self.reach_log_probs(step_logp)
        eos = step_logp[:, self.vocab_size - 1]
        return reach + torch.where(self.forced, torch.zeros_like(eos), eos)


# ---------------------------------------------------------------------------
# Gradients and checkpoints
# ---------------------------------------------------------------------------


def value_and_grad(model, closure):
    """Value and gradient of ``closure(model)`` w.r.t. ``model.params``.

    ``closure`` receives a copy of the model whose parameters require
    grad and returns a scalar; reverse-mode autograd does the rest. Works
    for any model with ``params`` and ``with_params``.
    """
    params = model.params.detach().clone().requires_grad_(True)
    loss = torch.as_tensor(closure(model.with_params(params)), dtype=DTYPE)
    if not torch.isfinite(loss).all():
        raise NonFiniteError(f"loss is not finite: {loss.item()}")
    value = float(loss.detach())
    if not loss.requires_grad:
        return value, torch.zeros_like(params.detach())
    (gradient,) = torch.autograd.grad(loss, params, allow_unused=True)
    if gradient is None:
        return value, torch.zeros_like(params.detach())
    if not torch.isfinite(gradient).all():
        raise NonFiniteError("gradient is not finite")
    return value, gradient.detach()


def grad(policy, closure):
    """Gradient of ``closure(policy)`` w.r.t. the flat parameter vector."""
    return value_and_grad(policy, closure)[1]


def to_checkpoint(policy) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "kind": policy.kind,
        "vocab_size": policy.vocab_size,
        "max_context": policy.max_context,
        "prompt_len": policy.prompt_len,
        "seed": policy.seed,
        "embed_dim": policy.embed_dim,
        "hidden": policy.hidden,
        "params": policy.params.detach().tolist(),
    }


def from_checkpoint(doc) -> Policy:
    return Policy(
        kind=doc["kind"],
        vocab_size=doc["vocab_size"],
        max_context=doc["max_context"],
        params=torch.tensor(
            [float(x) for x in doc["params"]], dtype=DTYPE
        ),
        prompt_len=doc["prompt_len"],
        seed=doc["seed"],
        embed_dim=doc["embed_dim"],
        hidden=doc["hidden"],
    )


def max_abs_diff(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).abs().max()) if a.numel() else 0.0
