"""Exact verification of the RLHF-with-DPO-reward / distillation identity.

For a policy pi_theta, a DPO model and a second model (pi_ref, or the
reverse-DPO model in the contrastive form)::

    J(theta) = E_y [ b0 log(pi_dpo / pi_other)(y) - b log(pi_theta / pi_a)(y) ]
             = -b sum_t E[ KL(pi_theta || pi*) ] + b E[ sum_t C_t ]

with z* the teacher logits, pi_a the anchor (pi_ref for the combine form,
pi_dpo for the contrastive one) and
``C_t = lse(z*) - a lse(z_dpo) - (1 - a) lse(z_other)`` the per-context
constant a textbook derivation drops (``a = b0 / b`` or ``1 + b0 / b``).
Everything is summed exactly over the enumerated responses; gradients
come from differentiating those finite sums.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import List, NamedTuple

import numpy as np
import torch

from aligndistil_lab.errors import (
    CheckFailure,
    ConfigError,
    InstanceTooLargeError,
    NonFiniteError,
    OutOfRangeError,
)
from aligndistil_lab.policy import (
    DTYPE,
    TABULAR,
    PrefixTree,
    check_same_space,
    context_logits,
    count_responses,
    grad,
    init_policy,
    kl_rows,
    logsumexp,
    max_abs_diff,
    softmax,
)
from aligndistil_lab.teacher import (
    CONSTANT_EXTRAPOLATE,
    RLHF_COMBINE,
    TeacherConfig,
    entropy,
    extrapolate,
    teacher_from_logits,
)

logger = logging.getLogger(__name__)

MAX_VOCAB = 6
MAX_CONTEXT = 4
MAX_RESPONSES = 10**5

VALUE_TOLERANCE = 1e-9
GRAD_TOLERANCE = 1e-8


@dataclass(frozen=True, eq=False)
class Instance:
    """A fully enumerable verification problem over one prompt."""

    theta: object
    dpo: object
    other: object
    prompt: tuple
    beta0: float = 0.1
    beta: float = 0.1
    contrastive: bool = False
    seed: int = 0

    def __post_init__(self):
        check_same_space(self.theta, self.dpo, self.other)
        if self.theta.vocab_size > MAX_VOCAB:
            raise InstanceTooLargeError(f"V must be <= {MAX_VOCAB}")
        if self.theta.max_context > MAX_CONTEXT:
            raise InstanceTooLargeError(f"T_max must be <= {MAX_CONTEXT}")
        if self.n_responses > MAX_RESPONSES:
            raise InstanceTooLargeError(
                f"{self.n_responses} responses exceed {MAX_RESPONSES}"
            )
        if not self.beta0 > 0 or not self.beta > 0:
            raise ConfigError("beta0 and beta must be > 0")
        object.__setattr__(self, "prompt", tuple(self.prompt))

    @property
    def vocab_size(self):
        return self.theta.vocab_size

    @property
    def max_context(self):
        return self.theta.max_context

    @property
    def n_responses(self):
        return count_responses(self.vocab_size, self.max_context)

    @property
    def mix(self):
        """Weight ``a`` of lse(z_dpo) in the residual constant."""
        ratio = self.beta0 / self.beta
        return 1.0 + ratio if self.contrastive else ratio

    @property
    def teacher_config(self):
        if self.contrastive:
            return TeacherConfig(
                mode=CONSTANT_EXTRAPOLATE,
                beta0=self.beta0,
                beta=self.beta,
                weight=self.beta0 / self.beta,
            )
        return TeacherConfig(
            mode=RLHF_COMBINE, beta0=self.beta0, beta=self.beta
        )

    @property
    def anchor(self):
        return self.dpo if self.contrastive else self.other

    def tree(self):
        return PrefixTree(self.vocab_size, self.max_context, [self.prompt])

    def with_theta(self, theta):
        return Instance(
            theta,
            self.dpo,
            self.other,
            self.prompt,
            self.beta0,
            self.beta,
            self.contrastive,
            self.seed,
        )


def random_instance(
    rng,
    vocab_size,
    max_context,
    beta0=0.1,
    beta=None,
    contrastive=False,
    scale=1.0,
):
    """Instance with tabular logits ~ N(0, scale^2) and a random prompt."""
    seeds = rng.integers(0, 2**31 - 1, size=3)
    if beta is None:
        beta = float(rng.uniform(0.05, 0.2))
    models = [
        init_policy(
            TABULAR, vocab_size, max_context, seed=int(s), init_scale=scale
        )
        for s in seeds
    ]
    prompt = (int(rng.integers(0, vocab_size)),)
    return Instance(
        *models,
        prompt=prompt,
        beta0=beta0,
        beta=beta,
        contrastive=contrastive,
        seed=int(seeds[0]),
    )


# ---------------------------------------------------------------------------
# Exact objectives
# ---------------------------------------------------------------------------


class _Tables(NamedTuple):
    tree: PrefixTree
    logp: torch.Tensor
    reach: torch.Tensor
    seq_logp: torch.Tensor


def _theta_tables(inst, theta):
    tree = inst.tree()
    logp = tree.step_log_probs(theta)
    reach = tree.reach_log_probs(logp)
    return _Tables(tree, logp, reach, tree.sequence_log_probs(logp, reach))


def _free(tree, values):
    return torch.where(tree.forced, torch.zeros_like(values), values)


def _rlhf_bodies(inst, tables):
    """Reward minus KL penalty of every enumerated response."""
    tree = tables.tree
    with torch.no_grad():
        dpo = tree.sequence_log_probs(tree.step_log_probs(inst.dpo))
        other = tree.sequence_log_probs(tree.step_log_probs(inst.other))
        anchor = dpo if inst.contrastive else other
    return inst.beta0 * (dpo - other) - inst.beta * (
        tables.seq_logp - anchor
    )


def rlhf_terms(inst, theta):
    """Per-response contributions to J(theta); they sum to the objective."""
    tables = _theta_tables(inst, theta)
    return torch.exp(tables.seq_logp) * _rlhf_bodies(inst, tables)


def _teacher_logits(inst, tree):
    with torch.no_grad():
        z_dpo = context_logits(inst.dpo, tree.contexts)
        z_other = context_logits(inst.other, tree.contexts)
    return z_dpo, z_other


def _context_kls(inst, tables):
    """b * KL(pi_theta || pi*) at every context, 0 where EOS is forced."""
    z_dpo, z_other = _teacher_logits(inst, tables.tree)
    target = teacher_from_logits(z_dpo, z_other, inst.teacher_config)
    kl = _free(tables.tree, kl_rows(tables.logp, target.log_pi_star))
    return inst.beta * kl


def distill_terms(inst, theta):
    """Per-context b * P(prefix) * KL(pi_theta || pi*) terms."""
    tables = _theta_tables(inst, theta)
    return torch.exp(tables.reach) * _context_kls(inst, tables)


def residual_constants(inst, tree=None):
    """C_t for every context of the instance's prefix tree (0 if forced)."""
    tree = tree or inst.tree()
    z_dpo, z_other = _teacher_logits(inst, tree)
    z_star = teacher_from_logits(z_dpo, z_other, inst.teacher_config).z_star
    a = inst.mix
    c = logsumexp(z_star) - a * logsumexp(z_dpo) - (1 - a) * logsumexp(z_other)
    return _free(tree, c)


def residual_terms(inst, theta):
    tables = _theta_tables(inst, theta)
    constants = residual_constants(inst, tables.tree)
    return inst.beta * torch.exp(tables.reach) * constants


def _exact(terms):
    values = terms.detach().tolist()
    total = math.fsum(values)
    if not math.isfinite(total):
        raise NonFiniteError("exact sum is not finite")
    return total


def rlhf_objective_exact(inst):
    with torch.no_grad():
        return _exact(rlhf_terms(inst, inst.theta))


def distill_objective_exact(inst):
    with torch.no_grad():
        return _exact(distill_terms(inst, inst.theta))


def residual_exact(inst):
    with torch.no_grad():
        return _exact(residual_terms(inst, inst.theta))


# ---------------------------------------------------------------------------
# Identity check
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IdentityReport:
    lhs: float
    kl_term: float
    residual: float
    gap: float
    grad_gap_norm: float
    residual_grad_norm: float
    vocab_size: int
    max_context: int
    beta0: float
    beta: float
    contrastive: bool
    seed: int

    @property
    def passed(self):
        return (
            abs(self.gap) < VALUE_TOLERANCE
            and self.grad_gap_norm < GRAD_TOLERANCE
        )

    def to_row(self):
        row = asdict(self)
        row["passed"] = self.passed
        return row


REPORT_FIELDS = list(IdentityReport.__dataclass_fields__) + ["passed"]


def theorem1_check(inst, raise_on_failure=True):
    """Compare J with -kl_term + residual in value and gradient.

    ``residual_grad_norm`` measures how far the dropped constant moves the
    gradient; it is 0 when there is a single free position.
    """
    lhs = rlhf_objective_exact(inst)
    kl_term = distill_objective_exact(inst)
    residual = residual_exact(inst)
    gap = lhs + kl_term - residual

    theta = inst.theta
    g_lhs = grad(theta, lambda p: rlhf_terms(inst, p).sum())
    g_kl = grad(theta, lambda p: distill_terms(inst, p).sum())
    g_res = grad(theta, lambda p: residual_terms(inst, p).sum())
    report = IdentityReport(
        lhs=lhs,
        kl_term=kl_term,
        residual=residual,
        gap=gap,
        grad_gap_norm=max_abs_diff(g_lhs, g_res - g_kl),
        residual_grad_norm=float(g_res.abs().max()),
        vocab_size=inst.vocab_size,
        max_context=inst.max_context,
        beta0=inst.beta0,
        beta=inst.beta,
        contrastive=inst.contrastive,
        seed=inst.seed,
    )
    logger.debug("identity check: %s", report)
    if not report.passed and raise_on_failure:
        raise CheckFailure(
            f"identity gap {gap:.3e}, gradient gap "
            f"{report.grad_gap_norm:.3e}",
            report,
        )
    return report


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def fd_check(
    closure, params, h=1e-5, analytic=None, floor=1e-8, atol=1e-10
):
    """Max coordinate-wise relative error of ``analytic`` vs central FD.

    ``closure`` maps a flat float64 tensor to a scalar. Without
    ``analytic`` the gradient is taken from autograd through ``closure``.
    Coordinates whose absolute difference is within ``atol`` count as
    exact; that is the rounding floor of the central difference.
    """
    if not 1e-7 <= h <= 1e-3:
        raise OutOfRangeError(f"step h={h} outside [1e-7, 1e-3]")
    params = torch.as_tensor(params, dtype=DTYPE).detach().clone()
    if analytic is None:
        x = params.clone().requires_grad_(True)
        value = closure(x)
        if not torch.isfinite(value):
            raise NonFiniteError("closure is not finite at params")
        (analytic,) = torch.autograd.grad(value, x, allow_unused=True)
        if analytic is None:
            analytic = torch.zeros_like(params)
    analytic = torch.as_tensor(analytic, dtype=DTYPE).detach()
    numeric = torch.zeros_like(params)
    with torch.no_grad():
        for i in range(params.numel()):
            step = torch.zeros_like(params)
            step[i] = h
            up = float(closure(params + step))
            down = float(closure(params - step))
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NonFiniteError(f"non-finite evaluation at {i}")
            numeric[i] = (up - down) / (2 * h)
    diff = (analytic - numeric).abs()
    scale = torch.clamp(analytic.abs(), min=floor)
    rel = torch.where(diff <= atol, torch.zeros_like(diff), diff / scale)
    return float(rel.max())


def policy_closure(model, loss):
    """Adapt ``loss(model)`` to a closure over a flat parameter tensor."""
    return lambda params: loss(model.with_params(params))


# ---------------------------------------------------------------------------
# Monte-Carlo consistency
# ---------------------------------------------------------------------------


class Estimate(NamedTuple):
    mean: float
    stderr: float


def _per_response_bodies(inst):
    """Exact response probabilities and per-response objective bodies."""
    with torch.no_grad():
        tables = _theta_tables(inst, inst.theta)
        probs = torch.exp(tables.seq_logp).numpy()
        rlhf = _rlhf_bodies(inst, tables)
        # Response of context c visits c and its ancestors.
        distill = tables.tree.path_sums(_context_kls(inst, tables))
    return probs / probs.sum(), rlhf.numpy(), distill.numpy()


def mc_objective_estimate(inst, n_samples, rng):
    """Sampled estimates of (rlhf objective, distillation objective)."""
    probs, rlhf, distill = _per_response_bodies(inst)
    picks = rng.choice(len(probs), size=n_samples, p=probs)
    out = []
    for body in (rlhf, distill):
        values = body[picks]
        stderr = 0.0
        if n_samples > 1:
            stderr = values.std(ddof=1) / np.sqrt(n_samples)
        out.append(Estimate(float(values.mean()), float(stderr)))
    return tuple(out)


def mc_convergence_slope(
    inst, rng, sizes=(100, 1000, 10000, 100000), repeats=40
):
    """Log-log slope of RMS estimation error against sample count.

    Returns (rlhf slope, distillation slope); both should be near -0.5.
    """
    probs, rlhf, distill = _per_response_bodies(inst)
    exact = (float(probs @ rlhf), float(probs @ distill))
    errors = np.zeros((len(sizes), 2))
    for i, n in enumerate(sizes):
        for _ in range(repeats):
            picks = rng.choice(len(probs), size=n, p=probs)
            errors[i, 0] += (rlhf[picks].mean() - exact[0]) ** 2
            errors[i, 1] += (distill[picks].mean() - exact[1]) ** 2
    rms = np.sqrt(errors / repeats)
    log_n = np.log(np.asarray(sizes, dtype=float))
    return tuple(
        float(np.polyfit(log_n, np.log(rms[:, j]), 1)[0]) for j in (0, 1)
    )


# ---------------------------------------------------------------------------
# Sharpening scan
# ---------------------------------------------------------------------------


class ScanResult(NamedTuple):
    instances: int
    eligible: int
    counterexamples: List[int]


def sharpening_scan(
    rng, n_instances=200, vocab_size=4, weights=(0.0, 0.5, 1.0, 1.5, 2.0)
):
    """Check that extrapolation does not raise entropy as the weight grows.

    Only pairs whose contrast argmax equals the DPO argmax are eligible.
    Counterexamples are logged and returned, never raised.
    """
    grid = torch.as_tensor(weights, dtype=DTYPE)
    eligible = 0
    counterexamples = []
    for i in range(n_instances):
        z_dpo = torch.as_tensor(rng.normal(size=vocab_size), dtype=DTYPE)
        z_rev = torch.as_tensor(rng.normal(size=vocab_size), dtype=DTYPE)
        if int(torch.argmax(z_dpo - z_rev)) != int(torch.argmax(z_dpo)):
            continue
        eligible += 1
        curve = torch.stack(
            [entropy(softmax(extrapolate(z_dpo, z_rev, w))) for w in grid]
        )
        if (curve[1:] > curve[:-1] + 1e-12).any():
            counterexamples.append(i)
            logger.info(
                "entropy rises with weight on instance %d: %s",
                i,
                [round(float(h), 6) for h in curve],
            )
    return ScanResult(n_instances, eligible, counterexamples)


def verify_sweep(
    rng,
    n_instances,
    vocab_sizes=(2, 3, 4),
    contexts=(2, 3, 4),
    contrastive=False,
):
    """theorem1_check on random instances; returns all reports."""
    reports = []
    for _ in range(n_instances):
        V = int(rng.choice(vocab_sizes))
        T = int(rng.choice(contexts))
        inst = random_instance(rng, V, T, contrastive=contrastive)
        reports.append(theorem1_check(inst, raise_on_failure=False))
    return reports
