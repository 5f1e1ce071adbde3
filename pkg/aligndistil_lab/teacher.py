"""Synthetic teacher distributions built from DPO logits.

Three modes:

``rlhf_combine``
    z* = (beta0 / beta) z_dpo + (1 - beta0 / beta) z_ref, beta_t = beta.
``constant_extrapolate``
    z* = z_dpo + w (z_dpo - z_rev) with a fixed w (default beta0 / beta),
    beta_t = beta.
``adaptive_extrapolate``
    w = alpha_t = TVD(pi_dpo, pi_rev) * r + epsilon per context and
    beta_t = beta0 / alpha_t.

All inputs are raw logits, never log-probabilities.
"""

import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional

import torch

from aligndistil_lab.errors import (
    ConfigError,
    OutOfRangeError,
    UnnormalizedError,
    VocabularyMismatchError,
)
from aligndistil_lab.policy import (
    DTYPE,
    check_same_space,
    context_logits,
    log_softmax,
    softmax,
)

logger = logging.getLogger(__name__)

RLHF_COMBINE = "rlhf_combine"
CONSTANT_EXTRAPOLATE = "constant_extrapolate"
ADAPTIVE_EXTRAPOLATE = "adaptive_extrapolate"
MODES = (RLHF_COMBINE, CONSTANT_EXTRAPOLATE, ADAPTIVE_EXTRAPOLATE)

NORMALIZATION_TOLERANCE = 1e-9


@dataclass(frozen=True)
class TeacherConfig:
    """Teacher construction settings; only the active mode's fields count."""

    mode: str = ADAPTIVE_EXTRAPOLATE
    beta0: float = 0.1
    beta: Optional[float] = None
    weight: Optional[float] = None
    r: float = 15.0
    epsilon: float = 0.001

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(
                f"teacher mode must be one of {', '.join(MODES)}, "
                f"got {self.mode!r}"
            )
        if not self.beta0 > 0:
            raise ConfigError(f"beta0 must be > 0, got {self.beta0}")
        if self.mode == ADAPTIVE_EXTRAPOLATE:
            if self.r < 0:
                raise ConfigError(f"r must be >= 0, got {self.r}")
            if not self.epsilon > 0:
                raise ConfigError(
                    f"epsilon must be > 0, got {self.epsilon}"
                )
            return
        if self.beta is None or not self.beta > 0:
            raise ConfigError(
                f"teacher mode {self.mode} needs beta > 0, got {self.beta}"
            )
        if (
            self.mode == CONSTANT_EXTRAPOLATE
            and self.weight is not None
            and self.weight < 0
        ):
            raise ConfigError(f"weight must be >= 0, got {self.weight}")

    @property
    def adaptive(self):
        return self.mode == ADAPTIVE_EXTRAPOLATE

    @property
    def constant_weight(self):
        """Effective fixed weight of the non-adaptive modes."""
        if self.mode == CONSTANT_EXTRAPOLATE and self.weight is not None:
            return float(self.weight)
        if self.beta is None:
            raise ConfigError("adaptive teachers have no constant weight")
        return self.beta0 / self.beta

    @property
    def alpha_bounds(self):
        return (self.epsilon, self.r + self.epsilon)


def _same_shape(a, b):
    a = torch.as_tensor(a, dtype=DTYPE)
    b = torch.as_tensor(b, dtype=DTYPE)
    if a.shape != b.shape:
        raise VocabularyMismatchError(
            f"logit shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}"
        )
    return a, b


def combine_rlhf(z_dpo, z_ref, beta0, beta):
    z_dpo, z_ref = _same_shape(z_dpo, z_ref)
    if not beta > 0:
        raise ConfigError(f"beta must be > 0, got {beta}")
    coef = beta0 / beta
    return coef * z_dpo + (1.0 - coef) * z_ref


def extrapolate(z_dpo, z_rev, weight):
    """z_dpo + weight * (z_dpo - z_rev); ``weight`` may be one per row."""
    z_dpo, z_rev = _same_shape(z_dpo, z_rev)
    weight = torch.as_tensor(weight, dtype=DTYPE)
    if (weight < 0).any():
        raise OutOfRangeError("extrapolation weight must be >= 0")
    if weight.dim() == 1 and z_dpo.dim() == 2:
        weight = weight.unsqueeze(-1)
    return z_dpo + weight * (z_dpo - z_rev)


def _check_normalized(p, name):
    if (p < 0).any():
        raise UnnormalizedError(f"{name} has negative entries")
    total = p.sum(dim=-1)
    if ((total - 1.0).abs() > NORMALIZATION_TOLERANCE).any():
        raise UnnormalizedError(
            f"{name} is not normalized: sums to {total.tolist()}"
        )


def tvd_rows(p, q):
    """Total variation distance per row of two (N, V) distributions."""
    p, q = _same_shape(p, q)
    _check_normalized(p, "p")
    _check_normalized(q, "q")
    return (0.5 * (p - q).abs().sum(dim=-1)).clamp(max=1.0)


def tvd(p, q):
    return float(tvd_rows(p, q))


def adaptive_alpha(tvd_t, r, epsilon):
    """alpha_t = tvd_t * r + epsilon, elementwise for tensors."""
    values = torch.as_tensor(tvd_t, dtype=DTYPE)
    if ((values < 0) | (values > 1)).any() or values.isnan().any():
        raise OutOfRangeError(f"tvd outside [0, 1]: {values.tolist()}")
    alpha = values * r + epsilon
    if isinstance(tvd_t, torch.Tensor):
        return alpha
    return float(alpha)


def entropy(p):
    """Shannon entropy per row (nats), with 0 log 0 = 0."""
    return torch.special.entr(torch.as_tensor(p, dtype=DTYPE)).sum(dim=-1)


@dataclass(frozen=True)
class TeacherStep:
    z_star: torch.Tensor
    pi_star: torch.Tensor
    alpha_t: float
    tvd_t: float
    beta_t: float


class TeacherBatch(NamedTuple):
    """Teacher quantities for N contexts at once."""

    z_star: torch.Tensor
    log_pi_star: torch.Tensor
    alpha: torch.Tensor
    tvd: torch.Tensor
    beta_t: torch.Tensor

    def step(self, i):
        return TeacherStep(
            z_star=self.z_star[i],
            pi_star=torch.exp(self.log_pi_star[i]),
            alpha_t=float(self.alpha[i]),
            tvd_t=float(self.tvd[i]),
            beta_t=float(self.beta_t[i]),
        )

    def check_alpha(self, cfg):
        """Raise unless every adaptive alpha_t lies in [eps, r + eps]."""
        if not cfg.adaptive or self.alpha.numel() == 0:
            return
        low, high = cfg.alpha_bounds
        lo, hi = float(self.alpha.min()), float(self.alpha.max())
        if lo < low or hi > high:
            raise OutOfRangeError(
                f"alpha_t range [{lo}, {hi}] escapes [{low}, {high}]"
            )


def teacher_from_logits(z_dpo, z_other, cfg):
    p = softmax(z_dpo)
    q = softmax(z_other)
    tvd_t = tvd_rows(p, q)
    n = z_dpo.shape[0]
    if cfg.mode == RLHF_COMBINE:
        z_star = combine_rlhf(z_dpo, z_other, cfg.beta0, cfg.beta)
        alpha = torch.full((n,), cfg.constant_weight, dtype=DTYPE)
        beta_t = torch.full((n,), float(cfg.beta), dtype=DTYPE)
    elif cfg.mode == CONSTANT_EXTRAPOLATE:
        alpha = torch.full((n,), cfg.constant_weight, dtype=DTYPE)
        z_star = extrapolate(z_dpo, z_other, alpha)
        beta_t = torch.full((n,), float(cfg.beta), dtype=DTYPE)
    else:
        alpha = adaptive_alpha(tvd_t, cfg.r, cfg.epsilon)
        z_star = extrapolate(z_dpo, z_other, alpha)
        beta_t = cfg.beta0 / alpha
    return TeacherBatch(
        z_star=z_star,
        log_pi_star=log_softmax(z_star),
        alpha=alpha,
        tvd=tvd_t,
        beta_t=beta_t,
    )


def teacher_steps(pi_dpo, pi_other, cfg, contexts):
    """Teacher targets for a batch of contexts; constant w.r.t. any grad.

    ``pi_other`` is the reverse-DPO model for the extrapolation modes and
    the reference policy for ``rlhf_combine``.
    """
    check_same_space(pi_dpo, pi_other)
    with torch.no_grad():
        z_dpo = context_logits(pi_dpo, contexts).detach()
        z_other = context_logits(pi_other, contexts).detach()
        return teacher_from_logits(z_dpo, z_other, cfg)


def teacher_step(pi_dpo, pi_other, cfg, prompt, prefix):
    return teacher_steps(pi_dpo, pi_other, cfg, [(prompt, prefix)]).step(0)
