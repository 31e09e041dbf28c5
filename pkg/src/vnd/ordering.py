"""Distributions over ordered masks.

An ordered mask over K groups starts at 1 and never increases.  Hard
masks form the set V = {v_1, ..., v_K}, where v_b has b leading ones and
K - b trailing zeros; soft masks take values in [0, 1] and sharpen to
hard masks as the temperature goes to zero.

Two distributions live here:

* ``BernoulliChain`` -- sequential conditional keeps.  Group i survives
  with probability pi_i given that group i-1 survived, and everything
  after the first drop stays dropped.  This induces a categorical over
  hard masks (``mask_probs``) and is used as the prior.
* ``DownhillParams`` -- the reparameterizable posterior.  Unconstrained
  conditional logits are squashed through a sigmoid and chained into
  tail probabilities ``beta``; samples are built from Gumbel noise via
  a shifted cumulative sum, so gradients flow back to the logits.

All tensors are float64, and every sampling routine takes an explicit
``torch.Generator`` so callers control their own streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor

# Conditional logits are clamped so every derived tail probability stays
# strictly positive (log beta finite).
LOGIT_CLAMP = 12.0
# Uniform draws are clamped away from {0, 1} before the double-log
# Gumbel transform.
UNIFORM_EPS = 1e-12


class SupportMismatchError(ValueError):
    """The posterior puts mass on a mask the prior excludes: infinite KL."""


def _f64(x) -> Tensor:
    return torch.as_tensor(x, dtype=torch.float64)


def prefix_mask(dim: int, tail: int) -> Tensor:
    """The hard mask v_tail: ``tail`` ones followed by ``dim - tail`` zeros."""
    if not 1 <= tail <= dim:
        raise ValueError(f"tail must be in [1, {dim}], got {tail}")
    z = torch.zeros(dim, dtype=torch.float64)
    z[:tail] = 1.0
    return z


def _prefix_mass(cond: Tensor) -> Tensor:
    # Tail-index mass induced by conditional keep probabilities:
    # p(v_j) = (1 - cond[j+1]) * prod_{k<=j} cond[k], cond[K+1] := 0.
    # The terms telescope to an exact simplex.
    cum = torch.cumprod(cond, dim=0)
    nxt = torch.cat([cond[1:], cond.new_zeros(1)])
    return (1.0 - nxt) * cum


# ---------------------------------------------------------------------------
# Mask container
# ---------------------------------------------------------------------------


@dataclass
class OrderedMask:
    """A mask vector with first entry 1 and nonincreasing entries.

    Hard masks are exactly a prefix of ones (``tail`` of them); soft
    masks additionally satisfy the simplex identity: their successive
    decrements together with the last entry sum to the first entry.
    """

    z: Tensor
    kind: str  # "hard" | "soft"
    tail: int | None = None

    def __post_init__(self) -> None:
        self.z = _f64(self.z)
        if self.z.ndim != 1 or self.z.numel() < 1:
            raise ValueError("mask must be a nonempty vector")
        if self.kind not in ("hard", "soft"):
            raise ValueError(f"unknown mask kind {self.kind!r}")
        zf = self.z.detach()
        if abs(float(zf[0]) - 1.0) > 1e-9:
            raise ValueError("first mask entry must be 1")
        if ((zf < -1e-12) | (zf > 1.0 + 1e-12)).any():
            raise ValueError("mask entries must lie in [0, 1]")
        if self.dim > 1 and (zf[1:] - zf[:-1] > 1e-12).any():
            raise ValueError("mask entries must be nonincreasing")
        if self.kind == "hard":
            b = int((zf >= 0.5).sum())
            if self.tail is None:
                self.tail = b
            if self.tail != b or not torch.equal(zf, prefix_mask(self.dim, b)):
                raise ValueError("hard mask must be a prefix of ones")

    @property
    def dim(self) -> int:
        return self.z.numel()

    def hardened(self) -> "OrderedMask":
        """Round to the nearest hard mask (entries >= 1/2 form the kept prefix)."""
        b = max(1, int((self.z.detach() >= 0.5).sum()))
        return OrderedMask(prefix_mask(self.dim, b), "hard", tail=b)


# ---------------------------------------------------------------------------
# Bernoulli chain (prior)
# ---------------------------------------------------------------------------


@dataclass
class BernoulliChain:
    """Conditional keep probabilities over K ordered groups.

    ``pi[0]`` must be exactly 1 (the first group is always kept); an
    implicit terminating probability of 0 after the last group makes the
    induced hard-mask probabilities an exact simplex.
    """

    pi: Tensor

    def __post_init__(self) -> None:
        self.pi = _f64(self.pi)
        if self.pi.ndim != 1 or self.pi.numel() < 1:
            raise ValueError("pi must be a nonempty vector")
        if float(self.pi[0]) != 1.0:
            raise ValueError("pi[0] must be exactly 1")
        if ((self.pi < 0.0) | (self.pi > 1.0)).any():
            raise ValueError("conditional probabilities must lie in [0, 1]")

    @property
    def dim(self) -> int:
        return self.pi.numel()

    @classmethod
    def default(cls, dim: int, n_base: int = 1, keep: float = 0.95) -> "BernoulliChain":
        """Weak pruning-pressure prior: base groups kept surely, the rest with ``keep``."""
        pi = torch.ones(dim, dtype=torch.float64)
        pi[n_base:] = keep
        return cls(pi)


def mask_probs(chain: BernoulliChain) -> Tensor:
    """Probability of each hard mask v_j under the chain."""
    return _prefix_mass(chain.pi)


def chain_marginals(chain: BernoulliChain) -> Tensor:
    """P(group i is kept) = prod_{k<=i} pi_k; nonincreasing, starts at 1."""
    return torch.cumprod(chain.pi, dim=0)


def chain_sample(chain: BernoulliChain, generator: torch.Generator) -> OrderedMask:
    """Simulate the chain one group at a time.

    Linear in the number of groups; kept as the slow oracle that the
    closed-form probabilities and the relaxed sampler are tested against.
    """
    tail = chain.dim
    for i in range(1, chain.dim):
        u = torch.rand((), generator=generator, dtype=torch.float64)
        if float(u) >= float(chain.pi[i]):
            tail = i
            break
    return OrderedMask(prefix_mask(chain.dim, tail), "hard", tail=tail)


# ---------------------------------------------------------------------------
# Downhill posterior
# ---------------------------------------------------------------------------


@dataclass
class DownhillParams:
    """Tail-probability parameterization of the relaxed mask posterior.

    ``mu_bar`` holds one unconstrained logit per droppable group (groups
    ``n_base + 1 .. K``); sigmoids of the logits act as conditional keep
    probabilities and chain into the tail probabilities ``beta``.  Base
    groups are never dropped, so ``beta`` is exactly zero on masks
    shorter than ``n_base``.  ``beta`` is always derived, never stored.
    """

    mu_bar: Tensor
    tau: float
    n_base: int = 1

    def __post_init__(self) -> None:
        if not torch.is_tensor(self.mu_bar):
            self.mu_bar = _f64(self.mu_bar)
        if self.mu_bar.ndim != 1:
            raise ValueError("mu_bar must be a vector")
        if not self.tau > 0:
            raise ValueError("tau must be strictly positive")
        if self.n_base < 1:
            raise ValueError("n_base must be at least 1")

    @property
    def dim(self) -> int:
        return self.n_base + self.mu_bar.numel()

    def conditionals(self) -> Tensor:
        """Conditional keep probabilities mu_1..mu_K; base groups pinned at 1."""
        s = torch.sigmoid(self.mu_bar.clamp(-LOGIT_CLAMP, LOGIT_CLAMP))
        return torch.cat([s.new_ones(self.n_base), s])

    def beta(self) -> Tensor:
        """Tail probabilities: beta_j = (1 - mu_{j+1}) * prod_{k<=j} mu_k."""
        return _prefix_mass(self.conditionals())

    def log_beta(self) -> Tensor:
        """log beta, computed in log space; -inf on the structural zeros."""
        m = self.mu_bar.numel()
        lead = self.mu_bar.new_full((self.n_base - 1,), -math.inf)
        if m == 0:
            return torch.cat([lead, self.mu_bar.new_zeros(1)])
        mb = self.mu_bar.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
        log_mu = -F.softplus(-mb)
        log_not_mu = -F.softplus(mb)
        cum = torch.cumsum(log_mu, dim=0)
        body = torch.cat([log_not_mu[:1], log_not_mu[1:] + cum[:-1], cum[-1:]])
        return torch.cat([lead, body])


def keep_probabilities(params: DownhillParams) -> Tensor:
    """Expected mask value per group: prod_{k<=j} mu_k = 1 - sum_{k<j} beta_k."""
    return torch.cumprod(params.conditionals(), dim=0)


def gumbel_noise(shape, generator: torch.Generator) -> Tensor:
    u = torch.rand(shape, generator=generator, dtype=torch.float64)
    u = u.clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS)
    return -torch.log(-torch.log(u))


def soft_mask_from_noise(params: DownhillParams, noise: Tensor) -> Tensor:
    """Relaxed mask from Gumbel noise; differentiable in ``mu_bar``.

    c = softmax((log beta + g) / tau), then z_i = 1 - sum_{j<i} c_j, so
    z_1 = 1 exactly and the decrements of z (with its last entry) recover
    c.  ``noise`` may be batched: (..., K) in, (..., K) out.  Finite
    difference checks against fixed noise go through this function.
    """
    scores = (params.log_beta() + noise) / params.tau
    c = torch.softmax(scores, dim=-1)
    shifted = torch.cumsum(c, dim=-1)[..., :-1]
    pad = c.new_zeros(c.shape[:-1] + (1,))
    return 1.0 - torch.cat([pad, shifted], dim=-1)


def downhill_sample(params: DownhillParams, generator: torch.Generator) -> OrderedMask:
    """One relaxed ordered mask; kind is soft."""
    z = soft_mask_from_noise(params, gumbel_noise(params.dim, generator))
    return OrderedMask(z, "soft")


def sample_soft_masks(params: DownhillParams, n: int, generator: torch.Generator) -> Tensor:
    """n relaxed masks as an (n, K) tensor; rows satisfy the soft-mask invariants."""
    return soft_mask_from_noise(params, gumbel_noise((n, params.dim), generator))


def downhill_hard_sample(params: DownhillParams, generator: torch.Generator) -> OrderedMask:
    """Zero-temperature sample: tail = argmax(log beta + g), i.e. categorical(beta)."""
    noise = gumbel_noise(params.dim, generator)
    b = int(torch.argmax(params.log_beta() + noise)) + 1
    return OrderedMask(prefix_mask(params.dim, b), "hard", tail=b)


def sample_hard_tails(params: DownhillParams, n: int, generator: torch.Generator) -> Tensor:
    """n zero-temperature tail indices (1-based counts of kept groups)."""
    noise = gumbel_noise((n, params.dim), generator)
    return torch.argmax(params.log_beta() + noise, dim=-1) + 1


def downhill_log_density(z: OrderedMask | Tensor, params: DownhillParams) -> float:
    """Log density of a strictly decreasing relaxed mask.

    Increments are taken against an implicit leading anchor of 1:
    delta_i = z_{i-1} - z_i with z_0 := 1, so a point on the support has
    all K increments strictly positive (and they sum to 1 when the last
    entry is 0).  Masks produced by ``downhill_sample`` pin their first
    entry to 1 and therefore sit outside this density's domain.
    """
    zt = z.z if isinstance(z, OrderedMask) else _f64(z)
    if zt.numel() != params.dim:
        raise ValueError("mask dimension does not match the parameters")
    prev = torch.cat([zt.new_ones(1), zt[:-1]])
    delta = prev - zt
    if (delta <= 0).any():
        raise ValueError("all increments z_{i-1} - z_i must be strictly positive")
    k = params.dim
    log_delta = torch.log(delta)
    log_beta = params.log_beta()
    lse = torch.logsumexp(log_beta - params.tau * log_delta, dim=0)
    val = (
        math.lgamma(k)
        + (k - 1) * math.log(params.tau)
        - k * lse
        + (log_beta - (params.tau + 1.0) * log_delta).sum()
    )
    return float(val)


def kl_mask_posterior_prior(params: DownhillParams, chain: BernoulliChain) -> Tensor:
    """KL between the hardened mask posterior and the chain prior.

    Zero-temperature closed form: sum_j beta_j log(beta_j / p(v_j)).
    Nonnegative, zero exactly when beta matches ``mask_probs(chain)``.
    Raises ``SupportMismatchError`` when the posterior has mass where the
    prior has none.  Differentiable in ``mu_bar``.
    """
    if params.dim != chain.dim:
        raise ValueError("posterior and prior dimensions differ")
    beta = params.beta()
    p = mask_probs(chain)
    support = beta.detach() > 0
    if (p[support] == 0).any():
        raise SupportMismatchError(
            "posterior mass on a mask with zero prior probability"
        )
    b = beta[support]
    kl = (b * (torch.log(b) - torch.log(p[support]))).sum()
    return kl.clamp_min(0.0)


# ---------------------------------------------------------------------------
# Width plans (test-time truncation)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerWidth:
    """Truncation point and per-group output rescaling for one layer."""

    kept_groups: int
    rescale: Tensor  # (K,) keep probabilities, zeroed beyond kept_groups

    @property
    def dim(self) -> int:
        return self.rescale.numel()


@dataclass(frozen=True)
class WidthPlan:
    width_fraction: float
    layers: tuple[LayerWidth, ...]


def make_width_plan(units: Sequence[DownhillParams], width_fraction: float) -> WidthPlan:
    """Deterministic truncation for evaluation at a fraction of full width.

    Per layer, ``b = max(n_base, round(width_fraction * K))`` groups are
    kept; kept group j is rescaled by its keep probability so that
    expected activations match training.  Evaluation never samples
    tails: the truncation point is fixed.
    """
    if not 0.0 < width_fraction <= 1.0:
        raise ValueError("width_fraction must lie in (0, 1]")
    entries = []
    for p in units:
        k = p.dim
        b = max(p.n_base, int(math.floor(width_fraction * k + 0.5)))
        b = min(b, k)
        if b < 1:
            raise ValueError("width plan would keep zero groups")
        factors = keep_probabilities(p).detach().clone()
        factors[b:] = 0.0
        entries.append(LayerWidth(b, factors))
    return WidthPlan(width_fraction, tuple(entries))


# ---------------------------------------------------------------------------
# Fixed-rate baseline
# ---------------------------------------------------------------------------


def fixed_rate_tail_probs(dist_kind: str, param, dim: int) -> Tensor:
    if dim < 1:
        raise ValueError("dim must be at least 1")
    if dist_kind == "geometric":
        p = float(param)
        if not 0.0 < p <= 1.0:
            raise ValueError("geometric success probability must lie in (0, 1]")
        idx = torch.arange(dim, dtype=torch.float64)
        probs = p * (1.0 - p) ** idx
        # Mass beyond the last group folds into it, so the tail always lands
        # in 1..dim.
        probs[-1] = (1.0 - p) ** (dim - 1)
        return probs
    if dist_kind == "categorical":
        probs = _f64(param)
        if probs.numel() != dim or probs.ndim != 1:
            raise ValueError("categorical parameter must be a length-dim vector")
        if (probs < 0).any() or float(probs.sum()) <= 0.0:
            raise ValueError("categorical weights must be nonnegative with positive sum")
        return probs / probs.sum()
    raise ValueError(f"unknown tail distribution {dist_kind!r}")


def fixed_rate_tail_sample(
    dist_kind: str, param, dim: int, generator: torch.Generator
) -> OrderedMask:
    """Hard mask with a tail drawn from a fixed distribution.

    The no-learning baseline unit: nothing here depends on data or on
    trainable parameters.
    """
    probs = fixed_rate_tail_probs(dist_kind, param, dim)
    b = int(torch.multinomial(probs, 1, generator=generator).item()) + 1
    return OrderedMask(prefix_mask(dim, b), "hard", tail=b)
