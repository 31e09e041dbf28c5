"""Bayesian layers with multiplicative weight noise and group-ordered masking.

Each weight carries a mean ``theta`` and a log noise variance
``log_alpha``; pre-activations are sampled from the Gaussian they induce
(local reparameterization), and a relaxed ordered mask scales whole
output groups.  A layer's KL splits into

* a mask term: closed-form KL between the tail distribution ``beta`` and
  the chain prior, and
* a weight term: per-weight KL values aggregated into per-group column
  sums and weighted by the probability that each group survives
  (the lower-triangular matrix form).

Per-weight KL under the log-uniform slab has no closed form; it is
estimated by sampling (``neg_kl_weight_mc``) and approximated by a
fitted curve (``neg_kl_weight_approx``).  The additive constant of that
KL is dropped everywhere: it cannot affect gradients, but reported KL
magnitudes are only comparable across runs that drop it too.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .ordering import (
    BernoulliChain,
    DownhillParams,
    LayerWidth,
    kl_mask_posterior_prior,
)

LOG_ALPHA_MIN = -8.0
LOG_ALPHA_MAX = 0.5
# Floor under the pre-activation variance before sqrt; keeps the backward
# pass finite when an input row is identically zero.
_DELTA_FLOOR = 1e-38


@dataclass(frozen=True)
class KlApproxConstants:
    """Constants of the fitted negative-KL curve; ``offset`` is a nuisance
    intercept reported by the refit but excluded from training."""

    a1: float
    a2: float
    a3: float
    a4: float
    offset: float = 0.0

    def __post_init__(self) -> None:
        vals = (self.a1, self.a2, self.a3, self.a4, self.offset)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("constants must be finite")
        if self.a1 <= 0 or self.a3 <= 0:
            raise ValueError("a1 and a3 must be positive")


DEFAULT_KL_CONSTANTS = KlApproxConstants(0.7294, -0.2041, 0.3492, 0.5387)


def neg_kl_weight_approx(
    log_alpha, constants: KlApproxConstants = DEFAULT_KL_CONSTANTS
) -> Tensor:
    """Fitted closed form of the per-weight negative KL.

    a1 * exp(-e^{a4} (a2 + a3 * log_alpha)^2) - 0.5 * log(1 + 1/alpha),
    with the input clamped to [-8, 0.5] (the fit is valid on [-5, 0.5]).
    The additive constant is dropped.
    """
    x = torch.as_tensor(log_alpha, dtype=torch.float64)
    x = x.clamp(LOG_ALPHA_MIN, LOG_ALPHA_MAX)
    bump = constants.a1 * torch.exp(
        -math.exp(constants.a4) * (constants.a2 + constants.a3 * x) ** 2
    )
    return bump - 0.5 * F.softplus(-x)


def neg_kl_weight_mc(
    log_alpha: float, n_samples: int, generator: torch.Generator
) -> float:
    """Monte Carlo ground truth for the per-weight negative KL.

    0.5 * log alpha - mean(log |eps|) with eps ~ N(1, alpha); unbiased up
    to Monte Carlo error, additive constant dropped.  This is the oracle
    the fitted curve is checked against.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    x = min(max(float(log_alpha), LOG_ALPHA_MIN), LOG_ALPHA_MAX)
    std = math.exp(0.5 * x)
    eps = 1.0 + std * torch.randn(n_samples, generator=generator, dtype=torch.float64)
    log_abs = torch.log(eps.abs().clamp_min(1e-300))
    return 0.5 * x - float(log_abs.mean())


# ---------------------------------------------------------------------------
# Group maps
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GroupMap:
    """Partition of D outputs into K contiguous groups of near-equal size."""

    groups: int
    outputs: int
    n_base: int
    index: Tensor  # (D,) long, group index of each output

    @classmethod
    def contiguous(cls, outputs: int, groups: int, n_base: int = 1) -> "GroupMap":
        if not 1 <= groups <= outputs:
            raise ValueError("need 1 <= groups <= outputs")
        if not 1 <= n_base < groups:
            raise ValueError("need 1 <= n_base < groups")
        base, extra = divmod(outputs, groups)
        sizes = [base + (1 if g < extra else 0) for g in range(groups)]
        index = torch.repeat_interleave(
            torch.arange(groups), torch.as_tensor(sizes)
        )
        return cls(groups, outputs, n_base, index)

    def broadcast(self, per_group: Tensor) -> Tensor:
        """Expand a (K,) vector to a (D,) vector, one value per output."""
        return per_group.index_select(-1, self.index)

    def group_column_sums(self, per_output: Tensor) -> Tensor:
        """Sum a (D,) vector within each group, returning (K,)."""
        out = per_output.new_zeros(self.groups)
        return out.index_add(0, self.index, per_output)


# ---------------------------------------------------------------------------
# Forward-pass record
# ---------------------------------------------------------------------------


@dataclass
class ForwardBatch:
    """One training forward pass: inputs, Gaussian moments, mask, outputs.

    ``delta`` is the raw per-unit variance (zero when inputs are zero or
    noise is off); ``F = (gamma + sqrt(delta) * eps) * mask``.
    """

    H: Tensor
    F: Tensor
    gamma: Tensor
    delta: Tensor
    mask: Tensor | None


@dataclass
class KlTerms:
    """Mask KL, mask-weighted weight KL, and the always-on bias KL."""

    phi1: Tensor
    phi2: Tensor
    bias: Tensor

    def total(self) -> Tensor:
        return self.phi1 + self.phi2 + self.bias


class _VariationalBase(nn.Module):
    """Shared parameter plumbing for dense and convolutional layers."""

    group_map: GroupMap | None

    def _init_ordering(self, prior_keep: float, mu_bar_init: float) -> None:
        gm = self.group_map
        if gm is None:
            self.mu_bar = None
            return
        self.mu_bar = nn.Parameter(
            torch.full((gm.groups - gm.n_base,), mu_bar_init, dtype=torch.float64)
        )
        self.register_buffer(
            "prior_pi", BernoulliChain.default(gm.groups, gm.n_base, prior_keep).pi
        )

    @property
    def masked(self) -> bool:
        return self.group_map is not None

    def ordering(self, tau: float = 1.0) -> DownhillParams:
        if self.group_map is None:
            raise ValueError("layer has no ordering unit")
        return DownhillParams(self.mu_bar, tau, self.group_map.n_base)

    def prior_chain(self) -> BernoulliChain:
        if self.group_map is None:
            raise ValueError("layer has no ordering unit")
        return BernoulliChain(self.prior_pi)

    def _alpha(self) -> Tensor:
        return torch.exp(self.log_alpha.clamp(LOG_ALPHA_MIN, LOG_ALPHA_MAX))

    def _bias_moments(self) -> tuple[Tensor, Tensor] | None:
        if self.bias_theta is None:
            return None
        alpha_b = torch.exp(self.bias_log_alpha.clamp(LOG_ALPHA_MIN, LOG_ALPHA_MAX))
        return self.bias_theta, alpha_b * self.bias_theta**2

    def _check_mask(self, z: Tensor | None) -> Tensor | None:
        if self.group_map is None:
            if z is not None:
                raise ValueError("layer has no ordering unit but got a mask")
            return None
        if z is None or z.shape[-1] != self.group_map.groups:
            raise ValueError("mask length must equal the number of groups")
        return self.group_map.broadcast(z)

    def _eval_factors(self, width: LayerWidth | None) -> Tensor | None:
        if self.group_map is None:
            if width is not None:
                raise ValueError("width entry given for an unmasked layer")
            return None
        if width is None or width.dim != self.group_map.groups:
            raise ValueError("width plan does not match this layer's groups")
        return self.group_map.broadcast(width.rescale)

    def kl_terms(self) -> KlTerms:
        """Mask KL plus group-aggregated weight KL.

        Dropped groups share the prior spike, so only the kept-slab
        component contributes: phi2 = e^T K1 J_L^T beta over group
        column sums.  Bias KL is mask-free and always counted.
        """
        k1 = -neg_kl_weight_approx(self.log_alpha)
        if self.bias_theta is not None:
            bias = (-neg_kl_weight_approx(self.bias_log_alpha)).sum()
        else:
            bias = torch.zeros((), dtype=torch.float64)
        if self.group_map is None:
            return KlTerms(torch.zeros((), dtype=torch.float64), k1.sum(), bias)
        per_output = k1.reshape(-1, self.group_map.outputs).sum(0) if k1.ndim == 2 \
            else k1.reshape(self.group_map.outputs, -1).sum(1)
        col = self.group_map.group_column_sums(per_output)
        beta = self.ordering().beta()
        j_l = torch.tril(torch.ones(self.group_map.groups, self.group_map.groups,
                                    dtype=torch.float64))
        phi2 = col @ j_l.T @ beta
        phi1 = kl_mask_posterior_prior(self.ordering(), self.prior_chain())
        return KlTerms(phi1, phi2, bias)

    def kl(self) -> Tensor:
        return self.kl_terms().total()


# ---------------------------------------------------------------------------
# Dense layer
# ---------------------------------------------------------------------------


class VariationalDense(_VariationalBase):
    """Fully connected layer; the mask scales contiguous output groups."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        *,
        groups: int = 0,
        n_base: int = 1,
        bias: bool = True,
        prior_keep: float = 0.95,
        log_alpha_init: float = -1.0,
        mu_bar_init: float = 3.0,
        generator: torch.Generator | None = None,
    ) -> None:
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.theta = nn.Parameter(
            torch.empty(in_features, out_features, dtype=torch.float64)
        )
        self.log_alpha = nn.Parameter(
            torch.full((in_features, out_features), log_alpha_init, dtype=torch.float64)
        )
        if bias:
            self.bias_theta = nn.Parameter(torch.empty(out_features, dtype=torch.float64))
            self.bias_log_alpha = nn.Parameter(
                torch.full((out_features,), log_alpha_init, dtype=torch.float64)
            )
        else:
            self.bias_theta = None
            self.bias_log_alpha = None
        # Spike component of the prior mixture: mean exactly 0, small fixed
        # std.  Under the shared-spike simplification it never enters any
        # computation; kept so the layer states its full prior.
        self.spike_mean = 0.0
        self.spike_std = 1e-2
        self.group_map = GroupMap.contiguous(out_features, groups, n_base) if groups else None
        self._init_ordering(prior_keep, mu_bar_init)
        self.reset_parameters(generator)

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        bound = 1.0 / math.sqrt(self.in_features)
        with torch.no_grad():
            self.theta.uniform_(-bound, bound, generator=generator)
            if self.bias_theta is not None:
                self.bias_theta.uniform_(-bound, bound, generator=generator)

    def moments(self, H: Tensor) -> tuple[Tensor, Tensor]:
        """Per-unit Gaussian moments: gamma = H theta, delta = H^2 (alpha theta^2)."""
        if H.ndim != 2 or H.shape[1] != self.in_features:
            raise ValueError("input must be (batch, in_features)")
        gamma = H @ self.theta
        delta = (H * H) @ (self._alpha() * self.theta**2)
        bm = self._bias_moments()
        if bm is not None:
            gamma = gamma + bm[0]
            delta = delta + bm[1]
        return gamma, delta

    def forward_train(
        self, H: Tensor, z: Tensor | None, generator: torch.Generator
    ) -> ForwardBatch:
        """Sample pre-activations from their induced Gaussian, then mask.

        The mask multiplies output features, never weights; it is shared
        across the batch (one joint mask sample per call).
        """
        gamma, delta = self.moments(H)
        zb = self._check_mask(z)
        eps = torch.randn(gamma.shape, generator=generator, dtype=torch.float64)
        b = gamma + torch.sqrt(delta.clamp_min(_DELTA_FLOOR)) * eps
        out = b * zb if zb is not None else b
        return ForwardBatch(H=H, F=out, gamma=gamma, delta=delta, mask=zb)

    def forward_eval(
        self,
        H: Tensor,
        width: LayerWidth | None,
        mode: str = "mean",
        generator: torch.Generator | None = None,
    ) -> Tensor:
        """Truncated, rescaled forward pass at a fixed width.

        mode="mean" propagates the means only (deterministic);
        mode="sample" draws pre-activation noise exactly as in training
        but under the fixed truncated mask.
        """
        factors = self._eval_factors(width)
        if mode == "mean":
            gamma, _ = self.moments(H)
            out = gamma
        elif mode == "sample":
            if generator is None:
                raise ValueError("sample mode needs a generator")
            gamma, delta = self.moments(H)
            eps = torch.randn(gamma.shape, generator=generator, dtype=torch.float64)
            out = gamma + torch.sqrt(delta.clamp_min(_DELTA_FLOOR)) * eps
        else:
            raise ValueError(f"unknown eval mode {mode!r}")
        return out * factors if factors is not None else out


# ---------------------------------------------------------------------------
# Convolutional layer
# ---------------------------------------------------------------------------


class VariationalConv2d(_VariationalBase):
    """2-D convolution; the mask scales contiguous output-channel groups.

    Linearity lets the same local reparameterization apply per channel:
    the mean map is a convolution with the weight means and the variance
    map a convolution of squared inputs with alpha * theta^2.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        *,
        stride: int = 1,
        padding: int = 0,
        groups: int = 0,
        n_base: int = 1,
        bias: bool = True,
        prior_keep: float = 0.95,
        log_alpha_init: float = -1.0,
        mu_bar_init: float = 3.0,
        generator: torch.Generator | None = None,
    ) -> None:
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.theta = nn.Parameter(torch.empty(shape, dtype=torch.float64))
        self.log_alpha = nn.Parameter(
            torch.full(shape, log_alpha_init, dtype=torch.float64)
        )
        if bias:
            self.bias_theta = nn.Parameter(torch.empty(out_channels, dtype=torch.float64))
            self.bias_log_alpha = nn.Parameter(
                torch.full((out_channels,), log_alpha_init, dtype=torch.float64)
            )
        else:
            self.bias_theta = None
            self.bias_log_alpha = None
        self.spike_mean = 0.0
        self.spike_std = 1e-2
        self.group_map = (
            GroupMap.contiguous(out_channels, groups, n_base) if groups else None
        )
        self._init_ordering(prior_keep, mu_bar_init)
        self.reset_parameters(generator)

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        fan_in = self.in_channels * self.kernel_size**2
        bound = 1.0 / math.sqrt(fan_in)
        with torch.no_grad():
            self.theta.uniform_(-bound, bound, generator=generator)
            if self.bias_theta is not None:
                self.bias_theta.uniform_(-bound, bound, generator=generator)

    def moments(self, H: Tensor) -> tuple[Tensor, Tensor]:
        if H.ndim != 4 or H.shape[1] != self.in_channels:
            raise ValueError("input must be (batch, channels, height, width)")
        bm = self._bias_moments()
        gamma = F.conv2d(
            H, self.theta, bm[0] if bm else None,
            stride=self.stride, padding=self.padding,
        )
        delta = F.conv2d(
            H * H, self._alpha() * self.theta**2, bm[1] if bm else None,
            stride=self.stride, padding=self.padding,
        )
        return gamma, delta

    def _channel_view(self, per_channel: Tensor) -> Tensor:
        return per_channel.view(1, -1, 1, 1)

    def forward_train(
        self, H: Tensor, z: Tensor | None, generator: torch.Generator
    ) -> ForwardBatch:
        gamma, delta = self.moments(H)
        zb = self._check_mask(z)
        eps = torch.randn(gamma.shape, generator=generator, dtype=torch.float64)
        b = gamma + torch.sqrt(delta.clamp_min(_DELTA_FLOOR)) * eps
        out = b * self._channel_view(zb) if zb is not None else b
        return ForwardBatch(H=H, F=out, gamma=gamma, delta=delta, mask=zb)

    def forward_eval(
        self,
        H: Tensor,
        width: LayerWidth | None,
        mode: str = "mean",
        generator: torch.Generator | None = None,
    ) -> Tensor:
        factors = self._eval_factors(width)
        if mode == "mean":
            gamma, _ = self.moments(H)
            out = gamma
        elif mode == "sample":
            if generator is None:
                raise ValueError("sample mode needs a generator")
            gamma, delta = self.moments(H)
            eps = torch.randn(gamma.shape, generator=generator, dtype=torch.float64)
            out = gamma + torch.sqrt(delta.clamp_min(_DELTA_FLOOR)) * eps
        else:
            raise ValueError(f"unknown eval mode {mode!r}")
        return out * self._channel_view(factors) if factors is not None else out


# ---------------------------------------------------------------------------
# General weight-KL forms (reference implementations, numpy)
# ---------------------------------------------------------------------------


def phi2_full(k0, k1, beta) -> float:
    """General two-component weight KL in matrix form.

    e^T K0 (J - J_L)^T beta + e^T K1 J_L^T beta, where J is all ones and
    J_L is lower-triangular ones: mask v_j pays the slab KL (K1) on its
    kept columns and the spike KL (K0) on the dropped ones.
    """
    k0 = np.asarray(k0, dtype=np.float64)
    k1 = np.asarray(k1, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if k0.shape != k1.shape or k0.ndim != 2:
        raise ValueError("K0 and K1 must be matrices of equal shape")
    d, cols = k0.shape
    if beta.shape != (cols,):
        raise ValueError("beta length must equal the number of columns")
    e = np.ones(d)
    j = np.ones((cols, cols))
    j_l = np.tril(j)
    return float(e @ k0 @ (j - j_l).T @ beta + e @ k1 @ j_l.T @ beta)


def phi2_bruteforce(k0, k1, beta) -> float:
    """Enumerate every hard mask; the slow oracle for ``phi2_full``."""
    k0 = np.asarray(k0, dtype=np.float64)
    k1 = np.asarray(k1, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    cols = k0.shape[1]
    if cols > 12:
        raise ValueError("enumeration is guarded to at most 12 columns")
    c0 = k0.sum(axis=0)
    c1 = k1.sum(axis=0)
    total = 0.0
    for j in range(cols):
        total += beta[j] * (c1[: j + 1].sum() + c0[j + 1 :].sum())
    return float(total)


def l0_reduction(beta, chi: float, d: int) -> float:
    """Constant-KL spike-and-slab specialization: chi * d * sum_j j beta_j.

    Identical to ``phi2_full`` with K0 = 0 and K1 filled with chi; larger
    prefixes pay proportionally more, which is what makes the penalty an
    ordered rather than uniform L0.
    """
    if chi < 0:
        raise ValueError("chi must be nonnegative")
    beta = np.asarray(beta, dtype=np.float64)
    ranks = np.arange(1, beta.size + 1, dtype=np.float64)
    return float(chi * d * (ranks * beta).sum())
