"""Variational nested dropout and Bayesian nested networks.

Distributions over ordered masks, Bayesian layers with group-wise
masking, an SGVB trainer, and a width-sweep evaluation harness.
"""

from .layers import (
    DEFAULT_KL_CONSTANTS,
    GroupMap,
    KlApproxConstants,
    VariationalConv2d,
    VariationalDense,
    l0_reduction,
    neg_kl_weight_approx,
    neg_kl_weight_mc,
    phi2_bruteforce,
    phi2_full,
)
from .models import ModelSpec, VndModel, build_model, parse_stack
from .ordering import (
    BernoulliChain,
    DownhillParams,
    OrderedMask,
    WidthPlan,
    chain_marginals,
    chain_sample,
    downhill_hard_sample,
    downhill_log_density,
    downhill_sample,
    fixed_rate_tail_sample,
    keep_probabilities,
    kl_mask_posterior_prior,
    make_width_plan,
    mask_probs,
)
from .training import TrainConfig, anneal_tau, elbo_minibatch, train

__version__ = "0.1.0"
