"""SGVB training loop.

Minibatch objective = -(N/M) * sum log p(y|x, sampled weights, sampled
masks) + kappa * total KL, minimized with SGD + momentum under a stepped
learning-rate schedule and an exponential temperature anneal.  The update
loop is strictly sequential and every random draw goes through one
generator, so a (config, seed) pair pins the whole run bit for bit.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass

import torch
from torch import Tensor

from .models import VndModel


class NumericalError(RuntimeError):
    """The objective went non-finite; carries per-layer diagnostics."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    kappa: float = 1e-5
    lr: float = 0.1
    momentum: float = 0.9
    lr_decay: float = 0.3
    lr_decay_interval: int = 80
    tau_start: float = 1.0
    tau_end: float = 0.03
    tau_anneal_frac: float = 0.6
    tau_anneal_steps: int | None = None
    seed: int = 0
    posterior_samples: int = 1
    grad_clip: float = 10.0
    dataset_size: int | None = None

    def __post_init__(self) -> None:
        if self.kappa < 0:
            raise ValueError("kappa must be nonnegative")
        if not 0 < self.tau_end <= self.tau_start:
            raise ValueError("need 0 < tau_end <= tau_start")
        if self.epochs < 0 or self.batch_size < 1 or self.posterior_samples < 1:
            raise ValueError("epochs, batch_size, posterior_samples out of range")
        if not 0.0 <= self.tau_anneal_frac <= 1.0:
            raise ValueError("tau_anneal_frac must lie in [0, 1]")

    def resolved(self, n_examples: int) -> "TrainConfig":
        """Fill dataset_size and the anneal span (in steps) from the data."""
        if self.batch_size > n_examples:
            raise ValueError("batch size exceeds the dataset size")
        steps_per_epoch = math.ceil(n_examples / self.batch_size)
        span = self.tau_anneal_steps
        if span is None:
            span = int(self.tau_anneal_frac * self.epochs * steps_per_epoch)
        return dataclasses.replace(
            self, dataset_size=n_examples, tau_anneal_steps=span
        )

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls(**json.loads(text))


def anneal_tau(step: int, config: TrainConfig) -> float:
    """Exponential interpolation from tau_start to tau_end over the span.

    Exact at both endpoints, geometric mean at the midpoint, constant at
    tau_end once the span is over.  A frozen schedule is tau_start ==
    tau_end (or a zero span).
    """
    span = config.tau_anneal_steps
    if span is None:
        raise ValueError("anneal span unresolved; call config.resolved() first")
    if span <= 0 or step >= span:
        return config.tau_end
    if step <= 0:
        return config.tau_start
    frac = step / span
    return float(config.tau_start * (config.tau_end / config.tau_start) ** frac)


@dataclass
class ElboTerms:
    neg_log_lik: Tensor
    kl_total: Tensor
    objective: Tensor
    logits: Tensor | None = None  # last joint sample, for progress metrics


def elbo_minibatch(
    model: VndModel,
    batch: tuple[Tensor, Tensor],
    config: TrainConfig,
    generator: torch.Generator,
    tau: float,
) -> ElboTerms:
    """One minibatch objective with a single joint noise sample.

    With ``posterior_samples > 1`` the likelihood term averages over that
    many joint samples; the KL term is exact either way.
    """
    x, y = batch
    n = config.dataset_size if config.dataset_size is not None else x.shape[0]
    scale = n / x.shape[0]
    log_lik = torch.zeros((), dtype=torch.float64)
    logits = None
    for _ in range(config.posterior_samples):
        logits = model.forward_train(x, tau, generator)
        log_lik = log_lik + model.log_prob_sum(logits, y)
    nll = -scale * log_lik / config.posterior_samples
    kl = model.kl_total()
    objective = nll + config.kappa * kl
    if not torch.isfinite(objective):
        raise NumericalError(_diagnostics(model, nll, kl))
    return ElboTerms(nll, kl, objective, logits)


def _diagnostics(model: VndModel, nll: Tensor, kl: Tensor) -> str:
    lines = [
        f"non-finite objective: nll={float(nll.detach())!r} kl={float(kl.detach())!r}"
    ]
    for name, p in model.named_parameters():
        norm = float(p.detach().norm())
        note = "" if math.isfinite(norm) else "  <- non-finite"
        lines.append(f"  {name}: |p| = {norm:.6g}{note}")
    return "\n".join(lines)


@dataclass
class EpochStats:
    epoch: int
    objective: float
    kl: float
    accuracy: float
    tau: float


History = list


def history_to_csv(history: list[EpochStats], header_lines: list[str] | None = None) -> str:
    lines = [f"# {line}" for line in (header_lines or [])]
    lines.append("epoch,objective,kl,acc,tau")
    for row in history:
        lines.append(
            f"{row.epoch},{row.objective:.12g},{row.kl:.12g},"
            f"{row.accuracy:.12g},{row.tau:.12g}"
        )
    return "\n".join(lines) + "\n"


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""

    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    epoch: int
    step: int


def make_state(model: VndModel, config: TrainConfig) -> TrainState:
    optimizer = torch.optim.SGD(
        model.parameters(), lr=config.lr, momentum=config.momentum
    )
    generator = torch.Generator().manual_seed(config.seed)
    return TrainState(optimizer, generator, epoch=0, step=0)


def train(
    model: VndModel,
    data: tuple[Tensor, Tensor],
    config: TrainConfig,
    *,
    state: TrainState | None = None,
    epochs_this_run: int | None = None,
    on_diverge=None,
) -> list[EpochStats]:
    """Run (or continue) training; returns the per-epoch history of this call.

    ``config.epochs`` is the total length of the run; pass a loaded
    ``state`` to resume, and ``epochs_this_run`` to stop early (for
    checkpointing).  The loop is single-threaded so that a fixed seed
    reproduces the run exactly.
    """
    x, y = data
    config = config.resolved(x.shape[0])
    if state is None:
        state = make_state(model, config)
    n = x.shape[0]
    steps_per_epoch = math.ceil(n / config.batch_size)
    last_epoch = config.epochs
    if epochs_this_run is not None:
        last_epoch = min(last_epoch, state.epoch + epochs_this_run)
    history: list[EpochStats] = []
    n_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        model.train()
        while state.epoch < last_epoch:
            lr = config.lr * config.lr_decay ** (state.epoch // config.lr_decay_interval)
            for group in state.optimizer.param_groups:
                group["lr"] = lr
            perm = torch.randperm(n, generator=state.generator)
            obj_sum = kl_sum = 0.0
            correct = 0
            tau = anneal_tau(state.step, config)
            for s in range(steps_per_epoch):
                idx = perm[s * config.batch_size : (s + 1) * config.batch_size]
                xb, yb = x[idx], y[idx]
                tau = anneal_tau(state.step, config)
                try:
                    terms = elbo_minibatch(model, (xb, yb), config, state.generator, tau)
                except NumericalError:
                    if on_diverge is not None:
                        on_diverge(model, state, config)
                    raise
                state.optimizer.zero_grad()
                terms.objective.backward()
                if config.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                state.optimizer.step()
                state.step += 1
                obj_sum += float(terms.objective.detach())
                kl_sum += float(terms.kl_total.detach())
                with torch.no_grad():
                    logits = terms.logits
                    if model.spec.head == "softmax":
                        correct += int((logits.argmax(1) == yb).sum())
                    else:
                        correct += int(((logits > 0) == (yb > 0.5)).sum())
            history.append(
                EpochStats(
                    epoch=state.epoch,
                    objective=obj_sum / steps_per_epoch,
                    kl=kl_sum / steps_per_epoch,
                    accuracy=correct / (n if model.spec.head == "softmax" else y.numel()),
                    tau=tau,
                )
            )
            state.epoch += 1
        model.eval()
    finally:
        torch.set_num_threads(n_threads)
    return history
