"""Width-sweep evaluation: truncated prediction, BN recollection, reports.

The sweep protocol per width: build a width plan, re-collect batch
normalization statistics at that width in mean mode, average predictions
over posterior samples under the fixed truncated mask, then score
accuracy, calibration and OOD separation.  Trials repeat with fresh
sampling seeds; the report carries both the per-trial rows and the
per-width mean/spread summary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from . import metrics
from .models import VndModel
from .ordering import WidthPlan


@dataclass
class PredictiveOutput:
    """Averaged predictive probabilities plus the raw per-sample outputs."""

    mean_probs: np.ndarray  # (n, classes)
    sample_probs: np.ndarray  # (S, n, classes)

    def __post_init__(self) -> None:
        if (self.mean_probs < -1e-9).any():
            raise ValueError("probabilities must be nonnegative")


def predict(
    model: VndModel,
    inputs: Tensor,
    plan: WidthPlan,
    n_samples: int,
    generator: torch.Generator | None = None,
    mode: str = "sample",
) -> PredictiveOutput:
    """Average head probabilities over posterior samples at a fixed width.

    mode="sample" draws weight noise per sample (needs a generator);
    mode="mean" propagates means only, so every sample is identical and
    the output is deterministic.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    outs = []
    with torch.no_grad():
        for _ in range(n_samples):
            logits = model.forward_eval(inputs, plan, mode=mode, generator=generator)
            outs.append(model.predict_probs(logits).numpy())
    sample_probs = np.stack(outs)
    out = PredictiveOutput(sample_probs.mean(axis=0), sample_probs)
    if model.spec.head == "softmax":
        rows = out.mean_probs.sum(axis=1)
        if not np.allclose(rows, 1.0, atol=1e-9):
            raise ValueError("averaged class probabilities drifted off the simplex")
    return out


def bn_recollect(
    model: VndModel,
    data: Tensor,
    plan: WidthPlan,
    *,
    n_batches: int = 2,
    batch_size: int = 512,
) -> VndModel:
    """Recompute normalization statistics at a width; parameters untouched.

    Statistics are reset and re-accumulated as a cumulative average over
    mean-mode forward passes, so recollecting twice over the same data
    gives identical results.  A model without normalization layers passes
    through unchanged.
    """
    bn_modules = model.bn_modules()
    if not bn_modules:
        return model
    saved = [(m.momentum, m.training) for m in bn_modules]
    for m in bn_modules:
        m.reset_running_stats()
        m.momentum = None  # cumulative average
        m.train()
    try:
        with torch.no_grad():
            for i in range(n_batches):
                batch = data[i * batch_size : (i + 1) * batch_size]
                if batch.shape[0] == 0:
                    break
                model.forward_eval(batch, plan, mode="mean")
    finally:
        for m, (momentum, training) in zip(bn_modules, saved):
            m.momentum = momentum
            m.train(training)
    return model


@dataclass
class SweepRow:
    width: float
    seed: int
    accuracy: float
    ece: float
    aupr: float
    auroc: float
    nll: float


@dataclass
class WidthSweepReport:
    rows: list[SweepRow]
    widths: list[float]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if any(b <= a for a, b in zip(self.widths, self.widths[1:])):
            raise ValueError("widths must be strictly increasing")
        for r in self.rows:
            bounded = (r.accuracy, r.ece, r.auroc)
            if any(np.isfinite(v) and not 0.0 <= v <= 1.0 for v in bounded):
                raise ValueError("accuracy, ECE and AUROC must lie in [0, 1]")
            if np.isfinite(r.aupr) and not 0.0 <= r.aupr <= 1.0 + 1e-12:
                raise ValueError("AUPR must lie in [0, 1]")

    def summary(self) -> list[dict]:
        out = []
        for w in self.widths:
            rows = [r for r in self.rows if r.width == w]
            entry = {"width": w, "trials": len(rows)}
            for name in ("accuracy", "ece", "aupr", "auroc", "nll"):
                vals = np.array([getattr(r, name) for r in rows], dtype=np.float64)
                entry[f"{name}_mean"] = float(np.mean(vals))
                entry[f"{name}_std"] = float(np.std(vals))
            out.append(entry)
        return out

    def to_csv(self, header_lines: list[str] | None = None) -> str:
        lines = [f"# {line}" for line in (header_lines or [])]
        lines.append("width,seed,accuracy,ece,aupr,auroc,nll")
        for r in self.rows:
            lines.append(
                f"{r.width:.12g},{r.seed},{r.accuracy:.12g},{r.ece:.12g},"
                f"{r.aupr:.12g},{r.auroc:.12g},{r.nll:.12g}"
            )
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(
            {"summary": self.summary(), "metadata": self.metadata},
            sort_keys=True,
            indent=2,
        )


@dataclass
class EvalSettings:
    n_samples: int = 6
    trials: int = 3
    ood_score: str = "msp"
    eval_mode: str = "sample"
    ece_bins: int = 15
    bn_batches: int = 2
    bn_batch_size: int = 512


def evaluate_width(
    model: VndModel,
    id_data: tuple[Tensor, Tensor],
    ood_inputs: Tensor | None,
    width: float,
    settings: EvalSettings,
    seed: int,
    bn_data: Tensor | None = None,
) -> SweepRow:
    """One (width, seed) evaluation row; the sweep calls exactly this."""
    x, y = id_data
    plan = model.width_plan(width)
    bn_recollect(
        model,
        bn_data if bn_data is not None else x,
        plan,
        n_batches=settings.bn_batches,
        batch_size=settings.bn_batch_size,
    )
    gen = torch.Generator().manual_seed(seed)
    out = predict(model, x, plan, settings.n_samples, gen, mode=settings.eval_mode)
    labels = y.numpy()
    acc = metrics.accuracy(out.mean_probs, labels)
    cal = metrics.ece(out.mean_probs, labels, settings.ece_bins)
    nll = metrics.mean_nll(out.mean_probs, labels)
    if ood_inputs is not None and ood_inputs.shape[0] > 0:
        ood_out = predict(
            model, ood_inputs, plan, settings.n_samples, gen, mode=settings.eval_mode
        )
        pos = metrics.ood_scores(ood_out.mean_probs, settings.ood_score)
        neg = metrics.ood_scores(out.mean_probs, settings.ood_score)
        pr = metrics.aupr(pos, neg)
        roc = metrics.auroc(pos, neg)
    else:
        pr = roc = float("nan")
    return SweepRow(width, seed, acc, cal, pr, roc, nll)


def width_sweep(
    model: VndModel,
    id_data: tuple[Tensor, Tensor],
    ood_inputs: Tensor | None,
    widths: list[float],
    settings: EvalSettings,
    base_seed: int,
    bn_data: Tensor | None = None,
) -> WidthSweepReport:
    """Evaluate every width x trial cell; rows are ordered (width, trial)."""
    if sorted(widths) != list(widths) or len(set(widths)) != len(widths):
        raise ValueError("widths must be sorted ascending and distinct")
    rows = []
    for w in widths:
        for t in range(settings.trials):
            rows.append(
                evaluate_width(
                    model, id_data, ood_inputs, w, settings, base_seed + t, bn_data
                )
            )
    metadata = {
        "base_seed": base_seed,
        "trials": settings.trials,
        "n_samples": settings.n_samples,
        "ood_score": settings.ood_score,
        "eval_mode": settings.eval_mode,
        "widths": widths,
    }
    return WidthSweepReport(rows, list(widths), metadata)
