"""Command-line harness.

    vnd gen-data --kind two_moons --n 1000 --noise 0.1 --seed 0 --out moons.vndd
    vnd train --config exp.ini [--seed N] [--set train.kappa=0 ...]
    vnd sweep --config exp.ini --checkpoint runs/model.vndc
    vnd fit-kl --grid 64 --samples 1000000 --seed 0 --out-dir runs/klfit
    vnd report --run-dir runs/exp

Exit codes: 0 success, 2 validation error, 3 numerical failure.
``VND_THREADS`` caps torch's intra-op parallelism.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from . import data as datamod
from . import kl_fit
from .config import (
    ConfigError,
    ExperimentConfig,
    config_echo_lines,
    load_config,
)
from .evaluation import EvalSettings, WidthSweepReport, width_sweep
from .metrics import reliability_bins
from .models import build_model
from .ordering import make_width_plan
from .training import NumericalError, history_to_csv, make_state, train

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


def _apply_thread_cap() -> None:
    cap = os.environ.get("VND_THREADS")
    if cap:
        try:
            torch.set_num_threads(max(1, int(cap)))
        except ValueError:
            pass


def _load_experiment(args) -> ExperimentConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"experiment.seed={args.seed}")
    return load_config(args.config, overrides)


def _resolve_datasets(config: ExperimentConfig):
    d = config.data
    seed = d.data_seed if d.data_seed is not None else config.seed
    if d.source in datamod.SYNTHETIC_KINDS:
        handle = datamod.gen_dataset(d.source, d.n, d.noise, seed, d.test_fraction)
    elif d.source == "vndd":
        handle = datamod.load_dataset(d.path)
    elif d.source == "csv":
        handle = datamod.load_csv_dataset(d.path, d.test_fraction, seed)
    else:
        handle = datamod.load_idx_pair(
            d.idx_images, d.idx_labels, d.take, d.test_fraction, seed
        )
    ood = None
    if d.ood_source == "checkerboard_ood":
        ood = datamod.gen_dataset("checkerboard_ood", d.ood_n, d.noise, seed + 1)
    elif d.ood_source == "vndd":
        ood = datamod.load_dataset(d.ood_path)
    return handle, ood


def cmd_gen_data(args) -> int:
    handle = datamod.gen_dataset(
        args.kind, args.n, args.noise, args.seed, args.test_fraction
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    datamod.save_dataset(out, handle)
    counts = {
        name: int((handle.splits == code).sum())
        for code, name in ((0, "train"), (1, "test"), (2, "ood"))
    }
    print(f"wrote {out} ({handle.features.shape[0]} examples, splits {counts})")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_experiment(args)
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    handle, _ = _resolve_datasets(config)
    x, y = handle.torch_split(datamod.TRAIN)
    spec = config.model.spec()
    model = build_model(
        spec,
        config.seed,
        prior_keep=config.model.prior_keep,
        log_alpha_first=config.model.log_alpha_first,
        log_alpha_rest=config.model.log_alpha_rest,
        mu_bar_init=config.model.mu_bar_init,
    )
    train_cfg = config.train.resolved(x.shape[0])
    state = make_state(model, train_cfg)

    def dump_on_diverge(model, state, cfg):
        ckpt.save_checkpoint(out_dir / "diverged.vndc", model, state, cfg)

    history = train(model, (x, y), train_cfg, state=state, on_diverge=dump_on_diverge)
    ckpt.save_checkpoint(out_dir / "model.vndc", model, state, train_cfg)
    csv_text = history_to_csv(history, config_echo_lines(config))
    (out_dir / "history.csv").write_text(csv_text)
    last = history[-1] if history else None
    if last is not None:
        print(
            f"trained {train_cfg.epochs} epochs: objective {last.objective:.6g}, "
            f"kl {last.kl:.6g}, train acc {last.accuracy:.4f}"
        )
    print(f"wrote {out_dir / 'model.vndc'} and {out_dir / 'history.csv'}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = _load_experiment(args)
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model, _, _ = ckpt.load_checkpoint(args.checkpoint)
    if model.spec.to_string() != config.model.spec().to_string():
        raise ConfigError(
            ["checkpoint model does not match the configured model stack"]
        )
    handle, ood_handle = _resolve_datasets(config)
    x_test, y_test = handle.torch_split(datamod.TEST)
    x_train, _ = handle.torch_split(datamod.TRAIN)
    ood_inputs = None
    if config.eval.ood_metrics and ood_handle is not None:
        ood_inputs, _ = ood_handle.torch_split(datamod.OOD)
    settings = EvalSettings(
        n_samples=config.eval.samples,
        trials=config.eval.trials,
        ood_score=config.eval.ood_score,
        eval_mode=config.eval.eval_mode,
        ece_bins=config.eval.ece_bins,
        bn_batches=config.eval.bn_batches,
        bn_batch_size=config.eval.bn_batch_size,
    )
    report = width_sweep(
        model,
        (x_test, y_test),
        ood_inputs,
        list(config.eval.widths),
        settings,
        config.seed,
        bn_data=x_train,
    )
    report.metadata["dataset"] = handle.provenance
    report.metadata["ood_dataset"] = ood_handle.provenance if ood_handle else ""
    (out_dir / "sweep.csv").write_text(report.to_csv(config_echo_lines(config)))
    (out_dir / "sweep_summary.json").write_text(report.to_json())
    if config.eval.reliability:
        _write_reliability(model, (x_test, y_test), config, settings, out_dir)
    for entry in report.summary():
        print(
            f"width {entry['width']:.2f}: acc {entry['accuracy_mean']:.4f}"
            f" ece {entry['ece_mean']:.4f} aupr {entry['aupr_mean']:.4f}"
        )
    print(f"wrote {out_dir / 'sweep.csv'} and {out_dir / 'sweep_summary.json'}")
    return EXIT_OK


def _write_reliability(model, id_data, config, settings, out_dir: Path) -> None:
    from .evaluation import bn_recollect, predict

    x, y = id_data
    for w in config.eval.widths:
        plan = model.width_plan(w)
        bn_recollect(model, x, plan, n_batches=settings.bn_batches,
                     batch_size=settings.bn_batch_size)
        gen = torch.Generator().manual_seed(config.seed)
        out = predict(model, x, plan, settings.n_samples, gen, settings.eval_mode)
        rows = reliability_bins(out.mean_probs, y.numpy(), settings.ece_bins)
        lines = ["confidence_bin,accuracy,count"]
        lines += [f"{c:.12g},{a:.12g},{n}" for c, a, n in rows]
        (out_dir / f"reliability_w{w:g}.csv").write_text("\n".join(lines) + "\n")


def cmd_fit_kl(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    xs, ys = kl_fit.mc_truth_grid(args.grid, args.samples, args.seed)
    constants, report = kl_fit.fit_constants(xs, ys, seed=args.seed)
    lines = [
        f"# fit-kl grid={args.grid} samples={args.samples} seed={args.seed}",
        "log_alpha,mc_value,fitted_value,abs_deviation",
    ]
    for x, mc, fit, dev in report.rows():
        lines.append(f"{x:.12g},{mc:.12g},{fit:.12g},{dev:.12g}")
    (out_dir / "fitkl_grid.csv").write_text("\n".join(lines) + "\n")
    payload = {
        "a1": constants.a1,
        "a2": constants.a2,
        "a3": constants.a3,
        "a4": constants.a4,
        "offset": constants.offset,
        "max_abs_deviation": report.max_abs_deviation,
        "default_deltas": list(report.default_deltas),
    }
    (out_dir / "fitkl_constants.json").write_text(json.dumps(payload, indent=2))
    print(
        f"max |fit - mc| = {report.max_abs_deviation:.4f} nats over "
        f"{args.grid} points; constants ({constants.a1:.4f}, {constants.a2:.4f}, "
        f"{constants.a3:.4f}, {constants.a4:.4f}), offset {constants.offset:.4f}"
    )
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    summary_path = run_dir / "sweep_summary.json"
    if not summary_path.exists():
        print(f"no sweep_summary.json under {run_dir}", file=sys.stderr)
        return EXIT_VALIDATION
    payload = json.loads(summary_path.read_text())
    print(f"{'width':>6} {'acc':>8} {'ece':>8} {'aupr':>8} {'auroc':>8} {'nll':>8}")
    for entry in payload["summary"]:
        print(
            f"{entry['width']:6.2f} {entry['accuracy_mean']:8.4f}"
            f" {entry['ece_mean']:8.4f} {entry['aupr_mean']:8.4f}"
            f" {entry['auroc_mean']:8.4f} {entry['nll_mean']:8.4f}"
        )
    meta = payload.get("metadata", {})
    if meta:
        print(f"samples={meta.get('n_samples')} trials={meta.get('trials')}"
              f" ood_score={meta.get('ood_score')}")
    history = run_dir / "history.csv"
    if history.exists():
        last = [l for l in history.read_text().splitlines() if l and not l.startswith("#")]
        if len(last) > 1:
            print(f"final training row: {last[-1]}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vnd")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="write a synthetic dataset")
    gen.add_argument("--kind", choices=datamod.SYNTHETIC_KINDS, required=True)
    gen.add_argument("--n", type=int, default=1000)
    gen.add_argument("--noise", type=float, default=0.1)
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--test-fraction", type=float, default=0.25)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_gen_data)

    for name, fn in (("train", cmd_train), ("sweep", cmd_sweep)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
        if name == "sweep":
            p.add_argument("--checkpoint", required=True)
        p.set_defaults(func=fn)

    fit = sub.add_parser("fit-kl", help="refit the weight-KL curve")
    fit.add_argument("--grid", type=int, default=64)
    fit.add_argument("--samples", type=int, default=10**6)
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--out-dir", default="klfit")
    fit.set_defaults(func=cmd_fit_kl)

    rep = sub.add_parser("report", help="summarize a run directory")
    rep.add_argument("--run-dir", required=True)
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_VALIDATION
    except (datamod.DatasetError, ckpt.CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalError, kl_fit.FitConvergenceError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
