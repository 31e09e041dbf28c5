"""Experiment configuration: flat INI sections, strict validation.

Sections and keys are a closed set: unknown names are rejected, every
problem is reported at once (never just the first), and the seed is
mandatory.  ``--set section.key=value`` overrides apply before parsing.
"""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, field, fields

from .data import SYNTHETIC_KINDS
from .models import ModelSpec, parse_stack
from .training import TrainConfig


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


@dataclass
class DataConfig:
    source: str = "two_moons"
    path: str = ""
    n: int = 1000
    noise: float = 0.1
    data_seed: int | None = None
    test_fraction: float = 0.25
    ood_source: str = "none"
    ood_path: str = ""
    ood_n: int = 500
    idx_images: str = ""
    idx_labels: str = ""
    take: int | None = None


@dataclass
class EvalConfig:
    widths: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)
    samples: int = 6
    trials: int = 3
    ood_score: str = "msp"
    eval_mode: str = "sample"
    ece_bins: int = 15
    reliability: bool = False
    ood_metrics: bool = True
    bn_batches: int = 2
    bn_batch_size: int = 512


@dataclass
class ModelConfig:
    stack: str = ""
    head: str = "softmax"
    input_shape: tuple[int, ...] | None = None
    prior_keep: float = 0.95
    log_alpha_first: float = -8.0
    log_alpha_rest: float = -1.0
    mu_bar_init: float = 3.0

    def spec(self) -> ModelSpec:
        return ModelSpec(parse_stack(self.stack), self.head, self.input_shape)


@dataclass
class ExperimentConfig:
    seed: int
    output_dir: str
    model: ModelConfig
    train: TrainConfig
    eval: EvalConfig
    data: DataConfig


_SCHEMA: dict[str, dict[str, object]] = {
    "experiment": {"seed": int, "output_dir": str},
    "model": {
        "stack": str,
        "head": str,
        "input_shape": "shape",
        "prior_keep": float,
        "log_alpha_first": float,
        "log_alpha_rest": float,
        "mu_bar_init": float,
    },
    "train": {
        "epochs": int,
        "batch_size": int,
        "kappa": float,
        "lr": float,
        "momentum": float,
        "lr_decay": float,
        "lr_decay_interval": int,
        "tau_start": float,
        "tau_end": float,
        "tau_anneal_frac": float,
        "posterior_samples": int,
        "grad_clip": float,
    },
    "eval": {
        "widths": "floats",
        "samples": int,
        "trials": int,
        "ood_score": str,
        "eval_mode": str,
        "ece_bins": int,
        "reliability": bool,
        "ood_metrics": bool,
        "bn_batches": int,
        "bn_batch_size": int,
    },
    "data": {
        "source": str,
        "path": str,
        "n": int,
        "noise": float,
        "data_seed": int,
        "test_fraction": float,
        "ood_source": str,
        "ood_path": str,
        "ood_n": int,
        "idx_images": str,
        "idx_labels": str,
        "take": int,
    },
}


def _convert(kind, raw: str, where: str, problems: list[str]):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError("expected a boolean")
        if kind == "floats":
            return tuple(float(v) for v in raw.split(",") if v.strip())
        if kind == "shape":
            return tuple(int(v) for v in raw.lower().split("x") if v.strip()) or None
        return raw
    except ValueError as exc:
        problems.append(f"{where}: {exc}")
        return None


def parse_config(text: str, overrides: list[str] | None = None) -> ExperimentConfig:
    """Parse INI text into a validated config; raises ConfigError with
    every problem found."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive
    problems: list[str] = []
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"config syntax: {exc}"]) from None
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            problems.append(f"override {item!r} must look like section.key=value")
            continue
        target, value = item.split("=", 1)
        section, key = (s.strip() for s in target.split(".", 1))
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, value.strip())

    values: dict[str, dict] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            problems.append(f"unknown section [{section}]")
            continue
        values[section] = {}
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                problems.append(f"unknown key {section}.{key}")
                continue
            val = _convert(_SCHEMA[section][key], raw, f"{section}.{key}", problems)
            if val is not None:
                values[section][key] = val

    exp = values.get("experiment", {})
    if "seed" not in exp:
        problems.append("missing required key experiment.seed")
    if "output_dir" not in exp:
        problems.append("missing required key experiment.output_dir")

    model = ModelConfig(**values.get("model", {}))
    data = DataConfig(**values.get("data", {}))
    evalc = EvalConfig(**values.get("eval", {}))
    train_kwargs = values.get("train", {})
    try:
        train = TrainConfig(seed=exp.get("seed", 0), **train_kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(f"train: {exc}")
        train = TrainConfig(seed=exp.get("seed", 0))

    _validate(model, data, evalc, problems)
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(
        seed=exp["seed"],
        output_dir=exp["output_dir"],
        model=model,
        train=train,
        eval=evalc,
        data=data,
    )


def _validate(model: ModelConfig, data: DataConfig, evalc: EvalConfig, problems: list[str]):
    if model.stack:
        try:
            spec = model.spec()
            problems.extend(f"model: {e}" for e in spec.validate())
        except ValueError as exc:
            problems.append(f"model.stack: {exc}")
    else:
        problems.append("missing required key model.stack")
    known_sources = SYNTHETIC_KINDS + ("vndd", "csv", "idx")
    if data.source not in known_sources:
        problems.append(f"data.source must be one of {', '.join(known_sources)}")
    if data.source in ("vndd", "csv"):
        if not data.path:
            problems.append(f"data.path is required for source {data.source}")
        elif not os.path.exists(data.path):
            problems.append(f"data.path does not exist: {data.path}")
    if data.source == "idx":
        for key, p in (("idx_images", data.idx_images), ("idx_labels", data.idx_labels)):
            if not p:
                problems.append(f"data.{key} is required for source idx")
            elif not os.path.exists(p):
                problems.append(f"data.{key} does not exist: {p}")
    if data.ood_source not in ("none", "checkerboard_ood", "vndd"):
        problems.append("data.ood_source must be none, checkerboard_ood or vndd")
    if data.ood_source == "vndd":
        if not data.ood_path:
            problems.append("data.ood_path is required for ood_source vndd")
        elif not os.path.exists(data.ood_path):
            problems.append(f"data.ood_path does not exist: {data.ood_path}")
    if not 0.0 < data.test_fraction < 1.0:
        problems.append("data.test_fraction must lie in (0, 1)")
    if evalc.ood_score not in ("msp", "entropy"):
        problems.append("eval.ood_score must be msp or entropy")
    if evalc.eval_mode not in ("sample", "mean"):
        problems.append("eval.eval_mode must be sample or mean")
    if any(not 0.0 < w <= 1.0 for w in evalc.widths):
        problems.append("eval.widths must lie in (0, 1]")
    if list(evalc.widths) != sorted(set(evalc.widths)):
        problems.append("eval.widths must be strictly increasing")


def load_config(path: str, overrides: list[str] | None = None) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read(), overrides)


def serialize_config(config: ExperimentConfig) -> str:
    """Render back to INI; parse(serialize(c)) == c."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str

    def put(section: str, key: str, value) -> None:
        if value is None:
            return
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, tuple):
            joiner = "x" if _SCHEMA[section][key] == "shape" else ","
            text = joiner.join(str(v) for v in value)
        else:
            text = str(value)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, text)

    put("experiment", "seed", config.seed)
    put("experiment", "output_dir", config.output_dir)
    for f in fields(ModelConfig):
        put("model", f.name, getattr(config.model, f.name))
    for key in _SCHEMA["train"]:
        put("train", key, getattr(config.train, key))
    for f in fields(EvalConfig):
        put("eval", f.name, getattr(config.eval, f.name))
    for f in fields(DataConfig):
        put("data", f.name, getattr(config.data, f.name))
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def config_echo_lines(config: ExperimentConfig) -> list[str]:
    """Flattened key=value lines for output-file headers."""
    lines = []
    for raw in serialize_config(config).splitlines():
        raw = raw.strip()
        if raw:
            lines.append(raw)
    return lines
