"""Network assembly from declarative layer descriptors.

A model is a whitespace-separated stack string, e.g.

    dense(2,64,groups=8,n_base=2) relu dense(64,64,groups=8,n_base=2) relu dense(64,2)

plus an output head ("softmax" for classification, "sigmoid" for
per-pixel binary targets).  ``build_model`` turns a spec into a
``VndModel`` whose masked layers each own exactly one ordering unit.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Union

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .layers import VariationalConv2d, VariationalDense
from .ordering import DownhillParams, WidthPlan, gumbel_noise, make_width_plan, soft_mask_from_noise

HEADS = ("softmax", "sigmoid")
ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class DenseSpec:
    in_features: int
    out_features: int
    groups: int = 0
    n_base: int = 1
    bias: bool = True


@dataclass(frozen=True)
class Conv2dSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    groups: int = 0
    n_base: int = 1
    bias: bool = True


@dataclass(frozen=True)
class ActivationSpec:
    kind: str


@dataclass(frozen=True)
class BatchNormSpec:
    pass


@dataclass(frozen=True)
class FlattenSpec:
    pass


LayerSpec = Union[DenseSpec, Conv2dSpec, ActivationSpec, BatchNormSpec, FlattenSpec]


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    head: str = "softmax"
    input_shape: tuple[int, ...] | None = None  # (C, H, W) for conv stacks

    def validate(self) -> list[str]:
        """Shape-compatibility walk; returns human-readable problems."""
        errors: list[str] = []
        if self.head not in HEADS:
            errors.append(f"unknown head {self.head!r}")
        if not self.layers:
            errors.append("model has no layers")
            return errors
        state: tuple | None = None
        if self.input_shape is not None:
            if len(self.input_shape) != 3:
                errors.append("input_shape must be (channels, height, width)")
            else:
                state = ("img", *self.input_shape)
        for i, spec in enumerate(self.layers):
            where = f"layer {i} ({type(spec).__name__})"
            if isinstance(spec, DenseSpec):
                if spec.in_features < 1 or spec.out_features < 1:
                    errors.append(f"{where}: sizes must be positive")
                if spec.groups and not 1 <= spec.n_base < spec.groups <= spec.out_features:
                    errors.append(f"{where}: need 1 <= n_base < groups <= out_features")
                if state is None:
                    state = ("vec", spec.in_features)
                elif state[0] != "vec":
                    errors.append(f"{where}: dense needs a flat input (add flatten)")
                elif state[1] != spec.in_features:
                    errors.append(
                        f"{where}: expects {spec.in_features} features, gets {state[1]}"
                    )
                state = ("vec", spec.out_features)
            elif isinstance(spec, Conv2dSpec):
                if spec.groups and not 1 <= spec.n_base < spec.groups <= spec.out_channels:
                    errors.append(f"{where}: need 1 <= n_base < groups <= out_channels")
                if state is None:
                    errors.append(f"{where}: conv stacks need model input_shape")
                    state = ("img", spec.out_channels, None, None)
                elif state[0] != "img":
                    errors.append(f"{where}: conv cannot follow a flat layer")
                else:
                    if state[1] != spec.in_channels:
                        errors.append(
                            f"{where}: expects {spec.in_channels} channels, gets {state[1]}"
                        )
                    h = _conv_dim(state[2], spec) if state[2] else None
                    w = _conv_dim(state[3], spec) if state[3] else None
                    state = ("img", spec.out_channels, h, w)
            elif isinstance(spec, FlattenSpec):
                if state is None or state[0] != "img":
                    errors.append(f"{where}: nothing to flatten")
                elif state[2] is None or state[3] is None:
                    errors.append(f"{where}: spatial size unknown; set model input_shape")
                else:
                    state = ("vec", state[1] * state[2] * state[3])
            elif isinstance(spec, ActivationSpec):
                if spec.kind not in ACTIVATIONS:
                    errors.append(f"{where}: unknown activation {spec.kind!r}")
            elif isinstance(spec, BatchNormSpec):
                if state is None:
                    errors.append(f"{where}: batchnorm needs a known input width")
        last = self.layers[-1]
        if not isinstance(last, DenseSpec):
            errors.append("the final layer must be dense (it feeds the head)")
        return errors

    def to_string(self) -> str:
        return " ".join(_spec_token(s) for s in self.layers)


def _conv_dim(size: int, spec: Conv2dSpec) -> int:
    return (size + 2 * spec.padding - spec.kernel) // spec.stride + 1


def _spec_token(spec: LayerSpec) -> str:
    if isinstance(spec, DenseSpec):
        args = f"{spec.in_features},{spec.out_features}"
        if spec.groups:
            args += f",groups={spec.groups},n_base={spec.n_base}"
        if not spec.bias:
            args += ",bias=false"
        return f"dense({args})"
    if isinstance(spec, Conv2dSpec):
        args = f"{spec.in_channels},{spec.out_channels},kernel={spec.kernel}"
        if spec.stride != 1:
            args += f",stride={spec.stride}"
        if spec.padding:
            args += f",padding={spec.padding}"
        if spec.groups:
            args += f",groups={spec.groups},n_base={spec.n_base}"
        if not spec.bias:
            args += ",bias=false"
        return f"conv({args})"
    if isinstance(spec, ActivationSpec):
        return spec.kind
    if isinstance(spec, BatchNormSpec):
        return "batchnorm"
    if isinstance(spec, FlattenSpec):
        return "flatten"
    raise TypeError(f"unknown layer spec {spec!r}")


_TOKEN_RE = re.compile(r"^([a-z0-9_]+)(?:\((.*)\))?$")


def _parse_kwargs(argstr: str) -> tuple[list[int], dict[str, object]]:
    pos: list[int] = []
    kw: dict[str, object] = {}
    if not argstr.strip():
        return pos, kw
    for part in argstr.split(","):
        part = part.strip()
        if "=" in part:
            key, val = (s.strip() for s in part.split("=", 1))
            if val.lower() in ("true", "false"):
                kw[key] = val.lower() == "true"
            else:
                kw[key] = int(val)
        else:
            pos.append(int(part))
    return pos, kw


def parse_stack(text: str) -> tuple[LayerSpec, ...]:
    """Parse the whitespace-separated layer stack notation."""
    layers: list[LayerSpec] = []
    for token in text.split():
        m = _TOKEN_RE.match(token)
        if not m:
            raise ValueError(f"cannot parse layer token {token!r}")
        name, argstr = m.group(1), m.group(2) or ""
        try:
            pos, kw = _parse_kwargs(argstr)
        except ValueError as exc:
            raise ValueError(f"bad arguments in {token!r}: {exc}") from None
        if name == "dense":
            if len(pos) != 2:
                raise ValueError(f"dense needs (in,out): {token!r}")
            layers.append(DenseSpec(pos[0], pos[1], **kw))
        elif name == "conv":
            if len(pos) != 2:
                raise ValueError(f"conv needs (in,out): {token!r}")
            layers.append(Conv2dSpec(pos[0], pos[1], **kw))
        elif name in ACTIVATIONS:
            if pos or kw:
                raise ValueError(f"{name} takes no arguments")
            layers.append(ActivationSpec(name))
        elif name == "batchnorm":
            layers.append(BatchNormSpec())
        elif name == "flatten":
            layers.append(FlattenSpec())
        else:
            raise ValueError(f"unknown layer kind {name!r}")
    return tuple(layers)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


class VndModel(nn.Module):
    """A stack of variational layers with per-layer ordering units.

    Training forwards sample one joint mask + noise realization per call;
    evaluation forwards run at a fixed truncated width.  Parameters are
    float64 throughout.
    """

    def __init__(self, spec: ModelSpec, modules: list[nn.Module]) -> None:
        super().__init__()
        self.spec = spec
        self.stack = nn.ModuleList(modules)

    @property
    def variational_layers(self) -> list[VariationalDense | VariationalConv2d]:
        return [m for m in self.stack if isinstance(m, (VariationalDense, VariationalConv2d))]

    @property
    def masked_layers(self) -> list[VariationalDense | VariationalConv2d]:
        return [m for m in self.variational_layers if m.masked]

    def ordering_params(self, tau: float = 1.0) -> list[DownhillParams]:
        return [m.ordering(tau) for m in self.masked_layers]

    def width_plan(self, width_fraction: float) -> WidthPlan:
        return make_width_plan(self.ordering_params(), width_fraction)

    def forward_train(self, x: Tensor, tau: float, generator: torch.Generator) -> Tensor:
        """Sampled forward pass; draws one mask per masked layer."""
        h = x
        for module in self.stack:
            if isinstance(module, (VariationalDense, VariationalConv2d)):
                z = None
                if module.masked:
                    params = module.ordering(tau)
                    z = soft_mask_from_noise(params, gumbel_noise(params.dim, generator))
                h = module.forward_train(h, z, generator).F
            else:
                h = module(h)
        return h

    def forward_eval(
        self,
        x: Tensor,
        plan: WidthPlan,
        mode: str = "mean",
        generator: torch.Generator | None = None,
    ) -> Tensor:
        """Truncated forward pass at a fixed width plan."""
        if len(plan.layers) != len(self.masked_layers):
            raise ValueError("width plan does not match this model's masked layers")
        widths = iter(plan.layers)
        h = x
        for module in self.stack:
            if isinstance(module, (VariationalDense, VariationalConv2d)):
                width = next(widths) if module.masked else None
                h = module.forward_eval(h, width, mode=mode, generator=generator)
            else:
                h = module(h)
        return h

    def kl_total(self) -> Tensor:
        total = torch.zeros((), dtype=torch.float64)
        for layer in self.variational_layers:
            total = total + layer.kl()
        return total

    def log_prob_sum(self, logits: Tensor, targets: Tensor) -> Tensor:
        """Summed log-likelihood of targets under the head."""
        if self.spec.head == "softmax":
            return -F.cross_entropy(logits, targets, reduction="sum")
        return -F.binary_cross_entropy_with_logits(
            logits, targets.to(logits.dtype), reduction="sum"
        )

    def predict_probs(self, logits: Tensor) -> Tensor:
        if self.spec.head == "softmax":
            return torch.softmax(logits, dim=1)
        return torch.sigmoid(logits)

    def bn_modules(self) -> list[nn.Module]:
        return [
            m for m in self.stack
            if isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d))
        ]


def build_model(
    spec: ModelSpec,
    seed: int,
    *,
    prior_keep: float = 0.95,
    log_alpha_first: float = -8.0,
    log_alpha_rest: float = -1.0,
    mu_bar_init: float = 3.0,
) -> VndModel:
    """Instantiate a model; the first variational layer starts with tighter noise."""
    errors = spec.validate()
    if errors:
        raise ValueError("invalid model spec: " + "; ".join(errors))
    generator = torch.Generator().manual_seed(seed)
    modules: list[nn.Module] = []
    state: tuple | None = ("img", *spec.input_shape) if spec.input_shape else None
    first = True
    for layer in spec.layers:
        if isinstance(layer, DenseSpec):
            modules.append(
                VariationalDense(
                    layer.in_features,
                    layer.out_features,
                    groups=layer.groups,
                    n_base=layer.n_base,
                    bias=layer.bias,
                    prior_keep=prior_keep,
                    log_alpha_init=log_alpha_first if first else log_alpha_rest,
                    mu_bar_init=mu_bar_init,
                    generator=generator,
                )
            )
            first = False
            state = ("vec", layer.out_features)
        elif isinstance(layer, Conv2dSpec):
            modules.append(
                VariationalConv2d(
                    layer.in_channels,
                    layer.out_channels,
                    layer.kernel,
                    stride=layer.stride,
                    padding=layer.padding,
                    groups=layer.groups,
                    n_base=layer.n_base,
                    bias=layer.bias,
                    prior_keep=prior_keep,
                    log_alpha_init=log_alpha_first if first else log_alpha_rest,
                    mu_bar_init=mu_bar_init,
                    generator=generator,
                )
            )
            first = False
            if state is not None and state[0] == "img":
                h = _conv_dim(state[2], layer) if state[2] else None
                w = _conv_dim(state[3], layer) if state[3] else None
                state = ("img", layer.out_channels, h, w)
        elif isinstance(layer, ActivationSpec):
            modules.append(nn.ReLU() if layer.kind == "relu" else nn.Tanh())
        elif isinstance(layer, BatchNormSpec):
            assert state is not None
            if state[0] == "vec":
                modules.append(nn.BatchNorm1d(state[1], dtype=torch.float64))
            else:
                modules.append(nn.BatchNorm2d(state[1], dtype=torch.float64))
        elif isinstance(layer, FlattenSpec):
            modules.append(nn.Flatten())
            assert state is not None and state[2] is not None
            state = ("vec", state[1] * state[2] * state[3])
        else:
            raise TypeError(f"unknown layer spec {layer!r}")
    model = VndModel(spec, modules)
    model.eval()
    return model
