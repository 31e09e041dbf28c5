"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    magic "VNDC" | version u32 | payload_len u64 | sha256(payload) 32B | payload

The payload is a record count (u32) followed by records, each
``name_len u16 | name utf8 | kind u8 | body``:

    kind 0  tensor: ndim u8, dims u64 each, float64 values (row-major)
    kind 1  scalar: one float64
    kind 2  string: len u64, utf8 bytes
    kind 3  int:    one i64

Loaders reject unknown magic or versions loudly and verify the checksum
before touching the payload.  Tensors round-trip bit for bit (everything
is stored as float64, which all model parameters already are).
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import torch

from .models import ModelSpec, VndModel, build_model, parse_stack
from .training import TrainConfig, TrainState

MAGIC = b"VNDC"
VERSION = 1

_TENSOR, _SCALAR, _STRING, _INT = 0, 1, 2, 3


class CheckpointError(RuntimeError):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


def _write_record(buf: io.BytesIO, name: str, kind: int, body: bytes) -> None:
    encoded = name.encode("utf-8")
    buf.write(struct.pack("<H", len(encoded)))
    buf.write(encoded)
    buf.write(struct.pack("<B", kind))
    buf.write(body)


def _tensor_body(t: torch.Tensor) -> bytes:
    t = t.detach().to(torch.float64).contiguous()
    dims = struct.pack("<B", t.ndim) + b"".join(
        struct.pack("<Q", d) for d in t.shape
    )
    return dims + t.numpy().tobytes()


@dataclass
class Container:
    """Decoded checkpoint records, in file order."""

    tensors: dict
    scalars: dict
    strings: dict
    ints: dict


def write_container(
    path: str | Path,
    *,
    tensors: dict,
    scalars: dict,
    strings: dict,
    ints: dict,
) -> None:
    payload = io.BytesIO()
    records = (
        [(n, _TENSOR) for n in sorted(tensors)]
        + [(n, _SCALAR) for n in sorted(scalars)]
        + [(n, _STRING) for n in sorted(strings)]
        + [(n, _INT) for n in sorted(ints)]
    )
    payload.write(struct.pack("<I", len(records)))
    for name, kind in records:
        if kind == _TENSOR:
            _write_record(payload, name, kind, _tensor_body(tensors[name]))
        elif kind == _SCALAR:
            _write_record(payload, name, kind, struct.pack("<d", float(scalars[name])))
        elif kind == _STRING:
            body = strings[name].encode("utf-8")
            _write_record(payload, name, kind, struct.pack("<Q", len(body)) + body)
        else:
            _write_record(payload, name, kind, struct.pack("<q", int(ints[name])))
    raw = payload.getvalue()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(hashlib.sha256(raw).digest())
        fh.write(raw)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError("payload ends mid-record")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_container(path: str | Path) -> Container:
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint file")
    if len(blob) < 48:
        raise TruncatedError(f"{path}: header incomplete")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: version {version}, expected {VERSION}")
    (payload_len,) = struct.unpack("<Q", blob[8:16])
    digest = blob[16:48]
    payload = blob[48:]
    if len(payload) != payload_len:
        raise TruncatedError(
            f"{path}: payload is {len(payload)} bytes, header says {payload_len}"
        )
    if hashlib.sha256(payload).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch")
    r = _Reader(payload)
    (count,) = r.unpack("<I")
    out = Container({}, {}, {}, {})
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (kind,) = r.unpack("<B")
        if kind == _TENSOR:
            (ndim,) = r.unpack("<B")
            shape = tuple(r.unpack("<" + "Q" * ndim)) if ndim else ()
            numel = 1
            for d in shape:
                numel *= d
            raw = r.take(8 * numel)
            t = torch.frombuffer(bytearray(raw), dtype=torch.float64).reshape(shape)
            out.tensors[name] = t.clone()
        elif kind == _SCALAR:
            (out.scalars[name],) = r.unpack("<d")
        elif kind == _STRING:
            (length,) = r.unpack("<Q")
            out.strings[name] = r.take(length).decode("utf-8")
        elif kind == _INT:
            (out.ints[name],) = r.unpack("<q")
        else:
            raise CheckpointError(f"{path}: unknown record kind {kind}")
    return out


# ---------------------------------------------------------------------------
# Model-level save / load
# ---------------------------------------------------------------------------


def save_checkpoint(
    path: str | Path,
    model: VndModel,
    state: TrainState,
    config: TrainConfig,
) -> None:
    """Write model parameters, buffers, optimizer state and RNG state."""
    tensors = {}
    for name, p in model.named_parameters():
        tensors[f"param.{name}"] = p
    for name, b in model.named_buffers():
        tensors[f"buffer.{name}"] = b
    params = dict(model.named_parameters())
    for name, p in params.items():
        st = state.optimizer.state.get(p, {})
        buf = st.get("momentum_buffer")
        if buf is not None:
            tensors[f"opt.momentum.{name}"] = buf
    rng = state.generator.get_state()
    tensors["rng.torch"] = rng.to(torch.float64)
    strings = {
        "model.stack": model.spec.to_string(),
        "model.head": model.spec.head,
        "model.input_shape": ",".join(str(d) for d in (model.spec.input_shape or ())),
        "train.config": config.to_json(),
    }
    ints = {"train.epoch": state.epoch, "train.step": state.step}
    write_container(path, tensors=tensors, scalars={}, strings=strings, ints=ints)


def _buffer_like(template: torch.Tensor, stored: torch.Tensor) -> torch.Tensor:
    return stored.reshape(template.shape).to(template.dtype)


def load_checkpoint(path: str | Path) -> tuple[VndModel, TrainState, TrainConfig]:
    """Rebuild the model and training state; resuming is bit-exact."""
    box = read_container(path)
    shape_str = box.strings.get("model.input_shape", "")
    input_shape = tuple(int(s) for s in shape_str.split(",") if s) or None
    spec = ModelSpec(
        parse_stack(box.strings["model.stack"]),
        head=box.strings["model.head"],
        input_shape=input_shape,
    )
    config = TrainConfig.from_json(box.strings["train.config"])
    model = build_model(spec, seed=0)
    with torch.no_grad():
        for name, p in model.named_parameters():
            key = f"param.{name}"
            if key not in box.tensors:
                raise CheckpointError(f"missing parameter record {key}")
            p.copy_(box.tensors[key])
        for name, b in model.named_buffers():
            key = f"buffer.{name}"
            if key not in box.tensors:
                raise CheckpointError(f"missing buffer record {key}")
            b.copy_(_buffer_like(b, box.tensors[key]))
    optimizer = torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum)
    for name, p in model.named_parameters():
        key = f"opt.momentum.{name}"
        if key in box.tensors:
            optimizer.state[p] = {"momentum_buffer": box.tensors[key].clone()}
    generator = torch.Generator()
    generator.set_state(box.tensors["rng.torch"].to(torch.uint8))
    state = TrainState(
        optimizer, generator, epoch=box.ints["train.epoch"], step=box.ints["train.step"]
    )
    return model, state, config
