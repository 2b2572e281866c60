"""Parameter storage, seeded init, linear/attention primitives, checkpoints."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import numerics as num
from .errors import ContractError, DimensionError, FormatError
from .numerics import Tensor

CHECKPOINT_MAGIC = b"MVTC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ParamSpec:
    """Declares one named parameter: shape plus its init rule.

    ``init`` is one of ``uniform`` (uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)),
    fan_in defaulting to the product of all but the leading dim), ``zeros``,
    or ``ones``.
    """

    name: str
    shape: tuple[int, ...]
    init: str = "uniform"
    fan_in: int | None = None


class ParamStore:
    """Named trainable tensors; every entry has requires_grad set."""

    def __init__(self, rng_seed: int = 0):
        self._params: dict[str, Tensor] = {}
        self.rng_seed = int(rng_seed)

    def add(self, name: str, tensor: Tensor) -> None:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        self._params[name] = tensor

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise ContractError(f"unknown parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def n_scalars(self) -> int:
        return sum(t.size for t in self._params.values())


def init_params(specs: Sequence[ParamSpec], seed: int) -> ParamStore:
    """Build a ParamStore, drawing weights deterministically from ``seed``.

    Parameters are materialized in spec order from one PCG64 stream, so a
    given (specs, seed) pair always yields bitwise-identical stores.
    """
    store = ParamStore(rng_seed=seed)
    rng = np.random.default_rng(seed)
    for spec in specs:
        if spec.init == "uniform":
            fan_in = spec.fan_in if spec.fan_in is not None else max(1, math.prod(spec.shape[1:]))
            bound = 1.0 / math.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=spec.shape)
        elif spec.init == "zeros":
            data = np.zeros(spec.shape)
        elif spec.init == "ones":
            data = np.ones(spec.shape)
        else:
            raise ContractError(f"unknown init rule {spec.init!r} for {spec.name!r}")
        store.add(spec.name, Tensor(data, requires_grad=True))
    return store


# ---------------------------------------------------------------------------
# layers


@dataclass
class LinearLayer:
    """y = x W^T + b with weight of shape (out, in)."""

    weight: Tensor
    bias: Tensor | None = None

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str) -> "LinearLayer":
        bias = store[f"{prefix}.b"] if f"{prefix}.b" in store else None
        return cls(store[f"{prefix}.w"], bias)


def linear_spec(prefix: str, out_dim: int, in_dim: int, bias: bool = True) -> list[ParamSpec]:
    specs = [ParamSpec(f"{prefix}.w", (out_dim, in_dim))]
    if bias:
        specs.append(ParamSpec(f"{prefix}.b", (out_dim,), init="zeros"))
    return specs


def conv_spec(prefix: str, out_ch: int, in_ch: int, k: int = 3, bias: bool = True,
              init: str = "uniform") -> list[ParamSpec]:
    specs = [ParamSpec(f"{prefix}.w", (out_ch, in_ch, k, k), init=init)]
    if bias:
        specs.append(ParamSpec(f"{prefix}.b", (out_ch,), init="zeros"))
    return specs


def layernorm_spec(prefix: str, dim: int) -> list[ParamSpec]:
    return [ParamSpec(f"{prefix}.g", (dim,), init="ones"),
            ParamSpec(f"{prefix}.b", (dim,), init="zeros")]


def linear(layer: LinearLayer, x: Tensor) -> Tensor:
    """Apply a linear layer to (n, in) tokens, giving (n, out)."""
    if x.ndim != 2 or x.shape[1] != layer.weight.shape[1]:
        raise DimensionError(
            f"linear: input {x.shape} does not match weight {layer.weight.shape}")
    y = num.matmul(x, num.transpose(layer.weight))
    if layer.bias is not None:
        y = num.add_vec(y, layer.bias, axis=1)
    return y


def conv_layer(store: ParamStore, prefix: str, x: Tensor, stride: int = 1, pad: int = 1) -> Tensor:
    y = num.conv2d(x, store[f"{prefix}.w"], stride=stride, pad=pad)
    if f"{prefix}.b" in store:
        y = num.add_vec(y, store[f"{prefix}.b"], axis=0)
    return y


def channel_layernorm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Layer-normalize each spatial position of a C x H x W map across channels."""
    c, h, w = x.shape
    tokens = num.transpose(num.reshape(x, (c, h * w)))
    normed = num.layernorm(tokens, gain, bias)
    return num.reshape(num.transpose(normed), (c, h, w))


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Single-head scaled dot-product attention: softmax(Q K^T / sqrt(d)) V."""
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError("attention expects 2-d Q, K, V")
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"attention: Q dim {q.shape} != K dim {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"attention: K rows {k.shape} != V rows {v.shape}")
    d = q.shape[1]
    scores = num.scale(num.matmul(q, num.transpose(k)), 1.0 / math.sqrt(d))
    weights = num.softmax(scores, axis=1)
    return num.matmul(weights, v)


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    """The softmax(Q K^T / sqrt(d)) factor alone, for inspection and tests."""
    d = q.shape[1]
    scores = num.scale(num.matmul(q, num.transpose(k)), 1.0 / math.sqrt(d))
    return num.softmax(scores, axis=1)


# ---------------------------------------------------------------------------
# checkpoint persistence
#
# Layout (all little-endian):
#   4s   magic "MVTC"
#   u32  version (currently 1)
#   u64  rng seed of the store
#   u32  parameter count N
#   then N records: u32 name length, utf-8 name, u32 rank, u32*rank dims,
#   float64*prod(dims) values.


def save_checkpoint(store: ParamStore, path: str | Path) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQI", CHECKPOINT_VERSION, store.rng_seed & (2 ** 64 - 1), len(store)))
        for name, tensor in store.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            dims = tensor.shape
            fh.write(struct.pack("<I", len(dims)))
            fh.write(struct.pack(f"<{len(dims)}I", *dims))
            fh.write(tensor.data.astype("<f8", copy=False).tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError("truncated checkpoint file")
    return buf


def load_checkpoint(path: str | Path) -> ParamStore:
    path = Path(path)
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != CHECKPOINT_MAGIC:
            raise FormatError(f"{path} is not a checkpoint (bad magic)")
        version, seed, count = struct.unpack("<IQI", _read_exact(fh, 16))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        store = ParamStore(rng_seed=seed)
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank)) if rank else ()
            n = math.prod(dims) if dims else 1
            data = np.frombuffer(_read_exact(fh, 8 * n), dtype="<f8").reshape(dims).copy()
            store.add(name, Tensor(data, requires_grad=True))
        if fh.read(1):
            raise FormatError("trailing bytes after checkpoint payload")
    return store


__all__ = [
    "ParamSpec", "ParamStore", "init_params",
    "LinearLayer", "linear", "linear_spec", "conv_spec", "layernorm_spec",
    "conv_layer", "channel_layernorm", "attention", "attention_weights",
    "save_checkpoint", "load_checkpoint", "CHECKPOINT_MAGIC", "CHECKPOINT_VERSION",
]
