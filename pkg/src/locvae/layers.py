"""Network building blocks, the parameter registry and the checkpoint format."""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_MAGIC = b"LVAE"
CHECKPOINT_VERSION = 1

ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": T.relu,
    "identity": lambda x: x,
}


class FormatError(ValueError):
    """Base class for malformed binary files."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ParameterRegistry:
    """Ordered owners plus aliases; an alias resolves to the owner's tensor object."""

    def __init__(self) -> None:
        self._owners: dict[str, Tensor] = {}
        self._aliases: dict[str, str] = {}

    def add(self, name: str, value: Tensor) -> Tensor:
        if name in self._owners or name in self._aliases:
            raise KeyError(f"duplicate parameter name {name!r}")
        if any(t is value for t in self._owners.values()):
            raise ValueError(f"tensor for {name!r} is already registered; use alias()")
        value.requires_grad = True
        self._owners[name] = value
        return value

    def alias(self, name: str, target: str) -> Tensor:
        if name in self._owners or name in self._aliases:
            raise KeyError(f"duplicate parameter name {name!r}")
        if target not in self._owners:
            raise KeyError(f"alias target {target!r} is not an owned parameter")
        self._aliases[name] = target
        return self._owners[target]

    def __getitem__(self, name: str) -> Tensor:
        if name in self._aliases:
            return self._owners[self._aliases[name]]
        return self._owners[name]

    def __contains__(self, name: str) -> bool:
        return name in self._owners or name in self._aliases

    def __len__(self) -> int:
        return len(self._owners)

    @property
    def aliases(self) -> dict[str, str]:
        return dict(self._aliases)

    def owned(self) -> list[tuple[str, Tensor]]:
        return list(self._owners.items())

    def parameters(self) -> list[Tensor]:
        return list(self._owners.values())

    def count(self) -> int:
        return int(np.sum([t.size for t in self._owners.values()]))

    def zero_grad(self) -> None:
        for t in self._owners.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._owners.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self._owners):
            missing = set(self._owners) ^ set(state)
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for name, t in self._owners.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {t.shape}")
            t.data[...] = arr


def fan_in_bound(kernel_shape: tuple[int, ...]) -> float:
    c_in = kernel_shape[1]
    receptive = int(np.prod(kernel_shape[2:]))
    return float(np.sqrt(1.0 / (c_in * receptive)))


def init_parameters(registry: ParameterRegistry, seed: int) -> None:
    """Fan-in uniform kernels, zero biases; values are written in place."""
    rng = np.random.default_rng(seed)
    for name, t in registry.owned():
        if t.data.ndim == 5:
            b = fan_in_bound(t.shape)
            t.data[...] = rng.uniform(-b, b, size=t.shape)
        else:
            t.data[...] = 0.0


class Conv3d:
    def __init__(self, registry: ParameterRegistry, name: str, c_in: int, c_out: int, k: int = 3, padding: int | None = None):
        self.name = name
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.padding = (k - 1) // 2 if padding is None else padding
        self.weight = registry.add(f"{name}.weight", Tensor(np.zeros((c_out, c_in, k, k, k))))
        self.bias = registry.add(f"{name}.bias", Tensor(np.zeros(c_out)))

    @property
    def in_channels(self) -> int:
        return self.c_in

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv3d(x, self.weight, self.bias, stride=1, padding=self.padding)


class TransposedConv3d:
    """Mirror of an encoder ``Conv3d``: maps its c_out channels back to c_in.

    With ``tie=True`` the kernel is the encoder layer's tensor itself;
    otherwise a fresh kernel of the same shape is registered.  The bias is
    always this layer's own.
    """

    def __init__(self, registry: ParameterRegistry, name: str, mirror: Conv3d, tie: bool):
        self.name = name
        self.mirror = mirror
        self.padding = mirror.padding
        if tie:
            self.weight = registry.alias(f"{name}.weight", f"{mirror.name}.weight")
        else:
            self.weight = registry.add(f"{name}.weight", Tensor(np.zeros(mirror.weight.shape)))
        self.bias = registry.add(f"{name}.bias", Tensor(np.zeros(mirror.c_in)))

    @property
    def in_channels(self) -> int:
        return self.mirror.c_out

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim < 4 or x.shape[-4] != self.in_channels:
            raise ValueError(f"{self.name}: expected {self.in_channels} channels, got input {x.shape}")
        return T.conv3d_transpose(x, self.weight, self.bias, stride=1, padding=self.padding)


class ResidualBlock:
    """``act(second(act(first(x))) + shortcut(x))`` with an identity shortcut
    unless a projection layer is supplied."""

    def __init__(self, first, second, shortcut=None, activation: str = "relu"):
        self.first = first
        self.second = second
        self.shortcut = shortcut
        self.activation = activation

    @property
    def in_channels(self) -> int:
        return self.first.in_channels

    def __call__(self, x: Tensor) -> Tensor:
        return residual_forward(self, x)


def residual_forward(block: ResidualBlock, x: Tensor) -> Tensor:
    if x.data.ndim < 4 or x.shape[-4] != block.in_channels:
        raise ValueError(f"residual block expects {block.in_channels} channels, got input {x.shape}")
    act = ACTIVATIONS[block.activation]
    h = block.second(act(block.first(x)))
    skip = x if block.shortcut is None else block.shortcut(x)
    return act(h + skip)


# ---------------------------------------------------------------------------
# checkpoint IO
#
# layout (little-endian):
#   b"LVAE" | u32 version | u32 config length | config JSON
#   u32 entry count, then per entry:
#     u16 name length | name | u8 kind
#     kind 0 (owner): u8 ndim | u32 * ndim shape | float64 payload
#     kind 1 (alias): u16 target length | target name


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def write_checkpoint(path: str | Path, registry: ParameterRegistry, config: dict) -> None:
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(blob)), blob]
    entries = registry.owned()
    aliases = registry.aliases
    parts.append(struct.pack("<I", len(entries) + len(aliases)))
    for name, t in entries:
        parts.append(_pack_str(name) + struct.pack("<BB", 0, t.data.ndim))
        parts.append(struct.pack(f"<{t.data.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    for name, target in aliases.items():
        parts.append(_pack_str(name) + struct.pack("<B", 1) + _pack_str(target))
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"{self.path}: unexpected end of file at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray], dict[str, str]]:
    """Return (config, owned arrays, aliases)."""
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint file")
    version, blob_len = r.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"{path}: checkpoint version {version}")
    config = json.loads(r.take(blob_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    aliases: dict[str, str] = {}
    for _ in range(count):
        name = r.string()
        (kind,) = r.unpack("<B")
        if kind == 0:
            (ndim,) = r.unpack("<B")
            shape = r.unpack(f"<{ndim}I")
            n = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
        elif kind == 1:
            aliases[name] = r.string()
        else:
            raise FormatError(f"{path}: unknown entry kind {kind}")
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return config, arrays, aliases
