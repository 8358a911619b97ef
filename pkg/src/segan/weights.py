"""Binary weight files: magic SGNW, version, channel plan, named f64 tensors.

All integers little-endian. Layout:

    magic    4 bytes  b"SGNW"
    version  u32      currently 1
    plan     u32 stage count, u32*count stage channels, u32 squeeze_k,
             u32 input_channels, u8 enable_msfrb, u8 enable_am, u32 conv_kernel
    count    u32      number of tensors
    tensor   u16 name length, UTF-8 name, u8 rank, u64*rank dims, f64*prod payload

Round trips are parameter-exact: save then load reproduces every bit.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .model import ChannelPlan, ConfigError

MAGIC = b"SGNW"
VERSION = 1


class WeightFormatError(ValueError):
    """Malformed or mismatched weight file; message names the failure point."""


def save_weights(model, path: str | Path) -> None:
    plan = model.plan
    state = model.named_state()
    parts = [MAGIC, struct.pack("<I", VERSION)]
    parts.append(struct.pack("<I", len(plan.stage_channels)))
    parts.append(struct.pack(f"<{len(plan.stage_channels)}I", *plan.stage_channels))
    parts.append(struct.pack("<IIBBI", plan.squeeze_k, plan.input_channels,
                             int(plan.enable_msfrb), int(plan.enable_am), plan.conv_kernel))
    parts.append(struct.pack("<I", len(state)))
    for name, arr in state.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise WeightFormatError(
                f"{self.source}: truncated while reading {what} "
                f"(need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos})")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_weights(path: str | Path) -> tuple[ChannelPlan, "OrderedDict[str, np.ndarray]"]:
    r = _Reader(Path(path).read_bytes(), str(path))
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise WeightFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise WeightFormatError(f"{path}: unsupported version {version}, expected {VERSION}")
    (n_stages,) = r.unpack("<I", "stage count")
    if not 1 <= n_stages <= 64:
        raise WeightFormatError(f"{path}: implausible stage count {n_stages}")
    channels = list(r.unpack(f"<{n_stages}I", "stage channels"))
    squeeze_k, input_channels, msfrb, am, kernel = r.unpack("<IIBBI", "plan fields")
    plan = ChannelPlan(stage_channels=channels, squeeze_k=squeeze_k,
                       input_channels=input_channels, enable_msfrb=bool(msfrb),
                       enable_am=bool(am), conv_kernel=kernel)
    (count,) = r.unpack("<I", "tensor count")
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    for i in range(count):
        (name_len,) = r.unpack("<H", f"tensor {i} name length")
        name = r.take(name_len, f"tensor {i} name").decode("utf-8")
        (rank,) = r.unpack("<B", f"{name}: rank")
        if not 1 <= rank <= 4:
            raise WeightFormatError(f"{path}: tensor {name!r} has invalid rank {rank}")
        dims = r.unpack(f"<{rank}Q", f"{name}: dims")
        n_elems = int(np.prod(dims))
        payload = r.take(8 * n_elems, f"{name}: payload")
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    if r.pos != len(r.data):
        raise WeightFormatError(f"{path}: {len(r.data) - r.pos} trailing bytes after tensors")
    return plan, tensors


def load_weights(model, path: str | Path) -> None:
    """Restore parameters saved by save_weights; the plans must match."""
    plan, tensors = read_weights(path)
    if plan != model.plan:
        raise ConfigError(
            f"{path}: weight file plan {plan} does not match model plan {model.plan}")
    model.load_state(tensors)
