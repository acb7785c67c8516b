"""Encoder parameter archive: canonical names, seeded initialization and the
RTA1 binary format.

Naming scheme (``k`` is the sensor tag ``ev`` or ``im``, ``s`` the scale,
``h`` the fusion head ``m`` (matching) or ``c`` (context))::

    enc.k.s{s}.conv.w / .b        sensor encoder, kernel (1, 3, 5)[s], stride 2^s
    lstm.k.s{s}.w / .b            pixel-wise recurrent cell, (4C, 2C) / (4C,)
    fuse.k.s{s}.w / .b            inter-sensor channel mixing, (C, 2C) / (C,)
    msf.h.conv1.w / .b            7x7 stride-2 stem
    msf.h.res{1..4}.{a,b}.w / .b  residual blocks (3x3 convs)
    msf.h.down.w / .b             stride-2 transition after the first Sigma^1 injection
    msf.h.out.w / .b              final 1x1 projection
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .events import N_BINS, FormatError

RTA_MAGIC = b"RTA1"
KERNELS = (1, 3, 5)
SENSORS = ("ev", "im")
HEADS = ("m", "c")


@dataclass(frozen=True)
class EncoderConfig:
    image_channels: int = 1
    scale_channels: tuple = (32, 32, 32)
    msf_dims: tuple = (32, 64)
    matching_dim: int = 128
    context_dim: int = 384
    tile: int = 8192

    def sensor_channels(self, sensor):
        return N_BINS if sensor == "ev" else self.image_channels

    def head_dim(self, head):
        return self.matching_dim if head == "m" else self.context_dim


def parameter_shapes(cfg: EncoderConfig):
    shapes = {}
    C = cfg.scale_channels
    for k in SENSORS:
        cin = cfg.sensor_channels(k)
        for s in range(3):
            ks = KERNELS[s]
            shapes[f"enc.{k}.s{s}.conv.w"] = (C[s], cin, ks, ks)
            shapes[f"enc.{k}.s{s}.conv.b"] = (C[s],)
            shapes[f"lstm.{k}.s{s}.w"] = (4 * C[s], 2 * C[s])
            shapes[f"lstm.{k}.s{s}.b"] = (4 * C[s],)
            shapes[f"fuse.{k}.s{s}.w"] = (C[s], 2 * C[s])
            shapes[f"fuse.{k}.s{s}.b"] = (C[s],)
    d1, d2 = cfg.msf_dims
    for h in HEADS:
        p = f"msf.{h}"
        shapes[f"{p}.conv1.w"] = (d1, C[0], 7, 7)
        shapes[f"{p}.conv1.b"] = (d1,)
        for r, d in ((1, d1), (2, d1), (3, d2), (4, d2)):
            for half in "ab":
                shapes[f"{p}.res{r}.{half}.w"] = (d, d, 3, 3)
                shapes[f"{p}.res{r}.{half}.b"] = (d,)
        shapes[f"{p}.down.w"] = (d2, d1 + C[1], 3, 3)
        shapes[f"{p}.down.b"] = (d2,)
        shapes[f"{p}.out.w"] = (cfg.head_dim(h), d2 + C[2], 1, 1)
        shapes[f"{p}.out.b"] = (cfg.head_dim(h),)
    return shapes


def init_weights(cfg: EncoderConfig = EncoderConfig(), seed=0, scale=0.1):
    """Deterministic uniform(-scale, scale) initialization of every parameter."""
    rng = np.random.default_rng(seed)
    return {name: rng.uniform(-scale, scale, size=shape).astype(np.float32)
            for name, shape in sorted(parameter_shapes(cfg).items())}


def check_weights(weights, cfg: EncoderConfig):
    expected = parameter_shapes(cfg)
    missing = sorted(set(expected) - set(weights))
    surplus = sorted(set(weights) - set(expected))
    if missing:
        raise KeyError(f"missing encoder parameters: {', '.join(missing[:5])}")
    if surplus:
        raise KeyError(f"unexpected encoder parameters: {', '.join(surplus[:5])}")
    for name, shape in expected.items():
        if tuple(weights[name].shape) != shape:
            raise ValueError(f"parameter {name} has shape {tuple(weights[name].shape)}, expected {shape}")


def write_rta(path, weights):
    with open(path, "wb") as fh:
        fh.write(RTA_MAGIC)
        fh.write(struct.pack("<I", len(weights)))
        for name in sorted(weights):
            arr = np.ascontiguousarray(weights[name], dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", 0, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_rta(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != RTA_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", path, 0)
    off = 4

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(buf):
            raise FormatError("truncated archive", path, off)
        vals = struct.unpack_from(fmt, buf, off)
        off += size
        return vals

    (count,) = take("<I")
    out = {}
    for _ in range(count):
        (n,) = take("<H")
        start = off
        if off + n > len(buf):
            raise FormatError("truncated tensor name", path, off)
        try:
            name = buf[off:off + n].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8", path, start) from None
        off += n
        dtype_off = off
        dtype, rank = take("<BB")
        if dtype != 0:
            raise FormatError(f"tensor {name}: unsupported dtype code {dtype}", path, dtype_off)
        dims = take(f"<{rank}I") if rank else ()
        size = int(np.prod(dims, dtype=np.int64)) * 4
        if off + size > len(buf):
            raise FormatError(f"tensor {name}: truncated values", path, off)
        if name in out:
            raise FormatError(f"duplicate tensor {name}", path, start)
        out[name] = np.frombuffer(buf, dtype="<f4", count=size // 4, offset=off).reshape(dims).astype(np.float32)
        off += size
    if off != len(buf):
        raise FormatError("trailing bytes after last tensor", path, off)
    return out
