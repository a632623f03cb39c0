"""Binary checkpoint format.

Layout: magic "MMUN", format version (u16 LE), entry count (u32 LE), then
per entry: name length (u16 LE) + UTF-8 name, rank (u8), extents (u32 LE
each), raw scalars as 32-bit little-endian IEEE floats in row-major order.

The network configuration rides along as a reserved entry named
"__config__" (a rank-1 float vector), so evaluation and prediction can
rebuild the architecture from the file alone.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError
from .network import MMUNet, NetworkConfig

MAGIC = b"MMUN"
VERSION = 1
CONFIG_KEY = "__config__"


def _config_vector(config):
    h, w = config.input_hw
    return np.array([
        config.width_mult, h, w,
        1.0 if config.use_mmc else 0.0,
        1.0 if config.use_rssg else 0.0,
        config.ssm_state_dim,
        1.0 if config.bidirectional_scan else 0.0,
        config.seed,
    ], dtype=np.float32)


def _config_from_vector(vec):
    if vec.size != 8:
        raise FormatError(f"config entry must hold 8 values, found {vec.size}")
    return NetworkConfig(
        width_mult=float(vec[0]),
        input_hw=(int(round(vec[1])), int(round(vec[2]))),
        use_mmc=bool(round(vec[3])),
        use_rssg=bool(round(vec[4])),
        ssm_state_dim=int(round(vec[5])),
        bidirectional_scan=bool(round(vec[6])),
        seed=int(round(vec[7])),
    )


def _write_entry(fh, name, arr):
    name_b = name.encode("utf-8")
    fh.write(struct.pack("<H", len(name_b)))
    fh.write(name_b)
    fh.write(struct.pack("<B", arr.ndim))
    for extent in arr.shape:
        fh.write(struct.pack("<I", extent))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(path, model, config):
    entries = [(CONFIG_KEY, _config_vector(config))]
    entries += [(name, p.data) for name, p in model.named_parameters()]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            _write_entry(fh, name, arr)


def _read_exact(fh, n):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError("checkpoint truncated")
    return buf


def read_entries(path):
    """Parse a checkpoint into (name -> float32 array, NetworkConfig)."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise FormatError("bad checkpoint magic")
        (version,) = struct.unpack("<H", _read_exact(fh, 2))
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        entries = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1))
            shape = tuple(struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(rank))
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(_read_exact(fh, 4 * n), dtype="<f4").reshape(shape)
            if name in entries:
                raise FormatError(f"duplicate checkpoint entry '{name}'")
            entries[name] = data.copy()
    if CONFIG_KEY not in entries:
        raise FormatError("checkpoint is missing the configuration entry")
    config = _config_from_vector(entries.pop(CONFIG_KEY))
    return entries, config


def load_checkpoint(path):
    """Rebuild the model a checkpoint was saved from."""
    entries, config = read_entries(path)
    model = MMUNet(config)
    seen = set()
    for name, param in model.named_parameters():
        if name not in entries:
            raise FormatError(f"checkpoint lacks parameter '{name}'")
        arr = entries[name]
        if arr.shape != param.data.shape:
            raise FormatError(
                f"parameter '{name}' has shape {arr.shape}, expected {param.data.shape}")
        param.data = arr.astype(param.data.dtype)
        seen.add(name)
    extra = set(entries) - seen
    if extra:
        raise FormatError(f"checkpoint holds unknown parameters: {sorted(extra)[:3]}")
    return model, config
