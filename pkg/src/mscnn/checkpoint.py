"""Binary model checkpoints.

Layout (all integers little-endian):

    magic    4s   "MSCN"
    version  u32  1
    digest   32s  SHA-256 of the canonical config description
    layers   u32  parameter slots per branch
    section  4s   "CUR " then per slot: u8 ndim, ndim*u32 dims,
                  float32 weight data, u32 bias length, float32 bias data
    section  4s   "REF " same layout
    section  4s   "FUSE" gate weights (ndim/dims/data), bias, u32 pool
                  window, u8 mode (0 additive, 1 multiplicative)

Weights are stored as raw little-endian float32; reading a file written by
this module reproduces it byte for byte.
"""

import hashlib
import struct

import numpy as np

from .fusion import FusionParameters
from .model import ModelParameters
from .network import BranchParameters

MAGIC = b"MSCN"
VERSION = 1
_MODES = ("additive", "multiplicative")


def config_digest(config, pool_window, mode):
    text = f"{config.canonical_form()}|pool_window={pool_window}|mode={mode}"
    return hashlib.sha256(text.encode()).digest()


def _write_array(fh, arr):
    arr = np.ascontiguousarray(arr, np.float32)
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    data = arr.tobytes()
    if np.little_endian is False:
        data = arr.byteswap().tobytes()
    fh.write(data)


def _read_array(fh):
    ndim = struct.unpack("<B", fh.read(1))[0]
    shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(fh.read(4 * count), "<f4").reshape(shape)
    return np.ascontiguousarray(arr)


def _write_branch(fh, tag, params):
    fh.write(tag)
    for w, b in zip(params.weights, params.biases):
        _write_array(fh, w)
        fh.write(struct.pack("<I", b.size))
        fh.write(np.ascontiguousarray(b, np.float32).astype("<f4").tobytes())


def _read_branch(fh, tag, layer_count):
    got = fh.read(4)
    if got != tag:
        raise ValueError(f"bad section tag {got!r}, expected {tag!r}")
    weights, biases = [], []
    for _ in range(layer_count):
        weights.append(_read_array(fh))
        (blen,) = struct.unpack("<I", fh.read(4))
        biases.append(np.ascontiguousarray(np.frombuffer(fh.read(4 * blen), "<f4")))
    return BranchParameters(weights, biases)


def write_checkpoint(path, config, params):
    """Serialize ModelParameters (float32) for the given config."""
    digest = config_digest(config, params.fusion.pool_window, params.fusion.mode)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(digest)
        fh.write(struct.pack("<I", len(params.cur.weights)))
        _write_branch(fh, b"CUR ", params.cur)
        _write_branch(fh, b"REF ", params.ref)
        fh.write(b"FUSE")
        _write_array(fh, params.fusion.gate_weights)
        fh.write(struct.pack("<I", params.fusion.gate_bias.size))
        fh.write(np.ascontiguousarray(params.fusion.gate_bias, np.float32)
                 .astype("<f4").tobytes())
        fh.write(struct.pack("<I", params.fusion.pool_window))
        fh.write(struct.pack("<B", _MODES.index(params.fusion.mode)))


def read_checkpoint(path, config=None):
    """Load ModelParameters. When a config is given, its digest must match
    the one stored in the file."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a model checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        digest = fh.read(32)
        (layer_count,) = struct.unpack("<I", fh.read(4))
        cur = _read_branch(fh, b"CUR ", layer_count)
        ref = _read_branch(fh, b"REF ", layer_count)
        if fh.read(4) != b"FUSE":
            raise ValueError(f"{path}: missing fusion section")
        gate_weights = _read_array(fh)
        (blen,) = struct.unpack("<I", fh.read(4))
        gate_bias = np.ascontiguousarray(np.frombuffer(fh.read(4 * blen), "<f4"))
        (pool_window,) = struct.unpack("<I", fh.read(4))
        (mode_idx,) = struct.unpack("<B", fh.read(1))
        fus = FusionParameters(gate_weights, gate_bias, pool_window, _MODES[mode_idx])
    params = ModelParameters(cur, ref, fus)
    if config is not None:
        expect = config_digest(config, fus.pool_window, fus.mode)
        if digest != expect:
            raise ValueError(f"{path}: checkpoint was written for a different "
                             f"network configuration")
    return params, digest
