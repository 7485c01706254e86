"""Binary container for wide and quantized 2-D tensors.

Single little-endian layout with a version byte, so golden fixtures can be
shared across languages and checked bitwise.  Header (36 bytes):

    offset  size  field
    0       4     magic b"FP4T"
    4       1     version (1)
    5       1     dtype: 0 = wide binary64, 1 = quantized
    6       1     format: 0 = none, 1 = nvfp4, 2 = mxfp4
    7       1     layout kind: 0 = none, 1 = rows, 2 = cols, 3 = square
    8       2     block_len (uint16; 0 when wide)
    10      2     reserved (0)
    12      8     rows (uint64)
    20      8     cols (uint64)
    28      8     tensor-level decode scale (float64; 0.0 when absent)

Payload for wide files is rows*cols float64 values, row-major.  Payload for
quantized files is the code array over the zero-padded shape packed two
codes per byte (low nibble first, row-major), followed by the scale-code
grid as raw uint8, row-major.  The header fully determines the payload
length; a length mismatch is a format error.  Writes go through a temp
file and os.replace so readers never observe partial files.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .blockquant import (
    FORMATS,
    QuantizedTensor,
    ScalingLayout,
    block_decompose,
    cols1d,
    rows1d,
    square2d,
)

MAGIC = b"FP4T"
VERSION = 1
_HEADER = struct.Struct("<4sBBBBHHQQd")

_FMT_BYTE = {"nvfp4": 1, "mxfp4": 2}
_FMT_NAME = {v: k for k, v in _FMT_BYTE.items()}
_KIND_BYTE = {"rows": 1, "cols": 2, "square": 3}
_KIND_NAME = {v: k for k, v in _KIND_BYTE.items()}


class TensorFileError(ValueError):
    """Malformed container: bad magic, version, header fields, or length."""


def _pack_codes(codes: np.ndarray) -> bytes:
    flat = codes.astype(np.uint8).reshape(-1)
    if flat.size % 2:
        flat = np.concatenate([flat, np.zeros(1, np.uint8)])
    pairs = flat.reshape(-1, 2)
    return (pairs[:, 0] | (pairs[:, 1] << 4)).astype(np.uint8).tobytes()


def _unpack_codes(raw: np.ndarray, padded_shape: tuple[int, int]) -> np.ndarray:
    lo = raw & 0x0F
    hi = raw >> 4
    flat = np.empty(raw.size * 2, np.uint8)
    flat[0::2] = lo
    flat[1::2] = hi
    n = padded_shape[0] * padded_shape[1]
    return flat[:n].reshape(padded_shape)


def _atomic_write(path: str, blob: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tensor(path: str, t: np.ndarray | QuantizedTensor) -> None:
    if isinstance(t, QuantizedTensor):
        header = _HEADER.pack(
            MAGIC, VERSION, 1, _FMT_BYTE[t.fmt.name],
            _KIND_BYTE[t.layout.kind], t.layout.block_len, 0,
            t.shape[0], t.shape[1],
            0.0 if t.global_decode_scale is None else t.global_decode_scale)
        payload = _pack_codes(t.codes) + t.scale_codes.astype(np.uint8).tobytes()
    else:
        x = np.asarray(t, dtype=np.float64)
        if x.ndim != 2:
            raise TensorFileError("wide tensors must be 2-D")
        header = _HEADER.pack(MAGIC, VERSION, 0, 0, 0, 0, 0,
                              x.shape[0], x.shape[1], 0.0)
        payload = np.ascontiguousarray(x).tobytes()
    _atomic_write(path, header + payload)


def _layout_from_bytes(kind_byte: int, block_len: int) -> ScalingLayout:
    kind = _KIND_NAME.get(kind_byte)
    if kind is None:
        raise TensorFileError(f"unknown layout kind byte {kind_byte}")
    if kind == "rows":
        return rows1d(block_len)
    if kind == "cols":
        return cols1d(block_len)
    if block_len != 16:
        raise TensorFileError("square layout requires block length 16")
    return square2d()


def read_tensor(path: str) -> np.ndarray | QuantizedTensor:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise TensorFileError("file shorter than header")
    (magic, version, dtype, fmt_byte, kind_byte, block_len, reserved,
     rows, cols, s_dec) = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise TensorFileError("bad magic (not a tensor container)")
    if version != VERSION:
        raise TensorFileError(f"unsupported version {version}")
    if reserved != 0:
        raise TensorFileError("reserved header bytes must be zero")
    payload = blob[_HEADER.size:]

    if dtype == 0:
        n = rows * cols * 8
        if len(payload) != n:
            raise TensorFileError(
                f"wide payload length {len(payload)} != expected {n}")
        return np.frombuffer(payload, np.float64).reshape(rows, cols).copy()

    if dtype != 1:
        raise TensorFileError(f"unknown dtype byte {dtype}")
    fmt_name = _FMT_NAME.get(fmt_byte)
    if fmt_name is None:
        raise TensorFileError(f"unknown format byte {fmt_byte}")
    fmt = FORMATS[fmt_name]
    layout = _layout_from_bytes(kind_byte, block_len)
    bm = block_decompose((rows, cols), layout)
    n_codes = (bm.padded_shape[0] * bm.padded_shape[1] + 1) // 2
    n_scales = bm.grid_shape[0] * bm.grid_shape[1]
    if len(payload) != n_codes + n_scales:
        raise TensorFileError(
            f"quantized payload length {len(payload)} != expected "
            f"{n_codes + n_scales}")
    codes = _unpack_codes(
        np.frombuffer(payload[:n_codes], np.uint8), bm.padded_shape)
    scales = np.frombuffer(payload[n_codes:], np.uint8).reshape(
        bm.grid_shape).copy()
    return QuantizedTensor(
        shape=(rows, cols), codes=codes, scale_codes=scales, layout=layout,
        fmt=fmt, global_decode_scale=s_dec if fmt.has_tensor_scale else None)
