"""Binary file formats: TSR1 single-tensor dumps and TSMC checkpoints.

TSR1 layout: magic ``TSR1`` | u8 dtype (0=f32, 1=u8) | u8 ndim |
ndim little-endian u32 extents | raw little-endian payload.

TSMC layout: magic ``TSMC`` | u32 version | u32 entry count, then per
entry: u16 name length | UTF-8 name | u8 ndim | ndim u32 extents |
little-endian f32 payload. Entry names carry the parameter-group prefix
(``frozen/``, ``ta_adapter/``, ``tp_prompt/``, ``ms_fusion/``, ``decoder/``).
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

TSR1_MAGIC = b"TSR1"
TSMC_MAGIC = b"TSMC"
TSMC_VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_DTYPE_TO_CODE = {np.dtype("float32"): 0, np.dtype("uint8"): 1}


def save_tensor(path, array):
    """Write a numpy array (float32 or uint8) as a TSR1 file."""
    arr = np.ascontiguousarray(array)
    if arr.dtype not in _DTYPE_TO_CODE:
        if np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        else:
            raise FormatError(f"TSR1 supports f32 and u8 payloads, not {arr.dtype}")
    code = _DTYPE_TO_CODE[arr.dtype]
    with open(path, "wb") as fh:
        fh.write(TSR1_MAGIC)
        fh.write(struct.pack("<BB", code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_tensor(path):
    """Read a TSR1 file back into a numpy array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 6 or blob[:4] != TSR1_MAGIC:
        raise FormatError(f"{path}: bad TSR1 magic")
    code, ndim = struct.unpack_from("<BB", blob, 4)
    if code not in _DTYPE_CODES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    header_end = 6 + 4 * ndim
    if len(blob) < header_end:
        raise FormatError(f"{path}: truncated TSR1 header")
    shape = struct.unpack_from(f"<{ndim}I", blob, 6)
    dtype = _DTYPE_CODES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = blob[header_end:]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def save_checkpoint(path, params):
    """Write a name->array mapping as a TSMC checkpoint (f32 payloads)."""
    with open(path, "wb") as fh:
        fh.write(TSMC_MAGIC)
        fh.write(struct.pack("<II", TSMC_VERSION, len(params)))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype="<f4")
            enc = name.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Read a TSMC checkpoint into an ordered name->float32-array dict."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != TSMC_MAGIC:
        raise FormatError(f"{path}: bad TSMC magic")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != TSMC_VERSION:
        raise FormatError(f"{path}: unsupported TSMC version {version}")
    off = 12
    params = {}
    for _ in range(count):
        try:
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off : off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            nbytes = int(np.prod(shape, dtype=np.int64)) * 4
            if off + nbytes > len(blob):
                raise FormatError(f"{path}: truncated entry {name!r}")
            params[name] = (
                np.frombuffer(blob[off : off + nbytes], dtype="<f4")
                .reshape(shape)
                .copy()
            )
            off += nbytes
        except struct.error as exc:
            raise FormatError(f"{path}: truncated TSMC entry table") from exc
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes")
    return params
