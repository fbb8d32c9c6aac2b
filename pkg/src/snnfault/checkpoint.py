"""Flat binary tensor container.

Layout: 8-byte little-endian header length, a UTF-8 JSON header mapping each
tensor name to ``{"dtype", "shape", "offset", "nbytes"}`` (plus an optional
``"__meta__"`` entry of free-form strings), then the raw little-endian tensor
bytes back to back.
"""
import json
import struct

import numpy as np

from .errors import FormatError

_DTYPES = {"float64": "<f8", "float32": "<f4", "int64": "<i8", "int32": "<i4", "uint8": "|u1", "bool": "|b1"}


def dumps(tensors, meta=None):
    header = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dtype = arr.dtype.name
        if dtype not in _DTYPES:
            raise TypeError(f"unsupported dtype {dtype} for {name}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        header[name] = {"dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    if meta:
        header["__meta__"] = {str(k): str(v) for k, v in meta.items()}
    head = json.dumps(header, sort_keys=True).encode()
    return struct.pack("<Q", len(head)) + head + b"".join(chunks)


def loads(blob):
    if len(blob) < 8:
        raise FormatError("checkpoint shorter than its 8-byte header length")
    (n,) = struct.unpack("<Q", blob[:8])
    if len(blob) < 8 + n:
        raise FormatError(f"checkpoint header claims {n} bytes, only {len(blob) - 8} available")
    header = json.loads(blob[8:8 + n])
    meta = header.pop("__meta__", {})
    body = memoryview(blob)[8 + n:]
    out = {}
    for name, info in header.items():
        start, size = info["offset"], info["nbytes"]
        if start + size > len(body):
            raise FormatError(f"tensor {name} runs past the end of the file")
        arr = np.frombuffer(body[start:start + size], dtype=_DTYPES[info["dtype"]])
        out[name] = arr.reshape(info["shape"]).astype(info["dtype"])
    return out, meta


def save(path, tensors, meta=None):
    with open(path, "wb") as f:
        f.write(dumps(tensors, meta))


def load(path):
    with open(path, "rb") as f:
        return loads(f.read())
