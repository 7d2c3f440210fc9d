"""Self-describing binary tensor container.

Layout (all integers little-endian)::

    0   8 bytes   magic, e.g. b"NSSMCKPT" (float model) or b"NSSMINTN" (integer model)
    8   uint32    format version (1)
    12  uint32    header length in bytes (H)
    16  H bytes   UTF-8 JSON header, space-padded so the data section is 8-byte aligned
    ..  data      tensor payloads, each starting on an 8-byte boundary

The JSON header holds ``config`` and ``meta`` mappings and a ``tensors`` list
with one entry per tensor: ``name``, ``dtype`` ("<f4" or "<i4"), ``shape``,
``offset`` (relative to the start of the data section), ``nbytes`` and, for
integer payloads, the logical ``bits`` width.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

VERSION = 1
DTYPES = {"<f4": np.dtype("<f4"), "<i4": np.dtype("<i4")}


class ContainerError(ValueError):
    pass


def _align(n: int, to: int = 8) -> int:
    return (n + to - 1) // to * to


def write_container(path, magic: bytes, tensors: dict, config: dict, meta: dict | None = None,
                    bits: dict | None = None) -> None:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    bits = bits or {}
    directory, payloads, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if np.issubdtype(arr.dtype, np.integer):
            info = np.iinfo(np.int32)
            if arr.size and (arr.min() < info.min or arr.max() > info.max):
                raise ContainerError(f"tensor {name!r} does not fit in 32-bit signed storage")
            data = arr.astype("<i4")
        else:
            data = arr.astype("<f4")
        entry = {"name": name, "dtype": data.dtype.str, "shape": list(data.shape),
                 "offset": offset, "nbytes": data.nbytes}
        if name in bits:
            entry["bits"] = int(bits[name])
        directory.append(entry)
        payloads.append((offset, data.tobytes()))
        offset = _align(offset + data.nbytes)
    header = json.dumps({"config": config, "meta": meta or {}, "tensors": directory},
                        sort_keys=True).encode()
    header += b" " * (_align(16 + len(header)) - 16 - len(header))
    body = bytearray(offset)
    for off, raw in payloads:
        body[off:off + len(raw)] = raw
    Path(path).write_bytes(magic + struct.pack("<II", VERSION, len(header)) + header + bytes(body))


def read_container(path, magic: bytes | None = None):
    """Returns (magic, tensors, config, meta, bits)."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise ContainerError(f"{path}: truncated header")
    found = raw[:8]
    if magic is not None and found != magic:
        raise ContainerError(f"{path}: bad magic {found!r} at offset 0, expected {magic!r}")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    header = json.loads(raw[16:16 + hlen].decode())
    data = memoryview(raw)[16 + hlen:]
    tensors, bits = {}, {}
    for entry in header["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(data):
            raise ContainerError(f"{path}: tensor {entry['name']!r} runs past end of file")
        dtype = DTYPES[entry["dtype"]]
        tensors[entry["name"]] = np.frombuffer(data[start:start + n], dtype=dtype).reshape(entry["shape"]).copy()
        if "bits" in entry:
            bits[entry["name"]] = entry["bits"]
    return found, tensors, header["config"], header["meta"], bits
