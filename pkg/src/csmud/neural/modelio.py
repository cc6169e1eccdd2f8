"""Model file: magic, version byte, length-prefixed JSON header, raw tensors.

Tensors are written little-endian in declaration order (parameters, batch
norm running statistics, optimizer velocities); the header lists each
tensor's name and shape and carries a CRC32 of the payload.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .layers import LayerSpec
from .network import Network

MODEL_MAGIC = b"CSMUDNN\x00"
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    """Corrupt, truncated or incompatible model file."""


def save_model(network: Network, path) -> None:
    tensors = network.named_tensors()
    le = network.dtype.newbyteorder("<")
    payload = b"".join(np.ascontiguousarray(a, dtype=le).tobytes() for _, a in tensors)
    header = {
        "architecture": network.architecture(),
        "batches_seen": network.batches_seen,
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
        "payload_bytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC + bytes([MODEL_VERSION]) + struct.pack("<I", len(hb)) + hb + payload)


def _read(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 13 or raw[:8] != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: not a model file (bad magic)")
    if raw[8] != MODEL_VERSION:
        raise ModelFormatError(f"{path}: unsupported model version {raw[8]}")
    (hl,) = struct.unpack("<I", raw[9:13])
    if len(raw) < 13 + hl:
        raise ModelFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[13:13 + hl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelFormatError(f"{path}: corrupt header: {e}") from None
    payload = raw[13 + hl:]
    if len(payload) != header["payload_bytes"]:
        raise ModelFormatError(
            f"{path}: truncated payload ({len(payload)} of {header['payload_bytes']} bytes)")
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise ModelFormatError(f"{path}: payload checksum mismatch")
    return header, payload


def read_model_header(path) -> dict:
    return _read(path)[0]


def _state(header, payload):
    dtype = np.dtype(header["architecture"]["dtype"]).newbyteorder("<")
    state = {}
    pos = 0
    for t in header["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        a = np.frombuffer(payload, dtype=dtype, count=count, offset=pos)
        state[t["name"]] = a.reshape(t["shape"]).astype(dtype.newbyteorder("="))
        pos += count * dtype.itemsize
    if pos != len(payload):
        raise ModelFormatError("payload size does not match the tensor table")
    return state


def load_into(network: Network, path) -> Network:
    """Load weights into an existing network; nothing is touched on mismatch."""
    header, payload = _read(path)
    arch = header["architecture"]
    mine = network.architecture()
    if arch["layers"] != mine["layers"]:
        raise ModelFormatError(f"{path}: architecture mismatch ({arch['arch']} file vs "
                               f"{mine['arch']} network)")
    try:
        network.set_state(_state(header, payload))
    except ValueError as e:
        raise ModelFormatError(f"{path}: {e}") from None
    network.batches_seen = int(header["batches_seen"])
    return network


def load_model(path) -> Network:
    header, payload = _read(path)
    a = header["architecture"]
    specs = [LayerSpec(**d) for d in a["layers"]]
    net = Network(specs, arch=a["arch"], K=a["K"], L=a["L"], M=a["M"], head=a["head"],
                  seed=a["seed"], dtype=np.dtype(a["dtype"]))
    net.set_state(_state(header, payload))
    net.batches_seen = int(header["batches_seen"])
    return net
