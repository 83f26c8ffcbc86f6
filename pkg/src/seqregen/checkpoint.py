"""Named-tensor checkpoint container with a self-describing binary layout.

File layout (all integers little-endian):

    magic           4 bytes  b"PRGC"
    version         u32
    tensor count    u32
    per tensor:
        name length u32, then UTF-8 name bytes
        rank        u32
        extents     rank x u64
        dtype tag   u8   (0 = float32, 1 = float64)
        payload     raw little-endian values, C order
        checksum    u32  CRC-32 of the payload bytes
    metadata length u32, then UTF-8 "key=value" lines

Loading verifies the magic, rejects versions newer than this implementation,
verifies every payload checksum, and rejects duplicate tensor names, so a
corrupt or truncated file never loads silently. Writes go through a temp file
and an atomic rename.
"""

from __future__ import annotations

import os
import struct
import zlib

import numpy as np

from .errors import CheckpointError

MAGIC = b"PRGC"
VERSION = 1

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR_KIND = {"f4": 0, "f8": 1}


class CheckpointContainer:
    """An ordered name -> float array map plus string metadata."""

    def __init__(self, tensors=None, metadata=None):
        self.tensors = dict(tensors or {})
        self.metadata = dict(metadata or {})

    def __eq__(self, other):
        if not isinstance(other, CheckpointContainer):
            return NotImplemented
        if self.metadata != other.metadata:
            return False
        if list(self.tensors) != list(other.tensors):
            return False
        return all(
            a.dtype == b.dtype and np.array_equal(a, b, equal_nan=True)
            for a, b in ((self.tensors[k], other.tensors[k]) for k in self.tensors)
        )

    def to_bytes(self):
        out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(self.tensors))]
        for name, arr in self.tensors.items():
            arr = np.asarray(arr)
            if arr.dtype == np.float64:
                arr = arr.astype("<f8", copy=False)
            else:
                arr = arr.astype("<f4", copy=False)
            tag = _TAG_FOR_KIND[arr.dtype.str[-2:]]
            name_b = name.encode("utf-8")
            out.append(struct.pack("<I", len(name_b)))
            out.append(name_b)
            out.append(struct.pack("<I", arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
            out.append(struct.pack("<B", tag))
            payload = np.ascontiguousarray(arr).tobytes()
            out.append(payload)
            out.append(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))
        meta_lines = []
        for k, v in self.metadata.items():
            k, v = str(k), str(v)
            if "\n" in k or "\n" in v or "=" in k:
                raise CheckpointError(f"metadata key/value not encodable: {k!r}")
            meta_lines.append(f"{k}={v}")
        meta_b = "\n".join(meta_lines).encode("utf-8")
        out.append(struct.pack("<I", len(meta_b)))
        out.append(meta_b)
        return b"".join(out)

    def save(self, path):
        path = os.fspath(path)
        tmp = path + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(self.to_bytes())
        os.replace(tmp, path)
        return path

    @classmethod
    def from_bytes(cls, blob):
        view = memoryview(blob)
        off = 0

        def take(n, what):
            nonlocal off
            if off + n > len(view):
                raise CheckpointError(f"truncated checkpoint while reading {what}")
            chunk = view[off : off + n]
            off += n
            return chunk

        if bytes(take(4, "magic")) != MAGIC:
            raise CheckpointError("bad magic: not a checkpoint container")
        (version,) = struct.unpack("<I", take(4, "version"))
        if version > VERSION:
            raise CheckpointError(
                f"checkpoint version {version} is ahead of this implementation ({VERSION})"
            )
        (count,) = struct.unpack("<I", take(4, "tensor count"))
        tensors = {}
        for i in range(count):
            (name_len,) = struct.unpack("<I", take(4, "name length"))
            name = bytes(take(name_len, "name")).decode("utf-8")
            if name in tensors:
                raise CheckpointError(f"duplicate tensor name {name!r}")
            (rank,) = struct.unpack("<I", take(4, "rank"))
            shape = struct.unpack(f"<{rank}Q", take(8 * rank, "extents")) if rank else ()
            (tag,) = struct.unpack("<B", take(1, "dtype tag"))
            if tag not in _DTYPE_TAGS:
                raise CheckpointError(f"unknown dtype tag {tag}")
            dtype = _DTYPE_TAGS[tag]
            n_items = 1
            for s in shape:
                n_items *= s
            payload = take(n_items * dtype.itemsize, f"payload of {name!r}")
            (crc,) = struct.unpack("<I", take(4, "checksum"))
            if zlib.crc32(payload) & 0xFFFFFFFF != crc:
                raise CheckpointError(f"checksum mismatch in tensor {name!r}")
            tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
        (meta_len,) = struct.unpack("<I", take(4, "metadata length"))
        meta_b = bytes(take(meta_len, "metadata"))
        if off != len(view):
            raise CheckpointError("trailing bytes after checkpoint payload")
        metadata = {}
        if meta_b:
            for line in meta_b.decode("utf-8").split("\n"):
                if "=" not in line:
                    raise CheckpointError(f"malformed metadata line {line!r}")
                k, v = line.split("=", 1)
                metadata[k] = v
        return cls(tensors, metadata)

    @classmethod
    def load(cls, path):
        try:
            with open(path, "rb") as fh:
                blob = fh.read()
        except OSError as e:
            raise CheckpointError(f"cannot read checkpoint {path!r}: {e}") from None
        return cls.from_bytes(blob)


def save_checkpoint(container, path):
    return container.save(path)


def load_checkpoint(path):
    return CheckpointContainer.load(path)
