"""Binary weights file.

Little-endian layout::

    b"FDVDNETW"  u32 version  u8 variant  u32 c0 c1 c2  u32 count
    count x { u16 name_len, name (utf-8), u8 ndim, u32 dims[ndim], f32 data }

Tensor entries are written in sorted name order.
"""

import os
import struct
import tempfile

import numpy as np

from .errors import (BadMagicError, TruncatedFileError, UnknownTensorError,
                     VersionMismatchError, WeightsFormatError)
from .model import CASCADE, FIVE_INPUT, ModelWeights

MAGIC = b"FDVDNETW"
VERSION = 1
_VARIANT_TAGS = {CASCADE: 0, FIVE_INPUT: 1}
_TAG_VARIANTS = {v: k for k, v in _VARIANT_TAGS.items()}


def dumps(w: ModelWeights) -> bytes:
    out = [MAGIC, struct.pack("<IB3II", VERSION, _VARIANT_TAGS[w.variant],
                              *w.channels, len(w.tensors))]
    for name in sorted(w.tensors):
        arr = np.ascontiguousarray(w.tensors[name], dtype="<f4")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def save_weights(w: ModelWeights, path):
    """Write ``w`` atomically to ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".weights-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(dumps(w))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"weights file truncated at byte {len(self.data)} "
                f"(needed {self.pos + n})")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes) -> ModelWeights:
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise BadMagicError("not a weights file (bad magic)")
    version, tag, c0, c1, c2, count = r.unpack("<IB3II")
    if version != VERSION:
        raise VersionMismatchError(f"weights version {version}, expected {VERSION}")
    if tag not in _TAG_VARIANTS:
        raise WeightsFormatError(f"unknown variant tag {tag}")
    shell = ModelWeights(_TAG_VARIANTS[tag], (c0, c1, c2), {})
    expected = shell.expected_shapes()
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WeightsFormatError("tensor name is not valid UTF-8") from exc
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I")
        if name not in expected:
            raise UnknownTensorError(f"unknown tensor {name!r}")
        if tuple(dims) != expected[name]:
            raise WeightsFormatError(
                f"tensor {name!r} has shape {tuple(dims)}, expected {expected[name]}")
        size = int(np.prod(dims, dtype=np.int64)) * 4
        tensors[name] = np.frombuffer(r.take(size), dtype="<f4").reshape(dims) \
            .astype(np.float32)
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise WeightsFormatError(f"missing {len(missing)} tensors, e.g. {missing[0]!r}")
    if r.pos != len(data):
        raise WeightsFormatError(f"{len(data) - r.pos} trailing bytes after last tensor")
    shell.tensors = tensors
    return shell


def load_weights(path) -> ModelWeights:
    with open(path, "rb") as f:
        return loads(f.read())
