"""Little-endian container helpers shared by the PMBS, PMMR and PMCK formats.

Every container ends with an 8-byte checksum of all preceding bytes
(BLAKE2b with an 8-byte digest, stored little-endian).
"""

import hashlib
import os
import struct
import tempfile

import numpy as np

from .errors import ChecksumError, MagicError, TruncationError, VersionError

CHECKSUM_SIZE = 8


def checksum(data):
    return hashlib.blake2b(data, digest_size=CHECKSUM_SIZE).digest()


class Writer:
    def __init__(self):
        self.parts = []

    def raw(self, data):
        self.parts.append(bytes(data))

    def pack(self, fmt, *values):
        self.parts.append(struct.pack("<" + fmt, *values))

    def array(self, arr, dtype):
        self.parts.append(np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())

    def finish(self):
        body = b"".join(self.parts)
        return body + checksum(body)


class Reader:
    """Sequential reader that reports byte offsets on failure."""

    def __init__(self, data, magic, versions):
        self.data = memoryview(data)
        self.pos = 0
        if len(data) < len(magic):
            raise TruncationError(len(magic), len(data), 0)
        if bytes(self.data[:len(magic)]) != magic:
            raise MagicError(f"bad magic {bytes(self.data[:len(magic)])!r}, expected {magic!r}", 0)
        self.pos = len(magic)
        (self.version,) = self.unpack("H")
        if self.version not in versions:
            raise VersionError(f"unsupported format version {self.version}", len(magic))

    def take(self, n):
        end = self.pos + n
        if end > len(self.data) - CHECKSUM_SIZE:
            raise TruncationError(end + CHECKSUM_SIZE, len(self.data), self.pos)
        out = self.data[self.pos:end]
        self.pos = end
        return out

    def unpack(self, fmt):
        size = struct.calcsize("<" + fmt)
        return struct.unpack("<" + fmt, self.take(size))

    def array(self, dtype, shape):
        dt = np.dtype(dtype).newbyteorder("<")
        count = int(np.prod(shape, dtype=np.int64))
        buf = self.take(count * dt.itemsize)
        return np.frombuffer(buf, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))

    def checksum_ok(self):
        n = len(self.data) - CHECKSUM_SIZE
        return n >= 0 and checksum(self.data[:n]) == bytes(self.data[n:])

    def expect_total(self, total):
        """Check the full container length declared by the header, then the checksum,
        before any payload is interpreted."""
        if len(self.data) < total:
            raise TruncationError(total, len(self.data), self.pos)
        if len(self.data) > total:
            raise ChecksumError(f"{len(self.data) - total} unexpected trailing bytes", total)
        if not self.checksum_ok():
            raise ChecksumError("checksum mismatch", total - CHECKSUM_SIZE)

    def finish(self):
        """Verify the trailing checksum; the payload must be fully consumed."""
        expected = self.pos + CHECKSUM_SIZE
        if len(self.data) != expected:
            if len(self.data) < expected:
                raise TruncationError(expected, len(self.data), self.pos)
            raise ChecksumError(f"{len(self.data) - expected} unexpected trailing bytes", expected)
        stored = bytes(self.data[self.pos:])
        if checksum(self.data[:self.pos]) != stored:
            raise ChecksumError("checksum mismatch", self.pos)


def read_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


def write_atomic(path, data):
    """Write via a temporary file in the destination directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
