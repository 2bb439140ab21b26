"""Little-endian binary containers for dense matrices (``FMX1``) and CSR graphs (``GRX1``).

Dense record layout::

    b"FMX1" | u32 rows | u32 cols | 8-byte tag hash | rows*cols f32 (row-major) | u32 CRC32(payload)

Graph record layout is identical except for the magic and the payload, which is
``u32 indptr[rows+1] | u32 indices[nnz] | f32 data[nnz]`` with ``nnz = indptr[-1]``.

A file may hold several records back to back; checkpoints use this.
"""
import hashlib
import struct
import zlib

import numpy as np
import scipy.sparse as sp

from .errors import ChecksumError, FormatError

DENSE_MAGIC = b"FMX1"
GRAPH_MAGIC = b"GRX1"
_HEADER = struct.Struct("<4sII8s")
_CRC = struct.Struct("<I")


def tag_hash(tag):
    return hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest()


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated {what}: expected {n} bytes, got {len(buf)}")
    return buf


def _read_header(fh, magic):
    raw = fh.read(_HEADER.size)
    if not raw:
        return None
    if len(raw) != _HEADER.size:
        raise FormatError("truncated header")
    got, rows, cols, thash = _HEADER.unpack(raw)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    return rows, cols, thash


def _check_crc(fh, payload):
    (crc,) = _CRC.unpack(_read_exact(fh, _CRC.size, "checksum"))
    actual = zlib.crc32(payload) & 0xFFFFFFFF
    if crc != actual:
        raise ChecksumError(f"CRC32 mismatch: stored {crc:#010x}, computed {actual:#010x}")
    return crc


def write_dense(fh, values, tag):
    """Append one dense record; returns the CRC32 of its payload."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise FormatError(f"dense record needs a 2-D array, got shape {values.shape}")
    rows, cols = values.shape
    payload = np.ascontiguousarray(values, dtype="<f4").tobytes()
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    fh.write(_HEADER.pack(DENSE_MAGIC, rows, cols, tag_hash(tag) if isinstance(tag, str) else tag))
    fh.write(payload)
    fh.write(_CRC.pack(crc))
    return crc


def read_dense(fh):
    """Read the next dense record, or return ``None`` at end of file.

    Returns ``(values, tag_hash, crc)`` with ``values`` as float32.
    """
    header = _read_header(fh, DENSE_MAGIC)
    if header is None:
        return None
    rows, cols, thash = header
    payload = _read_exact(fh, rows * cols * 4, "payload")
    crc = _check_crc(fh, payload)
    values = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float32)
    return values, thash, crc


def write_csr(fh, matrix, tag):
    matrix = sp.csr_matrix(matrix)
    matrix.sort_indices()
    rows, cols = matrix.shape
    payload = (
        np.asarray(matrix.indptr, dtype="<u4").tobytes()
        + np.asarray(matrix.indices, dtype="<u4").tobytes()
        + np.asarray(matrix.data, dtype="<f4").tobytes()
    )
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    fh.write(_HEADER.pack(GRAPH_MAGIC, rows, cols, tag_hash(tag)))
    fh.write(payload)
    fh.write(_CRC.pack(crc))
    return crc


def read_csr(fh):
    header = _read_header(fh, GRAPH_MAGIC)
    if header is None:
        return None
    rows, cols, thash = header
    indptr_raw = _read_exact(fh, (rows + 1) * 4, "indptr")
    indptr = np.frombuffer(indptr_raw, dtype="<u4")
    nnz = int(indptr[-1])
    rest = _read_exact(fh, nnz * 8, "indices/data")
    _check_crc(fh, indptr_raw + rest)
    indices = np.frombuffer(rest[: nnz * 4], dtype="<u4")
    data = np.frombuffer(rest[nnz * 4:], dtype="<f4")
    if nnz and int(indices.max()) >= cols:
        raise FormatError("column index out of range in graph record")
    matrix = sp.csr_matrix(
        (data.astype(np.float32), indices.astype(np.int32), indptr.astype(np.int64)),
        shape=(rows, cols),
    )
    return matrix, thash
