"""Binary containers: ``TSKB`` (knowledge base) and ``TSCK`` (checkpoints).

TSKB, all integers little-endian::

    b"TSKB" | u16 version | u32 n_kb | u32 sl
    | n_kb * sl float32 (row-major)
    | u32 meta_len | meta_len bytes of UTF-8 JSON
    | 8-byte BLAKE2b digest of everything before it

TSCK::

    b"TSCK" | u16 version | u32 header_len | header_len bytes of UTF-8 JSON
    | float64 payload, arrays back to back in header order
    | 8-byte BLAKE2b digest of everything before it

The TSCK JSON header is ``{"meta": {...}, "arrays": [[name, shape], ...]}``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

TSKB_MAGIC = b"TSKB"
TSCK_MAGIC = b"TSCK"
TSKB_VERSION = 1
TSCK_VERSION = 1
DIGEST_SIZE = 8


class FormatError(Exception):
    code = "format"


class BadMagicError(FormatError):
    code = "bad_magic"


class VersionError(FormatError):
    code = "version_mismatch"


class ChecksumError(FormatError):
    code = "checksum"


class TruncatedError(FormatError):
    code = "truncated"


def digest(data):
    return hashlib.blake2b(data, digest_size=DIGEST_SIZE).digest()


def dump_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _write_atomic(path, blob):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def _need(blob, end, what):
    if len(blob) < end:
        raise TruncatedError(f"file ends at byte {len(blob)}, {what} needs {end}")


def _check_magic_version(blob, magic, version):
    _need(blob, 6, "header")
    if blob[:4] != magic:
        raise BadMagicError(f"expected magic {magic!r}, found {blob[:4]!r}")
    (found,) = struct.unpack_from("<H", blob, 4)
    if found != version:
        raise VersionError(f"unsupported version {found} (reader handles {version})")


def _check_tail(blob, body_end):
    _need(blob, body_end + DIGEST_SIZE, "checksum")
    if len(blob) > body_end + DIGEST_SIZE:
        raise FormatError(f"{len(blob) - body_end - DIGEST_SIZE} trailing bytes after checksum")
    if digest(blob[:body_end]) != blob[body_end:]:
        raise ChecksumError("checksum mismatch, file is corrupted")


def encode_tskb(values, meta):
    values = np.asarray(values, dtype="<f4")
    if values.ndim != 2:
        raise ValueError("TSKB values must be 2-D (n_kb, sl)")
    n_kb, sl = values.shape
    meta_bytes = dump_json(meta)
    body = b"".join(
        [
            TSKB_MAGIC,
            struct.pack("<HII", TSKB_VERSION, n_kb, sl),
            values.tobytes(order="C"),
            struct.pack("<I", len(meta_bytes)),
            meta_bytes,
        ]
    )
    return body + digest(body)


def decode_tskb(blob):
    """Returns ``(values float32 (n_kb, sl), meta dict)``; raises a FormatError subclass."""
    _check_magic_version(blob, TSKB_MAGIC, TSKB_VERSION)
    _need(blob, 14, "header")
    n_kb, sl = struct.unpack_from("<II", blob, 6)
    off = 14 + n_kb * sl * 4
    _need(blob, off + 4, "value block")
    (meta_len,) = struct.unpack_from("<I", blob, off)
    body_end = off + 4 + meta_len
    _need(blob, body_end, "metadata block")
    _check_tail(blob, body_end)
    values = np.frombuffer(blob, dtype="<f4", count=n_kb * sl, offset=14).reshape(n_kb, sl)
    meta = json.loads(blob[off + 4 : body_end].decode("utf-8"))
    return values.copy(), meta


def write_tskb(path, values, meta):
    _write_atomic(path, encode_tskb(values, meta))


def read_tskb(path):
    return decode_tskb(Path(path).read_bytes())


def encode_tsck(arrays, meta):
    """``arrays`` is an ordered list of ``(name, ndarray)``."""
    header = dump_json({"meta": meta, "arrays": [[name, list(np.shape(a))] for name, a in arrays]})
    parts = [TSCK_MAGIC, struct.pack("<HI", TSCK_VERSION, len(header)), header]
    parts += [np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays]
    body = b"".join(parts)
    return body + digest(body)


def decode_tsck(blob):
    """Returns ``(list of (name, float64 array), meta dict)``."""
    _check_magic_version(blob, TSCK_MAGIC, TSCK_VERSION)
    _need(blob, 10, "header")
    (header_len,) = struct.unpack_from("<I", blob, 6)
    _need(blob, 10 + header_len, "json header")
    header = json.loads(blob[10 : 10 + header_len].decode("utf-8"))
    off = 10 + header_len
    sizes = [int(np.prod(shape, dtype=np.int64)) for _, shape in header["arrays"]]
    body_end = off + 8 * sum(sizes)
    _need(blob, body_end, "array payload")
    _check_tail(blob, body_end)
    arrays = []
    for (name, shape), size in zip(header["arrays"], sizes):
        a = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape)
        arrays.append((name, a.astype(np.float64)))
        off += 8 * size
    return arrays, header["meta"]


def write_tsck(path, arrays, meta):
    _write_atomic(path, encode_tsck(arrays, meta))


def read_tsck(path):
    return decode_tsck(Path(path).read_bytes())


def mlp_arrays(prefix, mlp):
    out = []
    for i, (w, b) in enumerate(mlp.layers):
        out.append((f"{prefix}.{i}.weight", w))
        out.append((f"{prefix}.{i}.bias", b))
    return out


def mlp_from_arrays(prefix, arrays, tanh_output=False, frozen=False):
    from .numkit import Mlp

    named = dict(arrays)
    layers = []
    i = 0
    while f"{prefix}.{i}.weight" in named:
        layers.append((named[f"{prefix}.{i}.weight"], named[f"{prefix}.{i}.bias"]))
        i += 1
    if not layers:
        raise FormatError(f"checkpoint has no layers under {prefix!r}")
    return Mlp(layers, tanh_output=tanh_output, frozen=frozen)
