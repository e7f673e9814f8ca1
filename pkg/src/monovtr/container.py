"""Self-describing binary container used for maps and replay logs.

Layout:

    magic (8 bytes)  b"MVTRBIN1"
    header length    uint32 little-endian
    header           UTF-8 JSON: format name, version, metadata, and an
                     array directory (name, dtype, shape, byte offset/length
                     into the payload)
    payload          raw little-endian array bytes, concatenated
    checksum         SHA-256 of everything above (32 bytes)

Arrays round-trip bit-exactly; metadata floats survive via JSON repr.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile

import numpy as np

from .errors import CorruptFile, FormatVersionMismatch

MAGIC = b"MVTRBIN1"
_CHECKSUM_LEN = 32


def write_container(path, fmt: str, version: int, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Atomically write a container (temp file + rename)."""
    directory = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        directory.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"format": fmt, "version": version, "meta": meta, "arrays": directory}
    ).encode("utf-8")

    blob = bytearray()
    blob += MAGIC
    blob += len(header).to_bytes(4, "little")
    blob += header
    for raw in chunks:
        blob += raw
    blob += hashlib.sha256(bytes(blob)).digest()

    directory_path = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory_path, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(bytes(blob))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_container(path, fmt: str, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    """Read and validate; returns (meta, arrays).

    Raises CorruptFile on structural or checksum failure and
    FormatVersionMismatch on a wrong format name or version.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 4 + _CHECKSUM_LEN or blob[: len(MAGIC)] != MAGIC:
        raise CorruptFile(f"{path}: not a container file")
    body, digest = blob[:-_CHECKSUM_LEN], blob[-_CHECKSUM_LEN:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptFile(f"{path}: checksum mismatch")
    header_len = int.from_bytes(body[len(MAGIC) : len(MAGIC) + 4], "little")
    header_start = len(MAGIC) + 4
    if header_start + header_len > len(body):
        raise CorruptFile(f"{path}: truncated header")
    try:
        header = json.loads(body[header_start : header_start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"{path}: bad header") from exc
    if header.get("format") != fmt or header.get("version") != version:
        raise FormatVersionMismatch(
            f"{path}: found {header.get('format')!r} v{header.get('version')}, "
            f"expected {fmt!r} v{version}"
        )
    payload = body[header_start + header_len :]
    arrays = {}
    for entry in header["arrays"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise CorruptFile(f"{path}: array {entry['name']} out of bounds")
        arr = np.frombuffer(payload[start : start + nbytes], dtype=np.dtype(entry["dtype"]))
        expected = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if arr.size != expected:
            raise CorruptFile(f"{path}: array {entry['name']} size mismatch")
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return header["meta"], arrays
