"""Small IO helpers: deterministic JSON(L), atomic writes, content digests.

Every artifact the pipeline writes goes through these helpers so that two
runs with the same config and seed produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Any, Iterable, Iterator


def dumps_canonical(obj: Any) -> str:
    """Serialize with sorted keys and fixed separators (no whitespace drift)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    """Write records one per line, atomically (write to temp, then rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(dumps_canonical(rec))
            fh.write("\n")
    os.replace(tmp, path)


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def write_json(path: str | Path, obj: Any) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(obj, sort_keys=True, indent=2))
        fh.write("\n")
    os.replace(tmp, path)


def read_json(path: str | Path) -> Any:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def stable_seed(*parts) -> int:
    """Deterministic 63-bit seed derived from heterogeneous parts."""
    digest = hashlib.blake2b("|".join(str(p) for p in parts).encode("utf-8"),
                             digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def file_digest(path: str | Path) -> str:
    """SHA-256 hex digest of a file's contents."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# Binary container: magic(4) | version(u8) | header_len(u32 LE) | header JSON | payload.
# Used by the model checkpoint and the vector index files.

def write_binary_with_header(path: str | Path, magic: bytes, version: int,
                             header: dict, payloads: Iterable[bytes]) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    header_bytes = dumps_canonical(header).encode("utf-8")
    with open(tmp, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<B", version))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for blob in payloads:
            fh.write(blob)
    os.replace(tmp, path)


def read_binary_with_header(path: str | Path, magic: bytes,
                            expect_version: int) -> tuple[dict, bytes]:
    """Return (header, payload bytes). Raises on magic/version mismatch."""
    with open(path, "rb") as fh:
        got_magic = fh.read(4)
        if got_magic != magic:
            raise ValueError(f"bad magic in {path}: {got_magic!r}")
        (version,) = struct.unpack("<B", fh.read(1))
        if version != expect_version:
            raise ValueError(f"unsupported format version {version} in {path}")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()
    return header, payload
