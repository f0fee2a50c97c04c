"""Stable 64-bit hashing (BLAKE2b, 8-byte digest).

Python's built-in ``hash`` is salted per process, so anything that must be
stable across runs (token ids, shard assignment, cache keys, per-record rng
streams) goes through here.
"""

import hashlib
import json


def hash64(data: bytes | str) -> int:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def canonical_json(obj) -> str:
    """Canonical JSON: sorted keys, no insignificant whitespace, UTF-8 kept verbatim."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def config_hash(obj) -> str:
    return f"{hash64(canonical_json(obj)):016x}"
