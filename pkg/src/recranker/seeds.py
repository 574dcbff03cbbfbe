"""Seed derivation: one global seed fanned out to stages by name."""
import hashlib


def derive_seed(seed: int, *parts) -> int:
    """Return a 32-bit seed derived from ``seed`` and a path of names.

    ``derive_seed(7, "rerank", "u12")`` is stable across runs and platforms:
    it is the first 4 bytes of sha256 over ``"7/rerank/u12"``.
    """
    key = "/".join([str(seed), *map(str, parts)])
    return int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:4], "big")
