"""Deterministic seed derivation.

Every random choice in the lab flows from one root seed. Child seeds are
derived by hashing the root together with a label path, so adding a new
consumer never shifts the streams of existing ones.
"""

import hashlib


def derive_seed(root: int, *labels: object) -> int:
    """Derive a child seed from `root` and a path of string-able labels.

    Stable across platforms and processes (sha256-based, no hash
    randomization). Result fits in a non-negative int64.
    """
    h = hashlib.sha256()
    h.update(str(int(root)).encode())
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode())
    return int.from_bytes(h.digest()[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF
