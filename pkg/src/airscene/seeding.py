"""Deterministic seed derivation for independent random streams."""

import hashlib


def derive_seed(root: int, label: str) -> int:
    """Stable 64-bit child seed from a root seed and a stream label.

    Hash-based so adding a new labelled stream never shifts existing ones.
    """
    digest = hashlib.sha256(f"{root}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")
