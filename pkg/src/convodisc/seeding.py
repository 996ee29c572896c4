"""Deterministic seed derivation.

Every source of randomness in the package draws from one root seed; named
sub-streams are split off with a stable hash so that adding a new consumer
never perturbs existing ones.
"""

import hashlib


def derive_seed(seed: int, label: str) -> int:
    """Derive a 63-bit sub-seed from (root seed, stream label)."""
    digest = hashlib.sha256(f"{seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)
