"""Counter-based seed fan-out.

One master seed is expanded into independent child seeds for dataset
generation, mean-sample selection, head training and per-image attack
ordering, so each component is reproducible in isolation.
"""

import hashlib


def child_seed(master: int, *path) -> int:
    """Derive a stable 63-bit child seed from a master seed and a label path.

    The derivation hashes the textual path, so inserting a new consumer
    never shifts the seeds of existing ones.
    """
    label = "/".join(str(p) for p in path)
    digest = hashlib.sha256(f"{master}#{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)
