import hashlib


def derive_seed(seed: int, *tags) -> int:
    """Stable 63-bit seed from a master seed and string/int tags."""
    h = hashlib.sha256(str(int(seed)).encode())
    for tag in tags:
        h.update(b"\x00")
        h.update(str(tag).encode())
    return int.from_bytes(h.digest()[:8], "little") >> 1
