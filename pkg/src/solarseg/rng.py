"""Deterministic random streams.

Every stochastic operation in the package draws from its own Philox4x32
counter-based generator (Salmon et al. 2011, as shipped in
``numpy.random.Philox``).  A stream is identified by a context tuple --
typically a label plus the user-facing seed plus loop indices -- which is
hashed with SHA-256 into the 128-bit Philox key.  Streams are therefore:

* reproducible across runs and platforms for the same context tuple,
* independent of how many draws any *other* stream has consumed,
* cheap to derive per item, so data loading and augmentation can be
  parallelized without changing results.

``derive_seed`` produces a plain integer for APIs that accept one seed;
it uses a disjoint slice of the same hash so a derived seed never
collides with the stream keyed by the same tuple.
"""

import hashlib

import numpy as np


def _encode(parts: tuple) -> bytes:
    # \x1f separator keeps ("a", "bc") distinct from ("ab", "c")
    return "\x1f".join(str(p) for p in parts).encode("utf-8")


def stream(*parts) -> np.random.Generator:
    """Independent Philox generator for the context tuple ``parts``."""
    digest = hashlib.sha256(_encode(parts)).digest()
    key = np.frombuffer(digest[:16], dtype="<u8")
    return np.random.Generator(np.random.Philox(key=key))


def derive_seed(*parts) -> int:
    """Stable non-negative 63-bit integer seed for the context tuple."""
    digest = hashlib.sha256(_encode(parts)).digest()
    return int.from_bytes(digest[16:24], "little") & (2**63 - 1)
