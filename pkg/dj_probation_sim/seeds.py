"""
Deterministic random substreams.

Every replication draws from six named streams. The arrival, covariate and
arrival-term streams ignore the policy salt, so runs of different policies at
the same replication see the same people arrive at the same times with the
same terms (common random numbers). The remaining streams are salted per
policy; returning individuals draw their new terms from the salted
"return-terms" stream.
"""

import hashlib
from typing import Dict

import numpy as np

STREAM_NAMES = (
    "arrivals",
    "covariates",
    "arrival-terms",
    "offense-times",
    "incarceration",
    "return-terms",
)

SHARED_STREAMS = frozenset({"arrivals", "covariates", "arrival-terms"})


def derive_seeds(base_seed: int, replication: int, stream_name: str, salt: str = "") -> int:
    """
    Derive a 64-bit seed for one substream from a SHA-256 digest of its
    coordinates.
    """
    if stream_name in SHARED_STREAMS:
        salt = ""
    payload = "|".join(
        (repr(int(base_seed)), repr(int(replication)), stream_name, salt)
    ).encode("utf-8")
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "big")


def stream_rngs(base_seed: int, replication: int, salt: str = "") -> Dict[str, np.random.Generator]:
    return {
        name: np.random.default_rng(derive_seeds(base_seed, replication, name, salt))
        for name in STREAM_NAMES
    }
