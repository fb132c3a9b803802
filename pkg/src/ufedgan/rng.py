"""Named, counter-based random streams.

Every stream is a Philox generator keyed by SHA-256 of ``"<seed>:<name>"``,
so the same (seed, name) pair replays the same numbers on any platform and
streams with different names never overlap. Conventional stream names:

``server-init:<u>:generator``, ``server-init:<u>:discriminator``,
``client-batch:<u>``, ``latent:<u>``, ``attacker-init``, ``attacker-latent``.
"""
import hashlib

import numpy as np


def stream_key(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


def make_stream(seed: int, name: str) -> np.random.Generator:
    """A fresh generator positioned at the start of stream ``name``."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, name)))


class Rng:
    """Registry of named streams derived from one experiment seed.

    ``stream(name)`` returns the same live generator on repeated calls, so
    consumers that share a name also share the counter position.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._streams = {}

    def stream(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            self._streams[name] = make_stream(self.seed, name)
        return self._streams[name]

    def fresh(self, name: str) -> np.random.Generator:
        return make_stream(self.seed, name)

    def log(self):
        """(name, key hex, counter state) for every stream touched so far."""
        rows = []
        for name, gen in sorted(self._streams.items()):
            state = gen.bit_generator.state["state"]
            rows.append({
                "name": name,
                "key": format(stream_key(self.seed, name), "032x"),
                "counter": [int(c) for c in np.atleast_1d(state["counter"])],
            })
        return rows
