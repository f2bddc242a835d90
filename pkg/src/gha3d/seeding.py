"""Named random substreams derived from a single master seed.

Every source of randomness in the package (parameter init, cloud
generation, dropout masks, Fourier frequencies) draws from its own
substream so that results are reproducible and independent of the
order in which components consume entropy.
"""

import numpy as np

# Stable stream ids; appending is fine, renumbering breaks reproducibility.
_STREAMS = {
    "params": 0,
    "cloud-gen": 1,
    "dropout": 2,
    "fourier": 3,
    "qkv": 4,
    "features": 5,
    "probe": 6,
}


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Return a Generator for the named substream of ``seed``.

    ``extra`` integers (layer index, tensor role, ...) further split the
    stream deterministically.
    """
    if name not in _STREAMS:
        raise KeyError(f"unknown substream {name!r}")
    key = (_STREAMS[name],) + tuple(int(e) for e in extra)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))
