"""Counter-based keyed random stream for the stochastic baselines.

The construction below is a repository constant: the format defines
reproducibility, not a library's generator internals. Identical
(seed, lane, tensor name, flat index) always yields the same uniform draw,
on any platform, in any iteration order, at any thread count.

    name_key  = first 8 bytes of SHA-256(utf-8 name), little-endian u64
    k         = mix64((seed XOR name_key) + lane * GOLDEN)
    u_i       = mix64(k + i * GOLDEN)                    (i = flat index)
    uniform_i = (u_i >> 11) * 2^-53                      (in [0, 1))

with mix64 the splitmix64 finalizer and GOLDEN = 0x9E3779B97F4A7C15, all
arithmetic mod 2^64. A frozen test vector pins the stream.
"""

from __future__ import annotations

import hashlib

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def mix64(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def name_key(name: str) -> np.uint64:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return np.frombuffer(digest[:8], dtype="<u8")[0]


def stream_key(seed: int, name: str, lane: int = 0) -> np.uint64:
    with np.errstate(over="ignore"):
        raw = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ name_key(name)
        shifted = raw + np.uint64(lane) * GOLDEN
    return mix64(shifted)[()]


def uniforms(seed: int, name: str, count: int, lane: int = 0) -> np.ndarray:
    """The first ``count`` uniform draws of the (seed, lane, name) stream."""
    k = stream_key(seed, name, lane)
    idx = np.arange(count, dtype=np.uint64)
    with np.errstate(over="ignore"):
        u = mix64(k + idx * GOLDEN)
    return (u >> np.uint64(11)).astype(np.float64) * 2.0**-53


def drop_mask(seed: int, name: str, count: int, drop_rate: float, lane: int = 0) -> np.ndarray:
    """True where an element is dropped (probability ``drop_rate``)."""
    return uniforms(seed, name, count, lane) < drop_rate
