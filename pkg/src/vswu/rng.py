"""Deterministic randomness, fixed in one place.

Every random draw in the package (parameter init, data synthesis, shuffling,
augmentation) flows from a single base seed through :func:`derive`, which
folds a chain of string/int tokens into a 64-bit stream seed with the
splitmix64 finalizer.  The stream itself is numpy's PCG64.  Identical
``(seed, *tokens)`` always produces an identical generator, independent of
call order anywhere else in the program.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _mix(x: int) -> int:
    # splitmix64 finalizer: full-avalanche 64-bit mix
    x &= _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


def derive(seed: int, *tokens: str | int) -> int:
    """Collapse ``(seed, tokens)`` into one 64-bit stream seed.

    Tokens may be strings (e.g. a parameter name, "shuffle") or integers
    (e.g. an epoch number); each is folded in 8 bytes at a time.
    """
    h = _mix(int(seed) + 0x9E3779B97F4A7C15)
    for tok in tokens:
        if isinstance(tok, str):
            data = tok.encode("utf-8")
        elif isinstance(tok, (int, np.integer)):
            data = int(tok).to_bytes(8, "little", signed=True)
        else:
            raise TypeError(f"unsupported seed token: {tok!r}")
        for i in range(0, len(data), 8):
            chunk = int.from_bytes(data[i : i + 8], "little")
            h = _mix(h ^ chunk)
    return h


def generator(seed: int, *tokens: str | int) -> np.random.Generator:
    """A PCG64 generator seeded by ``derive(seed, *tokens)``."""
    return np.random.Generator(np.random.PCG64(derive(seed, *tokens)))


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) resampled until all values lie within two stddevs."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out
