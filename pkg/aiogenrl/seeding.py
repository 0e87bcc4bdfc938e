"""Define seed derivation and random streams.

Streams use numpy's ``PCG64`` bit generator. Child seeds are derived with the
splitmix64 finalizer so that the stream an agent or environment draws from
depends only on ``(base, index)`` and never on scheduling order.
"""
import numpy as np

MASK64: int = 0xFFFFFFFFFFFFFFFF
GOLDEN_GAMMA: int = 0x9E3779B97F4A7C15

SALT_INIT: int = 0x1
SALT_ACTIONS: int = 0x2
SALT_MINIBATCH: int = 0x3
SALT_NOISE: int = 0x4
SALT_SPLIT: int = 0x5
SALT_LAYOUT: int = 0x6


def splitmix64(value: int) -> int:
    """Return the splitmix64 finalizer of ``value``."""
    z = value & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def mix_seed(base: int, index: int) -> int:
    """Derive the 64-bit child seed number ``index`` of ``base``.

    :param base: Parent seed
    :type base: ``int``
    :param index: Child index, any non-negative integer
    :type index: ``int``
    :rtype: ``int``
    """
    return splitmix64((base + GOLDEN_GAMMA * (index + 1)) & MASK64)


def make_rng(seed: int) -> np.random.Generator:
    """Return a ``PCG64`` generator for a 64-bit seed."""
    return np.random.Generator(np.random.PCG64(seed & MASK64))


def child_rng(base: int, *path: int) -> np.random.Generator:
    """Return the generator at ``path`` below ``base``."""
    seed = base
    for index in path:
        seed = mix_seed(seed, index)
    return make_rng(seed)
