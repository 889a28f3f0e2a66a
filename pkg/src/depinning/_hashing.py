"""Counter-based hashing used to draw reproducible site energies.

Every random quantity in the package is a pure function of a 64-bit seed,
a stream number and integer lattice coordinates. The mixer is the
splitmix64 finalizer; uniforms take the top 53 bits of the hash.
"""

import numpy as np
from numba import njit

MASK64 = (1 << 64) - 1

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0


@njit(cache=True)
def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True)
def site_hash(seed, stream, coords):
    h = mix64(seed + _GOLDEN * np.uint64(stream + 1))
    for c in coords:
        h = mix64((h ^ np.uint64(c)) + _GOLDEN)
    return h


@njit(cache=True)
def site_uniform(seed, stream, coords):
    """Uniform in [0, 1) from the top 53 bits of the site hash."""
    return float(site_hash(seed, stream, coords) >> _S11) * _INV53


def _mix64_py(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, index: int) -> int:
    """Child seed for Monte Carlo sample ``index``; independent of traversal order."""
    return _mix64_py(_mix64_py(seed ^ 0x5851F42D4C957F2D) + (index & MASK64) * 0x9E3779B97F4A7C15)


def as_seed(seed: int) -> np.uint64:
    return np.uint64(int(seed) & MASK64)
