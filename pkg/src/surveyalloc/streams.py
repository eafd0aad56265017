"""Counter-based random streams.

Every random quantity in a simulation is a pure function of a 64-bit key and
integer coordinates (question, draw number, lane).  Nothing is carried between
draws, so the j-th pair drawn for question q is the same no matter which policy
asked for it or in what order replications run.

Mixing uses the SplitMix64 finalizer.  Uniforms take the top 53 bits and are
shifted half a step, so they lie strictly inside (0, 1); normals are obtained
by the inverse normal CDF.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_ODD = np.uint64(0xD1B54A32D192ED03)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_TWO_M53 = 2.0**-53

# lanes keep independent quantities drawn at the same coordinate apart
LANE_SIGNAL = 0
LANE_LLM_NOISE = 1
LANE_HUMAN_NOISE = 2
LANE_ROW = 3
LANE_EXPLORE = 4
LANE_PICK = 5
LANE_CHOICE_HUMAN = 6
LANE_CHOICE_LLM = 7


def mix64(x):
    """SplitMix64 finalizer on a uint64 array (wrapping arithmetic)."""
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        x = (x ^ (x >> _S30)) * _M1
        x = (x ^ (x >> _S27)) * _M2
    return x ^ (x >> _S31)


def derive_key(*parts: int) -> np.uint64:
    """Fold integer coordinates into a single 64-bit stream key.

    ``derive_key(seed, a, b)`` differs from ``derive_key(seed, b, a)``; each
    part is absorbed in order.
    """
    h = mix64(np.uint64(0x243F6A8885A308D3))
    for p in parts:
        p = int(p) & 0xFFFFFFFFFFFFFFFF
        with np.errstate(over="ignore"):
            h = mix64(h ^ (np.uint64(p) + _GOLDEN))
    return np.uint64(h)


def hash_coords(key, comp, j, lane: int):
    """Hash (key, comp, j, lane) elementwise; arguments broadcast."""
    key = np.asarray(key, dtype=np.uint64)
    comp = np.asarray(comp).astype(np.uint64)
    j = np.asarray(j).astype(np.uint64)
    with np.errstate(over="ignore"):
        h = mix64(key ^ mix64(comp * _GOLDEN + np.uint64(lane)))
        h = mix64(h + j * _ODD)
    return h


def uniform(key, comp, j, lane: int) -> np.ndarray:
    h = hash_coords(key, comp, j, lane)
    return ((h >> _S11).astype(np.float64) + 0.5) * _TWO_M53


def normal(key, comp, j, lane: int) -> np.ndarray:
    return ndtri(uniform(key, comp, j, lane))


def integers(key, comp, j, lane: int, high) -> np.ndarray:
    """Uniform integers in ``[0, high)``; ``high`` broadcasts."""
    high = np.asarray(high)
    u = uniform(key, comp, j, lane)
    return np.minimum((u * high).astype(np.int64), high - 1)
