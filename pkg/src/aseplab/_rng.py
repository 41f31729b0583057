"""Splittable counter-based random streams.

Every random draw in the simulator comes from a stream keyed by
(seed, tag, site).  A stream is a splitmix64 sequence: the state advances
by a fixed odd increment and the output is an avalanche mix of the state.
Streams at distinct (tag, site) keys are independent of each other, so
enlarging the simulation window cannot perturb the draws made at sites
that were already present.

The numba-jitted helpers below are shared by the event kernels; the
pure-python mirrors (used by the reference implementations) reproduce the
exact same sequences via masked integer arithmetic.
"""

from __future__ import annotations

import numpy as np
from numba import njit, uint64

U64 = np.uint64
GOLD = U64(0x9E3779B97F4A7C15)
_MASK = (1 << 64) - 1

# stream purposes
TAG_CLOCK = 1      # jump-attempt interarrivals and direction coins
TAG_INIT = 2       # initial occupancy draws
TAG_MARK = 3       # per-label mark assignment
TAG_PRIORITY = 4   # priority-label initial draw
TAG_MARKCLOCK = 5  # independent clocks for the alternative mark dynamics

_INV_2_53 = 1.0 / 9007199254740992.0


@njit(uint64(uint64), cache=True, inline="always")
def mix64(z):
    z = (z ^ (z >> U64(30))) * U64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> U64(27))) * U64(0x94D049BB133111EB)
    return z ^ (z >> U64(31))


@njit(uint64(uint64, uint64, uint64), cache=True, inline="always")
def stream_init(seed, tag, site):
    # site is passed through two's complement, so negative sites are fine
    s = mix64(U64(seed) + GOLD * U64(site))
    return mix64(s ^ mix64(U64(tag) + GOLD))


@njit(cache=True, inline="always")
def next_u64(states, i):
    states[i] += GOLD
    return mix64(states[i])


@njit(cache=True, inline="always")
def next_unit(states, i):
    """Uniform draw in the open interval (0, 1)."""
    x = next_u64(states, i)
    return (np.float64(x >> U64(11)) + 0.5) * _INV_2_53


@njit(cache=True, inline="always")
def next_exp(states, i):
    return -np.log(next_unit(states, i))


def _py_mix64(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def py_stream_init(seed: int, tag: int, site: int) -> int:
    s = _py_mix64((seed + 0x9E3779B97F4A7C15 * site) & _MASK)
    return _py_mix64(s ^ _py_mix64((tag + 0x9E3779B97F4A7C15) & _MASK))


def py_next_unit(state: int) -> tuple[int, float]:
    """Advance a python-side stream; returns (new_state, uniform in (0,1))."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    x = _py_mix64(state)
    return state, ((x >> 11) + 0.5) * _INV_2_53


def derive_seed(master: int, *parts: int) -> int:
    """Deterministic sub-seed from a master seed and integer labels.

    Used to give each replica (and each experiment family) its own
    independent stream universe.
    """
    s = master & _MASK
    for part in parts:
        s = _py_mix64((s ^ _py_mix64((part + 0x632BE59BD9B4E019) & _MASK)) & _MASK)
    return s
