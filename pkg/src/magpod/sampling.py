"""Quasi-random design of experiments over the parameter box.

Points come from a Sobol sequence in Gray-code order, built from the
standard Joe-Kuo direction numbers (embedded below for dimensions up to 8,
so the sequence is bit-reproducible with no external table). Index 0 of the
sequence is the origin and is always skipped; plans consume the surviving
global sequence in order, so a plan of size 15 is a prefix of the plan of
size 31 from the same configuration.
"""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import SequenceExhaustedError, UnsupportedDimensionError
from .testbed import DEFAULT_BOUNDS, ParamPoint, is_feasible

__all__ = [
    "DesignPlan",
    "sobol_unit",
    "scale_to_bounds",
    "plan_dataset",
    "MAX_POINTS",
]

MAX_DIMENSION = 8
MAX_POINTS = 2 ** 16
_BITS = 32

# Joe-Kuo "new" direction-number table, dimensions 2..8.
# Rows: (degree s, polynomial coefficient code a, initial m_1..m_s).
_JOE_KUO = (
    (1, 0, (1,)),
    (2, 1, (1, 3)),
    (3, 1, (1, 3, 1)),
    (3, 2, (1, 1, 1)),
    (4, 1, (1, 1, 3, 3)),
    (4, 4, (1, 3, 5, 13)),
    (5, 2, (1, 1, 5, 5, 17)),
)


def _direction_integers(dim):
    """Direction integers V[d, k] scaled to _BITS bits, k = 1.._BITS."""
    V = np.zeros((dim, _BITS + 1), dtype=np.uint64)
    V[0, 1:] = np.uint64(1) << np.arange(_BITS - 1, -1, -1, dtype=np.uint64)
    for d in range(1, dim):
        s, a, m_init = _JOE_KUO[d - 1]
        m = list(m_init)
        for k in range(s, _BITS):
            new = m[k - s] ^ (m[k - s] << s)
            for i in range(1, s):
                if (a >> (s - 1 - i)) & 1:
                    new ^= m[k - i] << i
            m.append(new)
        for k in range(1, _BITS + 1):
            V[d, k] = np.uint64(m[k - 1]) << np.uint64(_BITS - k)
    return V


def _lowest_zero_bit(i):
    """1-based index of the lowest zero bit of i."""
    c = 1
    while i & 1:
        i >>= 1
        c += 1
    return c


def _sobol_stream(d, skip=1):
    """Yield Sobol points one at a time, starting at sequence index ``skip``."""
    V = _direction_integers(d)
    x = np.zeros(d, dtype=np.uint64)
    scale = float(2 ** _BITS)
    for i in range(1, MAX_POINTS):
        x ^= V[:, _lowest_zero_bit(i - 1)]
        if i >= skip:
            yield x / scale


def sobol_unit(m, d, skip=1):
    """First ``m`` Sobol points in (0,1)^d, starting at sequence index ``skip``.

    Gray-code construction; with the default ``skip=1`` the all-zeros point
    at index 0 never appears, so every coordinate lies strictly inside (0,1).
    """
    if not 1 <= d <= MAX_DIMENSION:
        raise UnsupportedDimensionError(
            f"Sobol dimension must be in [1, {MAX_DIMENSION}], got {d}"
        )
    if m < 0 or m + skip > MAX_POINTS:
        raise ValueError(f"requested {m} points at skip {skip}, cap is {MAX_POINTS}")
    out = np.empty((m, d), dtype=float)
    stream = _sobol_stream(d, skip=skip)
    for row in range(m):
        out[row] = next(stream)
    return out


def scale_to_bounds(points, bounds):
    """Affinely map unit-cube points onto the parameter box.

    Each row becomes a ParamPoint via ``lower + x * (upper - lower)``;
    x = 0 and x = 1 hit the bounds exactly.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    lo = np.array([b[0] for b in bounds], dtype=float)
    hi = np.array([b[1] for b in bounds], dtype=float)
    if np.any(lo >= hi):
        raise ValueError("bounds must satisfy lower < upper per component")
    if points.shape[1] != len(bounds):
        raise ValueError(
            f"points have {points.shape[1]} columns, bounds cover {len(bounds)}"
        )
    return [ParamPoint(tuple(lo + x * (hi - lo)), tuple(bounds)) for x in points]


@dataclass(frozen=True)
class DesignPlan:
    """Feasible design points taken in order from the global Sobol sequence."""

    skip: int
    requested: int
    accepted: tuple = field(default_factory=tuple)
    rejected_count: int = 0
    consumed: int = 0

    def to_dict(self):
        return {
            "skip": self.skip,
            "requested": self.requested,
            "accepted": [list(p.values) for p in self.accepted],
            "rejected_count": self.rejected_count,
            "consumed": self.consumed,
        }


def plan_dataset(target, cfg, bounds=DEFAULT_BOUNDS, skip=1):
    """Consume the Sobol sequence until ``target`` feasible points are found.

    The same global sequence is walked regardless of target, so plans of
    increasing size are prefix-nested. Raises SequenceExhaustedError if the
    cap of 2**16 sequence points is hit first.
    """
    if target < 1:
        raise ValueError(f"target must be >= 1, got {target}")
    accepted = []
    rejected = 0
    for x in _sobol_stream(len(bounds), skip=skip):
        (p,) = scale_to_bounds(x[None, :], bounds)
        if is_feasible(p, cfg):
            accepted.append(p)
            if len(accepted) == target:
                break
        else:
            rejected += 1
    else:
        raise SequenceExhaustedError(
            f"only {len(accepted)} of {target} feasible points within "
            f"{MAX_POINTS} sequence entries"
        )
    return DesignPlan(
        skip=skip,
        requested=target,
        accepted=tuple(accepted),
        rejected_count=rejected,
        consumed=len(accepted) + rejected,
    )
