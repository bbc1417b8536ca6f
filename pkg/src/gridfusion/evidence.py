"""Dempster-Shafer evidence over the two-hypothesis frame {free, occupied}.

A cell's evidence is the pair of singleton masses; the mass on the whole
frame (ignorance) is implicit as the remainder to one and the empty set
always carries zero mass.  All operations are pure functions on value
types and safe to call from any number of threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import TotalConflict

__all__ = [
    "CONFLICT_EPS",
    "UNKNOWN",
    "BeliefMass",
    "CombinationResult",
    "combine",
    "combine_arrays",
    "pignistic_probability",
    "pignistic_array",
    "shannon_entropy",
    "binary_entropy",
    "non_specificity",
    "belief_plausibility",
]

#: Combination is rejected once the normalizer 1 - K drops below this.
CONFLICT_EPS = 1e-12

# Slack for floating-point dust on the simplex constraints.
_MASS_TOL = 1e-9


@dataclass(frozen=True)
class BeliefMass:
    """Singleton belief masses of one grid cell.

    ``occupied + free <= 1``; the remainder is the ignorance mass assigned
    to the whole frame.  ``BeliefMass(0, 0)`` is total ignorance.
    """

    occupied: float
    free: float

    def __post_init__(self):
        if not (-_MASS_TOL <= self.occupied <= 1.0 + _MASS_TOL):
            raise ValueError(f"occupied mass {self.occupied} outside [0, 1]")
        if not (-_MASS_TOL <= self.free <= 1.0 + _MASS_TOL):
            raise ValueError(f"free mass {self.free} outside [0, 1]")
        if self.occupied + self.free > 1.0 + _MASS_TOL:
            raise ValueError(
                f"masses sum to {self.occupied + self.free} > 1"
            )

    @property
    def ignorance(self) -> float:
        """Mass on the whole frame (lack of evidence)."""
        return max(0.0, 1.0 - self.occupied - self.free)


#: Total ignorance; the neutral element of combination.
UNKNOWN = BeliefMass(0.0, 0.0)


@dataclass(frozen=True)
class CombinationResult:
    fused: BeliefMass
    conflict: float


def combine(a: BeliefMass, b: BeliefMass) -> CombinationResult:
    """Combine two cell masses with Dempster's rule.

    The conflicting mass K (occupied meeting free) is discarded and the
    agreeing products are renormalized by 1 - K.  Commutative.

    Raises:
        TotalConflict: the sources contradict almost entirely
            (1 - K < CONFLICT_EPS); callers decide the reset policy.
    """
    conflict = a.occupied * b.free + a.free * b.occupied
    denom = 1.0 - conflict
    if denom < CONFLICT_EPS:
        raise TotalConflict(f"conflict K={conflict} leaves no compatible evidence")
    ig_a = a.ignorance
    ig_b = b.ignorance
    occ = (a.occupied * b.occupied + a.occupied * ig_b + ig_a * b.occupied) / denom
    fre = (a.free * b.free + a.free * ig_b + ig_a * b.free) / denom
    occ = min(max(occ, 0.0), 1.0)
    fre = min(max(fre, 0.0), 1.0)
    return CombinationResult(BeliefMass(occ, fre), conflict)


def combine_arrays(occ_a, free_a, occ_b, free_b):
    """Vectorized Dempster combination over matching mass arrays.

    Entries whose normalizer vanishes (total conflict) are returned as
    UNKNOWN with the corresponding mask entry set; resolving them is the
    caller's policy.

    Returns:
        (occupied, free, conflict, total_conflict_mask) arrays.
    """
    occ_a = np.asarray(occ_a, dtype=float)
    free_a = np.asarray(free_a, dtype=float)
    occ_b = np.asarray(occ_b, dtype=float)
    free_b = np.asarray(free_b, dtype=float)
    ig_a = np.clip(1.0 - occ_a - free_a, 0.0, 1.0)
    ig_b = np.clip(1.0 - occ_b - free_b, 0.0, 1.0)
    conflict = occ_a * free_b + free_a * occ_b
    denom = 1.0 - conflict
    dead = denom < CONFLICT_EPS
    safe = np.where(dead, 1.0, denom)
    occ = (occ_a * occ_b + occ_a * ig_b + ig_a * occ_b) / safe
    fre = (free_a * free_b + free_a * ig_b + ig_a * free_b) / safe
    occ = np.clip(occ, 0.0, 1.0)
    fre = np.clip(fre, 0.0, 1.0)
    occ[dead] = 0.0
    fre[dead] = 0.0
    return occ, fre, conflict, dead


def pignistic_probability(mass: BeliefMass) -> float:
    """Point probability of occupancy: ignorance split evenly."""
    return mass.occupied + 0.5 * mass.ignorance


def pignistic_array(occupied, free):
    """Array form of the pignistic occupancy probability."""
    occupied = np.asarray(occupied, dtype=float)
    free = np.asarray(free, dtype=float)
    ignorance = np.clip(1.0 - occupied - free, 0.0, 1.0)
    return occupied + 0.5 * ignorance


def binary_entropy(p):
    """Entropy in bits of a Bernoulli probability; 0*log2(0) is 0."""
    p = np.asarray(p, dtype=float)
    q = 1.0 - p
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(p > 0.0, p * np.log2(p), 0.0) - np.where(
            q > 0.0, q * np.log2(q), 0.0
        )
    return h


def shannon_entropy(mass: BeliefMass) -> float:
    """Cell entropy in bits of the pignistic occupancy probability."""
    return float(binary_entropy(pignistic_probability(mass)))


def non_specificity(mass: BeliefMass) -> float:
    """Uncertainty from lack of evidence; equals the ignorance mass for a
    two-element frame."""
    return mass.ignorance


def belief_plausibility(mass: BeliefMass, hypothesis: str) -> tuple[float, float]:
    """Lower and upper probability bounds for one hypothesis.

    ``hypothesis`` is ``"occupied"`` or ``"free"``.  The pignistic
    probability always lies between the two bounds.
    """
    if hypothesis == "occupied":
        return mass.occupied, mass.occupied + mass.ignorance
    if hypothesis == "free":
        return mass.free, mass.free + mass.ignorance
    raise ValueError(f"unknown hypothesis {hypothesis!r}")
