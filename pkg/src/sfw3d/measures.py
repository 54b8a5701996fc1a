"""Atoms, weighted measures, and the box-shaped parameter domain.

An atom is a generalized isotropic Gaussian bump described by five
continuous parameters: a 3D center ``m`` (voxel coordinates, sub-voxel
allowed), a scale ``sigma`` (voxels) and a shape exponent ``d``. A signal
estimate is a finite sum of non-negatively weighted atoms; the empty sum is
the valid zero measure.

All types here are immutable value objects and safe to share across
concurrent workers.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

#: number of free scalars per atom excluding the weight: m (3), sigma, d
THETA_DIM = 5


@dataclass(frozen=True)
class DomainBounds:
    """Axis-aligned box of admissible atom parameters.

    Positions are bounded per axis, ``sigma`` and ``d`` by positive
    intervals. Every atom the solvers touch is kept inside this box; it is
    also the constraint set for all local ascents/descents.
    """

    pos_lower: tuple[float, float, float]
    pos_upper: tuple[float, float, float]
    sigma_min: float
    sigma_max: float
    shape_min: float
    shape_max: float

    def __post_init__(self):
        lo = tuple(float(x) for x in self.pos_lower)
        hi = tuple(float(x) for x in self.pos_upper)
        object.__setattr__(self, "pos_lower", lo)
        object.__setattr__(self, "pos_upper", hi)
        if len(lo) != 3 or len(hi) != 3:
            raise ValueError("position bounds must have three components")
        if not all(a < b for a, b in zip(lo, hi)):
            raise ValueError(f"position bounds require lower < upper, got {lo} vs {hi}")
        if not (0.0 < self.sigma_min < self.sigma_max):
            raise ValueError("sigma bounds require 0 < sigma_min < sigma_max")
        if not (0.0 < self.shape_min < self.shape_max):
            raise ValueError("shape bounds require 0 < shape_min < shape_max")

    def contains(self, theta: "AtomParams", slack: float = 0.0) -> bool:
        """Membership test, with optional numerical slack on every face."""
        ok_pos = all(
            lo - slack <= x <= hi + slack
            for x, lo, hi in zip(theta.m, self.pos_lower, self.pos_upper)
        )
        return (
            ok_pos
            and self.sigma_min - slack <= theta.sigma <= self.sigma_max + slack
            and self.shape_min - slack <= theta.d <= self.shape_max + slack
        )


@dataclass(frozen=True)
class AtomParams:
    """Continuous parameters of one atom: center, scale, shape exponent."""

    m: tuple[float, float, float]
    sigma: float
    d: float

    def __post_init__(self):
        m = tuple(float(x) for x in self.m)
        if len(m) != 3:
            raise ValueError("atom center must have three components")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "sigma", float(self.sigma))
        object.__setattr__(self, "d", float(self.d))
        if not all(np.isfinite(self.to_array())):
            raise ValueError(f"non-finite atom parameters: {self}")

    def to_array(self) -> np.ndarray:
        """Pack as ``[m_x, m_y, m_z, sigma, d]``."""
        return np.array([*self.m, self.sigma, self.d])

    @classmethod
    def from_array(cls, vec) -> "AtomParams":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (THETA_DIM,):
            raise ValueError(f"expected {THETA_DIM} components, got shape {vec.shape}")
        return cls(m=tuple(vec[:3]), sigma=vec[3], d=vec[4])


@dataclass(frozen=True)
class WeightedMeasure:
    """Finite sum of non-negatively weighted atoms, in insertion order."""

    atoms: tuple[tuple[AtomParams, float], ...] = ()

    def __post_init__(self):
        pairs = tuple((theta, float(w)) for theta, w in self.atoms)
        object.__setattr__(self, "atoms", pairs)
        for theta, w in pairs:
            if not isinstance(theta, AtomParams):
                raise TypeError(f"expected AtomParams, got {type(theta).__name__}")
            if not np.isfinite(w) or w < 0.0:
                raise ValueError(f"weights must be finite and >= 0, got {w}")

    def __len__(self) -> int:
        return len(self.atoms)

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for _, w in self.atoms])

    @property
    def thetas(self) -> tuple[AtomParams, ...]:
        return tuple(theta for theta, _ in self.atoms)

    @classmethod
    def empty(cls) -> "WeightedMeasure":
        return cls(())

    @classmethod
    def from_pairs(cls, thetas, weights) -> "WeightedMeasure":
        thetas = tuple(thetas)
        weights = np.asarray(weights, dtype=float)
        if len(thetas) != weights.size:
            raise ValueError("atom count and weight count differ")
        return cls(tuple(zip(thetas, weights.tolist())))


def total_mass(measure: WeightedMeasure) -> float:
    """Sum of the weights (the mass-penalty term of the fitting criterion)."""
    return float(sum(w for _, w in measure.atoms))


def prune_zero_weights(measure: WeightedMeasure, tol: float = 0.0) -> WeightedMeasure:
    """Drop every atom whose weight is <= ``tol``, preserving order."""
    if tol < 0.0:
        raise ValueError("prune tolerance must be >= 0")
    return WeightedMeasure(tuple(p for p in measure.atoms if p[1] > tol))


def default_prune_tol(measure: WeightedMeasure, rel: float = 1e-10) -> float:
    """Relative pruning threshold: ``rel`` times the largest weight.

    Weight solvers return numerically small rather than exactly-zero
    weights, so "zero-weighted" is interpreted relative to the scale of the
    measure at hand.
    """
    if len(measure) == 0:
        return 0.0
    return rel * float(np.max(measure.weights))


def clamp_to_domain(theta: AtomParams, bounds: DomainBounds) -> AtomParams:
    """Project each parameter onto its bound interval. Idempotent."""
    m = tuple(
        min(max(x, lo), hi)
        for x, lo, hi in zip(theta.m, bounds.pos_lower, bounds.pos_upper)
    )
    sigma = min(max(theta.sigma, bounds.sigma_min), bounds.sigma_max)
    d = min(max(theta.d, bounds.shape_min), bounds.shape_max)
    return AtomParams(m=m, sigma=sigma, d=d)


# --- plain-text serialization -------------------------------------------
#
# One record per atom: w m_x m_y m_z sigma d, whitespace-separated, full
# float precision. Lines starting with '#' are comments. Used for ground
# truth files and solver output.


def measure_to_text(measure: WeightedMeasure) -> str:
    lines = ["# w m_x m_y m_z sigma d"]
    for theta, w in measure.atoms:
        fields = [w, *theta.m, theta.sigma, theta.d]
        lines.append(" ".join(repr(float(x)) for x in fields))
    return "\n".join(lines) + "\n"


def measure_from_text(text: str) -> WeightedMeasure:
    pairs = []
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ValueError(f"line {ln}: expected 6 fields, got {len(parts)}")
        w, mx, my, mz, sigma, d = (float(p) for p in parts)
        pairs.append((AtomParams(m=(mx, my, mz), sigma=sigma, d=d), w))
    return WeightedMeasure(tuple(pairs))


def save_measure(measure: WeightedMeasure, path) -> None:
    Path(path).write_text(measure_to_text(measure))


def load_measure(path) -> WeightedMeasure:
    return measure_from_text(Path(path).read_text())
