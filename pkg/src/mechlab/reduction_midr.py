"""Single-call reduction for MIDR allocation rules.

A mask M is drawn from a distribution over agent subsets, the rule is
evaluated once with the bids of agents outside M zeroed, and agent i pays
``c_i(M)`` times the realized welfare of the other members of M, where
``c_i(M)`` is -1 when i is in M and ``pi(M + i) / pi(M)`` otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import (CallCountedOracle, DistributionError, MidrInstance, SubsetMask,
                   TableAllocation, member_matrix, member_welfare, welfare_table,
                   zero_mask_bids)
from .payments import MAX_ENUM_AGENTS


class SubsetDistribution:
    """Probability mass over all 2**n agent subsets, indexed by mask integer."""

    def __init__(self, masses, n: Optional[int] = None):
        masses = np.array(masses, dtype=float)
        if n is None:
            n = int(masses.size).bit_length() - 1
        if n > MAX_ENUM_AGENTS:
            raise ValueError(f"subset distributions are capped at n={MAX_ENUM_AGENTS}")
        if masses.shape != (1 << n,):
            raise ValueError(f"need {1 << n} masses for n={n}, got {masses.shape}")
        if not np.all(np.isfinite(masses)) or np.any(masses < 0):
            raise ValueError("masses must be finite and nonnegative")
        masses.setflags(write=False)
        self.n = n
        self.masses = masses

    def __repr__(self):
        return f"{type(self).__name__}(n={self.n})"

    @classmethod
    def uniform(cls, n: int) -> "SubsetDistribution":
        return cls(np.full(1 << n, 1.0 / (1 << n)), n)

    @classmethod
    def from_dict(cls, mass_by_members: dict, n: int) -> "SubsetDistribution":
        masses = np.zeros(1 << n)
        for members, p in mass_by_members.items():
            masses[SubsetMask.from_members(members, n).bits] = p
        return cls(masses, n)

    @property
    def precision(self) -> float:
        return float(self.masses[-1])


class ProductGammaDistribution(SubsetDistribution):
    """Each agent is dropped from M independently with probability ``gamma``."""

    def __init__(self, gamma: float, n: int):
        if not 0.0 <= gamma <= 1.0:
            raise ValueError(f"gamma={gamma} outside [0, 1]")
        self.gamma = float(gamma)
        size = member_matrix(n).sum(axis=1)
        super().__init__(gamma ** (n - size) * (1.0 - gamma) ** size, n)

    def __repr__(self):
        return f"ProductGammaDistribution(gamma={self.gamma}, n={self.n})"


@dataclass(frozen=True)
class Validation:
    ok: bool
    reason: str = ""
    mask: Optional[int] = None

    def __bool__(self):
        return self.ok


def validate_distribution(dist: SubsetDistribution, tol: float = 1e-12) -> Validation:
    total = float(dist.masses.sum())
    if abs(total - 1.0) > tol:
        return Validation(False, f"masses sum to {total!r}")
    zero = np.flatnonzero(dist.masses <= 0.0)
    if zero.size:
        return Validation(False, "zero mass makes a coefficient infinite", int(zero[0]))
    coeffs = coefficient_table(dist, check=False)
    bad = np.flatnonzero(~np.isfinite(coeffs).all(axis=1))
    if bad.size:
        return Validation(False, "infinite coefficient", int(bad[0]))
    return Validation(True)


def require_valid(dist: SubsetDistribution) -> None:
    v = validate_distribution(dist)
    if not v:
        where = "" if v.mask is None else f" (mask {v.mask:#0{dist.n + 2}b})"
        raise DistributionError(f"invalid resampling distribution: {v.reason}{where}", v.mask)


def associated_coefficient(dist: SubsetDistribution, i: int, mask: SubsetMask | int) -> float:
    m = mask.bits if isinstance(mask, SubsetMask) else int(mask)
    if m >> i & 1:
        return -1.0
    if dist.masses[m] <= 0.0:
        raise DistributionError(f"pi(M)=0 for mask {m:#b}", m)
    return float(dist.masses[m | 1 << i] / dist.masses[m])


def coefficient_table(dist: SubsetDistribution, check: bool = True) -> np.ndarray:
    """All coefficients at once as a (2**n, n) array ``c[m, i]``."""
    if check:
        require_valid(dist)
    n = dist.n
    masks = np.arange(1 << n)
    members = member_matrix(n)
    p = dist.masses
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = p[masks[:, None] | (1 << np.arange(n))[None, :]] / p[:, None]
    return np.where(members, -1.0, ratio)


def sample_subset(dist: SubsetDistribution, rng: np.random.Generator) -> SubsetMask:
    n = dist.n
    if isinstance(dist, ProductGammaDistribution):
        keep = rng.random(n) < 1.0 - dist.gamma
        return SubsetMask(int(np.dot(keep, 1 << np.arange(n))), n)
    cdf = np.cumsum(dist.masses)
    m = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return SubsetMask(min(m, (1 << n) - 1), n)


def sample_subsets(dist: SubsetDistribution, rng: np.random.Generator, size: int) -> np.ndarray:
    """``size`` i.i.d. mask integers."""
    n = dist.n
    if isinstance(dist, ProductGammaDistribution):
        keep = rng.random((size, n)) < 1.0 - dist.gamma
        return keep @ (1 << np.arange(n))
    cdf = np.cumsum(dist.masses)
    return np.minimum(np.searchsorted(cdf, rng.random(size) * cdf[-1], side="right"), (1 << n) - 1)


@dataclass(frozen=True)
class ReductionRun:
    seed: Optional[int]
    mask: SubsetMask
    bids_hat: Optional[np.ndarray]
    entry: Optional[int]
    outcome: Optional[int]
    realized_welfare: np.ndarray
    payments: np.ndarray
    oracle_calls: int


def run_generic_midr(source, b, dist: SubsetDistribution, rng: np.random.Generator,
                     seed: Optional[int] = None) -> ReductionRun:
    """One run of the reduction for an arbitrary valid ``dist``.

    ``source`` is a MidrInstance (bids ``b`` are per-outcome rows; the outcome is
    sampled from the chosen range entry) or a TableAllocation (``b`` unused; the
    table row is the realized welfare).
    """
    require_valid(dist)
    mask = sample_subset(dist, rng)
    n = mask.n
    if isinstance(source, MidrInstance):
        bids = source.valuations if b is None else np.asarray(b, dtype=float)
        if bids.shape[0] != n:
            raise ValueError("distribution and bids disagree on n")
        oracle = CallCountedOracle(source.best_entry)
        b_hat = zero_mask_bids(bids, mask)
        entry = oracle(b_hat)
        outcome = source.sample_outcome(entry, rng)
        realized = bids[:, outcome].copy()
    elif isinstance(source, TableAllocation):
        if source.n != n:
            raise ValueError("distribution and table disagree on n")
        oracle = CallCountedOracle(source)
        b_hat, entry, outcome = None, None, None
        realized = np.array(oracle(mask.bits), dtype=float)
    else:
        raise TypeError(f"unsupported allocation source {type(source).__name__}")
    coeffs = np.array([associated_coefficient(dist, i, mask) for i in range(n)])
    seen = np.where([i in mask for i in range(n)], realized, 0.0)
    payments = coeffs * (seen.sum() - seen) + 0.0  # no negative zeros in output
    return ReductionRun(seed, mask, b_hat, entry, outcome, realized, payments, oracle.calls)


def run_optmidr(inst, b, gamma: float, rng: np.random.Generator,
                seed: Optional[int] = None) -> ReductionRun:
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie strictly inside (0, 1), got {gamma}")
    return run_generic_midr(inst, b, ProductGammaDistribution(gamma, inst.n), rng, seed=seed)


def expected_payments(source, dist: SubsetDistribution, b=None,
                      coeffs: Optional[np.ndarray] = None) -> np.ndarray:
    """Exact ``sum_M pi(M) c_i(M) sum_{j != i} W_j(M)`` per agent (distribution-level welfare)."""
    w = member_welfare(welfare_table(source, b).welfare)
    c = coefficient_table(dist) if coeffs is None else coeffs
    others = w.sum(axis=1, keepdims=True) - w
    return (dist.masses[:, None] * c * others).sum(axis=0)


def expected_welfare(source, dist: SubsetDistribution, b=None) -> np.ndarray:
    """Per-agent expected welfare of the composed rule."""
    w = welfare_table(source, b).welfare
    return dist.masses @ w
