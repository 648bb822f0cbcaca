"""Pay-per-click ad auctions where the auctioneer only knows estimated CTRs.

Two settings: separable CTRs (slot factor times ad factor, one value per click)
handled by BKS, and slot-dependent CTRs and values handled by the MIDR
reduction. Clicks are Bernoulli draws on the true CTR and payments are charged
on measured (clicked) values.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import (CallCountedOracle, ConfigurationError, MidrInstance, SingleParamAllocation,
                   SubsetMask, member_matrix)
from .reduction_midr import ProductGammaDistribution, coefficient_table, sample_subsets
from .reduction_sp import bks_coefficients, bks_transform
from .verify import UtilitySampler

MAX_ASSIGNMENT_SIDE = 6


# ---------------------------------------------------------------------------
# the two-slot example with a skewed CTR estimate


@dataclass(frozen=True)
class AppendixAReport:
    u_truth: float
    u_lie: float
    profitable: bool
    estimated_order_holds: bool
    lying_condition: bool

    def as_dict(self) -> dict:
        return {"u_truth": self.u_truth, "u_lie": self.u_lie, "profitable": self.profitable,
                "estimated_order_holds": self.estimated_order_holds,
                "lying_condition": self.lying_condition}


def appendix_a_example(c1: float = 0.1, c2: float = 0.09, b1: float = 1.1, b2: float = 1.0,
                       alpha: float = 1.1) -> AppendixAReport:
    """Utility of advertiser 1 bidding truthfully vs. bidding zero when slot 1's
    CTR is overestimated by ``alpha``."""
    est1 = alpha * c1
    price = (est1 * b2 - c2 * b2) / est1
    u_truth = c1 * (b1 - price)
    u_lie = c2 * b1
    order = est1 * b1 + c2 * b2 >= est1 * b2 + c2 * b1
    lying = est1 * b1 + c2 * b2 < est1 * b2 + alpha * c2 * b1
    return AppendixAReport(u_truth, u_lie, u_lie > u_truth, order, lying)


# ---------------------------------------------------------------------------
# separable CTRs


@dataclass(frozen=True)
class PpcSeparableInstance:
    slot_factors: np.ndarray
    ad_factors: np.ndarray
    est_slot_factors: np.ndarray
    est_ad_factors: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        for name in ("slot_factors", "ad_factors", "est_slot_factors", "est_ad_factors", "values"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        a, ea = self.slot_factors, self.est_slot_factors
        if a.shape != ea.shape or self.ad_factors.shape != self.est_ad_factors.shape:
            raise ConfigurationError("true and estimated factors differ in shape")
        if self.values.shape != self.ad_factors.shape:
            raise ConfigurationError("one value per click per advertiser")
        factors = np.concatenate([a, self.ad_factors])
        if np.any(factors <= 0) or np.any(factors > 1):
            raise ConfigurationError("true CTR factors must lie in (0, 1]")
        if np.any(np.diff(a) > 0):
            raise ConfigurationError("slot factors must be listed in descending order")
        if np.any(ea <= 0) or np.any(self.est_ad_factors <= 0):
            raise ConfigurationError("estimated factors must be positive")
        hi, lo = np.triu_indices(len(a), 1)
        # estimates must rank slots the same way as the true factors
        if np.any((a[hi] > a[lo]) & (ea[hi] < ea[lo])):
            raise ConfigurationError("estimated slot factors are not order-consistent")

    @property
    def n(self) -> int:
        return len(self.ad_factors)

    @property
    def m(self) -> int:
        return len(self.slot_factors)

    @classmethod
    def appendix_a(cls, alpha: float = 1.1) -> "PpcSeparableInstance":
        return cls([0.1, 0.09], [1.0, 1.0], [alpha * 0.1, 0.09], [1.0, 1.0], [1.1, 1.0])


def rank_slots(scores: np.ndarray, est_slot_factors: np.ndarray) -> np.ndarray:
    """Slot of every ad (-1 if none) for rows of estimated scores.

    Ads are ranked by score (ties to the lower index) and matched to slots in
    descending estimated factor; a zero bid still takes a leftover slot.
    """
    scores = np.atleast_2d(scores)
    rows, n = scores.shape
    slot_order = np.argsort(-np.asarray(est_slot_factors), kind="stable")
    order = np.argsort(-scores, axis=1, kind="stable")
    slots = np.full((rows, n), -1)
    k = min(n, len(slot_order))
    r = np.arange(rows)[:, None]
    top = order[:, :k]
    slots[r, top] = slot_order[None, :k]
    return slots


@dataclass(frozen=True)
class NaiveVcgOutcome:
    slots: np.ndarray
    price_per_click: np.ndarray


def ppc_naive_vcg(inst: PpcSeparableInstance, bids) -> NaiveVcgOutcome:
    """Welfare-maximizing assignment and Clarke per-click prices, all under estimated CTRs."""
    b = np.asarray(bids, dtype=float)
    est_a = np.append(inst.est_slot_factors, 0.0)
    beta = inst.est_ad_factors

    def assignment(active):
        scores = np.where(active, beta * b, -np.inf)
        return np.where(active, rank_slots(scores, inst.est_slot_factors)[0], -1)

    def others_welfare(slots, i):
        return sum(est_a[s] * beta[j] * b[j] for j, s in enumerate(slots) if j != i)

    full = np.ones(inst.n, dtype=bool)
    slots = assignment(full)
    prices = np.zeros(inst.n)
    for i in range(inst.n):
        if slots[i] < 0:
            continue
        without = full.copy()
        without[i] = False
        pay = others_welfare(assignment(without), i) - others_welfare(slots, i)
        prices[i] = pay / (est_a[slots[i]] * beta[i])
    return NaiveVcgOutcome(slots, prices)


class PpcSeparableAllocation(SingleParamAllocation):
    """Assignment by estimated scores; each ad's level is its true CTR in its slot."""

    def __init__(self, inst: PpcSeparableInstance):
        self.inst = inst
        self.a_max = float(inst.slot_factors.max() * inst.ad_factors.max())

    def evaluate_many(self, bids):
        slots = rank_slots(bids * self.inst.est_ad_factors, self.inst.est_slot_factors)
        a = np.append(self.inst.slot_factors, 0.0)
        return a[slots] * self.inst.ad_factors

    def own_breakpoints(self, i, b):
        scores = np.delete(np.asarray(b, dtype=float) * self.inst.est_ad_factors, i)
        return np.concatenate([[0.0], scores / self.inst.est_ad_factors[i]])


def ppc_sp_allocation(inst: PpcSeparableInstance) -> PpcSeparableAllocation:
    return PpcSeparableAllocation(inst)


def true_ctrs(inst: PpcSeparableInstance, slots: np.ndarray) -> np.ndarray:
    a = np.append(inst.slot_factors, 0.0)
    return a[slots] * inst.ad_factors


class NaiveVcgSampler(UtilitySampler):
    """Advertiser ``i`` under naive VCG: pays the per-click price on each click."""

    def __init__(self, inst: PpcSeparableInstance, i: int, bids=None):
        self.inst, self.i = inst, i
        self.bids = inst.values if bids is None else np.asarray(bids, dtype=float)
        self.oracle = None

    def draw(self, rng, size):
        return rng.random(size)

    def utilities(self, report, draws):
        b = self.bids.copy()
        b[self.i] = report
        out = ppc_naive_vcg(self.inst, b)
        ctr = true_ctrs(self.inst, out.slots)[self.i]
        clicks = draws < ctr
        return clicks * (self.inst.values[self.i] - out.price_per_click[self.i])


class PpcBksSampler(UtilitySampler):
    """Advertiser ``i`` under BKS over the estimated-CTR rule, charged per click."""

    def __init__(self, inst: PpcSeparableInstance, i: int, gamma: float, bids=None):
        self.inst, self.i, self.gamma = inst, i, float(gamma)
        self.bids = inst.values if bids is None else np.asarray(bids, dtype=float)
        self.oracle = CallCountedOracle(ppc_sp_allocation(inst))

    def draw(self, rng, size):
        shape = (size, self.inst.n)
        return rng.random(shape), rng.random(shape), rng.random(size)

    def utilities(self, report, draws):
        u_keep, u_x, u_click = draws
        b = self.bids.copy()
        b[self.i] = report
        b_hat, kept = bks_transform(b, self.gamma, u_keep, u_x)
        ctr = self.oracle.evaluate_many(b_hat)[:, self.i]
        clicks = u_click < ctr
        c = bks_coefficients(b, kept, self.gamma)[:, self.i]
        return clicks * (self.inst.values[self.i] - report * c)


# ---------------------------------------------------------------------------
# slot-dependent CTRs and values


@dataclass(frozen=True)
class PpcMultiInstance:
    ctr: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        c = np.array(self.ctr, dtype=float)
        v = np.array(self.values, dtype=float)
        if c.ndim != 2 or c.shape != v.shape:
            raise ConfigurationError("ctr and values must be matching (n, m) matrices")
        if np.any(c <= 0) or np.any(c > 1):
            raise ConfigurationError("CTRs must lie in (0, 1]")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ConfigurationError("values per click must be finite and >= 0")
        c.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "ctr", c)
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.ctr.shape[0]

    @property
    def m(self) -> int:
        return self.ctr.shape[1]

    @classmethod
    def random(cls, rng: np.random.Generator, n: int, m: int) -> "PpcMultiInstance":
        return cls(rng.uniform(0.02, 0.3, size=(n, m)), rng.uniform(0.5, 3.0, size=(n, m)))


def assignments(n: int, m: int) -> list:
    """All one-to-one assignments filling min(n, m) slots, as slot-of-ad tuples
    (-1 for no slot), in lexicographic enumeration order."""
    if max(n, m) > MAX_ASSIGNMENT_SIDE:
        raise ValueError(f"exhaustive assignment is capped at {MAX_ASSIGNMENT_SIDE} per side")
    out = []
    if n >= m:
        for ads in itertools.permutations(range(n), m):
            slot_of = [-1] * n
            for slot, ad in enumerate(ads):
                slot_of[ad] = slot
            out.append(tuple(slot_of))
    else:
        out = [tuple(p) for p in itertools.permutations(range(m), n)]
    return out


def assignment_values(inst: PpcMultiInstance, bids=None) -> tuple:
    """``(outcomes, matrix)`` with ``matrix[i, k]`` agent i's expected value
    (CTR times per-click bid) under outcome k."""
    bids = inst.values if bids is None else np.asarray(bids, dtype=float)
    outs = assignments(inst.n, inst.m)
    slots = np.array(outs).T
    rows = np.arange(inst.n)[:, None]
    safe = np.maximum(slots, 0)
    val = np.where(slots >= 0, inst.ctr[rows, safe] * bids[rows, safe], 0.0)
    return outs, val


def ppc_midr_oracle(inst: PpcMultiInstance, bids, mask: SubsetMask) -> tuple:
    """Assignment maximizing the expected welfare of the advertisers in ``mask``."""
    outs, val = assignment_values(inst, bids)
    keep = np.array([i in mask for i in range(inst.n)])
    k = int(np.argmax(val[keep].sum(axis=0))) if keep.any() else 0
    return outs[k]


def ppc_midr_instance(inst: PpcMultiInstance, bids=None) -> MidrInstance:
    """The PPC auction as a MIDR instance whose range is every deterministic assignment."""
    outs, val = assignment_values(inst, bids)
    return MidrInstance(tuple(outs), val, np.eye(len(outs)))


def realize_clicks(slots, ctr: np.ndarray, rng: np.random.Generator, values=None):
    """Bernoulli clicks on the true CTR of each ad's slot; unassigned ads never click.

    Returns ``(clicks, measured)`` where ``measured`` is value-per-click times click.
    """
    slots = np.asarray(slots)
    rows = np.arange(len(slots))
    p = np.where(slots >= 0, ctr[rows, np.maximum(slots, 0)], 0.0)
    clicks = rng.random(len(slots)) < p
    if values is None:
        return clicks, clicks.astype(float)
    v = np.where(slots >= 0, np.asarray(values)[rows, np.maximum(slots, 0)], 0.0)
    return clicks, v * clicks


@dataclass(frozen=True)
class PpcRun:
    mask: SubsetMask
    slots: tuple
    clicks: np.ndarray
    measured: np.ndarray
    payments: np.ndarray
    oracle_calls: int


def run_ppc_optmidr(inst: PpcMultiInstance, bids, gamma: float,
                    rng: np.random.Generator) -> PpcRun:
    """One OptMIDR run: one oracle call, one round of clicks, payments on measured values."""
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie strictly inside (0, 1), got {gamma}")
    bids = inst.values if bids is None else np.asarray(bids, dtype=float)
    dist = ProductGammaDistribution(gamma, inst.n)
    mask = SubsetMask(int(sample_subsets(dist, rng, 1)[0]), inst.n)
    oracle = CallCountedOracle(lambda m: ppc_midr_oracle(inst, bids, m))
    slots = oracle(mask)
    clicks, measured = realize_clicks(slots, inst.ctr, rng, bids)
    seen = np.where([i in mask for i in range(inst.n)], measured, 0.0)
    coeffs = coefficient_table(dist)[mask.bits]
    return PpcRun(mask, slots, clicks, measured, coeffs * (seen.sum() - seen), oracle.calls)


def ppc_optmidr_payment_samples(inst: PpcMultiInstance, gamma: float, rng: np.random.Generator,
                                size: int, bids=None) -> np.ndarray:
    """``size`` independent click-realized payment vectors (vectorized runs)."""
    bids = inst.values if bids is None else np.asarray(bids, dtype=float)
    dist = ProductGammaDistribution(gamma, inst.n)
    members = member_matrix(inst.n)
    coeffs = coefficient_table(dist)
    by_mask = np.array([ppc_midr_oracle(inst, bids, SubsetMask(m, inst.n))
                        for m in range(1 << inst.n)])
    masks = sample_subsets(dist, rng, size)
    slots = by_mask[masks]
    rows = np.arange(inst.n)[None, :]
    safe = np.maximum(slots, 0)
    p = np.where(slots >= 0, inst.ctr[rows, safe], 0.0)
    per_click = np.where(slots >= 0, bids[rows, safe], 0.0)
    measured = per_click * (rng.random(slots.shape) < p)
    seen = np.where(members[masks], measured, 0.0)
    return coeffs[masks] * (seen.sum(axis=1, keepdims=True) - seen)
