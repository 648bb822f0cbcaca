"""Domain types shared by every reduction: bids, subset masks, MIDR instances,
single-parameter allocation rules and the single-call counting wrapper."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np


class MechanismError(Exception):
    """Base class for errors raised by mechlab."""


class ConfigurationError(MechanismError):
    pass


class DistributionError(MechanismError):
    """A resampling distribution is not usable by a single-call reduction."""

    def __init__(self, message: str, mask: int | None = None):
        super().__init__(message)
        self.mask = mask


class NumericalError(MechanismError):
    pass


class SingleCallViolation(MechanismError):
    pass


# ---------------------------------------------------------------------------
# randomness


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator for ``seed``; ``stream`` picks an independent child.

    Replica ``r`` of an experiment uses ``make_rng(seed, r)`` so that parallel
    replicas never share a stream and any single replica can be replayed alone.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------------------
# bids and masks


def bid_vector(values: Sequence[float] | np.ndarray, nonnegative: bool = False) -> np.ndarray:
    b = np.array(values, dtype=float)
    if b.ndim == 0 or b.shape[0] < 1:
        raise ValueError("a bid vector needs at least one agent")
    if not np.all(np.isfinite(b)):
        raise ValueError("bids must be finite")
    if nonnegative and np.any(b < 0):
        raise ValueError("positive-type bids must be >= 0")
    b.setflags(write=False)
    return b


@dataclass(frozen=True)
class SubsetMask:
    """A subset of agents ``{0..n-1}`` stored as an ``n``-bit integer."""

    bits: int
    n: int

    def __post_init__(self):
        if self.n < 0 or self.bits < 0 or self.bits >> self.n:
            raise ValueError(f"mask {self.bits:#b} does not fit in {self.n} bits")

    @classmethod
    def from_members(cls, members, n: int) -> "SubsetMask":
        bits = 0
        for i in members:
            if not 0 <= i < n:
                raise ValueError(f"agent {i} outside 0..{n - 1}")
            bits |= 1 << i
        return cls(bits, n)

    @classmethod
    def full(cls, n: int) -> "SubsetMask":
        return cls((1 << n) - 1, n)

    def __contains__(self, i: int) -> bool:
        return bool(self.bits >> i & 1)

    @property
    def members(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.n) if self.bits >> i & 1)

    def __len__(self) -> int:
        return bin(self.bits).count("1")


def member_matrix(n: int) -> np.ndarray:
    """Boolean (2**n, n) array; row ``m`` flags the members of mask ``m``."""
    masks = np.arange(1 << n)
    return ((masks[:, None] >> np.arange(n)) & 1).astype(bool)


def zero_mask_bids(b, mask: SubsetMask) -> np.ndarray:
    """Keep the bids of agents in ``mask`` and zero everyone else.

    ``b`` may be a bid vector or an (n, K) matrix of per-outcome bids; rows of
    excluded agents are zeroed as a whole.
    """
    b = np.asarray(b, dtype=float)
    if b.shape[0] != mask.n:
        raise ValueError(f"mask has {mask.n} bits but there are {b.shape[0]} agents")
    keep = np.array([i in mask for i in range(mask.n)])
    out = np.where(keep.reshape((-1,) + (1,) * (b.ndim - 1)), b, 0.0)
    return out


# ---------------------------------------------------------------------------
# MIDR instances


@dataclass(frozen=True)
class MidrInstance:
    """Finite outcome space, per-agent valuations and an explicit distributional range.

    ``valuations[i, k]`` is agent i's value for outcome k; ``dist_range[d]`` is a
    probability vector over the K outcomes.
    """

    outcomes: tuple
    valuations: np.ndarray
    dist_range: np.ndarray

    def __post_init__(self):
        v = np.array(self.valuations, dtype=float)
        r = np.array(self.dist_range, dtype=float)
        if v.ndim != 2 or v.shape[0] < 1:
            raise ConfigurationError("valuations must be an (n, K) matrix with n >= 1")
        if r.ndim != 2 or r.shape[0] == 0:
            raise ConfigurationError("the distributional range is empty")
        k = len(self.outcomes)
        if v.shape[1] != k or r.shape[1] != k:
            raise ConfigurationError(f"expected {k} outcome columns")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ConfigurationError("valuations must be finite and nonnegative")
        if np.any(r < 0) or np.any(np.abs(r.sum(axis=1) - 1.0) > 1e-12):
            raise ConfigurationError("every range entry must be a probability vector")
        v.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "outcomes", tuple(self.outcomes))
        object.__setattr__(self, "valuations", v)
        object.__setattr__(self, "dist_range", r)

    @property
    def n(self) -> int:
        return self.valuations.shape[0]

    def expected_values(self, bids, d: int) -> np.ndarray:
        """Per-agent expected bid value of range entry ``d``."""
        return np.asarray(bids, dtype=float) @ self.dist_range[d]

    def best_entry(self, bids) -> int:
        scores = self.dist_range @ np.asarray(bids, dtype=float).sum(axis=0)
        return int(np.argmax(scores))  # first maximum: lowest range index wins ties

    def sample_outcome(self, d: int, rng: np.random.Generator) -> int:
        return sample_index(self.dist_range[d], rng.random())


def sample_index(probs: np.ndarray, u: float) -> int:
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    return min(idx, len(probs) - 1)


def midr_allocate(inst: MidrInstance, bids, mask: SubsetMask, rng: np.random.Generator):
    """Maximize expected welfare of the agents in ``mask`` over the range and sample.

    Returns ``(range index, outcome index)``.
    """
    d = inst.best_entry(zero_mask_bids(bids, mask))
    return d, inst.sample_outcome(d, rng)


def random_midr_instance(rng: np.random.Generator, n: int, k: int, d: int,
                         scale: float = 10.0) -> MidrInstance:
    valuations = rng.uniform(0.0, scale, size=(n, k))
    # a mix of point masses and random lotteries keeps ties rare but present
    entries = []
    for j in range(d):
        if j < k and rng.random() < 0.5:
            e = np.zeros(k)
            e[j] = 1.0
        else:
            e = rng.dirichlet(np.ones(k))
        entries.append(e)
    return MidrInstance(tuple(f"o{j}" for j in range(k)), valuations, np.array(entries))


# ---------------------------------------------------------------------------
# welfare tables


@dataclass(frozen=True)
class TableAllocation:
    """Per-agent welfare ``welfare[m, i] = b_i(A(b̂^M))`` of the rule evaluated at b̂^M.

    Entries of agents outside M are their true values at that outcome; payment
    code only ever reads the entries of members (see ``member_welfare``).

    Witnesses built directly from tables carry ``from_oracle=False``; they need
    not be consistent with any MIDR rule.
    """

    welfare: np.ndarray
    from_oracle: bool = False

    def __post_init__(self):
        w = np.array(self.welfare, dtype=float)
        if w.ndim != 2:
            raise ConfigurationError("welfare table must be (2**n, n)")
        n = w.shape[1]
        if w.shape[0] != 1 << n:
            raise ConfigurationError(f"welfare table for n={n} needs {1 << n} rows")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ConfigurationError("welfare entries must be finite and >= 0")
        w.setflags(write=False)
        object.__setattr__(self, "welfare", w)

    @property
    def n(self) -> int:
        return self.welfare.shape[1]

    def __call__(self, mask: int) -> np.ndarray:
        return self.welfare[mask]


def member_welfare(welfare: np.ndarray) -> np.ndarray:
    """Welfare as seen by the reduction: agents outside M were zeroed and count 0."""
    n = welfare.shape[1]
    return np.where(member_matrix(n), welfare, 0.0)


def welfare_table(source, bids=None) -> TableAllocation:
    """Exact per-mask welfare of ``source`` at distribution level (no outcome sampling)."""
    if isinstance(source, TableAllocation):
        return source
    if not isinstance(source, MidrInstance):
        raise TypeError(f"cannot build a welfare table from {type(source).__name__}")
    b = source.valuations if bids is None else np.asarray(bids, dtype=float)
    n = source.n
    rows = np.empty((1 << n, n))
    members = member_matrix(n)
    for m in range(1 << n):
        d = source.best_entry(np.where(members[m][:, None], b, 0.0))
        rows[m] = source.expected_values(b, d)
    return TableAllocation(rows, from_oracle=True)


# ---------------------------------------------------------------------------
# single-parameter allocation rules


class SingleParamAllocation:
    """Monotone bounded rule mapping a bid vector to per-agent allocation levels.

    Subclasses implement ``evaluate_many``; ``own_breakpoints`` returns the own-bid
    points where ``A_i(., b_-i)`` may jump, or ``None`` when the rule is not
    piecewise constant (integrals then fall back to quadrature).
    """

    a_max: float = 1.0

    def __call__(self, b) -> np.ndarray:
        return self.evaluate_many(np.asarray(b, dtype=float)[None, :])[0]

    def evaluate_many(self, bids: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def own_breakpoints(self, i: int, b) -> np.ndarray | None:
        return None


class PostedThreshold(SingleParamAllocation):
    """Agent i is served (level ``a_max``) iff ``b_i >= thresholds[i]``."""

    def __init__(self, thresholds, a_max: float = 1.0):
        self.thresholds = np.asarray(thresholds, dtype=float)
        self.a_max = float(a_max)

    def evaluate_many(self, bids):
        return np.where(bids >= self.thresholds, self.a_max, 0.0)

    def own_breakpoints(self, i, b):
        return np.array([self.thresholds[i]])


class TopKByScore(SingleParamAllocation):
    """The k agents with the largest positive ``weights[i] * b_i`` receive level ``weights[i]``.

    Ties go to the lower index.
    """

    def __init__(self, weights, k: int):
        self.weights = np.asarray(weights, dtype=float)
        if np.any(self.weights <= 0):
            raise ConfigurationError("TopKByScore weights must be positive")
        self.k = int(k)
        self.a_max = float(self.weights.max())

    def evaluate_many(self, bids):
        scores = bids * self.weights
        n = scores.shape[1]
        # stable sort on -score keeps lower indices first among equal scores
        order = np.argsort(-scores, axis=1, kind="stable")
        rank = np.empty_like(order)
        np.put_along_axis(rank, order, np.arange(n)[None, :].repeat(len(bids), 0), axis=1)
        win = (rank < self.k) & (scores > 0)
        return np.where(win, self.weights, 0.0)

    def own_breakpoints(self, i, b):
        others = np.delete(np.asarray(b, dtype=float) * self.weights, i)
        return np.concatenate([[0.0], others / self.weights[i]])


class GridStep(SingleParamAllocation):
    """Piecewise-constant rule on a rectangular grid.

    ``breaks[j]`` are the sorted cut points of coordinate j; a bid ``x`` falls in
    cell ``searchsorted(breaks[j], x, side="right")``. ``tables[i]`` holds agent
    i's level in every cell and must be nondecreasing along axis i.
    """

    def __init__(self, breaks, tables, a_max: float = 1.0):
        self.breaks = [np.asarray(g, dtype=float) for g in breaks]
        self.tables = [np.asarray(t, dtype=float) for t in tables]
        self.a_max = float(a_max)
        n = len(self.breaks)
        shape = tuple(len(g) + 1 for g in self.breaks)
        if len(self.tables) != n or any(t.shape != shape for t in self.tables):
            raise ConfigurationError(f"each table must have shape {shape}")
        for i, t in enumerate(self.tables):
            if np.any(t < 0) or np.any(t > self.a_max):
                raise ConfigurationError("grid levels must lie in [0, a_max]")
            if np.any(np.diff(t, axis=i) < 0):
                raise ConfigurationError(f"table {i} is not monotone in its own bid")

    @property
    def n(self) -> int:
        return len(self.breaks)

    def cells(self, bids: np.ndarray) -> tuple:
        return tuple(np.searchsorted(g, bids[:, j], side="right") for j, g in enumerate(self.breaks))

    def evaluate_many(self, bids):
        idx = self.cells(bids)
        return np.stack([t[idx] for t in self.tables], axis=1)

    def own_breakpoints(self, i, b):
        return self.breaks[i]

    @classmethod
    def random(cls, rng: np.random.Generator, n: int, cuts: int = 3, top: float = 2.0,
               a_max: float = 1.0) -> "GridStep":
        breaks = [np.sort(rng.uniform(0.05, top, size=cuts)) for _ in range(n)]
        shape = tuple(cuts + 1 for _ in range(n))
        tables = []
        for i in range(n):
            steps = rng.uniform(0.0, 1.0, size=shape)
            steps[(slice(None),) * i + (0,)] *= rng.random()
            t = np.cumsum(steps, axis=i)
            tables.append(a_max * t / t.max())
        return cls(breaks, tables, a_max=a_max)


class FunctionAllocation(SingleParamAllocation):
    """Wraps a vectorized callable ``(N, n) -> (N, n)``."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], a_max: float = 1.0):
        self.fn = fn
        self.a_max = float(a_max)

    def evaluate_many(self, bids):
        return np.asarray(self.fn(bids), dtype=float)


# ---------------------------------------------------------------------------
# single-call enforcement


@dataclass
class CallCountedOracle:
    """Counts evaluations of ``inner``; a reduction run may make exactly one."""

    inner: Any
    calls: int = field(default=0)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def count(self, k: int = 1) -> None:
        with self._lock:
            self.calls += k

    def __call__(self, *args, **kwargs):
        self.count()
        return self.inner(*args, **kwargs)

    def evaluate_many(self, bids: np.ndarray) -> np.ndarray:
        # batch of independent runs: one evaluation per row
        self.count(len(bids))
        return self.inner.evaluate_many(bids)


def enforce_single_call(run, strict: bool = False) -> bool:
    ok = getattr(run, "oracle_calls", None) == 1
    if strict and not ok:
        raise SingleCallViolation(f"oracle evaluated {run.oracle_calls} times in one run")
    return ok


@dataclass(frozen=True)
class ClarkeRun:
    """One run of the full-information VCG reference mechanism."""

    entry: int
    payments: np.ndarray
    oracle_calls: int


def clarke_reference_run(inst: MidrInstance, bids=None) -> ClarkeRun:
    """VCG with Clarke pivots by direct recomputation: n + 1 oracle calls."""
    b = inst.valuations if bids is None else np.asarray(bids, dtype=float)
    n = inst.n
    oracle = CallCountedOracle(inst.best_entry)
    d_star = oracle(b)
    pays = np.empty(n)
    for i in range(n):
        without = oracle(zero_mask_bids(b, SubsetMask(((1 << n) - 1) & ~(1 << i), n)))
        others = np.delete(b, i, axis=0)
        pays[i] = inst.dist_range[without] @ others.sum(0) - inst.dist_range[d_star] @ others.sum(0)
    return ClarkeRun(d_star, pays, oracle.calls)

