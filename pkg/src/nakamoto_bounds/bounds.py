"""Closed-form safety-violation bounds as a function of confirmation depth.

Four bounds are exposed:

``thm1_upper``  ``(2 + 2 sqrt(p/q)) (4pq)^k``
``thm1_lower``  ``(4 rho (1 - rho))^k / sqrt(k)``
``thm2_upper``  probability that ``2L + 2B + M >= 2k - 1`` in the rigged model
``thm2_lower``  probability that ``2L + 2B + M >= 2k`` at zero delay

where ``p = rho * exp(-lambda * delta)`` and ``q = 1 - p``.  The two series
bounds share one evaluator; see :func:`_series_bound`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterator

import numpy as np

from .core_model import (
    ProtocolParams,
    binom_pmf_array,
    confirmation_depth,
    geom_ccdf,
    geom_ccdf_array,
    geom_pmf_array,
)
from .errors import DomainError, FaultToleranceExceeded, InvariantViolation

__all__ = [
    "BOUND_NAMES",
    "BoundsReport",
    "NotReachable",
    "SweepTable",
    "bounds_report",
    "entropy_identity_residual",
    "evaluate_bound",
    "min_depth_for_risk",
    "relative_entropy",
    "sweep",
    "thm1_lower",
    "thm1_upper",
    "thm2_lower",
    "thm2_upper",
]

# Largest number of (i, j) cells evaluated in one vectorised block.
_CELLS_PER_CHUNK = 1 << 20
# Relative slack for ordering checks between bounds that may touch.
_ORDER_RTOL = 1e-12


def _require_fault_tolerance(params: ProtocolParams) -> None:
    if not params.bounds_valid:
        raise FaultToleranceExceeded(
            f"fault tolerance exceeded: p = rho*exp(-lambda*delta) = {params.p:.6g} <= 1/2"
        )


def _check_rho(rho: float) -> float:
    if isinstance(rho, bool) or not isinstance(rho, (int, float)) or not 0.5 < rho <= 1.0:
        raise DomainError(f"rho must lie in (1/2, 1], got {rho!r}")
    return float(rho)


def relative_entropy(a: float, b: float) -> float:
    """Relative entropy between Bernoulli(a) and Bernoulli(b), in nats."""
    total = 0.0
    if a > 0:
        total += a * math.log(a / b)
    if a < 1:
        total += (1 - a) * math.log((1 - a) / (1 - b))
    return total


def thm1_upper(k: int, params: ProtocolParams) -> float:
    """Exponential upper bound; raw value, may exceed 1 at small depths.

    Undefined at ``p = 1`` where the ``sqrt(p/q)`` prefactor diverges.
    """
    k = confirmation_depth(k)
    _require_fault_tolerance(params)
    p, q = params.p, params.q
    if q == 0.0:
        raise DomainError("thm1_upper is undefined at p = 1 (sqrt(p/q) diverges)")
    return (2.0 + 2.0 * math.sqrt(p / q)) * math.exp(k * math.log(4.0 * p * q))


def thm1_lower(k: int, rho: float) -> float:
    k = confirmation_depth(k)
    rho = _check_rho(rho)
    return (4.0 * rho * (1.0 - rho)) ** k / math.sqrt(k)


def entropy_identity_residual(k: int, p: float) -> float:
    """``(4p(1-p))^k - exp(-2k d(1/2 || p))``; zero up to rounding."""
    k = confirmation_depth(k)
    if not 0.5 < p < 1.0:
        raise DomainError(f"p must lie in (1/2, 1), got {p!r}")
    return (4.0 * p * (1.0 - p)) ** k - math.exp(-2.0 * k * relative_entropy(0.5, p))


@lru_cache(maxsize=64)
def _series_cells(k: int, first_row: int, last_row: int) -> tuple[np.ndarray, ...]:
    """Flattened ``(i, j, n_i)`` grid with ``0 <= j <= n_i = 2k + 1 - i``."""
    i = np.arange(first_row, last_row + 1)
    n = 2 * k + 1 - i
    counts = n + 1
    i_flat = np.repeat(i, counts)
    n_flat = np.repeat(n, counts)
    row_start = np.repeat(np.cumsum(counts) - counts, counts)
    j_flat = np.arange(counts.sum()) - row_start
    bounds = np.cumsum(counts)[:-1]
    for arr in (i_flat, n_flat, j_flat):
        arr.flags.writeable = False
    return i_flat, j_flat, n_flat, bounds


def _series_bound(k: int, p: float, offset: int) -> float:
    """Sum over the lead ``i - 1`` and the binomial count ``j``.

    ``offset`` is 1 for the rigged upper bound (threshold ``2k - 1``) and 2 for
    the zero-delay lower bound (threshold ``2k``).  The binomial tail term
    ``F2(k - i; n_i, q)`` is folded into the inner sum by running ``j`` over
    the whole support: for ``j > k - i`` the geometric ccdf argument is
    non-positive and saturates at 1, which reproduces the tail exactly.
    Rows are summed pairwise (all terms are positive) and the row totals are
    combined with an exactly rounded ``fsum``.
    """
    q = 1.0 - p
    totals = [geom_ccdf(k, p)]
    rows_per_chunk = max(1, _CELLS_PER_CHUNK // (2 * k + 1))
    for first in range(1, k + 1, rows_per_chunk):
        last = min(k, first + rows_per_chunk - 1)
        i, j, n, row_bounds = _series_cells(k, first, last)
        cell = (
            geom_pmf_array(i, p)
            * binom_pmf_array(j, n, q)
            * geom_ccdf_array(2 * k + offset - 2 * i - 2 * j, p)
        )
        totals.extend(np.add.reduceat(cell, np.concatenate([[0], row_bounds])).tolist())
    return math.fsum(totals)


def thm2_upper(k: int, params: ProtocolParams) -> float:
    k = confirmation_depth(k)
    _require_fault_tolerance(params)
    return _series_bound(k, params.p, offset=1)


def thm2_lower(k: int, rho: float) -> float:
    """Exact success probability of private mining at zero delay."""
    k = confirmation_depth(k)
    rho = _check_rho(rho)
    return _series_bound(k, rho, offset=2)


BOUND_NAMES = ("thm1u", "thm1l", "thm2u", "thm2l")
_ALIASES = {
    "thm1u": "thm1u", "thm1_upper": "thm1u",
    "thm1l": "thm1l", "thm1_lower": "thm1l",
    "thm2u": "thm2u", "thm2_upper": "thm2u",
    "thm2l": "thm2l", "thm2_lower": "thm2l",
}


def _bound_function(bound: str, params: ProtocolParams) -> Callable[[int], float]:
    try:
        key = _ALIASES[bound]
    except KeyError:
        raise DomainError(f"unknown bound {bound!r}; expected one of {BOUND_NAMES}") from None
    if key == "thm1u":
        return lambda k: thm1_upper(k, params)
    if key == "thm1l":
        return lambda k: thm1_lower(k, params.rho)
    if key == "thm2u":
        return lambda k: thm2_upper(k, params)
    return lambda k: thm2_lower(k, params.rho)


def evaluate_bound(bound: str, k: int, params: ProtocolParams) -> float:
    """Evaluate one of ``BOUND_NAMES`` (or its long alias) at depth ``k``."""
    return _bound_function(bound, params)(k)


@dataclass(frozen=True)
class BoundsReport:
    """All four bounds at one ``(k, params)``.

    ``thm1_upper`` is ``None`` when ``p = 1``, where that bound has no finite
    value; every other field is always a float.
    """

    k: int
    params: ProtocolParams
    thm1_upper: float | None
    thm1_lower: float
    thm2_upper: float
    thm2_lower: float

    @property
    def thm1_upper_clamped(self) -> float | None:
        return None if self.thm1_upper is None else min(self.thm1_upper, 1.0)

    @property
    def thm1_lower_clamped(self) -> float:
        return min(self.thm1_lower, 1.0)

    @property
    def thm2_upper_clamped(self) -> float:
        return min(self.thm2_upper, 1.0)

    @property
    def thm2_lower_clamped(self) -> float:
        return min(self.thm2_lower, 1.0)

    @property
    def thm1_lower_below_thm2_lower(self) -> bool:
        """False at the few small depths where the closed-form lower bound overshoots.

        The closed form drops the 1/2 of the binomial tail estimate it rests
        on, so at k = 1 (and k = 2 for rho >= 0.9) it exceeds the exact
        Delta = 0 attack probability.  Halving it restores the ordering.
        """
        return _not_above(self.thm1_lower, self.thm2_lower)

    def as_dict(self) -> dict[str, float | int | None]:
        return {
            "k": self.k,
            "thm1_lower": self.thm1_lower,
            "thm2_lower": self.thm2_lower,
            "thm2_upper": self.thm2_upper,
            "thm1_upper": self.thm1_upper,
            "thm1_lower_clamped": self.thm1_lower_clamped,
            "thm2_lower_clamped": self.thm2_lower_clamped,
            "thm2_upper_clamped": self.thm2_upper_clamped,
            "thm1_upper_clamped": self.thm1_upper_clamped,
        }


def _not_above(a: float, b: float) -> bool:
    return a <= b * (1.0 + _ORDER_RTOL) + 1e-300


def _check_report(report: BoundsReport) -> None:
    # thm1_lower <= thm2_lower is reported through a flag, not enforced.
    chain = [("thm2_lower", report.thm2_lower), ("thm2_upper", report.thm2_upper)]
    if report.thm1_upper is not None:
        chain.append(("thm1_upper", report.thm1_upper))
    if not (report.thm1_lower >= 0.0 and math.isfinite(report.thm1_lower)):
        raise InvariantViolation(f"thm1_lower = {report.thm1_lower!r} is not a finite non-negative number")
    for name, value in chain:
        if not (value >= 0.0 and math.isfinite(value)):
            raise InvariantViolation(f"{name} = {value!r} is not a finite non-negative number")
    for (lo_name, lo), (hi_name, hi) in zip(chain, chain[1:]):
        if not _not_above(lo, hi):
            raise InvariantViolation(
                f"{lo_name} = {lo!r} exceeds {hi_name} = {hi!r} at k = {report.k}"
            )


def bounds_report(k: int, params: ProtocolParams) -> BoundsReport:
    k = confirmation_depth(k)
    _require_fault_tolerance(params)
    report = BoundsReport(
        k=k,
        params=params,
        thm1_upper=None if params.q == 0.0 else thm1_upper(k, params),
        thm1_lower=thm1_lower(k, params.rho),
        thm2_upper=thm2_upper(k, params),
        thm2_lower=thm2_lower(k, params.rho),
    )
    _check_report(report)
    return report


@dataclass(frozen=True)
class NotReachable:
    """No depth up to ``k_max`` brings the selected bound down to ``target``."""

    k_max: int
    target: float
    value_at_k_max: float


def _first_at_or_below(f: Callable[[int], float], target: float, lo: int, k_max: int) -> int | None:
    """Smallest ``k`` in ``(lo, k_max]`` with ``f(k) <= target``, for non-increasing ``f``.

    ``f(lo) > target`` is taken as given (``lo = 0`` means no information).
    Doubles the step until the target is met, then bisects the last bracket.
    """
    step = 1
    hi = min(lo + step, k_max)
    while f(hi) > target:
        if hi == k_max:
            return None
        lo = hi
        step *= 2
        hi = min(lo + step, k_max)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if f(mid) <= target:
            hi = mid
        else:
            lo = mid
    return hi


def min_depth_for_risk(
    params: ProtocolParams,
    target: float,
    bound: str = "thm2u",
    k_max: int = 10_000,
) -> int | NotReachable:
    """Smallest ``k`` whose selected bound is at most ``target``.

    Every bound is non-increasing in ``k``, so a doubling-then-bisection
    search returns the same depth as a scan from ``k = 1``.  For the series
    bounds two closed forms bracket the answer first: ``thm1_upper`` from
    above and ``thm1_lower / 2`` from below.  The halved value is a proven
    floor under the exact attack probability; ``thm1_lower`` itself is not
    at k = 1.
    """
    _require_fault_tolerance(params)
    if not 0.0 < target < 1.0:
        raise DomainError(f"target must lie in (0, 1), got {target!r}")
    k_max = confirmation_depth(k_max)
    key = _ALIASES.get(bound)
    f = _bound_function(bound, params)

    lo, hi = 0, k_max
    if key in ("thm2u", "thm2l"):
        below = _first_at_or_below(lambda k: 0.5 * thm1_lower(k, params.rho), target, 0, k_max)
        if below is None:
            return NotReachable(k_max=k_max, target=target, value_at_k_max=f(k_max))
        lo = below - 1
        if params.q > 0.0:
            above = _first_at_or_below(lambda k: thm1_upper(k, params), target, lo, k_max)
            if above is not None:
                hi = above

    found = _first_at_or_below(f, target, lo, hi)
    if found is None:
        if hi < k_max:
            raise InvariantViolation(f"{bound} exceeds thm1_upper at k = {hi}")
        return NotReachable(k_max=k_max, target=target, value_at_k_max=f(k_max))
    return found


@dataclass(frozen=True)
class SweepTable:
    params: ProtocolParams
    rows: tuple[BoundsReport, ...]

    def __iter__(self) -> Iterator[BoundsReport]:
        return iter(self.rows)

    def __len__(self) -> int:
        return len(self.rows)

    def as_dicts(self) -> list[dict[str, float | int | None]]:
        return [row.as_dict() for row in self.rows]


_SWEEP_COLUMNS = ("thm1_lower", "thm2_lower", "thm2_upper", "thm1_upper")


def sweep(params: ProtocolParams, k_min: int, k_max: int) -> SweepTable:
    """One :class:`BoundsReport` per depth in ``[k_min, k_max]``."""
    k_min = confirmation_depth(k_min)
    k_max = confirmation_depth(k_max)
    if k_max < k_min:
        raise DomainError(f"empty depth range: k_min = {k_min} > k_max = {k_max}")
    _require_fault_tolerance(params)
    rows = tuple(bounds_report(k, params) for k in range(k_min, k_max + 1))
    for prev, cur in zip(rows, rows[1:]):
        for name in _SWEEP_COLUMNS:
            a, b = getattr(cur, name), getattr(prev, name)
            if a is not None and not _not_above(a, b):
                raise InvariantViolation(f"{name} increases from k = {prev.k} to k = {cur.k}")
    return SweepTable(params=params, rows=rows)
