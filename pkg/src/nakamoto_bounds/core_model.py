"""Protocol parameters and the distribution primitives every bound is built from.

Two distributions appear throughout:

* a geometric variant on ``{1, 2, ...}`` with ratio ``q/p`` (``geom_pmf``,
  ``geom_ccdf``), which is also the law of the stationary lead and of the
  maximum reach of a downward-drifting +/-1 walk, and
* the binomial distribution (``binom_pmf``, ``binom_ccdf``).

Binomial probabilities are evaluated in log space with Loader's saddle-point
decomposition (Stirling-series error plus a deviance term).  A bare
``lgamma`` difference loses about 1e-11 relative accuracy once ``n`` reaches
10^4, because each ``lgamma`` value is itself of order 10^5.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

__all__ = [
    "ProtocolParams",
    "validate_params",
    "confirmation_depth",
    "geom_pmf",
    "geom_ccdf",
    "geom_pmf_array",
    "geom_ccdf_array",
    "binom_pmf",
    "binom_ccdf",
    "binom_pmf_array",
]

_LN_2PI = math.log(2.0 * math.pi)

# stirlerr(n) = log(n!) - (n + 1/2) log(n) + n - log(sqrt(2 pi)), exact to 19 digits.
_STIRLERR_SMALL = (
    0.0,
    0.08106146679532725822,
    0.04134069595540929409,
    0.02767792568499833915,
    0.02079067210376509311,
    0.01664469118982119216,
    0.013876128823070748,
    0.0118967099458917701,
    0.0104112652619720965,
    0.009255462182712732918,
    0.008330563433362871256,
    0.007573675487951840795,
    0.006942840107209529866,
    0.006408994188004207068,
    0.005951370112758847736,
    0.005554733551962801371,
)
_STIRLERR_TABLE = np.array(_STIRLERR_SMALL)

_S0 = 1.0 / 12.0
_S1 = 1.0 / 360.0
_S2 = 1.0 / 1260.0
_S3 = 1.0 / 1680.0
_S4 = 1.0 / 1188.0


@dataclass(frozen=True)
class ProtocolParams:
    """Environment of the canonical model.

    ``lam`` is the total mining rate (blocks/s), ``rho`` the honest fraction of
    it and ``delta`` the propagation delay bound (s).  ``g``, ``p`` and ``q``
    are derived once here and read everywhere else.
    """

    lam: float
    rho: float
    delta: float
    g: float = field(init=False)
    p: float = field(init=False)
    q: float = field(init=False)
    bounds_valid: bool = field(init=False)

    def __post_init__(self) -> None:
        for name in ("lam", "rho", "delta"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise DomainError(f"{name} must be a real number, got {value!r}")
            if not math.isfinite(value):
                raise DomainError(f"{name} must be finite, got {value!r}")
        if self.lam <= 0:
            raise DomainError(f"lambda must be > 0, got {self.lam!r}")
        if not 0 < self.rho <= 1:
            raise DomainError(f"rho must lie in (0, 1], got {self.rho!r}")
        if self.delta < 0:
            raise DomainError(f"delta must be >= 0, got {self.delta!r}")
        g = math.exp(-self.lam * self.delta)
        p = self.rho * g
        object.__setattr__(self, "lam", float(self.lam))
        object.__setattr__(self, "rho", float(self.rho))
        object.__setattr__(self, "delta", float(self.delta))
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", 1.0 - p)
        object.__setattr__(self, "bounds_valid", p > 0.5)


def validate_params(lam: float, rho: float, delta: float) -> ProtocolParams:
    """Build a :class:`ProtocolParams`, raising :class:`DomainError` on bad fields."""
    return ProtocolParams(lam, rho, delta)


def confirmation_depth(k) -> int:
    """Return ``k`` as an ``int`` after checking it is a natural number >= 1."""
    if isinstance(k, bool) or not isinstance(k, (int, np.integer)):
        raise DomainError(f"confirmation depth must be an integer, got {k!r}")
    if k < 1:
        raise DomainError(f"confirmation depth must be >= 1, got {k}")
    return int(k)


def _check_geom_p(p: float) -> None:
    if not (0.5 < p <= 1.0):
        raise DomainError(f"geometric parameter must lie in (1/2, 1], got p = {p!r}")


def _check_binom_q(q: float) -> None:
    if not (0.0 <= q <= 1.0):
        raise DomainError(f"binomial success probability must lie in [0, 1], got {q!r}")


def _check_trials(n) -> int:
    if isinstance(n, bool) or not isinstance(n, (int, np.integer)) or n < 0:
        raise DomainError(f"binomial trial count must be a natural number, got {n!r}")
    return int(n)


def geom_pmf(i: int, p: float) -> float:
    """``(q/p)^(i-1) (1 - q/p)`` for ``i >= 1``; zero below the support."""
    _check_geom_p(p)
    if i < 1:
        return 0.0
    if p == 1.0:
        return 1.0 if i == 1 else 0.0
    r = (1.0 - p) / p
    return r ** (i - 1) * (1.0 - r)


def geom_ccdf(i: int, p: float) -> float:
    """``(q/p)^i`` for ``i >= 0``; saturates at 1 for negative ``i``."""
    _check_geom_p(p)
    if i <= 0:
        return 1.0
    if p == 1.0:
        return 0.0
    return ((1.0 - p) / p) ** i


def geom_pmf_array(i, p: float) -> np.ndarray:
    """Vectorised :func:`geom_pmf` over an integer array ``i``."""
    _check_geom_p(p)
    i = np.asarray(i, dtype=np.int64)
    if p == 1.0:
        return (i == 1).astype(float)
    r = (1.0 - p) / p
    return np.where(i >= 1, r ** np.maximum(i - 1, 0) * (1.0 - r), 0.0)


def geom_ccdf_array(i, p: float) -> np.ndarray:
    """Vectorised :func:`geom_ccdf`; entries with ``i <= 0`` are exactly 1."""
    _check_geom_p(p)
    i = np.asarray(i, dtype=np.int64)
    r = (1.0 - p) / p
    return np.where(i <= 0, 1.0, r ** np.maximum(i, 1))


def _stirlerr(n: int) -> float:
    if n <= 15:
        return _STIRLERR_SMALL[n]
    nn = float(n) * n
    if n > 500:
        return (_S0 - _S1 / nn) / n
    if n > 80:
        return (_S0 - (_S1 - _S2 / nn) / nn) / n
    if n > 35:
        return (_S0 - (_S1 - (_S2 - _S3 / nn) / nn) / nn) / n
    return (_S0 - (_S1 - (_S2 - (_S3 - _S4 / nn) / nn) / nn) / nn) / n


def _bd0(x: float, mean: float) -> float:
    """Deviance term ``x log(x/mean) + mean - x``, accurate when ``x ~ mean``."""
    if abs(x - mean) < 0.1 * (x + mean):
        v = (x - mean) / (x + mean)
        s = (x - mean) * v
        ej = 2.0 * x * v
        v *= v
        for j in range(1, 1000):
            ej *= v
            s1 = s + ej / (2 * j + 1)
            if s1 == s:
                return s1
            s = s1
        return s
    return x * math.log(x / mean) + mean - x


def binom_pmf(j: int, n: int, q: float) -> float:
    """Probability of exactly ``j`` successes in ``n`` trials of probability ``q``."""
    _check_binom_q(q)
    n = _check_trials(n)
    if j < 0 or j > n:
        return 0.0
    if n == 0:
        return 1.0
    f = 1.0 - q
    if q == 0.0:
        return 1.0 if j == 0 else 0.0
    if f == 0.0:
        return 1.0 if j == n else 0.0
    if j == 0:
        lc = -_bd0(n, n * f) - n * q if q < 0.1 else n * math.log(f)
        return math.exp(lc)
    if j == n:
        lc = -_bd0(n, n * q) - n * f if f < 0.1 else n * math.log(q)
        return math.exp(lc)
    lc = (
        _stirlerr(n) - _stirlerr(j) - _stirlerr(n - j)
        - _bd0(j, n * q) - _bd0(n - j, n * f)
    )
    lf = _LN_2PI + math.log(j) + math.log1p(-j / n)
    return math.exp(lc - 0.5 * lf)


def binom_ccdf(j: int, n: int, q: float) -> float:
    """``Pr(X > j)`` for ``X ~ Binomial(n, q)``; 1 below the support, 0 at or above ``n``."""
    _check_binom_q(q)
    n = _check_trials(n)
    if j < 0:
        return 1.0
    if j >= n:
        return 0.0
    terms = binom_pmf_array(np.arange(j + 1, n + 1), n, q)
    return min(1.0, math.fsum(terms.tolist()))


_stirlerr_cache = _STIRLERR_TABLE


def _stirlerr_upto(nmax: int) -> np.ndarray:
    """Stirling-series errors for ``0..nmax``, grown on demand and reused."""
    global _stirlerr_cache
    table = _stirlerr_cache
    if table.size > nmax:
        return table
    size = max(nmax + 1, 2 * table.size)
    n = np.arange(table.size, size, dtype=float)
    nn = n * n
    # same cut-offs as the scalar _stirlerr
    ext = np.where(
        n > 500,
        (_S0 - _S1 / nn) / n,
        np.where(
            n > 80,
            (_S0 - (_S1 - _S2 / nn) / nn) / n,
            np.where(
                n > 35,
                (_S0 - (_S1 - (_S2 - _S3 / nn) / nn) / nn) / n,
                (_S0 - (_S1 - (_S2 - (_S3 - _S4 / nn) / nn) / nn) / nn) / n,
            ),
        ),
    )
    table = np.concatenate([table, ext])
    _stirlerr_cache = table
    return table


def _bd0_array(x: np.ndarray, mean: np.ndarray) -> np.ndarray:
    x = x.astype(float)
    near = np.abs(x - mean) < 0.1 * (x + mean)
    out = np.empty(x.shape)
    far = ~near
    xf, mf = x[far], mean[far]
    # a subnormal mean overflows the ratio; the resulting inf is the right limit
    with np.errstate(over="ignore", divide="ignore"):
        out[far] = xf * np.log(xf / mf) + mf - xf
    if near.any():
        xn, mn = x[near], mean[near]
        v = (xn - mn) / (xn + mn)
        s = (xn - mn) * v
        ej = 2.0 * xn * v
        v2 = v * v
        for j in range(1, 1000):
            ej = ej * v2
            s1 = s + ej / (2 * j + 1)
            if np.array_equal(s1, s):
                break
            s = s1
        out[near] = s
    return out


def binom_pmf_array(j, n, q: float) -> np.ndarray:
    """Vectorised :func:`binom_pmf`; ``j`` and ``n`` broadcast against each other."""
    _check_binom_q(q)
    j, n = np.broadcast_arrays(np.asarray(j, dtype=np.int64), np.asarray(n, dtype=np.int64))
    if (n < 0).any():
        raise DomainError("binomial trial counts must be non-negative")
    out = np.zeros(j.shape)
    inside = (j >= 0) & (j <= n)
    f = 1.0 - q
    if q == 0.0:
        out[inside & (j == 0)] = 1.0
        return out
    if f == 0.0:
        out[inside & (j == n)] = 1.0
        return out

    out[inside & (n == 0)] = 1.0
    low = inside & (j == 0) & (n > 0)
    if low.any():
        nl = n[low].astype(float)
        if q < 0.1:
            lc = -_bd0_array(nl, nl * f) - nl * q
        else:
            lc = nl * math.log(f)
        out[low] = np.exp(lc)

    high = inside & (j == n) & (n > 0)
    if high.any():
        nh = n[high].astype(float)
        if f < 0.1:
            lc = -_bd0_array(nh, nh * q) - nh * f
        else:
            lc = nh * math.log(q)
        out[high] = np.exp(lc)

    mid = inside & (j > 0) & (j < n)
    if mid.any():
        jm, nm = j[mid], n[mid]
        nmf = nm.astype(float)
        st = _stirlerr_upto(int(nm.max()))
        lc = (
            st[nm] - st[jm] - st[nm - jm]
            - _bd0_array(jm, nmf * q) - _bd0_array(nm - jm, nmf * f)
        )
        lf = _LN_2PI + np.log(jm) + np.log1p(-jm / nmf)
        out[mid] = np.exp(lc - 0.5 * lf)
    return out
