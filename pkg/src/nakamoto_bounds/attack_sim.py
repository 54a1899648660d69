"""Monte Carlo validation of the series bounds.

Two simulators live here:

* a reduced sampler that draws ``(L, B, M)`` directly (stationary lead,
  binomial count over the next ``2k - L`` blocks, maximum reach of the
  remaining race) and tests ``2L + 2B + M`` against the threshold, and
* a sample-path simulator that mines Poisson blocks, marks laggers and
  tailgaters, converts honest tailgaters to adversarial blocks, and runs
  the private-mining attack block by block.

Randomness comes from counter-based Philox substreams keyed by
``(master_seed, index)``, so every estimate depends only on the seed and
the trial count, not on how the work is scheduled across threads.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterator, Literal, Sequence

import numpy as np

from .core_model import ProtocolParams, confirmation_depth
from .errors import DomainError, FaultToleranceExceeded, InvariantViolation, TrialBudgetError

__all__ = [
    "AttackOutcome",
    "Block",
    "Estimate",
    "GapAttr",
    "Miner",
    "ReducedTrial",
    "SamplePath",
    "default_burn_in",
    "estimate",
    "full_sim_estimate",
    "generate_sample_path",
    "run_private_mining_attack",
    "sample_max_reach",
    "sample_reduced_batch",
    "sample_reduced_trial",
    "sample_stationary_lead",
    "substream",
]

REDUCED_CHUNK = 1 << 16
FULL_CHUNK = 256
DEFAULT_EPSILON_HALT = 1e-12

EstimateMode = Literal["rigged-upper", "delta0-exact"]
HaltReason = Literal["success", "deficit-threshold", "horizon"]


class Miner(str, enum.Enum):
    HONEST = "honest"
    ADVERSARIAL = "adversarial"


class GapAttr(str, enum.Enum):
    LAGGER = "lagger"
    TAILGATER = "tailgater"


def substream(master_seed: int, index: int) -> np.random.Generator:
    """Independent generator for substream ``index`` of ``master_seed``.

    The Philox key comes from ``master_seed``; the substream index sits in
    the third counter word, so streams are 2**128 draws apart.
    """
    if isinstance(master_seed, bool) or not isinstance(master_seed, (int, np.integer)) or master_seed < 0:
        raise DomainError(f"master seed must be a non-negative integer, got {master_seed!r}")
    key = np.random.SeedSequence(int(master_seed)).generate_state(2, dtype=np.uint64)
    counter = np.array([0, 0, index, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=counter, key=key))


# --------------------------------------------------------------------------
# reduced sampler


def _check_p(p: float) -> None:
    if not 0.5 < p <= 1.0:
        raise DomainError(f"sampling requires p in (1/2, 1], got {p!r}")


def _geometric_reach(p: float, rng: np.random.Generator, size):
    # Pr(X >= l) = (q/p)^l, by inverting the ccdf at a uniform in (0, 1].
    _check_p(p)
    if p == 1.0:
        return 0 if size is None else np.zeros(size, dtype=np.int64)
    u = 1.0 - rng.random(size)
    x = np.floor(np.log(u) / math.log((1.0 - p) / p))
    return int(x) if size is None else x.astype(np.int64)


def sample_stationary_lead(p: float, rng: np.random.Generator, size=None):
    """Draw the lead at a well-mixed time: ``Pr(L = l) = (q/p)^l (1 - q/p)``."""
    return _geometric_reach(p, rng, size)


def sample_max_reach(p: float, rng: np.random.Generator, size=None):
    """Draw the maximum of a +/-1 walk that steps down with probability ``p``."""
    return _geometric_reach(p, rng, size)


@dataclass(frozen=True)
class ReducedTrial:
    L: int
    B: int
    M: int
    rigged_event: bool
    exact_event: bool

    @property
    def score(self) -> int:
        return 2 * self.L + 2 * self.B + self.M


def sample_reduced_trial(k: int, p: float, rng: np.random.Generator) -> ReducedTrial:
    k = confirmation_depth(k)
    lead = sample_stationary_lead(p, rng)
    count = int(rng.binomial(max(2 * k - lead, 0), 1.0 - p))
    reach = sample_max_reach(p, rng)
    score = 2 * lead + 2 * count + reach
    return ReducedTrial(lead, count, reach, score >= 2 * k - 1, score >= 2 * k)


def sample_reduced_batch(
    k: int, p: float, rng: np.random.Generator, size: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised :func:`sample_reduced_trial`; returns the ``(L, B, M)`` arrays."""
    k = confirmation_depth(k)
    lead = sample_stationary_lead(p, rng, size)
    count = rng.binomial(np.maximum(2 * k - lead, 0), 1.0 - p)
    reach = sample_max_reach(p, rng, size)
    return lead, count, reach


@dataclass(frozen=True)
class Estimate:
    trials: int
    successes: int
    horizon_halts: int = 0

    @property
    def point(self) -> float:
        return self.successes / self.trials

    @property
    def ci_halfwidth_3sigma(self) -> float:
        p = self.point
        return 3.0 * math.sqrt(p * (1.0 - p) / self.trials)

    @property
    def horizon_fraction(self) -> float:
        return self.horizon_halts / self.trials

    def covers(self, value: float) -> bool:
        """Whether ``value`` lies within the 3-sigma band around the point estimate."""
        return abs(self.point - value) <= self.ci_halfwidth_3sigma

    def as_dict(self) -> dict[str, float | int]:
        return {
            "trials": self.trials,
            "successes": self.successes,
            "point": self.point,
            "ci_halfwidth_3sigma": self.ci_halfwidth_3sigma,
            "horizon_halts": self.horizon_halts,
        }


def _check_trials(trials) -> int:
    if isinstance(trials, bool) or not isinstance(trials, (int, np.integer)):
        raise DomainError(f"trials must be an integer, got {trials!r}")
    if trials == 0:
        raise TrialBudgetError("at least one trial is required")
    if trials < 0:
        raise DomainError(f"trials must be positive, got {trials}")
    return int(trials)


def _map_chunks(fn: Callable[[int], tuple[int, int]], n_chunks: int, threads: int) -> tuple[int, int]:
    if threads < 1:
        raise DomainError(f"threads must be >= 1, got {threads}")
    if threads == 1 or n_chunks == 1:
        parts = list(map(fn, range(n_chunks)))
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(fn, range(n_chunks)))
    return sum(a for a, _ in parts), sum(b for _, b in parts)


def estimate(
    mode: EstimateMode,
    k: int,
    params: ProtocolParams,
    trials: int,
    master_seed: int = 0,
    *,
    threads: int = 1,
) -> Estimate:
    """Reduced-sampler estimate of one series bound.

    ``rigged-upper`` samples with ``p = rho * exp(-lambda * delta)`` and counts
    ``2L + 2B + M >= 2k - 1``; ``delta0-exact`` samples with ``p = rho`` and
    counts ``>= 2k``.  Trials are split into fixed chunks of ``REDUCED_CHUNK``,
    chunk ``c`` drawing from ``substream(master_seed, c)``.
    """
    k = confirmation_depth(k)
    trials = _check_trials(trials)
    if mode == "rigged-upper":
        if not params.bounds_valid:
            raise FaultToleranceExceeded(
                f"fault tolerance exceeded: p = rho*exp(-lambda*delta) = {params.p:.6g} <= 1/2"
            )
        p, threshold = params.p, 2 * k - 1
    elif mode == "delta0-exact":
        if not params.rho > 0.5:
            raise DomainError(f"delta0-exact requires rho > 1/2, got {params.rho!r}")
        p, threshold = params.rho, 2 * k
    else:
        raise DomainError(f"unknown estimate mode {mode!r}")

    def run(chunk: int) -> tuple[int, int]:
        size = min(REDUCED_CHUNK, trials - chunk * REDUCED_CHUNK)
        lead, count, reach = sample_reduced_batch(k, p, substream(master_seed, chunk), size)
        return int(np.count_nonzero(2 * lead + 2 * count + reach >= threshold)), 0

    n_chunks = -(-trials // REDUCED_CHUNK)
    successes, _ = _map_chunks(run, n_chunks, threads)
    return Estimate(trials=trials, successes=successes)


# --------------------------------------------------------------------------
# sample paths


@dataclass(frozen=True)
class Block:
    index: int
    mine_time: float
    miner: Miner
    arrival_gap_attr: GapAttr
    rigged_role: Miner
    height: int | None = None
    parent_index: int | None = None


@dataclass(frozen=True, eq=False)
class SamplePath(Sequence[Block]):
    """Blocks mined in ``[0, duration]``, stored column-wise; index 0 is Genesis.

    Genesis carries honest/lagger attributes so every column has one entry
    per block; it is never counted as a mined block.
    """

    params: ProtocolParams
    duration: float
    mine_times: np.ndarray
    honest_miner: np.ndarray
    lagger: np.ndarray
    rigged_honest: np.ndarray

    @property
    def n_mined(self) -> int:
        return len(self.mine_times) - 1

    def __len__(self) -> int:
        return len(self.mine_times)

    def __getitem__(self, index):
        if isinstance(index, slice):
            return [self._block(i) for i in range(*index.indices(len(self)))]
        if index < 0:
            index += len(self)
        if not 0 <= index < len(self):
            raise IndexError(index)
        return self._block(index)

    def __iter__(self) -> Iterator[Block]:
        return (self._block(i) for i in range(len(self)))

    def _block(self, i: int, height=None, parent=None) -> Block:
        return Block(
            index=i,
            mine_time=float(self.mine_times[i]),
            miner=Miner.HONEST if self.honest_miner[i] else Miner.ADVERSARIAL,
            arrival_gap_attr=GapAttr.LAGGER if self.lagger[i] else GapAttr.TAILGATER,
            rigged_role=Miner.HONEST if self.rigged_honest[i] else Miner.ADVERSARIAL,
            height=height,
            parent_index=parent,
        )

    def blocks(self, tau: float | None = None) -> list[Block]:
        """Materialise every block; with ``tau`` given, heights and parents
        follow the private-mining attack against a transaction issued at ``tau``."""
        if tau is None:
            return list(self)
        heights, parents = chain_layout(self, tau)
        return [
            self._block(i, int(heights[i]), None if parents[i] < 0 else int(parents[i]))
            for i in range(len(self))
        ]


def generate_sample_path(params: ProtocolParams, duration: float, rng: np.random.Generator) -> SamplePath:
    """Mine a Poisson(lambda) path over ``[0, duration]`` and attach rigged roles."""
    if not (isinstance(duration, (int, float)) and math.isfinite(duration) and duration > 0):
        raise DomainError(f"duration must be a positive finite number, got {duration!r}")
    expected = params.lam * duration
    batch = int(expected + 6.0 * math.sqrt(expected) + 16)
    chunks: list[np.ndarray] = []
    elapsed = 0.0
    while elapsed <= duration:
        times = elapsed + np.cumsum(rng.exponential(1.0 / params.lam, batch))
        chunks.append(times)
        elapsed = float(times[-1])
    times = np.concatenate(chunks)
    times = times[: np.searchsorted(times, duration, side="right")]

    honest = rng.random(times.size) < params.rho
    gaps = np.diff(times, prepend=0.0)
    # lagger: nothing else mined in (t - delta, t]
    lagger = gaps >= params.delta
    mine_times = np.concatenate([[0.0], times])
    ones = np.ones(1, dtype=bool)
    return SamplePath(
        params=params,
        duration=float(duration),
        mine_times=mine_times,
        honest_miner=np.concatenate([ones, honest]),
        lagger=np.concatenate([ones, lagger]),
        rigged_honest=np.concatenate([ones, honest & lagger]),
    )


def _check_condition_one(honest_times: np.ndarray, delta: float) -> None:
    # Each honest block must see every earlier honest block when it is mined,
    # i.e. the previous one was mined at least delta earlier.
    seen = np.searchsorted(honest_times, honest_times - delta, side="right")
    order = np.arange(honest_times.size)
    if not np.array_equal(np.minimum(seen, order), order):
        bad = int(np.flatnonzero(np.minimum(seen, order) != order)[0])
        raise InvariantViolation(
            f"honest blocks share a height: honest block #{bad} was mined within delta of its predecessor"
        )


def _pre_tau_lead(honest: np.ndarray) -> np.ndarray:
    """Lead after each block: a walk reflected at zero (+1 adversarial, -1 honest)."""
    walk = np.cumsum(np.where(honest, -1, 1))
    return walk - np.minimum(np.minimum.accumulate(walk), 0)


def _validate_attack_args(path: SamplePath, k: int, tau: float) -> int:
    k = confirmation_depth(k)
    if not 0.0 <= tau <= path.duration:
        raise DomainError(f"tau = {tau!r} lies outside the path duration [0, {path.duration}]")
    return k


def chain_layout(path: SamplePath, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Heights and parent indices under the private-mining attack.

    Honest blocks extend the highest honest block; adversarial blocks extend
    the private tip, which before ``tau`` is the highest block overall.  The
    parent of Genesis is reported as ``-1``.
    """
    if not 0.0 <= tau <= path.duration:
        raise DomainError(f"tau = {tau!r} lies outside the path duration [0, {path.duration}]")
    t = path.mine_times[1:]
    hon = path.rigged_honest[1:]
    n = t.size
    idx = np.arange(1, n + 1)
    _check_condition_one(t[hon], path.params.delta)

    heights = np.zeros(n + 1, dtype=np.int64)
    parents = np.full(n + 1, -1, dtype=np.int64)
    honest_idx = idx[hon]
    heights[honest_idx] = np.arange(1, honest_idx.size + 1)
    parents[honest_idx] = np.concatenate([[0], honest_idx[:-1]])

    last_honest = np.maximum.accumulate(np.where(hon, idx, 0))
    last_adv = np.maximum.accumulate(np.where(hon, 0, idx))
    prev_honest = np.concatenate([[0], last_honest[:-1]])
    prev_adv = np.concatenate([[0], last_adv[:-1]])
    honest_height = np.cumsum(hon)

    n_pre = int(np.searchsorted(t, tau, side="right"))
    lead = _pre_tau_lead(hon[:n_pre])
    lead_before = np.concatenate([[0], lead[:-1]])
    adv_pre = ~hon[:n_pre]
    pre = slice(1, n_pre + 1)
    heights[pre][adv_pre] = (honest_height[:n_pre] + lead)[adv_pre]
    parents[pre][adv_pre] = np.where(lead_before > 0, prev_adv[:n_pre], prev_honest[:n_pre])[adv_pre]

    lead_tau = int(lead[-1]) if n_pre else 0
    h_tau = int(honest_height[n_pre - 1]) if n_pre else 0
    adv_post = ~hon[n_pre:]
    post_adv_idx = idx[n_pre:][adv_post]
    if post_adv_idx.size:
        heights[post_adv_idx] = h_tau + lead_tau + np.arange(1, post_adv_idx.size + 1)
        if lead_tau > 0:
            first_parent = int(last_adv[n_pre - 1])
        else:
            first_parent = int(last_honest[n_pre - 1]) if n_pre else 0
        parents[post_adv_idx] = np.concatenate([[first_parent], post_adv_idx[:-1]])
    return heights, parents


@dataclass(frozen=True)
class AttackOutcome:
    success: bool
    lead_at_tau: int
    blocks_consumed: int
    halt_reason: HaltReason
    adversarial_after_tau: int
    honest_after_tau: int

    def __post_init__(self) -> None:
        if (self.halt_reason == "success") != self.success:
            raise InvariantViolation(f"halt_reason {self.halt_reason!r} disagrees with success={self.success}")


def run_private_mining_attack(
    path: SamplePath,
    k: int,
    tau: float,
    epsilon_halt: float = DEFAULT_EPSILON_HALT,
) -> AttackOutcome:
    """Run the private-mining attack on one rigged sample path.

    Before ``tau`` the lead follows the reflected walk.  After ``tau`` the
    first honest block carries the target transaction at height ``h + 1``;
    the attack succeeds at the first moment its private chain is no shorter
    than the public honest chain (honest blocks become public exactly
    ``delta`` after they are mined) and reaches height ``h + k``.  The race
    is abandoned once the deficit ``D`` leaves a residual success chance
    ``(q/p)^D`` below ``epsilon_halt``.
    """
    k = _validate_attack_args(path, k, tau)
    if not 0.0 < epsilon_halt < 1.0:
        raise DomainError(f"epsilon_halt must lie in (0, 1), got {epsilon_halt!r}")
    delta = path.params.delta
    p = path.params.p
    t = path.mine_times[1:]
    hon = path.rigged_honest[1:]
    _check_condition_one(t[hon], delta)

    n_pre = int(np.searchsorted(t, tau, side="right"))
    lead = int(_pre_tau_lead(hon[:n_pre])[-1]) if n_pre else 0
    if lead >= k:
        return AttackOutcome(True, lead, n_pre, "success", 0, 0)

    post_t = t[n_pre:]
    post_hon = hon[n_pre:]
    pos = np.arange(post_t.size)
    adv_pos, hon_pos = pos[~post_hon], pos[post_hon]
    adv_t, hon_t = post_t[~post_hon], post_t[post_hon]

    # success can only switch on when an adversarial block is mined
    public = np.searchsorted(hon_t, adv_t - delta, side="right")
    private = lead + np.arange(1, adv_t.size + 1)
    wins = np.flatnonzero(private >= np.maximum(public, k))
    win_at = int(adv_pos[wins[0]]) if wins.size else post_t.size

    # deficit can only grow when an honest block is mined; one honest block
    # may still be in flight, hence the -1
    adv_before = np.searchsorted(adv_pos, hon_pos, side="left")
    deficit = np.arange(1, hon_pos.size + 1) - (lead + adv_before) - 1
    if p == 1.0:
        hopeless = deficit >= 1
    elif p > 0.5:
        hopeless = (deficit >= 1) & (deficit * math.log((1.0 - p) / p) < math.log(epsilon_halt))
    else:
        hopeless = np.zeros(deficit.size, dtype=bool)
    quits = np.flatnonzero(hopeless)
    quit_at = int(hon_pos[quits[0]]) if quits.size else post_t.size

    if win_at < post_t.size and win_at < quit_at:
        stop, reason = win_at, "success"
    elif quit_at < post_t.size:
        stop, reason = quit_at, "deficit-threshold"
    else:
        stop, reason = post_t.size - 1, "horizon"
    consumed = post_hon[: stop + 1]
    return AttackOutcome(
        success=reason == "success",
        lead_at_tau=lead,
        blocks_consumed=n_pre + stop + 1,
        halt_reason=reason,
        adversarial_after_tau=int(np.count_nonzero(~consumed)),
        honest_after_tau=int(np.count_nonzero(consumed)),
    )


def default_burn_in(p: float) -> float:
    """Expected block arrivals before ``tau``: ``max(200, 40 / (2p - 1)^2)``."""
    return max(200.0, 40.0 / (2.0 * p - 1.0) ** 2)


def _post_tau_blocks(k: int, p: float, epsilon_halt: float) -> float:
    # enough expected arrivals for the deficit to drift past the halting level
    drift = 2.0 * p - 1.0
    halt_level = 0.0 if p == 1.0 else math.log(epsilon_halt) / math.log((1.0 - p) / p)
    return 2 * k + 4.0 * (halt_level + 2 * k + 2) / drift + 100


def full_sim_estimate(
    params: ProtocolParams,
    k: int,
    trials: int,
    tau_burn_in: float | None = None,
    epsilon_halt: float = DEFAULT_EPSILON_HALT,
    master_seed: int = 0,
    *,
    threads: int = 1,
) -> Estimate:
    """Estimate the private-mining success rate from full sample paths.

    ``tau_burn_in`` is measured in expected block arrivals before the target
    transaction appears (default :func:`default_burn_in`).  Trial ``i`` uses
    ``substream(master_seed, i)``.
    """
    k = confirmation_depth(k)
    trials = _check_trials(trials)
    if not params.bounds_valid:
        raise FaultToleranceExceeded(
            f"fault tolerance exceeded: p = rho*exp(-lambda*delta) = {params.p:.6g} <= 1/2"
        )
    if not 0.0 < epsilon_halt < 1.0:
        raise DomainError(f"epsilon_halt must lie in (0, 1), got {epsilon_halt!r}")
    burn_in = default_burn_in(params.p) if tau_burn_in is None else tau_burn_in
    if not (math.isfinite(burn_in) and burn_in >= 0):
        raise DomainError(f"burn-in must be a non-negative number of blocks, got {burn_in!r}")
    tau = burn_in / params.lam
    duration = tau + _post_tau_blocks(k, params.p, epsilon_halt) / params.lam

    def run(chunk: int) -> tuple[int, int]:
        wins = horizon = 0
        for trial in range(chunk * FULL_CHUNK, min(trials, (chunk + 1) * FULL_CHUNK)):
            path = generate_sample_path(params, duration, substream(master_seed, trial))
            outcome = run_private_mining_attack(path, k, tau, epsilon_halt)
            wins += outcome.success
            horizon += outcome.halt_reason == "horizon"
        return wins, horizon

    n_chunks = -(-trials // FULL_CHUNK)
    successes, horizon_halts = _map_chunks(run, n_chunks, threads)
    return Estimate(trials=trials, successes=successes, horizon_halts=horizon_halts)
