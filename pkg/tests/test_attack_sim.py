from __future__ import annotations

import math

import numpy as np
import pytest

from nakamoto_bounds import attack_sim as sim
from nakamoto_bounds.bounds import thm2_lower, thm2_upper
from nakamoto_bounds.core_model import ProtocolParams
from nakamoto_bounds.errors import DomainError, FaultToleranceExceeded, InvariantViolation, TrialBudgetError

BTC = ProtocolParams(1 / 600, 0.9, 10)


def within_3sigma(hits: int, n: int, expected: float) -> bool:
    sigma = math.sqrt(expected * (1 - expected) / n)
    return abs(hits / n - expected) <= 3 * sigma


# ---------------------------------------------------------------- streams


def test_substreams_are_reproducible_and_distinct():
    a = sim.substream(7, 3).random(4)
    assert np.array_equal(a, sim.substream(7, 3).random(4))
    assert not np.array_equal(a, sim.substream(7, 4).random(4))
    assert not np.array_equal(a, sim.substream(8, 3).random(4))


# ---------------------------------------------------------------- geometric draws


def test_no_adversary_means_no_lead_or_reach():
    rng = sim.substream(0, 0)
    assert not sim.sample_stationary_lead(1.0, rng, 1000).any()
    assert not sim.sample_max_reach(1.0, rng, 1000).any()
    trial = sim.sample_reduced_trial(4, 1.0, rng)
    assert (trial.L, trial.B, trial.M) == (0, 0, 0)
    assert not trial.rigged_event and not trial.exact_event


def test_stationary_lead_mean():
    p = 0.885124
    r = (1 - p) / p
    n = 1_000_000
    draws = sim.sample_stationary_lead(p, sim.substream(1, 0), n)
    sd = math.sqrt(r) / (1 - r)
    assert abs(draws.mean() - r / (1 - r)) <= 3 * sd / math.sqrt(n)


def test_stationary_lead_tail():
    n = 10_000_000
    draws = sim.sample_stationary_lead(0.9, sim.substream(2, 0), n)
    assert within_3sigma(int(np.count_nonzero(draws >= 6)), n, (1 / 9) ** 6)


@pytest.mark.parametrize("level", range(1, 9))
def test_max_reach_tail(level):
    n = 1_000_000
    draws = sim.sample_max_reach(0.75, sim.substream(3, 0), n)
    assert within_3sigma(int(np.count_nonzero(draws >= level)), n, (1 / 3) ** level)


def test_max_reach_matches_brute_force_walks():
    # walk until it sits 60 below its running maximum; (1/3)^60 is negligible
    p, walkers = 0.75, 20_000
    rng = np.random.default_rng(11)
    pos = np.zeros(walkers, dtype=np.int64)
    best = np.zeros(walkers, dtype=np.int64)
    live = np.ones(walkers, dtype=bool)
    steps = 0
    while live.any():
        idx = np.flatnonzero(live)
        pos[idx] += np.where(rng.random(idx.size) < p, -1, 1)
        best[idx] = np.maximum(best[idx], pos[idx])
        live[idx] = best[idx] - pos[idx] < 60
        steps += idx.size
    assert steps >= 100_000
    direct = sim.sample_max_reach(p, sim.substream(12, 0), walkers)
    var = (1 / 3) / (1 - 1 / 3) ** 2
    assert abs(best.mean() - direct.mean()) <= 3 * math.sqrt(2 * var / walkers)
    for level in (1, 2, 4):
        a, b = np.mean(best >= level), np.mean(direct >= level)
        pr = (1 / 3) ** level
        assert abs(a - b) <= 3 * math.sqrt(2 * pr * (1 - pr) / walkers)


@pytest.mark.parametrize("p", [0.5, 0.2, 1.5])
def test_draws_reject_invalid_p(p):
    with pytest.raises(DomainError):
        sim.sample_max_reach(p, sim.substream(0, 0))


# ---------------------------------------------------------------- reduced trials


def test_reduced_trial_fields_are_consistent():
    rng = sim.substream(4, 0)
    for _ in range(500):
        t = sim.sample_reduced_trial(3, 0.7, rng)
        assert t.score == 2 * t.L + 2 * t.B + t.M
        assert 0 <= t.B <= max(6 - t.L, 0)
        assert t.rigged_event == (t.score >= 5)
        assert t.exact_event == (t.score >= 6)
        assert t.exact_event <= t.rigged_event


def test_rigged_event_rate_matches_upper_series():
    n = 10_000_000
    lead, count, reach = sim.sample_reduced_batch(6, BTC.p, sim.substream(5, 0), n)
    hits = int(np.count_nonzero(2 * lead + 2 * count + reach >= 11))
    assert within_3sigma(hits, n, thm2_upper(6, BTC))


def test_exact_event_rate_matches_lower_series():
    n = 10_000_000
    lead, count, reach = sim.sample_reduced_batch(6, 0.9, sim.substream(6, 0), n)
    hits = int(np.count_nonzero(2 * lead + 2 * count + reach >= 12))
    assert within_3sigma(hits, n, thm2_lower(6, 0.9))


@pytest.mark.xfail(
    strict=True,
    reason="seed 42 draws 971 successes against 1069.3 expected, 3.01 sigma low; "
    "10^8 pooled trials sit 1.2 sigma from the series, so this is one unlucky stream",
)
def test_estimate_seed_42_example():
    est = sim.estimate("delta0-exact", 6, BTC, 1_000_000, 42)
    assert est.covers(thm2_lower(6, 0.9))


def test_estimate_seed_42_is_reproducible():
    assert sim.estimate("delta0-exact", 6, BTC, 1_000_000, 42).successes == 971


def test_estimate_covers_the_series_for_most_seeds():
    value = thm2_lower(6, 0.9)
    covered = sum(sim.estimate("delta0-exact", 6, BTC, 1_000_000, seed).covers(value) for seed in range(20))
    assert covered >= 19


def test_estimate_single_block_example():
    est = sim.estimate("rigged-upper", 1, BTC, 100_000)
    assert est.covers(thm2_upper(1, BTC))


def test_estimate_is_deterministic_across_threads():
    runs = [sim.estimate("rigged-upper", 3, BTC, 300_001, 9, threads=t) for t in (1, 1, 3)]
    assert runs[0] == runs[1] == runs[2]


def test_estimate_prefix_is_stable():
    # chunk c always draws from substream c, so a longer run extends a shorter one
    short = sim.estimate("delta0-exact", 2, BTC, sim.REDUCED_CHUNK, 3)
    lead, count, reach = sim.sample_reduced_batch(2, 0.9, sim.substream(3, 0), sim.REDUCED_CHUNK)
    assert short.successes == int(np.count_nonzero(2 * lead + 2 * count + reach >= 4))


def test_estimate_fields():
    est = sim.Estimate(trials=400, successes=100)
    assert est.point == 0.25
    assert est.ci_halfwidth_3sigma == pytest.approx(3 * math.sqrt(0.25 * 0.75 / 400))
    assert est.horizon_fraction == 0.0
    assert est.covers(0.3) and not est.covers(0.35)


def test_estimate_input_errors():
    with pytest.raises(TrialBudgetError):
        sim.estimate("rigged-upper", 3, BTC, 0)
    with pytest.raises(DomainError):
        sim.estimate("rigged-upper", 3, BTC, -5)
    with pytest.raises(DomainError):
        sim.estimate("both", 3, BTC, 10)
    with pytest.raises(FaultToleranceExceeded):
        sim.estimate("rigged-upper", 3, ProtocolParams(1 / 600, 0.55, 100), 10)
    with pytest.raises(DomainError):
        sim.estimate("rigged-upper", 3, BTC, 10, threads=0)


def test_exact_mode_only_needs_honest_majority():
    # p = 0.47 here, but the zero-delay model only depends on rho
    params = ProtocolParams(1 / 13, 0.55, 2)
    est = sim.estimate("delta0-exact", 2, params, 200_000, 1)
    assert est.covers(thm2_lower(2, 0.55))


# ---------------------------------------------------------------- sample paths


def test_zero_delay_makes_every_block_a_lagger():
    path = sim.generate_sample_path(ProtocolParams(1.0, 0.8, 0.0), 500.0, sim.substream(0, 1))
    assert path.lagger.all()
    assert np.array_equal(path.rigged_honest, path.honest_miner)


def test_path_block_attributes():
    path = sim.generate_sample_path(BTC, 600 * 300, sim.substream(0, 2))
    blocks = list(path)
    genesis = blocks[0]
    assert (genesis.index, genesis.mine_time, genesis.miner) == (0, 0.0, sim.Miner.HONEST)
    assert all(b.index == i for i, b in enumerate(blocks))
    assert all(a.mine_time < b.mine_time for a, b in zip(blocks, blocks[1:]))
    assert blocks[-1].mine_time <= path.duration
    for b, prev in zip(blocks[1:], blocks):
        assert (b.arrival_gap_attr == sim.GapAttr.LAGGER) == (b.mine_time - prev.mine_time >= BTC.delta)
        rigged_honest = b.miner == sim.Miner.HONEST and b.arrival_gap_attr == sim.GapAttr.LAGGER
        assert (b.rigged_role == sim.Miner.HONEST) == rigged_honest
    assert path[-1] == blocks[-1] and path[1:3] == blocks[1:3]
    with pytest.raises(IndexError):
        path[len(path)]


def test_path_statistics_follow_the_rigged_model():
    params = ProtocolParams(1 / 600, 0.75, 60)
    path = sim.generate_sample_path(params, 600 * 150_000, sim.substream(0, 3))
    n = path.n_mined
    assert n >= 100_000
    assert within_3sigma(int(path.lagger[1:].sum()), n, params.g)
    assert within_3sigma(int(path.rigged_honest[1:].sum()), n, params.p)


def test_path_rejects_bad_duration():
    for duration in (0.0, -1.0, math.inf):
        with pytest.raises(DomainError):
            sim.generate_sample_path(BTC, duration, sim.substream(0, 0))


def layout_is_consistent(path: sim.SamplePath, tau: float) -> None:
    heights, parents = sim.chain_layout(path, tau)
    assert heights[0] == 0 and parents[0] == -1
    idx = np.arange(1, len(path))
    assert np.all(parents[1:] < idx)
    assert np.array_equal(heights[parents[1:]], heights[1:] - 1)
    honest_heights = heights[1:][path.rigged_honest[1:]]
    assert np.array_equal(honest_heights, np.arange(1, honest_heights.size + 1))


@pytest.mark.parametrize("params", [BTC, ProtocolParams(1.0, 0.6, 0.0), ProtocolParams(1 / 13, 0.8, 2)])
def test_chain_layout_invariants(params):
    for seed in range(5):
        path = sim.generate_sample_path(params, 500 / params.lam, sim.substream(seed, 0))
        layout_is_consistent(path, 300 / params.lam)
        blocks = path.blocks(300 / params.lam)
        assert all((b.parent_index is None) == (b.index == 0) for b in blocks)


def handmade_path(times, honest, delta=1.0) -> sim.SamplePath:
    times = np.asarray(times, dtype=float)
    honest = np.asarray(honest, dtype=bool)
    gaps = np.diff(times, prepend=0.0)
    lagger = gaps >= delta
    one = np.ones(1, dtype=bool)
    return sim.SamplePath(
        params=ProtocolParams(0.1, 0.9, delta),
        duration=float(times[-1]) + 1.0,
        mine_times=np.concatenate([[0.0], times]),
        honest_miner=np.concatenate([one, honest]),
        lagger=np.concatenate([one, lagger]),
        rigged_honest=np.concatenate([one, honest & lagger]),
    )


def test_condition_one_violation_is_detected():
    path = handmade_path([2.0, 5.0], [True, True], delta=1.0)
    # force two rigged-honest blocks within delta of each other
    bad = sim.SamplePath(
        params=path.params,
        duration=path.duration,
        mine_times=np.array([0.0, 2.0, 2.5]),
        honest_miner=np.ones(3, dtype=bool),
        lagger=np.ones(3, dtype=bool),
        rigged_honest=np.ones(3, dtype=bool),
    )
    sim.chain_layout(path, 1.0)
    with pytest.raises(InvariantViolation):
        sim.chain_layout(bad, 1.0)
    with pytest.raises(InvariantViolation):
        sim.run_private_mining_attack(bad, 1, 1.0)


def test_handmade_layout():
    # A A H | H A A A   with tau between the 3rd and 4th block, delta = 1
    path = handmade_path([2, 4, 6, 8, 10, 12, 14], [False, False, True, True, False, False, False])
    heights, parents = sim.chain_layout(path, 7.0)
    # post-tau adversarial blocks extend the private tip at height 2
    assert heights.tolist() == [0, 1, 2, 1, 2, 3, 4, 5]
    assert parents.tolist() == [-1, 0, 1, 0, 3, 2, 5, 6]
    out = sim.run_private_mining_attack(path, 2, 7.0)
    assert out.lead_at_tau == 1
    # at t = 10 the private chain is h + 2, the public chain h + 1, and k = 2
    assert out.success and out.halt_reason == "success"
    assert (out.adversarial_after_tau, out.honest_after_tau) == (1, 1)
    assert out.blocks_consumed == 5


# ---------------------------------------------------------------- attack


def decompose(path: sim.SamplePath, k: int, tau: float, stop: int) -> int:
    """2L + 2B + M from a path by direct bookkeeping, M observed up to ``stop``."""
    times = path.mine_times[1:]
    roles = path.rigged_honest[1:]
    lead = 0
    n_pre = 0
    for t, honest in zip(times, roles):
        if t > tau:
            break
        lead = max(lead - 1, 0) if honest else lead + 1
        n_pre += 1
    post = roles[n_pre:]
    first = max(2 * k - lead, 0)
    assert post.size >= first
    count = int(np.count_nonzero(~post[:first]))
    walk = reach = 0
    for honest in post[first : stop + 1]:
        walk += -1 if honest else 1
        reach = max(reach, walk)
    return 2 * lead + 2 * count + reach


def test_zero_delay_success_is_exactly_the_event():
    params = ProtocolParams(1 / 600, 0.75, 0.0)
    k, tau = 2, 600 * 200.0
    seen = {True: 0, False: 0}
    for i in range(400):
        path = sim.generate_sample_path(params, 600 * 400.0, sim.substream(21, i))
        out = sim.run_private_mining_attack(path, k, tau)
        if out.halt_reason == "horizon":
            continue
        n_pre = int(np.searchsorted(path.mine_times[1:], tau, side="right"))
        stop = out.blocks_consumed - n_pre - 1
        assert out.success == (decompose(path, k, tau, stop) >= 2 * k)
        seen[out.success] += 1
    assert seen[True] > 20 and seen[False] > 20


def test_positive_delay_success_needs_the_rigged_event():
    params = ProtocolParams(1 / 600, 0.75, 60.0)
    k, tau = 2, 600 * 200.0
    wins = 0
    for i in range(400):
        path = sim.generate_sample_path(params, 600 * 400.0, sim.substream(22, i))
        out = sim.run_private_mining_attack(path, k, tau)
        if out.success:
            wins += 1
            n_pre = int(np.searchsorted(path.mine_times[1:], tau, side="right"))
            stop = out.blocks_consumed - n_pre - 1
            assert decompose(path, k, tau, stop) >= 2 * k - 1
    assert wins > 20


def test_no_adversary_never_succeeds():
    params = ProtocolParams(1 / 600, 1.0, 0.0)
    path = sim.generate_sample_path(params, 600 * 400.0, sim.substream(0, 5))
    out = sim.run_private_mining_attack(path, 3, 600 * 200.0)
    assert not out.success
    assert out.halt_reason in ("deficit-threshold", "horizon")
    assert out.adversarial_after_tau == 0


def test_attack_input_errors():
    path = sim.generate_sample_path(BTC, 6000.0, sim.substream(0, 6))
    with pytest.raises(DomainError):
        sim.run_private_mining_attack(path, 3, 7000.0)
    with pytest.raises(DomainError):
        sim.run_private_mining_attack(path, 0, 100.0)
    with pytest.raises(DomainError):
        sim.run_private_mining_attack(path, 3, 100.0, epsilon_halt=1.0)


def test_outcome_rejects_inconsistent_halt_reason():
    with pytest.raises(InvariantViolation):
        sim.AttackOutcome(True, 0, 3, "horizon", 1, 1)


# ---------------------------------------------------------------- full estimate


def test_full_estimate_without_adversary():
    est = sim.full_sim_estimate(ProtocolParams(1 / 600, 1.0, 0.0), 3, 300)
    assert est.successes == 0 and est.horizon_halts == 0


def test_full_estimate_is_deterministic_across_threads():
    params = ProtocolParams(1 / 600, 0.75, 10)
    a = sim.full_sim_estimate(params, 2, 700, master_seed=5, threads=1)
    b = sim.full_sim_estimate(params, 2, 700, master_seed=5, threads=3)
    assert a == b and a.successes > 0


def test_full_estimate_zero_delay_matches_lower_series():
    est = sim.full_sim_estimate(ProtocolParams(1 / 600, 0.75, 0.0), 2, 5000, master_seed=1)
    assert est.covers(thm2_lower(2, 0.75))
    assert est.horizon_fraction < 1e-3


def test_full_estimate_sits_between_the_series_bounds():
    k = 3
    est = sim.full_sim_estimate(BTC, k, 20_000, master_seed=2)
    assert thm2_lower(k, BTC.rho) - est.ci_halfwidth_3sigma <= est.point
    assert est.point <= thm2_upper(k, BTC) + est.ci_halfwidth_3sigma


def test_full_estimate_input_errors():
    with pytest.raises(TrialBudgetError):
        sim.full_sim_estimate(BTC, 3, 0)
    with pytest.raises(FaultToleranceExceeded):
        sim.full_sim_estimate(ProtocolParams(1 / 600, 0.55, 100), 3, 10)
    with pytest.raises(DomainError):
        sim.full_sim_estimate(BTC, 3, 10, tau_burn_in=-1.0)
    with pytest.raises(DomainError):
        sim.full_sim_estimate(BTC, 3, 10, epsilon_halt=0.0)


def test_default_burn_in_grows_near_the_threshold():
    assert sim.default_burn_in(0.99) == 200.0
    assert sim.default_burn_in(0.55) == pytest.approx(4000.0)
