import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from infoexplore.ensemble import Ensemble
from infoexplore.planner import (
    WORST_SCORE, CEMTrace, PlanDistribution, PlanMemory, PlannerConfig, cem_plan, cem_plan_with_memory,
    evaluate_objective, knn_query,
)


def bowl(target):
    return lambda nu: -((nu - target) ** 2).sum(axis=1)


def cfg(**kw):
    base = dict(horizon=20, action_dim=2)
    base.update(kw)
    return PlannerConfig(**base)


def brute_force(keys, q, k):
    d = [(math.dist(key, q), i) for i, key in enumerate(keys)]
    return [i for _, i in sorted(d)[:k]]


# ------------------------------------------------------------------ CEM

@pytest.mark.parametrize("seed", [0, 1, 2])
def test_quadratic_bowl_converges(seed):
    # default 60-dimensional plan; error measured as root mean square per coordinate
    plan = cem_plan(bowl(0.3), PlannerConfig(), rng=seed)
    assert np.sqrt(np.mean((plan.mu - 0.3) ** 2)) < 0.05


def test_constant_objective_has_no_systematic_drift():
    # all scores tie, so elites are an unbiased subsample and the mean only diffuses
    flat = lambda nu: np.zeros(len(nu))
    drift = np.array([cem_plan(flat, PlannerConfig(), rng=s).mu for s in range(5)])
    assert np.abs(drift.mean(axis=1)).max() < 0.2
    # without clipping, per-coordinate variance after 12 refits of 20 elites is sum_t (19/20)^t / 20
    wide = PlannerConfig(action_low=-1e3, action_high=1e3)
    drift = np.array([cem_plan(flat, wide, rng=s).mu for s in range(5)])
    expected = (1 - 0.95 ** 12) / (1 - 0.95) / 20
    assert 0.7 * expected < drift.var() < 1.3 * expected


def test_elite_mean_non_decreasing_on_deterministic_objective():
    ok = 0
    for seed in range(100):
        trace = CEMTrace()
        cem_plan(bowl(0.3), cfg(population=100, n_iter=6), rng=seed, trace=trace)
        ok += all(b >= a for a, b in zip(trace.elite_means, trace.elite_means[1:]))
    assert ok >= 95


def test_refit_is_elite_mean_and_population_std():
    seen = []

    def objective(nu):
        seen.append(nu.copy())
        return -np.abs(nu).sum(axis=1)

    c = cfg(n_iter=1, population=50, elites=7, horizon=3)
    plan = cem_plan(objective, c, rng=3)
    cand = seen[0]
    elites = cand[np.argsort(np.abs(cand).sum(axis=1), kind="stable")[:7]]
    np.testing.assert_allclose(plan.mu, elites.mean(axis=0), rtol=0, atol=1e-12)
    np.testing.assert_allclose(plan.sigma, np.maximum(elites.std(axis=0, ddof=0), c.sigma_floor), rtol=0, atol=1e-12)


def test_candidates_respect_action_bounds():
    seen = []

    def objective(nu):
        seen.append(nu.copy())
        return nu.sum(axis=1)

    c = cfg(action_low=(-0.5, 0.0), action_high=(0.25, 1.0), horizon=4)
    cem_plan(objective, c, rng=0)
    allc = np.concatenate(seen).reshape(-1, 4, 2)
    assert allc[..., 0].min() >= -0.5 and allc[..., 0].max() <= 0.25
    assert allc[..., 1].min() >= 0.0 and allc[..., 1].max() <= 1.0


def test_ties_keep_candidate_order():
    seen = []

    def objective(nu):
        seen.append(nu.copy())
        return np.zeros(len(nu))

    c = cfg(n_iter=1, population=30, elites=5, horizon=2)
    plan = cem_plan(objective, c, rng=4)
    np.testing.assert_allclose(plan.mu, seen[0][:5].mean(axis=0), atol=1e-15)


def test_nan_scores_are_worst():
    def objective(nu):
        s = -((nu - 0.2) ** 2).sum(axis=1)
        s[::2] = np.nan
        return s

    plan = cem_plan(objective, cfg(horizon=3), rng=0)
    assert np.all(np.isfinite(plan.mu))


def test_config_validation():
    with pytest.raises(ValueError):
        PlannerConfig(population=10, elites=20)
    with pytest.raises(ValueError):
        PlannerConfig(horizon=0)
    with pytest.raises(ValueError):
        PlanDistribution(np.zeros(3), np.zeros(2))


# --------------------------------------------------------------- memory

def test_empty_memory_is_bit_identical_to_vanilla():
    c = cfg(horizon=5)
    mem = PlanMemory(3, c.plan_dim)
    a = cem_plan(bowl(0.1), c, rng=7)
    b = cem_plan_with_memory(bowl(0.1), np.zeros(3), mem, c, rng=7)
    assert np.array_equal(a.mu, b.mu) and np.array_equal(a.sigma, b.sigma)
    assert len(mem) == 1


def test_memory_grows_by_one_and_appends_candidates():
    c = cfg(horizon=2, neighbors=3, samples_per_neighbor=4, population=20)
    mem = PlanMemory(1, c.plan_dim)
    for i in range(5):
        mem.add([float(i)], PlanDistribution(np.full(4, 0.5), np.full(4, 0.01)))
    trace = CEMTrace()
    cem_plan_with_memory(bowl(0.0), [0.0], mem, c, rng=0, trace=trace)
    assert trace.n_evaluated[0] == 20 + 3 * 4 and trace.n_evaluated[1] == 20
    assert len(mem) == 6


def test_memory_rescues_plateau_objective():
    target = np.full(10, 0.8)

    def plateau(nu):
        d = np.linalg.norm(nu - target, axis=1)
        return np.where(d < 0.3, 1.0 - d, 0.0)

    c = cfg(horizon=5, population=50, elites=5, n_iter=5)
    found_mem = found_vanilla = 0
    for seed in range(20):
        mem = PlanMemory(2, c.plan_dim)
        mem.add([0.0, 0.0], PlanDistribution(target, np.full(10, 0.05)))
        p = cem_plan_with_memory(plateau, [0.1, 0.0], mem, c, rng=seed, store=False)
        q = cem_plan(plateau, c, rng=seed)
        found_mem += np.linalg.norm(p.mu - target) < 0.3
        found_vanilla += np.linalg.norm(q.mu - target) < 0.3
    assert found_mem >= 18 and found_vanilla <= 2


def test_knn_empty_and_full():
    mem = PlanMemory(2, 1)
    assert knn_query(mem, [0.0, 0.0], 5) == []
    pts = np.array([[3.0, 0], [1.0, 0], [2.0, 0]])
    for i, p in enumerate(pts):
        mem.add(p, PlanDistribution([float(i)], [0.0]))
    res = knn_query(mem, [0.0, 0.0], 3)
    assert [r.mu[0] for r in res] == [1.0, 2.0, 0.0]


def test_knn_ties_broken_by_insertion_order():
    mem = PlanMemory(1, 1)
    for i, x in enumerate([1.0, -1.0, 1.0, 2.0]):
        mem.add([x], PlanDistribution([float(i)], [0.0]))
    assert [r.mu[0] for r in mem.query([0.0], 3)] == [0.0, 1.0, 2.0]


def test_knn_matches_brute_force():
    rng = np.random.default_rng(0)
    keys = rng.normal(size=(1000, 4))
    mem = PlanMemory(4, 1, capacity=2000)
    for i, k in enumerate(keys):
        mem.add(k, PlanDistribution([float(i)], [0.0]))
    for q in rng.normal(size=(100, 4)):
        assert list(mem.query_indices(q, 10)) == brute_force(keys, q, 10)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.integers(1, 40), st.integers(0, 15), st.integers(0, 10_000))
def test_ring_eviction_and_knn_property(capacity, n_insert, k, seed):
    rng = np.random.default_rng(seed)
    keys = rng.integers(-3, 4, size=(n_insert, 2)).astype(float)  # many exact ties
    mem = PlanMemory(2, 1, capacity=capacity)
    for i, key in enumerate(keys):
        mem.add(key, PlanDistribution([float(i)], [0.0]))
    assert len(mem) == min(capacity, n_insert)
    live = list(range(max(0, n_insert - capacity), n_insert))
    q = rng.normal(size=2)
    got = [int(p.mu[0]) for p in mem.query(q, k)]
    expected = sorted(live, key=lambda i: (math.dist(keys[i], q), i))[:k]
    assert got == expected


def test_memory_state_dict_roundtrip():
    mem = PlanMemory(2, 3, capacity=4)
    rng = np.random.default_rng(0)
    for _ in range(6):
        mem.add(rng.normal(size=2), PlanDistribution(rng.normal(size=3), rng.random(3)))
    back = PlanMemory.from_state_dict(mem.state_dict())
    q = rng.normal(size=2)
    assert list(back.query_indices(q, 4)) == list(mem.query_indices(q, 4))
    assert back.n_inserted == 6


# -------------------------------------------------------------- objective

def const_ensemble(reward_means):
    """Ensemble whose nets ignore their inputs: next state = bias, reward = bias."""
    E = len(reward_means)
    ens = Ensemble(1, 1, n_members=E, dynamics_hidden=(2,), reward_hidden=(2,), variance_mode="learned",
                   random_state=0).initialize()
    for p in (ens.dyn_params_, ens.rew_params_):
        for k in p:
            p[k][:] = 0.0
    ens.rew_params_["bm"][:, 0] = reward_means
    return ens


def test_zero_reward_zero_beta_gives_zero():
    ens = const_ensemble([0.0, 0.0])
    ens.set_params(variance_mode="fixed", sigma_const=1e-300)
    assert evaluate_objective(ens, [0.0], np.zeros(1), 0.0, None, rng=0) == pytest.approx(0.0, abs=1e-290)


def test_identical_members_intrinsic_is_exactly_zero():
    ens = const_ensemble([0.5, 0.5, 0.5])
    score, ext, intr = evaluate_objective(ens, [0.0], np.zeros(3), 1e6, "MI", rng=0, return_parts=True)
    assert intr == 0.0 and score == ext


def test_hand_computed_one_step_objective():
    # two members with unit-variance rewards of means 0 and 1, dynamics identical
    ens = const_ensemble([0.0, 1.0])
    ens.set_params(variance_mode="learned")
    rng_a, rng_b = np.random.default_rng(9), np.random.default_rng(9)
    beta = 0.7
    got = evaluate_objective(ens, [0.0], np.zeros(1), beta, "MI", rng_a)
    # replay the draws: one state noise vector then one reward noise vector
    eps_s = rng_b.standard_normal((2, 1, 1))
    eps_r = rng_b.standard_normal((2, 1))
    s = eps_s[:, 0, 0]
    r = np.array([0.0, 1.0]) + eps_r[:, 0]
    logn = lambda x, m: -0.5 * (np.log(2 * np.pi) + (x - m) ** 2)
    L = np.array([[logn(s[i], 0.0) + logn(r[i], m) for m in (0.0, 1.0)] for i in range(2)])
    mi = np.mean([L[0, 0] - L[0, 1], L[1, 1] - L[1, 0]])
    assert got == pytest.approx(r.mean() + beta * mi, abs=1e-12)


def test_objective_deterministic_and_batched():
    ens = Ensemble(2, 1, n_members=3, dynamics_hidden=(8,), reward_hidden=(4,), random_state=2).initialize()
    acts = np.random.default_rng(0).uniform(-1, 1, (6, 4, 1))
    a = evaluate_objective(ens, [0.0, 0.1], acts, 10.0, "LI", rng=3)
    b = evaluate_objective(ens, [0.0, 0.1], acts, 10.0, "LI", rng=3)
    assert a.shape == (6,) and np.array_equal(a, b)


def test_blowup_gets_worst_score():
    ens = const_ensemble([0.0, 0.0])
    ens.dyn_params_["bm"][0] = np.nan
    score = evaluate_objective(ens, [0.0], np.zeros(2), 1.0, "MI", rng=0)
    assert score == WORST_SCORE


def test_wrong_horizon_rejected():
    ens = const_ensemble([0.0, 0.0])
    with pytest.raises(ValueError):
        evaluate_objective(ens, [0.0], np.zeros(3), 0.0, None, rng=0, horizon=4)
