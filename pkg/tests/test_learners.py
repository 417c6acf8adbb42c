import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfptrl.gridworld import GridEnv, build_mdp, parse_map, random_map
from mfptrl.learners import (
    Experience,
    LearnedModel,
    LearnParams,
    RandomStream,
    epsilon_greedy,
    mfpt_vi_phase,
    model_update,
    q_update,
    run_dyna,
    run_mfpt_dyna,
    run_mfpt_q,
    run_q_learning,
)
from mfptrl.mdp import BudgetExhausted, ConvergenceParams, value_iteration
from oracles import lp_values

CORRIDOR = "2d 3 1\nS.G\n"
FIVE = "2d 5 5\nS....\n.....\n..X..\n.....\n....G\n"
RUNNERS = [run_q_learning, run_dyna, run_mfpt_q, run_mfpt_dyna]


def optimal_mask(mdp):
    q = mdp.q_values(lp_values(mdp))
    return q >= q.max(axis=1, keepdims=True) - 1e-6


def is_optimal(mdp, policy):
    opt = optimal_mask(mdp)
    judged = mdp.can_reach_goal()
    judged[mdp.goal] = False
    return bool(opt[np.arange(len(policy)), policy][judged].all())


# --- q_update ---------------------------------------------------------------

def test_q_update_examples():
    q = np.zeros((2, 2))
    q_update(q, Experience(0, 1, -1.0, 1), 0.1, 0.9)
    assert q[0, 1] == pytest.approx(-0.1)
    q = np.zeros((2, 2))
    q_update(q, Experience(0, 0, 100.0, 1), 1.0, 0.9)
    assert q[0, 0] == 100.0
    q = np.array([[5.0, 0.0], [10.0, 2.0]])
    q_update(q, Experience(0, 0, 0.0, 1), 0.5, 0.5)
    assert q[0, 0] == 5.0


def test_q_update_lists_and_arrays_agree():
    rng = np.random.default_rng(0)
    qa = rng.normal(size=(4, 3))
    ql = qa.tolist()
    for _ in range(50):
        e = Experience(int(rng.integers(4)), int(rng.integers(3)), float(rng.normal()), int(rng.integers(4)))
        q_update(qa, e, 0.3, 0.9)
        q_update(ql, e, 0.3, 0.9)
    assert np.array_equal(qa, np.array(ql))


# --- epsilon_greedy -----------------------------------------------------------

def test_epsilon_zero_is_greedy_without_draws():
    class NoDraws:
        def random(self):
            raise AssertionError("drew a number")

        integers = random

    q = [[1.0, 9.0, 9.0]]
    assert epsilon_greedy(q, 0, 0.0, NoDraws()) == 1
    assert epsilon_greedy(np.array(q), 0, 0.0, NoDraws()) == 1


def test_epsilon_one_uniform():
    rng = RandomStream(3)
    q = [[0.0, 5.0, 1.0, 2.0]]
    n = 10_000
    counts = np.bincount([epsilon_greedy(q, 0, 1.0, rng) for _ in range(n)], minlength=4)
    sigma = np.sqrt(n * 0.25 * 0.75)
    assert np.all(np.abs(counts - n / 4) <= 3 * sigma)


def test_random_stream_reproducible():
    a, b = RandomStream(12, block=7), RandomStream(12, block=7)
    xs = [a.random() for _ in range(30)]
    assert xs == [b.random() for _ in range(30)]
    assert all(0.0 <= x < 1.0 for x in xs)
    # refilling the buffer continues the generator's stream
    assert xs == np.random.default_rng(12).random(30).tolist()


# --- LearnedModel -------------------------------------------------------------

def test_model_single_observation():
    m = LearnedModel(3, 2)
    model_update(m, Experience(0, 1, -1.0, 2))
    assert m.t_hat()[0, 1, 2] == 1.0
    assert m.r_hat()[0, 1, 2] == -1.0
    # unvisited pairs read as zero-reward self-loops
    assert m.t_hat()[1, 0, 1] == 1.0 and m.r_hat()[1, 0, 1] == 0.0


def test_model_two_successors():
    m = LearnedModel(3, 1)
    model_update(m, Experience(0, 0, -1.0, 1))
    model_update(m, Experience(0, 0, 100.0, 2))
    assert m.t_hat()[0, 0].tolist() == [0.0, 0.5, 0.5]
    assert m.visits[0, 0] == 2
    assert m.counts()[0, 0].tolist() == [0, 1, 1]
    assert m.reward_sum()[0, 0, 2] == 100.0


def test_model_binomial_branch():
    rng = np.random.default_rng(1)
    m = LearnedModel(3, 1)
    for _ in range(1000):
        m.update(Experience(0, 0, 0.0, 1 if rng.random() < 0.3 else 2))
    p = m.t_hat()[0, 0, 1]
    assert abs(p - 0.3) <= 3 * np.sqrt(0.3 * 0.7 / 1000)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 2), st.integers(-2, 2), st.integers(0, 3)), max_size=60))
def test_model_consistency(experiences):
    m = LearnedModel(4, 3)
    for s, a, r, s2 in experiences:
        m.update(Experience(s, a, float(r), s2))
    counts = m.counts()
    assert np.array_equal(counts.sum(axis=2), m.visits)
    assert np.allclose(m.t_hat().sum(axis=2), 1.0, atol=1e-9)
    mdp = m.as_mdp(goal=3, gamma=0.9)
    t = mdp.transition
    t_hat = m.t_hat()
    for s in range(3):
        assert np.allclose(t[:, s, :], t_hat[s], atol=1e-12)
    visited = m.visits > 0
    assert [tuple(p) for p in np.argwhere(visited)] == sorted(m.observed)


def test_model_sample_matches_counts():
    m = LearnedModel(3, 1)
    for s2, n in [(0, 2), (1, 5), (2, 3)]:
        for _ in range(n):
            m.update(Experience(0, 0, float(s2), s2))
    rng = RandomStream(0)
    draws = np.bincount([m.sample(0, 0, rng)[0] for _ in range(20_000)], minlength=3) / 20_000
    assert np.allclose(draws, [0.2, 0.5, 0.3], atol=0.02)
    assert m.sample(0, 0, rng)[1] in (0.0, 1.0, 2.0)
    with pytest.raises(ValueError):
        LearnedModel(2, 1).sample(0, 0, rng)


def test_model_from_mdp_reproduces_slip():
    spec = parse_map("2d 3 3\nslip 0.2\nS..\n...\n..G\n")
    mdp = build_mdp(spec)
    m = LearnedModel.from_mdp(mdp, total=40)
    learned = m.as_mdp(mdp.goal, mdp.discount)
    assert np.allclose(learned.transition, mdp.transition, atol=1e-12)
    assert np.allclose(learned.reward * learned.transition, mdp.reward * mdp.transition)


# --- mfpt_vi_phase --------------------------------------------------------------

def test_phase_corridor_exact_model():
    mdp = build_mdp(parse_map(CORRIDOR), 0.95)
    params = LearnParams()
    q = np.zeros((3, 9))
    v = np.zeros(3)
    mfpt_vi_phase(LearnedModel.from_mdp(mdp), q, v, mdp.goal, params)
    ref, pi, _ = value_iteration(mdp, ConvergenceParams(params.epsilon_tol))
    assert np.max(np.abs(v - ref)) <= 2 * params.epsilon_tol
    assert np.array_equal(np.argmax(q, axis=1), pi)


def test_phase_empty_model():
    q = np.zeros((4, 9))
    v = np.zeros(4)
    assert mfpt_vi_phase(LearnedModel(4, 9), q, v, 3, LearnParams()) == (1, 0.0)
    assert not q.any() and not v.any()


def test_phase_five_by_five_oracle_policy():
    mdp = build_mdp(parse_map(FIVE), 0.95)
    q = np.zeros((mdp.n_states, 9))
    v = np.zeros(mdp.n_states)
    params = LearnParams(epsilon_tol=1e-9)
    mfpt_vi_phase(LearnedModel.from_mdp(mdp), q, v, mdp.goal, params)
    assert np.max(np.abs(v - lp_values(mdp))) <= 1e-6
    assert is_optimal(mdp, np.argmax(q, axis=1))


def test_phase_budget_exhausted():
    spec = parse_map("2d 3 3\n.X.\nXX.\nS.G\n")
    mdp = build_mdp(spec, 1.0)
    params = LearnParams(gamma=1.0, max_sweeps=10)
    with pytest.raises(BudgetExhausted):
        mfpt_vi_phase(LearnedModel.from_mdp(mdp), np.zeros((mdp.n_states, 9)), np.zeros(mdp.n_states), mdp.goal, params)


# --- whole learners -----------------------------------------------------------

def test_q_learning_corridor_optimal():
    env = GridEnv(parse_map(CORRIDOR))
    trace = run_q_learning(env, LearnParams(sample_budget=20_000))
    assert is_optimal(env.mdp(), trace.checkpoints[-1].policy)
    assert [c.samples for c in trace.checkpoints] == list(range(0, 20_001, 100))


@pytest.mark.parametrize("runner", RUNNERS)
def test_zero_budget(runner):
    env = GridEnv(parse_map(CORRIDOR))
    trace = runner(env, LearnParams(sample_budget=0))
    assert len(trace.checkpoints) == 1 and trace.checkpoints[0].samples == 0
    assert not trace.q.any()


@pytest.mark.parametrize("runner", RUNNERS)
def test_same_seed_same_trace(runner):
    env = GridEnv(random_map(np.random.default_rng(2), (5, 4), 0.2, slip=0.1))
    params = LearnParams(sample_budget=3000, seed=17)
    a, b = runner(env, params), runner(env, params)
    assert a.same_run(b)
    c = runner(env, dataclasses.replace(params, seed=18))
    assert not a.same_run(c)


def test_dyna_zero_planning_is_q_learning():
    env = GridEnv(random_map(np.random.default_rng(4), (5, 5), 0.2))
    for seed in range(3):
        params = LearnParams(sample_budget=2000, seed=seed, planning_steps=0)
        assert run_dyna(env, params).same_run(run_q_learning(env, params))
        assert run_mfpt_dyna(env, params).same_run(run_mfpt_q(env, params))


def test_dyna_planning_helps_on_corridor():
    env = GridEnv(parse_map(CORRIDOR))
    mdp = env.mdp()
    opt = optimal_mask(mdp)
    judged = mdp.can_reach_goal()
    judged[mdp.goal] = False

    def samples_to_optimal(trace):
        ok = [bool(opt[np.arange(len(c.policy)), c.policy][judged].all()) for c in trace.checkpoints]
        i = len(ok)
        while i > 0 and ok[i - 1]:
            i -= 1
        return trace.checkpoints[i].samples

    with_planning, without = [], []
    for seed in range(20):
        params = LearnParams(sample_budget=3000, seed=seed, checkpoint_interval=1)
        with_planning.append(samples_to_optimal(run_dyna(env, params)))
        without.append(samples_to_optimal(run_dyna(env, dataclasses.replace(params, planning_steps=0))))
    # medians are 10 and 9.5 here; the paired totals are the stable statistic
    assert sum(with_planning) <= sum(without)


def test_planning_draws_only_observed_pairs(monkeypatch):
    seen = []
    original = LearnedModel.sample

    def checked(self, s, a, rng):
        assert self.visits[s, a] > 0 and (s, a) in self.observed
        seen.append((s, a))
        return original(self, s, a, rng)

    monkeypatch.setattr(LearnedModel, "sample", checked)
    env = GridEnv(random_map(np.random.default_rng(6), (4, 4), 0.2))
    run_dyna(env, LearnParams(sample_budget=200, planning_steps=5))
    assert len(seen) == 1000


def test_mfpt_warm_start_first_phase_optimal():
    env = GridEnv(parse_map(FIVE))
    mdp = env.mdp()
    for runner in (run_mfpt_q, run_mfpt_dyna):
        params = LearnParams(sample_budget=1, mfpt_period=1, epsilon_tol=1e-8)
        trace = runner(env, params, model=LearnedModel.from_mdp(mdp))
        assert trace.phases == 1
        assert is_optimal(mdp, trace.checkpoints[-1].policy)


def test_mfpt_period_one_corridor():
    env = GridEnv(parse_map(CORRIDOR))
    trace = run_mfpt_q(env, LearnParams(mfpt_period=1, sample_budget=5000))
    assert trace.stopped_early
    assert trace.phases == trace.samples_consumed
    assert is_optimal(env.mdp(), trace.checkpoints[-1].policy)
    samples = [c.samples for c in trace.checkpoints]
    assert samples == sorted(samples) and samples[-1] == trace.samples_consumed


def test_stop_rule_counts_stable_phases():
    env = GridEnv(parse_map(CORRIDOR))
    params = LearnParams(mfpt_period=1, sample_budget=5000, stable_phases=3)
    trace = run_mfpt_q(env, params)
    longer = run_mfpt_q(env, dataclasses.replace(params, stable_phases=6))
    assert trace.stopped_early and longer.stopped_early
    assert longer.samples_consumed == trace.samples_consumed + 3


def test_observer_sees_every_sample():
    env = GridEnv(parse_map(CORRIDOR))
    calls = []
    run_mfpt_q(env, LearnParams(sample_budget=50, stable_phases=100),
               observer=lambda n, m, q: calls.append((n, len(m.observed))))
    assert [n for n, _ in calls] == list(range(51))
    assert calls[0][1] == 0


@pytest.mark.parametrize("runner", RUNNERS)
def test_eventual_optimality_small_maps(runner):
    for seed in range(3):
        spec = random_map(np.random.default_rng(100 + seed), (5, 5), 0.2)
        env = GridEnv(spec)
        # a long stability window: the default ten phases can end a run
        # before every optimal action has been tried
        trace = runner(env, LearnParams(sample_budget=100_000, seed=seed, stable_phases=500))
        assert is_optimal(env.mdp(), trace.checkpoints[-1].policy), seed


def test_invalid_params():
    with pytest.raises(ValueError):
        LearnParams(alpha=0.0)
    with pytest.raises(ValueError):
        LearnParams(mfpt_period=0)
    with pytest.raises(ValueError):
        LearnParams(exploration_mix=1.0)
