"""Q-learning, DYNA and their MFPT-prioritised hybrids.

All four learners share one loop.  Each real sample picks a non-goal
state uniformly at random, chooses an epsilon-greedy action, steps the
environment and applies the Q-learning rule.  The model-based variants
additionally update count statistics; DYNA adds ``planning_steps``
simulated updates per sample, and the MFPT variants run a value-iteration
phase ordered by passage time to the goal every ``mfpt_period`` samples.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numba
import numpy as np

from .mdp import BudgetExhausted, DEFAULT_MAX_SWEEPS, TabularMdp
from .reachability import (
    DEFAULT_EXPLORATION_MIX,
    DEFAULT_MU_CAP,
    induced_chain,
    priority_order,
    solve_mfpt,
)

class Experience(NamedTuple):
    s: int
    a: int
    r: float
    s_next: int


@dataclass(frozen=True)
class LearnParams:
    alpha: float = 0.1
    gamma: float = 0.95
    epsilon_greedy: float = 0.1
    epsilon_tol: float = 1e-4
    planning_steps: int = 10
    mfpt_period: int = 20
    exploration_mix: float = DEFAULT_EXPLORATION_MIX
    mu_cap: float = DEFAULT_MU_CAP
    sample_budget: int = 20_000
    seed: int = 0
    checkpoint_interval: int = 100
    max_sweeps: int = DEFAULT_MAX_SWEEPS
    stable_phases: int = 10

    def __post_init__(self):
        checks = {
            "alpha": 0.0 < self.alpha <= 1.0,
            "gamma": 0.0 < self.gamma <= 1.0,
            "epsilon_greedy": 0.0 <= self.epsilon_greedy <= 1.0,
            "epsilon_tol": self.epsilon_tol > 0.0,
            "planning_steps": self.planning_steps >= 0,
            "mfpt_period": self.mfpt_period >= 1,
            "exploration_mix": 0.0 <= self.exploration_mix < 1.0,
            "mu_cap": self.mu_cap > 0.0,
            "sample_budget": self.sample_budget >= 0,
            "checkpoint_interval": self.checkpoint_interval >= 1,
            "max_sweeps": self.max_sweeps >= 1,
            "stable_phases": self.stable_phases >= 1,
        }
        bad = [name for name, ok in checks.items() if not ok]
        if bad:
            raise ValueError(f"parameters out of range: {', '.join(bad)}")


class Checkpoint(NamedTuple):
    samples: int
    sweeps: int
    wall_elapsed: float
    policy: np.ndarray


@dataclass
class LearningTrace:
    algorithm: str
    checkpoints: list[Checkpoint] = field(default_factory=list)
    q: np.ndarray | None = None
    v: np.ndarray | None = None
    samples_consumed: int = 0
    sweeps_done: int = 0
    phases: int = 0
    stopped_early: bool = False
    wall_elapsed: float = 0.0
    model: "LearnedModel | None" = None

    def same_run(self, other: "LearningTrace") -> bool:
        """Bit-level equality of everything except wall-clock fields."""
        if len(self.checkpoints) != len(other.checkpoints):
            return False
        for c1, c2 in zip(self.checkpoints, other.checkpoints):
            if c1.samples != c2.samples or c1.sweeps != c2.sweeps or not np.array_equal(c1.policy, c2.policy):
                return False
        return (
            self.samples_consumed == other.samples_consumed
            and self.sweeps_done == other.sweeps_done
            and self.stopped_early == other.stopped_early
            and self.q.tobytes() == other.q.tobytes()
            and self.v.tobytes() == other.v.tobytes()
        )


class RandomStream:
    """Block-buffered draws from a seeded numpy ``Generator``.

    Offers the ``random()`` / ``integers(n)`` subset the learners and the
    simulator use, at a fraction of the per-call cost of the generator.
    """

    def __init__(self, seed: int, block: int = 4096):
        self._gen = np.random.default_rng(seed)
        self._block = block
        self._buf: list[float] = []
        self._pos = 0

    def random(self) -> float:
        if self._pos == len(self._buf):
            self._buf = self._gen.random(self._block).tolist()
            self._pos = 0
        u = self._buf[self._pos]
        self._pos += 1
        return u

    def integers(self, n: int) -> int:
        return int(self.random() * n)


class LearnedModel:
    """Count-statistics estimate of transitions and rewards.

    Every observed ``(s, a, s')`` triple owns one slot in flat parallel
    lists; ``_pair_slots[s][a]`` lists the slots of a pair in first-seen
    order.  An unvisited pair reads as a zero-reward self-loop.
    """

    def __init__(self, n_states: int, n_actions: int):
        self.n_states = n_states
        self.n_actions = n_actions
        self._succ = [[[] for _ in range(n_actions)] for _ in range(n_states)]
        self._pair_slots = [[[] for _ in range(n_actions)] for _ in range(n_states)]
        self._visits = [[0] * n_actions for _ in range(n_states)]
        self._slot_s: list[int] = []
        self._slot_a: list[int] = []
        self._slot_next: list[int] = []
        self._slot_rank: list[int] = []
        self._slot_count: list[int] = []
        self._slot_reward: list[float] = []
        self.observed: list[tuple[int, int]] = []

    @classmethod
    def from_mdp(cls, mdp: TabularMdp, total: int = 1) -> "LearnedModel":
        """Model whose counts reproduce ``mdp`` exactly, ``total`` samples per pair.

        Every successor probability times ``total`` must be an integer.
        """
        model = cls(mdp.n_states, mdp.n_actions)
        for s in range(mdp.n_states):
            if s == mdp.goal:
                continue
            for a in range(mdp.n_actions):
                for s_next, p in mdp.successors(s, a).items():
                    count = p * total
                    if abs(count - round(count)) > 1e-9:
                        raise ValueError(f"probability {p} is not a multiple of 1/{total}")
                    r = float(mdp.rewards[s, a][mdp.next_states[s, a] == s_next][0])
                    for _ in range(int(round(count))):
                        model.update(Experience(s, a, r, s_next))
        return model

    def update(self, e: Experience) -> None:
        s, a, s_next = e.s, e.a, e.s_next
        succ = self._succ[s][a]
        try:
            slot = self._pair_slots[s][a][succ.index(s_next)]
        except ValueError:
            slot = len(self._slot_s)
            self._pair_slots[s][a].append(slot)
            self._slot_s.append(s)
            self._slot_a.append(a)
            self._slot_next.append(s_next)
            self._slot_rank.append(len(succ))
            self._slot_count.append(0)
            self._slot_reward.append(0.0)
            succ.append(s_next)
        if self._visits[s][a] == 0:
            self.observed.append((s, a))
        self._slot_count[slot] += 1
        self._slot_reward[slot] += e.r
        self._visits[s][a] += 1

    @property
    def visits(self) -> np.ndarray:
        return np.array(self._visits, dtype=np.int64)

    def _slot_arrays(self):
        s = np.array(self._slot_s, dtype=np.int64)
        a = np.array(self._slot_a, dtype=np.int64)
        nxt = np.array(self._slot_next, dtype=np.int64)
        count = np.array(self._slot_count, dtype=np.int64)
        reward_sum = np.array(self._slot_reward, dtype=float)
        return s, a, nxt, count, reward_sum

    def counts(self) -> np.ndarray:
        """Dense ``count[s][a][s']``."""
        s, a, nxt, count, _ = self._slot_arrays()
        out = np.zeros((self.n_states, self.n_actions, self.n_states), dtype=np.int64)
        out[s, a, nxt] = count
        return out

    def reward_sum(self) -> np.ndarray:
        s, a, nxt, _, reward_sum = self._slot_arrays()
        out = np.zeros((self.n_states, self.n_actions, self.n_states))
        out[s, a, nxt] = reward_sum
        return out

    def t_hat(self) -> np.ndarray:
        """Dense ``t_hat[s][a][s']``."""
        s, a, nxt, count, _ = self._slot_arrays()
        visits = self.visits
        out = np.zeros((self.n_states, self.n_actions, self.n_states))
        idx = np.arange(self.n_states)
        out[idx, :, idx] = (visits == 0).astype(float)
        out[s, a, nxt] = count / visits[s, a]
        return out

    def r_hat(self) -> np.ndarray:
        """Dense ``r_hat[s][a][s']``; unobserved transitions read 0."""
        s, a, nxt, count, reward_sum = self._slot_arrays()
        out = np.zeros((self.n_states, self.n_actions, self.n_states))
        out[s, a, nxt] = reward_sum / count
        return out

    def as_mdp(self, goal: int, gamma: float) -> TabularMdp:
        """The certainty-equivalent MDP ``(t_hat, r_hat)``."""
        S, A = self.n_states, self.n_actions
        s, a, nxt, count, reward_sum = self._slot_arrays()
        rank = np.array(self._slot_rank, dtype=np.int64)
        width = int(rank.max()) + 1 if rank.size else 1
        next_states = np.repeat(np.arange(S), A * width).reshape(S, A, width)
        probs = np.zeros((S, A, width))
        rewards = np.zeros((S, A, width))
        probs[:, :, 0] = 1.0
        if s.size:
            probs[s, a, 0] = 0.0
            next_states[s, a, rank] = nxt
            probs[s, a, rank] = count / self.visits[s, a]
            rewards[s, a, rank] = reward_sum / count
        return TabularMdp(next_states, probs, rewards, goal, gamma)

    def sample(self, s: int, a: int, rng) -> tuple[int, float]:
        """Draw ``s' ~ t_hat[s][a]`` and return it with ``r_hat[s][a][s']``."""
        visits = self._visits[s][a]
        if visits == 0:
            raise ValueError(f"pair ({s}, {a}) was never observed")
        slots = self._pair_slots[s][a]
        slot = slots[0]
        if len(slots) > 1:
            u = rng.integers(visits)
            for slot in slots:
                if u < self._slot_count[slot]:
                    break
                u -= self._slot_count[slot]
        return self._slot_next[slot], self._slot_reward[slot] / self._slot_count[slot]


def model_update(m: LearnedModel, e: Experience) -> None:
    m.update(e)


def q_update(q, e: Experience, alpha: float, gamma: float) -> None:
    """One tabular Q-learning step, in place (numpy array or nested lists)."""
    row = q[e.s]
    row[e.a] += alpha * (e.r + gamma * max(q[e.s_next]) - row[e.a])


def _argmax(row) -> int:
    return row.index(max(row))


def epsilon_greedy(q, s: int, eps: float, rng) -> int:
    """Greedy action (lowest index on ties) or, with probability ``eps``, a uniform one.

    No random draw is made when ``eps`` is 0.
    """
    row = q[s]
    if eps > 0.0 and rng.random() < eps:
        return int(rng.integers(len(row)))
    if isinstance(row, np.ndarray):
        return int(np.argmax(row))
    return _argmax(row)


def mfpt_vi_phase(m: LearnedModel, q: np.ndarray, v: np.ndarray, goal: int, params: LearnParams):
    """Value iteration on the learned model in ascending-MFPT order.

    Passage times come from the chain induced by the current greedy policy
    of ``q``; they are computed once per call.  Sweeps update ``q`` and
    ``v`` in place, Gauss-Seidel style, until the largest change in a
    sweep is at most ``epsilon_tol``.  Returns ``(sweeps, delta_max)``.
    """
    mdp = m.as_mdp(goal, params.gamma)
    pi = np.argmax(q, axis=1)
    mfpt = solve_mfpt(induced_chain(mdp, pi, params.exploration_mix), goal, params.mu_cap)
    return ordered_sweeps(mdp, q, v, priority_order(mfpt), params.epsilon_tol, params.max_sweeps)


def ordered_sweeps(mdp: TabularMdp, q: np.ndarray, v: np.ndarray, order, tol: float, max_sweeps: int):
    """In-place Bellman sweeps visiting states in ``order``.

    Returns ``(sweeps, delta)``; raises :class:`BudgetExhausted` when
    ``max_sweeps`` passes do not bring the largest change below ``tol``.
    """
    sweeps, delta = _sweep_kernel(
        mdp.next_states, mdp.probs, mdp.rewards, mdp.discount,
        q, v, np.asarray(order, dtype=np.int64), tol, max_sweeps,
    )
    if delta > tol:
        raise BudgetExhausted(max_sweeps, delta)
    return int(sweeps), float(delta)


@numba.njit(cache=True)
def _sweep_kernel(succ, probs, rewards, gamma, q, v, order, tol, max_sweeps):
    n_actions, width = succ.shape[1], succ.shape[2]
    delta = np.inf
    sweep = 0
    while sweep < max_sweeps:
        sweep += 1
        delta = 0.0
        for s in order:
            best = -np.inf
            for a in range(n_actions):
                total = 0.0
                for k in range(width):
                    p = probs[s, a, k]
                    if p > 0.0:
                        total += p * (rewards[s, a, k] + gamma * v[succ[s, a, k]])
                q[s, a] = total
                if total > best:
                    best = total
            diff = abs(best - v[s])
            if diff > delta:
                delta = diff
            v[s] = best
        if delta <= tol:
            break
    return sweep, delta


def _run(env, params: LearnParams, algorithm: str, planning: bool, mfpt: bool, model=None, observer=None):
    # observer(samples, model, q) sees the state before the first sample and
    # after every later one; q is the live nested-list table, not a copy.
    rng = RandomStream(params.seed)
    n_states, n_actions, goal = env.n_states, env.n_actions, env.goal
    q = [[0.0] * n_actions for _ in range(n_states)]
    v = np.zeros(n_states)
    uses_model = planning or mfpt
    if model is None and uses_model:
        model = LearnedModel(n_states, n_actions)
    starts = [s for s in range(n_states) if s != goal]
    n_starts = len(starts)
    alpha, gamma, eps = params.alpha, params.gamma, params.epsilon_greedy
    n_plan = params.planning_steps if planning else 0
    step = env.step

    trace = LearningTrace(algorithm=algorithm)
    t0 = time.perf_counter()

    def greedy() -> np.ndarray:
        return np.argmax(np.array(q), axis=1)

    def checkpoint(samples: int, policy=None) -> None:
        policy = greedy() if policy is None else policy
        trace.checkpoints.append(Checkpoint(samples, trace.sweeps_done, time.perf_counter() - t0, policy))

    checkpoint(0)
    if observer is not None:
        observer(0, model, q)
    last_policy = None
    stable = 0
    samples = 0
    while samples < params.sample_budget:
        s = starts[rng.integers(n_starts)]
        a = epsilon_greedy(q, s, eps, rng)
        s_next, r, _ = step(s, a, rng)
        e = Experience(s, a, r, s_next)
        q_update(q, e, alpha, gamma)
        if uses_model:
            model.update(e)
        if n_plan:
            observed = model.observed
            for _ in range(n_plan):
                ps, pa = observed[rng.integers(len(observed))]
                ps_next, pr = model.sample(ps, pa, rng)
                q_update(q, Experience(ps, pa, pr, ps_next), alpha, gamma)
        samples += 1

        converged = False
        policy = None
        if mfpt and samples % params.mfpt_period == 0:
            qa = np.array(q)
            sweeps, delta = mfpt_vi_phase(model, qa, v, goal, params)
            q = qa.tolist()
            trace.sweeps_done += sweeps
            trace.phases += 1
            policy = np.argmax(qa, axis=1)
            if last_policy is not None and delta <= params.epsilon_tol and np.array_equal(policy, last_policy):
                stable += 1
            else:
                stable = 0
            last_policy = policy
            converged = stable >= params.stable_phases
        if observer is not None:
            observer(samples, model, q)

        if samples % params.checkpoint_interval == 0 or converged or samples == params.sample_budget:
            checkpoint(samples, policy)
        if converged:
            trace.stopped_early = True
            break

    trace.samples_consumed = samples
    trace.q = np.array(q)
    trace.v = v if mfpt else trace.q.max(axis=1)
    trace.model = model
    trace.wall_elapsed = time.perf_counter() - t0
    return trace


def run_q_learning(env, params: LearnParams, observer=None) -> LearningTrace:
    return _run(env, params, "q", planning=False, mfpt=False, observer=observer)


def run_dyna(env, params: LearnParams, observer=None) -> LearningTrace:
    return _run(env, params, "dyna", planning=True, mfpt=False, observer=observer)


def run_mfpt_q(env, params: LearnParams, model: LearnedModel | None = None, observer=None) -> LearningTrace:
    return _run(env, params, "mfpt-q", planning=False, mfpt=True, model=model, observer=observer)


def run_mfpt_dyna(env, params: LearnParams, model: LearnedModel | None = None, observer=None) -> LearningTrace:
    """MFPT-prioritised value iteration on top of DYNA planning.

    ``model`` seeds the learned model (it is updated in place); passing a
    model built by :meth:`LearnedModel.from_mdp` with a zero sample budget
    reproduces planning on a known MDP.
    """
    return _run(env, params, "mfpt-dyna", planning=True, mfpt=True, model=model, observer=observer)
