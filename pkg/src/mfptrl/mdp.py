"""Tabular MDP model and exact dynamic-programming solvers.

Transitions are stored in a fixed-width successor form: for every
``(s, a)`` pair there are ``K`` slots holding a successor index, its
probability and the reward paid on that transition.  Grid maps have at
most a handful of successors per pair, so this keeps value iteration
vectorised without materialising ``|A| x |S| x |S|`` tables.  Dense
tables are still accepted (:meth:`TabularMdp.from_dense`) and produced
(:attr:`TabularMdp.transition`, :attr:`TabularMdp.reward`) on request.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ROW_SUM_TOL = 1e-9
DEFAULT_MAX_SWEEPS = 100_000


class BudgetExhausted(RuntimeError):
    """Raised when a solver hits ``max_sweeps`` before reaching tolerance."""

    def __init__(self, sweeps: int, delta: float):
        super().__init__(f"no convergence after {sweeps} sweeps (last delta {delta:.3g})")
        self.sweeps = sweeps
        self.delta = delta


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ConvergenceParams:
    tolerance: float = 1e-6
    max_sweeps: int = DEFAULT_MAX_SWEEPS

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be a positive integer")


class TabularMdp:
    """Finite MDP ``(S, A, T, R)`` with an absorbing goal and discount.

    Parameters
    ----------
    next_states : int array, shape (S, A, K)
        Successor index for each slot.
    probs : float array, shape (S, A, K)
        Probability of each slot; each ``(s, a)`` row sums to one.
    rewards : float array, shape (S, A, K)
        Reward ``R_a(s, s')`` paid when the slot's transition happens.
    goal : int
        Goal state.  Its rows are overwritten with a zero-reward self-loop.
    discount : float
        Discount factor in ``(0, 1]``.
    """

    def __init__(self, next_states, probs, rewards, goal: int, discount: float):
        next_states = np.array(next_states, dtype=np.int64)
        probs = np.array(probs, dtype=float)
        rewards = np.array(rewards, dtype=float)
        if next_states.ndim != 3 or probs.shape != next_states.shape or rewards.shape != next_states.shape:
            raise ValueError("next_states, probs and rewards must share one (S, A, K) shape")
        n_states, n_actions, _ = next_states.shape
        if n_states < 1 or n_actions < 1:
            raise ValueError("need at least one state and one action")
        if not 0 <= goal < n_states:
            raise ValueError(f"goal {goal} outside [0, {n_states})")
        if not 0.0 < discount <= 1.0:
            raise ValueError("discount must lie in (0, 1]")

        next_states[goal] = goal
        probs[goal] = 0.0
        probs[goal, :, 0] = 1.0
        rewards[goal] = 0.0

        if next_states.min() < 0 or next_states.max() >= n_states:
            raise ValueError("successor index out of range")
        if probs.min() < 0.0 or probs.max() > 1.0:
            raise ValueError("transition probabilities must lie in [0, 1]")
        row_sums = probs.sum(axis=2)
        bad = np.abs(row_sums - 1.0) > ROW_SUM_TOL
        if bad.any():
            s, a = np.argwhere(bad)[0]
            raise ValueError(f"transition row (s={s}, a={a}) sums to {row_sums[s, a]!r}")
        if not np.isfinite(rewards).all():
            raise ValueError("rewards must be finite")

        for arr in (next_states, probs, rewards):
            arr.flags.writeable = False
        self.next_states = next_states
        self.probs = probs
        self.rewards = rewards
        self.goal = int(goal)
        self.discount = float(discount)

    @classmethod
    def from_dense(cls, transition, reward, goal: int, discount: float) -> "TabularMdp":
        """Build from dense ``T[a][s][s']`` and ``R[a][s][s']`` tables."""
        transition = np.asarray(transition, dtype=float)
        reward = np.asarray(reward, dtype=float)
        if transition.ndim != 3 or transition.shape[1] != transition.shape[2]:
            raise ValueError("transition must have shape (A, S, S)")
        if reward.shape != transition.shape:
            raise ValueError("reward must match the transition shape")
        n_actions, n_states, _ = transition.shape
        t = transition.transpose(1, 0, 2)
        r = reward.transpose(1, 0, 2)
        width = max(1, int((t != 0).sum(axis=2).max()))
        next_states = np.zeros((n_states, n_actions, width), dtype=np.int64)
        probs = np.zeros((n_states, n_actions, width))
        rewards = np.zeros((n_states, n_actions, width))
        for s in range(n_states):
            for a in range(n_actions):
                (succ,) = np.nonzero(t[s, a])
                k = len(succ)
                next_states[s, a, :k] = succ
                next_states[s, a, k:] = s
                probs[s, a, :k] = t[s, a, succ]
                rewards[s, a, :k] = r[s, a, succ]
        return cls(next_states, probs, rewards, goal, discount)

    @property
    def n_states(self) -> int:
        return self.next_states.shape[0]

    @property
    def n_actions(self) -> int:
        return self.next_states.shape[1]

    @property
    def transition(self) -> np.ndarray:
        """Dense ``T[a][s][s']``."""
        S, A, _ = self.next_states.shape
        dense = np.zeros((A, S, S))
        s_idx, a_idx, _ = np.indices(self.next_states.shape)
        np.add.at(dense, (a_idx, s_idx, self.next_states), self.probs)
        return dense

    @property
    def reward(self) -> np.ndarray:
        """Dense ``R[a][s][s']``; entries for impossible transitions are 0."""
        S, A, _ = self.next_states.shape
        dense = np.zeros((A, S, S))
        mask = self.probs > 0
        s_idx, a_idx, _ = np.indices(self.next_states.shape)
        dense[a_idx[mask], s_idx[mask], self.next_states[mask]] = self.rewards[mask]
        return dense

    def q_values(self, v: np.ndarray) -> np.ndarray:
        """One-step lookahead ``Q[s, a]`` for every state against ``v``."""
        return (self.probs * (self.rewards + self.discount * v[self.next_states])).sum(axis=2)

    def state_q(self, v: np.ndarray, s: int) -> np.ndarray:
        return (self.probs[s] * (self.rewards[s] + self.discount * v[self.next_states[s]])).sum(axis=1)

    def successors(self, s: int, a: int) -> dict[int, float]:
        """Merged successor distribution of ``(s, a)`` (zero-probability slots dropped)."""
        out: dict[int, float] = {}
        for nxt, p in zip(self.next_states[s, a], self.probs[s, a]):
            if p > 0:
                out[int(nxt)] = out.get(int(nxt), 0.0) + float(p)
        return out

    def can_reach_goal(self) -> np.ndarray:
        """Boolean mask of states with a positive-probability path to the goal."""
        preds: list[list[int]] = [[] for _ in range(self.n_states)]
        mask = self.probs > 0
        for s, a, k in zip(*np.nonzero(mask)):
            preds[self.next_states[s, a, k]].append(int(s))
        seen = np.zeros(self.n_states, dtype=bool)
        seen[self.goal] = True
        stack = [self.goal]
        while stack:
            t = stack.pop()
            for s in preds[t]:
                if not seen[s]:
                    seen[s] = True
                    stack.append(s)
        return seen


def _check_values(mdp: TabularMdp, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (mdp.n_states,):
        raise LengthMismatch(f"value function has {v.shape} entries, expected ({mdp.n_states},)")
    return v


def bellman_backup(mdp: TabularMdp, v, s: int) -> tuple[float, int]:
    """Max-over-actions expected backup at state ``s``; ties go to the lowest action."""
    v = _check_values(mdp, v)
    q = mdp.state_q(v, s)
    best = int(np.argmax(q))
    return float(q[best]), best


def greedy_policy(mdp: TabularMdp, v) -> np.ndarray:
    v = _check_values(mdp, v)
    return np.argmax(mdp.q_values(v), axis=1)


def max_value_diff(v1, v2) -> float:
    v1 = np.asarray(v1, dtype=float)
    v2 = np.asarray(v2, dtype=float)
    if v1.shape != v2.shape:
        raise LengthMismatch(f"{v1.shape} vs {v2.shape}")
    if v1.size == 0:
        return 0.0
    return float(np.max(np.abs(v1 - v2)))


def value_iteration(mdp: TabularMdp, params: ConvergenceParams = ConvergenceParams(), v0=None):
    """Synchronous value iteration.

    Returns ``(v, pi, sweeps)``; stops once two consecutive sweeps differ
    by at most ``params.tolerance`` in the sup norm.
    """
    v = np.zeros(mdp.n_states) if v0 is None else _check_values(mdp, v0).copy()
    delta = np.inf
    for sweep in range(1, params.max_sweeps + 1):
        v_new = mdp.q_values(v).max(axis=1)
        delta = max_value_diff(v, v_new)
        v = v_new
        if delta <= params.tolerance:
            return v, greedy_policy(mdp, v), sweep
    raise BudgetExhausted(params.max_sweeps, delta)


def value_change_prioritized_vi(mdp: TabularMdp, params: ConvergenceParams = ConvergenceParams(), v0=None):
    """In-place value iteration ordered by each state's last value change.

    The first pass visits states in index order.  Every later pass visits
    them by descending absolute change recorded in the previous pass (ties
    by index), which is the plain score-and-sort form of prioritized
    sweeping; no priority queue is kept between passes.
    """
    v = np.zeros(mdp.n_states) if v0 is None else _check_values(mdp, v0).copy()
    order = np.arange(mdp.n_states)
    change = np.zeros(mdp.n_states)
    delta = np.inf
    for sweep in range(1, params.max_sweeps + 1):
        for s in order:
            new = mdp.state_q(v, s).max()
            change[s] = abs(new - v[s])
            v[s] = new
        delta = float(change.max())
        if delta <= params.tolerance:
            return v, greedy_policy(mdp, v), sweep
        order = np.argsort(-change, kind="stable")
    raise BudgetExhausted(params.max_sweeps, delta)
