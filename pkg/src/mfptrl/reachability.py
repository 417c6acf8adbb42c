"""Mean first passage times to the goal and reachability landscapes.

For a chain ``p`` and goal ``g`` the mean first passage time ``mu[i]``
(expected number of hops to first reach ``g`` from ``i``) satisfies::

    mu[g] = 0
    mu[i] = 1 + sum_{k != g} p[i, k] * mu[k]        for i != g

Written as a linear system over the non-goal states this is
``(I - p_sub) mu_sub = 1``.  States that can wander into a region with
no route to the goal have infinite passage time; they are detected by
graph search before the solve, and together with any numerically
singular or oversized solution are reported as ``mu_cap``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
import scipy.linalg

from .mdp import ROW_SUM_TOL, TabularMdp

DEFAULT_EXPLORATION_MIX = 0.05
DEFAULT_MU_CAP = 1e6
DEFAULT_CLIP = 600.0
SINGULAR_PIVOT = 1e-12


class IoFailure(OSError):
    pass


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ChainMatrix:
    p: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        if p.ndim != 2 or p.shape[0] != p.shape[1]:
            raise ValueError("chain matrix must be square")
        if p.size and (p.min() < 0.0 or p.max() > 1.0):
            raise ValueError("chain entries must lie in [0, 1]")
        sums = p.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > ROW_SUM_TOL):
            i = int(np.argmax(np.abs(sums - 1.0)))
            raise ValueError(f"chain row {i} sums to {sums[i]!r}")
        object.__setattr__(self, "p", p)

    @property
    def n(self) -> int:
        return self.p.shape[0]


@dataclass(frozen=True)
class MfptVector:
    mu: np.ndarray
    goal: int
    capped: np.ndarray
    mu_cap: float = DEFAULT_MU_CAP

    def __len__(self) -> int:
        return len(self.mu)


def induced_chain(mdp: TabularMdp, pi, exploration_mix: float = DEFAULT_EXPLORATION_MIX) -> ChainMatrix:
    """Markov chain of ``mdp`` under policy ``pi``.

    Row ``i`` is ``(1 - mix) * T[pi[i]][i] + mix * mean_a T[a][i]``.
    """
    if not 0.0 <= exploration_mix < 1.0:
        raise ValueError("exploration_mix must lie in [0, 1)")
    pi = np.asarray(pi, dtype=np.int64)
    n, n_actions = mdp.n_states, mdp.n_actions
    if pi.shape != (n,) or (n and (pi.min() < 0 or pi.max() >= n_actions)):
        raise ValueError("policy does not match the MDP")
    rows = np.arange(n)
    p = np.zeros((n, n))
    width = mdp.next_states.shape[2]
    rows_k = np.repeat(rows, width)
    np.add.at(p, (rows_k, mdp.next_states[rows, pi].ravel()), (1.0 - exploration_mix) * mdp.probs[rows, pi].ravel())
    if exploration_mix > 0.0:
        rows_ak = np.repeat(rows, n_actions * width)
        np.add.at(p, (rows_ak, mdp.next_states.ravel()), (exploration_mix / n_actions) * mdp.probs.ravel())
    return ChainMatrix(p)


def _absorbed_surely(p: np.ndarray, goal: int) -> np.ndarray:
    """States from which the walk reaches ``goal`` with probability one."""
    n = p.shape[0]
    src, dst = np.nonzero(p > 0)
    # the goal is absorbing whatever its row says
    leaves_goal = src == goal
    src, dst = src[~leaves_goal], dst[~leaves_goal]
    preds: list[list[int]] = [[] for _ in range(n)]
    for i, k in zip(src.tolist(), dst.tolist()):
        preds[k].append(i)

    def backward_closure(seed: np.ndarray) -> np.ndarray:
        seen = seed.copy()
        stack = np.flatnonzero(seed).tolist()
        while stack:
            k = stack.pop()
            for i in preds[k]:
                if not seen[i]:
                    seen[i] = True
                    stack.append(i)
        return seen

    seed = np.zeros(n, dtype=bool)
    seed[goal] = True
    trapped = ~backward_closure(seed)
    if not trapped.any():
        return np.ones(n, dtype=bool)
    return ~backward_closure(trapped)


def solve_mfpt(chain: ChainMatrix, goal: int, mu_cap: float = DEFAULT_MU_CAP) -> MfptVector:
    """Expected hop counts from every state to ``goal``.

    Solves the goal-excluded system by LU decomposition with partial
    pivoting.  States that reach the goal with probability below one,
    states whose solution exceeds ``mu_cap`` or is non-finite, and every
    state of a system with a pivot below ``1e-12`` are set to ``mu_cap``
    and flagged in ``capped``.
    """
    if not mu_cap > 0:
        raise ValueError("mu_cap must be positive")
    p = chain.p
    n = chain.n
    if not 0 <= goal < n:
        raise ValueError(f"goal {goal} outside [0, {n})")
    mu = np.full(n, float(mu_cap))
    capped = np.ones(n, dtype=bool)
    mu[goal] = 0.0
    capped[goal] = False

    solvable = _absorbed_surely(p, goal)
    solvable[goal] = False
    idx = np.flatnonzero(solvable)
    if idx.size:
        a = np.eye(idx.size) - p[np.ix_(idx, idx)]
        lu, piv = scipy.linalg.lu_factor(a, check_finite=False)
        if np.min(np.abs(np.diag(lu))) >= SINGULAR_PIVOT:
            sol = scipy.linalg.lu_solve((lu, piv), np.ones(idx.size), check_finite=False)
            ok = np.isfinite(sol) & (sol <= mu_cap)
            mu[idx[ok]] = sol[ok]
            capped[idx[ok]] = False
    return MfptVector(mu=mu, goal=int(goal), capped=capped, mu_cap=float(mu_cap))


def priority_order(mfpt: MfptVector) -> np.ndarray:
    """State indices by ascending passage time; ties keep index order."""
    return np.argsort(mfpt.mu, kind="stable")


def mfpt_monte_carlo(chain: ChainMatrix, goal: int, episodes: int, horizon: int, seed: int, return_stderr: bool = False):
    """Sample-mean first passage times from simulated walks.

    Every state starts ``episodes`` independent walks; walks still running
    after ``horizon`` steps count as ``horizon``.  With ``return_stderr``
    the standard error of each mean is returned as well.
    """
    if episodes < 1 or horizon < 1:
        raise ValueError("episodes and horizon must be at least 1")
    keep, alias = _alias_tables(chain.p)
    starts = np.array([s for s in range(chain.n) if s != goal], dtype=np.int64)
    rng = np.random.default_rng(seed)
    total, total_sq = _walk_kernel(keep, alias, int(goal), starts, int(episodes), int(horizon), rng)

    est = np.zeros(chain.n)
    err = np.zeros(chain.n)
    est[starts] = total / episodes
    if episodes > 1:
        var = (total_sq - total * total / episodes) / (episodes - 1)
        err[starts] = np.sqrt(np.maximum(var, 0.0) / episodes)
    return (est, err) if return_stderr else est


def _alias_tables(p: np.ndarray):
    """Walker alias tables (Vose's construction), one row per state."""
    n = p.shape[0]
    keep = np.ones((n, n))
    alias = np.tile(np.arange(n), (n, 1))
    for i in range(n):
        scaled = (p[i] / p[i].sum() * n).tolist()
        small = [k for k in range(n) if scaled[k] < 1.0]
        large = [k for k in range(n) if scaled[k] >= 1.0]
        while small and large:
            lo, hi = small.pop(), large.pop()
            keep[i, lo] = scaled[lo]
            alias[i, lo] = hi
            scaled[hi] -= 1.0 - scaled[lo]
            (small if scaled[hi] < 1.0 else large).append(hi)
        # leftovers are 1 up to rounding
        for k in small + large:
            keep[i, k] = 1.0
    return keep, alias


@numba.njit(cache=True)
def _walk_kernel(keep, alias, goal, starts, episodes, horizon, rng):
    n = keep.shape[0]
    total = np.zeros(starts.size)
    total_sq = np.zeros(starts.size)
    for i in range(starts.size):
        for _ in range(episodes):
            s = starts[i]
            t = 0
            while t < horizon:
                u = rng.random() * n
                k = int(u)
                s = k if u - k < keep[s, k] else alias[s, k]
                t += 1
                if s == goal:
                    break
            total[i] += t
            total_sq[i] += float(t) * t
    return total, total_sq


def landscape_pixels(mfpt: MfptVector, clip: float = DEFAULT_CLIP) -> np.ndarray:
    """Gray levels ``round(255 * min(mu, clip) / clip)``, rounding half up."""
    if not clip > 0:
        raise ValueError("clip must be positive")
    return np.floor(255.0 * np.minimum(mfpt.mu, clip) / clip + 0.5).astype(int)


def _write_pgm(path: Path, pixels: np.ndarray) -> None:
    height, width = pixels.shape
    lines = ["P2", f"{width} {height}", "255"]
    lines.extend(" ".join(str(int(v)) for v in row) for row in pixels)
    path.write_text("\n".join(lines) + "\n", encoding="ascii")


def landscape_export(
    mfpt: MfptVector,
    shape,
    path,
    clip: float = DEFAULT_CLIP,
    mask=None,
    blocked_level: int = 255,
) -> list[Path]:
    """Write the landscape as ASCII PGM image(s) plus a raw CSV.

    ``shape`` is the grid extent ``(width, height)`` or
    ``(width, height, depth)``.  Without ``mask`` the product of ``shape``
    must equal the state count and states fill the grid row-major.  With a
    boolean ``mask`` of full-grid shape ``(height, width)`` /
    ``(depth, height, width)`` the states fill the ``True`` cells in
    row-major order and the rest is painted ``blocked_level``.

    A 2D shape writes ``<path>.pgm``; a 3D shape writes one
    ``<path>_z<k>.pgm`` per layer.  ``<path>.csv`` holds ``state,mu,capped``.
    Returns the written paths.
    """
    shape = tuple(int(d) for d in shape)
    if len(shape) not in (2, 3):
        raise ShapeMismatch("shape must be 2D or 3D")
    grid_shape = tuple(reversed(shape))
    n = len(mfpt.mu)
    pixels_flat = landscape_pixels(mfpt, clip)
    if mask is None:
        if int(np.prod(shape)) != n:
            raise ShapeMismatch(f"shape {shape} holds {int(np.prod(shape))} cells, landscape has {n} states")
        grid = pixels_flat.reshape(grid_shape)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != grid_shape or int(mask.sum()) != n:
            raise ShapeMismatch("mask does not match the shape and state count")
        grid = np.full(grid_shape, int(blocked_level))
        grid[mask] = pixels_flat

    base = Path(os.fspath(path))
    if base.suffix in (".pgm", ".csv"):
        base = base.with_suffix("")
    written = []
    try:
        base.parent.mkdir(parents=True, exist_ok=True)
        if len(shape) == 2:
            target = base.with_name(base.name + ".pgm")
            _write_pgm(target, grid)
            written.append(target)
        else:
            for z in range(shape[2]):
                target = base.with_name(f"{base.name}_z{z}.pgm")
                _write_pgm(target, grid[z])
                written.append(target)
        csv_path = base.with_name(base.name + ".csv")
        rows = ["state,mu,capped"]
        rows.extend(f"{i},{float(m)!r},{int(c)}" for i, (m, c) in enumerate(zip(mfpt.mu, mfpt.capped)))
        csv_path.write_text("\n".join(rows) + "\n", encoding="utf-8")
        written.append(csv_path)
    except OSError as exc:
        raise IoFailure(exc.errno, f"cannot write landscape to {base}: {exc.strerror or exc}") from exc
    return written


def read_pgm(path) -> np.ndarray:
    """Parse an ASCII (P2) graymap, validating its grammar; returns the pixel grid."""
    text = Path(path).read_text(encoding="ascii")
    tokens = []
    for line in text.splitlines():
        tokens.extend(line.split("#", 1)[0].split())
    if not tokens or tokens[0] != "P2":
        raise ValueError("missing P2 magic number")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
        values = [int(t) for t in tokens[4:]]
    except ValueError as exc:
        raise ValueError(f"non-integer token in graymap: {exc}") from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ValueError("bad graymap header")
    if len(values) != width * height:
        raise ValueError(f"expected {width * height} pixels, found {len(values)}")
    pixels = np.array(values).reshape(height, width)
    if pixels.min() < 0 or pixels.max() > maxval:
        raise ValueError("pixel outside [0, maxval]")
    return pixels
