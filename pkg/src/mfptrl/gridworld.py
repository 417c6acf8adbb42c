"""2D nine-action and 3D seven-action grid environments.

Map text format::

    2d <width> <height>            (or: 3d <width> <height> <depth>)
    goal_reward <real>             optional, default 100
    step_reward <real>             optional, default -1
    slip <real>                    optional, default 0
    <height rows of width chars>   '.' free, 'X' obstacle, 'S' start, 'G' goal

3D maps list ``depth`` layers of rows, separated by one blank line.
Layer ``z`` of the file is height ``z``; row ``y`` runs top to bottom.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mdp import TabularMdp

# idle is always index 0
ACTIONS_2D: tuple[tuple[int, ...], ...] = (
    (0, 0),     # idle
    (0, -1),    # N
    (1, -1),    # NE
    (1, 0),     # E
    (1, 1),     # SE
    (0, 1),     # S
    (-1, 1),    # SW
    (-1, 0),    # W
    (-1, -1),   # NW
)
ACTION_NAMES_2D = ("idle", "N", "NE", "E", "SE", "S", "SW", "W", "NW")

ACTIONS_3D: tuple[tuple[int, ...], ...] = (
    (0, 0, 0),   # idle
    (0, -1, 0),  # N
    (1, 0, 0),   # E
    (0, 1, 0),   # S
    (-1, 0, 0),  # W
    (0, 0, 1),   # TOP
    (0, 0, -1),  # BOTTOM
)
ACTION_NAMES_3D = ("idle", "N", "E", "S", "W", "TOP", "BOTTOM")

DEFAULT_GOAL_REWARD = 100.0
DEFAULT_STEP_REWARD = -1.0
DEFAULT_SLIP = 0.0

_CELL_CHARS = {".", "X", "S", "G"}


class ParseError(ValueError):
    def __init__(self, message: str, line: int, column: int = 1):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class ValidationError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    dims: tuple[int, ...]
    obstacles: frozenset = field(default_factory=frozenset)
    start: tuple[int, ...] = (0, 0)
    goal: tuple[int, ...] = (0, 0)
    goal_reward: float = DEFAULT_GOAL_REWARD
    step_reward: float = DEFAULT_STEP_REWARD
    slip: float = DEFAULT_SLIP

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "start", tuple(int(c) for c in self.start))
        object.__setattr__(self, "goal", tuple(int(c) for c in self.goal))
        object.__setattr__(self, "obstacles", frozenset(tuple(int(c) for c in o) for o in self.obstacles))
        self.validate()

    def validate(self) -> None:
        if len(self.dims) not in (2, 3):
            raise ValidationError("dims must have 2 or 3 extents")
        if any(d < 1 for d in self.dims):
            raise ValidationError("every extent must be positive")
        for name, cell in (("start", self.start), ("goal", self.goal)):
            if not self.in_bounds(cell):
                raise ValidationError(f"{name} {cell} outside the grid")
        for cell in self.obstacles:
            if not self.in_bounds(cell):
                raise ValidationError(f"obstacle {cell} outside the grid")
        if self.start == self.goal:
            raise ValidationError("start and goal must differ")
        if self.start in self.obstacles:
            raise ValidationError("start cell is an obstacle")
        if self.goal in self.obstacles:
            raise ValidationError("goal cell is an obstacle")
        if not 0.0 <= self.slip < 1.0:
            raise ValidationError("slip must lie in [0, 1)")

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def actions(self) -> tuple[tuple[int, ...], ...]:
        return ACTIONS_2D if self.ndim == 2 else ACTIONS_3D

    @property
    def action_names(self) -> tuple[str, ...]:
        return ACTION_NAMES_2D if self.ndim == 2 else ACTION_NAMES_3D

    def in_bounds(self, cell) -> bool:
        return len(cell) == len(self.dims) and all(0 <= c < d for c, d in zip(cell, self.dims))

    def free_cells(self) -> list[tuple[int, ...]]:
        """Free cells in row-major order (z, then y, then x)."""
        if self.ndim == 2:
            w, h = self.dims
            cells = [(x, y) for y in range(h) for x in range(w)]
        else:
            w, h, d = self.dims
            cells = [(x, y, z) for z in range(d) for y in range(h) for x in range(w)]
        return [c for c in cells if c not in self.obstacles]

    @property
    def shape(self) -> tuple[int, ...]:
        """Array shape of a full-grid image: (height, width) or (depth, height, width)."""
        return tuple(reversed(self.dims))


def _parse_real(token: str, line: int, column: int) -> float:
    try:
        return float(token)
    except ValueError:
        raise ParseError(f"expected a real number, got {token!r}", line, column) from None


def parse_map(text: str) -> GridSpec:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty map", 1)

    header = lines[0].split()
    if not header or header[0] not in ("2d", "3d"):
        raise ParseError("header must start with '2d' or '3d'", 1)
    ndim = 2 if header[0] == "2d" else 3
    if len(header) != ndim + 1:
        raise ParseError(f"'{header[0]}' header needs {ndim} extents", 1)
    dims = []
    for tok in header[1:]:
        if not tok.isdigit() or int(tok) < 1:
            raise ParseError(f"bad extent {tok!r}", 1, lines[0].find(tok) + 1)
        dims.append(int(tok))

    params = {"goal_reward": DEFAULT_GOAL_REWARD, "step_reward": DEFAULT_STEP_REWARD, "slip": DEFAULT_SLIP}
    i = 1
    while i < len(lines) and lines[i].split() and lines[i].split()[0] in params:
        parts = lines[i].split()
        if len(parts) != 2:
            raise ParseError(f"parameter line needs one value: {lines[i]!r}", i + 1)
        params[parts[0]] = _parse_real(parts[1], i + 1, lines[i].find(parts[1]) + 1)
        i += 1

    width, height = dims[0], dims[1]
    depth = dims[2] if ndim == 3 else 1
    obstacles, starts, goals = [], [], []
    for z in range(depth):
        if z > 0:
            if i >= len(lines) or lines[i] != "":
                raise ParseError("layers must be separated by one blank line", i + 1)
            i += 1
        for y in range(height):
            if i >= len(lines):
                raise ParseError(f"expected {height} rows per layer", i + 1)
            row = lines[i]
            if len(row) != width:
                raise ParseError(f"row has {len(row)} cells, expected {width}", i + 1, min(len(row), width) + 1)
            for x, ch in enumerate(row):
                if ch not in _CELL_CHARS:
                    raise ParseError(f"unknown cell {ch!r}", i + 1, x + 1)
                cell = (x, y) if ndim == 2 else (x, y, z)
                if ch == "X":
                    obstacles.append(cell)
                elif ch == "S":
                    starts.append(cell)
                elif ch == "G":
                    goals.append(cell)
            i += 1
    if i != len(lines):
        raise ParseError("trailing content after the last row", i + 1)
    if len(starts) != 1:
        raise ValidationError(f"exactly one 'S' required, found {len(starts)}")
    if len(goals) != 1:
        raise ValidationError(f"exactly one 'G' required, found {len(goals)}")
    return GridSpec(
        dims=tuple(dims),
        obstacles=frozenset(obstacles),
        start=starts[0],
        goal=goals[0],
        **params,
    )


def serialize_map(spec: GridSpec) -> str:
    """Inverse of :func:`parse_map`; parameters equal to the defaults are omitted."""
    out = [" ".join([f"{spec.ndim}d", *map(str, spec.dims)])]
    for name, default in (("goal_reward", DEFAULT_GOAL_REWARD), ("step_reward", DEFAULT_STEP_REWARD), ("slip", DEFAULT_SLIP)):
        value = getattr(spec, name)
        if value != default:
            out.append(f"{name} {value!r}")
    width, height = spec.dims[0], spec.dims[1]
    depth = spec.dims[2] if spec.ndim == 3 else 1
    for z in range(depth):
        if z > 0:
            out.append("")
        for y in range(height):
            row = []
            for x in range(width):
                cell = (x, y) if spec.ndim == 2 else (x, y, z)
                if cell == spec.start:
                    row.append("S")
                elif cell == spec.goal:
                    row.append("G")
                elif cell in spec.obstacles:
                    row.append("X")
                else:
                    row.append(".")
            out.append("".join(row))
    return "\n".join(out) + "\n"


def load_map(path) -> GridSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_map(fh.read())


class GridIndex:
    """Row-major mapping between free cells and state indices."""

    def __init__(self, spec: GridSpec):
        self.spec = spec
        self.cells = spec.free_cells()
        self.index = {c: i for i, c in enumerate(self.cells)}
        self.goal = self.index[spec.goal]
        self.start = self.index[spec.start]

    def __len__(self) -> int:
        return len(self.cells)

    def move(self, s: int, a: int) -> int:
        """Deterministic outcome of action ``a``; blocked moves stay put."""
        cell = self.cells[s]
        target = tuple(c + d for c, d in zip(cell, self.spec.actions[a]))
        return self.index.get(target, s)

    def to_grid(self, values, fill=np.nan) -> np.ndarray:
        """Scatter per-state values into a full-grid array (obstacles get ``fill``)."""
        grid = np.full(self.spec.shape, fill, dtype=float)
        for s, cell in enumerate(self.cells):
            grid[tuple(reversed(cell))] = values[s]
        return grid


def build_mdp(spec: GridSpec, discount: float = 0.95) -> TabularMdp:
    """Exact MDP of a grid map.

    The intended move succeeds with probability ``1 - slip``; otherwise the
    outcome of one of the other actions happens, uniformly.  Entering the
    goal pays ``goal_reward``; every other transition pays ``step_reward``.
    """
    grid = GridIndex(spec)
    n, n_actions = len(grid), len(spec.actions)
    outcome = np.array([[grid.move(s, a) for a in range(n_actions)] for s in range(n)], dtype=np.int64)
    if spec.slip == 0.0:
        next_states = outcome[:, :, None]
        probs = np.ones((n, n_actions, 1))
    else:
        # slot k of action a is the outcome of action k
        next_states = np.repeat(outcome[:, None, :], n_actions, axis=1)
        other = spec.slip / (n_actions - 1)
        probs = np.full((n, n_actions, n_actions), other)
        probs[:, np.arange(n_actions), np.arange(n_actions)] = 1.0 - spec.slip
    rewards = np.where(next_states == grid.goal, spec.goal_reward, spec.step_reward)
    return TabularMdp(next_states, probs, rewards, grid.goal, discount)


def env_step(spec: GridSpec, s: int, a: int, rng: np.random.Generator, env: "GridEnv | None" = None):
    """Sample one transition; returns ``(s_next, reward, done)``."""
    return (env if env is not None else GridEnv(spec)).step(s, a, rng)


class GridEnv:
    """Sampled-step simulator over a :class:`GridSpec` with precomputed moves."""

    def __init__(self, spec: GridSpec, discount: float = 0.95):
        self.spec = spec
        self.grid = GridIndex(spec)
        self.n_states = len(self.grid)
        self.n_actions = len(spec.actions)
        self.goal = self.grid.goal
        self.discount = discount
        self._moves = [[self.grid.move(s, a) for a in range(self.n_actions)] for s in range(self.n_states)]

    def step(self, s: int, a: int, rng: np.random.Generator):
        if s == self.goal:
            return s, 0.0, True
        taken = a
        if self.spec.slip > 0.0 and rng.random() < self.spec.slip:
            other = int(rng.integers(self.n_actions - 1))
            taken = other if other < a else other + 1
        s_next = self._moves[s][taken]
        done = s_next == self.goal
        return s_next, (self.spec.goal_reward if done else self.spec.step_reward), done

    def mdp(self) -> TabularMdp:
        return build_mdp(self.spec, self.discount)


def random_map(
    rng: np.random.Generator,
    dims: tuple[int, ...],
    obstacle_fraction: float = 0.2,
    connected: bool = True,
    **params,
) -> GridSpec:
    """Random map with start and goal on free cells.

    With ``connected`` the obstacle draw is repeated until every free cell
    can reach the goal through 4- or 6-connected moves.
    """
    cells = [tuple(int(c) for c in idx[::-1]) for idx in np.ndindex(*reversed(dims))]
    for _ in range(1000):
        mask = rng.random(len(cells)) < obstacle_fraction
        free = [c for c, m in zip(cells, mask) if not m]
        if len(free) < 2:
            continue
        pick = rng.choice(len(free), size=2, replace=False)
        start, goal = free[pick[0]], free[pick[1]]
        obstacles = frozenset(c for c, m in zip(cells, mask) if m)
        spec = GridSpec(dims=tuple(dims), obstacles=obstacles, start=start, goal=goal, **params)
        if not connected or _cardinally_connected(spec):
            return spec
    raise RuntimeError("could not draw a connected map; lower obstacle_fraction")


def _cardinally_connected(spec: GridSpec) -> bool:
    free = set(spec.free_cells())
    seen = {spec.goal}
    stack = [spec.goal]
    steps = [d for d in spec.actions if sum(map(abs, d)) == 1]
    while stack:
        cell = stack.pop()
        for d in steps:
            nxt = tuple(c + e for c, e in zip(cell, d))
            if nxt in free and nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return len(seen) == len(free)
