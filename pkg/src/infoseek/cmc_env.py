"""Controllable Markov chain environments.

A CMC is states, actions, and a transition kernel, with no reward. Dense
worlds draw every row from a flat Dirichlet; mazes restrict each row's
support to the current cell and its accessible grid neighbors, with extra
concentration in the action's direction.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .imageio import write_pgm

__all__ = [
    "ACTION_NAMES",
    "TransitionKernel",
    "HistoryTensor",
    "MazeSpec",
    "make_dense_world",
    "make_maze",
    "step",
    "missing_information",
    "coverage",
    "visitation_map",
    "save_kernel_json",
    "load_kernel_json",
    "save_visitation_pgm",
]

ROW_ATOL = 1e-9

# grid moves indexed by action: up, down, right, left
ACTION_NAMES = ("up", "down", "right", "left")
_MOVES = ((-1, 0), (1, 0), (0, 1), (0, -1))


@dataclass
class TransitionKernel:
    """|S| x |A| x |S| array of next-state distributions."""

    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 3 or self.probs.shape[0] != self.probs.shape[2]:
            raise ValueError("kernel must be a (state, action, state) array")
        if np.any(self.probs < 0.0) or not np.all(np.isfinite(self.probs)):
            raise ValueError("kernel probabilities must be finite and nonnegative")
        sums = self.probs.sum(axis=-1)
        if np.max(np.abs(sums - 1.0)) > ROW_ATOL:
            raise ValueError("every kernel row must sum to 1 within 1e-9")

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    def row(self, s: int, a: int) -> np.ndarray:
        return self.probs[s, a]


@dataclass
class HistoryTensor:
    """Visit counts: entry (s, a, s') counts observed transitions."""

    counts: np.ndarray

    @classmethod
    def zeros(cls, n_states: int, n_actions: int) -> "HistoryTensor":
        return cls(np.zeros((n_states, n_actions, n_states), dtype=np.int64))

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 3 or np.any(self.counts < 0):
            raise ValueError("counts must be a nonnegative 3-d integer array")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def record(self, s: int, a: int, s_next: int) -> None:
        self.counts[s, a, s_next] += 1

    def vector(self, s: int, a: int) -> np.ndarray:
        return self.counts[s, a]


def _edge(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a < b else (b, a)


def _grid_neighbors(cell: int, side: int):
    r, c = divmod(cell, side)
    for dr, dc in _MOVES:
        rr, cc = r + dr, c + dc
        if 0 <= rr < side and 0 <= cc < side:
            yield rr * side + cc


@dataclass
class MazeSpec:
    """Square grid with a wall set over grid-adjacent cell pairs.

    The wall graph must leave the grid connected; ``bias_concentration``
    is the Dirichlet concentration given to the action's intended
    neighbor, everything else in the support gets ``base_concentration``.
    """

    side: int
    walls: frozenset = field(default_factory=frozenset)
    bias_concentration: float = 1.0
    base_concentration: float = 0.25

    def __post_init__(self):
        if self.side < 2:
            raise ValueError("maze side must be at least 2")
        if self.bias_concentration <= 0 or self.base_concentration <= 0:
            raise ValueError("concentrations must be positive")
        self.walls = frozenset(_edge(a, b) for a, b in self.walls)
        if not self._connected():
            raise ValueError("wall set disconnects the grid")

    def _connected(self) -> bool:
        n = self.side * self.side
        seen = {0}
        frontier = [0]
        while frontier:
            cell = frontier.pop()
            for nb in _grid_neighbors(cell, self.side):
                if _edge(cell, nb) not in self.walls and nb not in seen:
                    seen.add(nb)
                    frontier.append(nb)
        return len(seen) == n

    def accessible_neighbors(self, cell: int) -> list[int]:
        return [nb for nb in _grid_neighbors(cell, self.side) if _edge(cell, nb) not in self.walls]

    @classmethod
    def random(
        cls,
        side: int,
        rng: np.random.Generator,
        extra_opening_frac: float = 0.1,
        bias_concentration: float = 1.0,
        base_concentration: float = 0.25,
    ) -> "MazeSpec":
        """Recursive-backtracker spanning tree, then knock out a fraction
        of the remaining walls so the maze has loops."""
        n = side * side
        walls = {_edge(c, nb) for c in range(n) for nb in _grid_neighbors(c, side)}
        visited = [False] * n
        start = int(rng.integers(n))
        visited[start] = True
        stack = [start]
        while stack:
            cell = stack[-1]
            options = [nb for nb in _grid_neighbors(cell, side) if not visited[nb]]
            if not options:
                stack.pop()
                continue
            nxt = options[int(rng.integers(len(options)))]
            walls.discard(_edge(cell, nxt))
            visited[nxt] = True
            stack.append(nxt)
        remaining = sorted(walls)
        n_open = int(len(remaining) * extra_opening_frac)
        if n_open:
            drop = rng.choice(len(remaining), size=n_open, replace=False)
            for i in sorted(drop, reverse=True):
                del remaining[int(i)]
        return cls(
            side=side,
            walls=frozenset(remaining),
            bias_concentration=bias_concentration,
            base_concentration=base_concentration,
        )


def make_dense_world(n_states: int, n_actions: int, rng: np.random.Generator) -> TransitionKernel:
    """Every (s, a) row i.i.d. Dir(1, ..., 1) over all states."""
    if n_states < 2:
        raise ValueError("need at least 2 states")
    probs = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    return TransitionKernel(probs)


def make_maze(spec: MazeSpec, rng: np.random.Generator) -> TransitionKernel:
    """Draw a maze kernel: each row is a Dirichlet sample over the cell's
    accessible neighbors plus the cell itself, zero elsewhere."""
    side = spec.side
    n = side * side
    n_actions = len(_MOVES)
    probs = np.zeros((n, n_actions, n))
    for s in range(n):
        r, c = divmod(s, side)
        access = spec.accessible_neighbors(s)
        support = access + [s]
        for a, (dr, dc) in enumerate(_MOVES):
            rr, cc = r + dr, c + dc
            intended = rr * side + cc if 0 <= rr < side and 0 <= cc < side else -1
            conc = np.full(len(support), spec.base_concentration)
            for i, cell in enumerate(support):
                if cell == intended and cell in access:
                    conc[i] = spec.bias_concentration
            draw = rng.dirichlet(conc)
            probs[s, a, support] = draw
    return TransitionKernel(probs)


def step(kernel: TransitionKernel, state: int, action: int, rng: np.random.Generator) -> int:
    """Sample the next state from the kernel row."""
    if not (0 <= state < kernel.n_states and 0 <= action < kernel.n_actions):
        raise ValueError("state or action out of range")
    return int(rng.choice(kernel.n_states, p=kernel.row(state, action)))


def missing_information(true: TransitionKernel, learned: TransitionKernel) -> float:
    """Sum over (s, a) of KL(true row || learned row); the exploration
    quality metric. Infinite when the learned row has a hard zero where
    the true row has mass."""
    if true.probs.shape != learned.probs.shape:
        raise ValueError("kernel shapes differ")
    p = true.probs
    q = learned.probs
    mask = p > 0.0
    if np.any(q[mask] == 0.0):
        return float("inf")
    out = np.zeros_like(p)
    out[mask] = p[mask] * np.log(p[mask] / q[mask])
    return float(out.sum())


def coverage(h: HistoryTensor) -> float:
    """Fraction of (s, a) pairs visited at least once."""
    visited = h.counts.sum(axis=-1) > 0
    return float(visited.mean())


def visitation_map(trajectory, side: int) -> np.ndarray:
    """Per-cell visit counts for a sequence of states on a side x side grid."""
    grid = np.zeros((side, side), dtype=np.int64)
    for s in trajectory:
        r, c = divmod(int(s), side)
        grid[r, c] += 1
    return grid


def save_kernel_json(path, kernel: TransitionKernel) -> None:
    data = {
        "n_states": kernel.n_states,
        "n_actions": kernel.n_actions,
        "probs": kernel.probs.ravel().tolist(),
    }
    with open(path, "w") as fh:
        json.dump(data, fh)
        fh.write("\n")


def load_kernel_json(path) -> TransitionKernel:
    with open(path) as fh:
        data = json.load(fh)
    s, a = int(data["n_states"]), int(data["n_actions"])
    probs = np.asarray(data["probs"], dtype=np.float64)
    if probs.size != s * a * s:
        raise ValueError("kernel JSON has wrong number of probabilities")
    return TransitionKernel(probs.reshape(s, a, s))


def save_visitation_pgm(path, grid: np.ndarray) -> None:
    """Export a visit-count grid as PGM, normalized by its maximum."""
    write_pgm(path, grid.astype(np.float64), normalize=True)
