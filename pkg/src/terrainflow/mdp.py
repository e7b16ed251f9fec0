"""DAG-structured MDP over sets of control points.

A state is an unordered set of at most ``max_points`` peak/pit points placed on
a ``grid x grid`` lattice, one point per cell. Each action adds one point, so
cardinality strictly increases along every edge and the transition graph is a
DAG rooted at the empty set.

Non-terminal actions are also addressed by integer id,
``2 * (gy * grid + gx) + (1 if pit else 0)``, which is what the samplers and
flow models use on their hot paths.
"""

from __future__ import annotations

import enum
import hashlib
import itertools
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

GRID = 75
MAX_POINTS = 60
PIXELS_PER_CELL = 3


class InfeasibleActionError(ValueError):
    pass


class PointKind(enum.IntEnum):
    PIT = -1
    PEAK = 1


@dataclass(frozen=True, order=True)
class ControlPoint:
    gx: int
    gy: int
    kind: PointKind

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", PointKind(self.kind))

    def as_triple(self) -> tuple[int, int, int]:
        return (self.gx, self.gy, int(self.kind))


@dataclass(frozen=True)
class AddPoint:
    point: ControlPoint


class Terminate:
    _instance: Terminate | None = None

    def __new__(cls) -> Terminate:
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "TERMINATE"


TERMINATE = Terminate()
Action = AddPoint | Terminate


class State:
    """Immutable set of control points with set semantics for ``==`` and ``hash``."""

    __slots__ = ("points", "grid", "max_points", "_occ", "_digest", "_hash")

    def __init__(
        self,
        points: Iterable[ControlPoint] = (),
        grid: int = GRID,
        max_points: int = MAX_POINTS,
    ):
        pts = tuple(sorted(set(points)))
        if len(pts) > max_points:
            raise InfeasibleActionError(f"{len(pts)} points exceed the cap of {max_points}")
        cells = set()
        for p in pts:
            if not (0 <= p.gx < grid and 0 <= p.gy < grid):
                raise ValueError(f"{p} outside the {grid}x{grid} grid")
            if (p.gx, p.gy) in cells:
                raise InfeasibleActionError(f"cell ({p.gx}, {p.gy}) occupied twice")
            cells.add((p.gx, p.gy))
        self.points = pts
        self.grid = grid
        self.max_points = max_points
        self._occ = None
        self._digest = None
        self._hash = hash((pts, grid, max_points))

    @classmethod
    def from_triples(cls, triples: Iterable, grid: int = GRID, max_points: int = MAX_POINTS) -> State:
        return cls((ControlPoint(int(a), int(b), PointKind(int(c))) for a, b, c in triples), grid, max_points)

    @property
    def card(self) -> int:
        return len(self.points)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def is_full(self) -> bool:
        return len(self.points) >= self.max_points

    @property
    def occupancy(self) -> np.ndarray:
        """``grid x grid`` boolean array indexed ``[gy, gx]``."""
        if self._occ is None:
            occ = np.zeros((self.grid, self.grid), dtype=bool)
            for p in self.points:
                occ[p.gy, p.gx] = True
            occ.setflags(write=False)
            self._occ = occ
        return self._occ

    def is_occupied(self, gx: int, gy: int) -> bool:
        return bool(self.occupancy[gy, gx])

    @property
    def digest(self) -> str:
        """Canonical hex digest, independent of insertion order."""
        if self._digest is None:
            text = f"{self.grid}:{self.max_points}:" + ";".join(
                f"{p.gx},{p.gy},{int(p.kind)}" for p in self.points
            )
            self._digest = hashlib.sha1(text.encode("ascii")).hexdigest()
        return self._digest

    @property
    def digest_int(self) -> int:
        return int(self.digest[:16], 16)

    def triples(self) -> list[list[int]]:
        return [list(p.as_triple()) for p in self.points]

    def with_point(self, p: ControlPoint) -> State:
        return State(self.points + (p,), self.grid, self.max_points)

    def without_point(self, p: ControlPoint) -> State:
        return State((q for q in self.points if q != p), self.grid, self.max_points)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, State):
            return NotImplemented
        return (
            self._hash == other._hash
            and self.points == other.points
            and self.grid == other.grid
            and self.max_points == other.max_points
        )

    def __hash__(self) -> int:
        return self._hash

    def __repr__(self) -> str:
        return f"State({[p.as_triple() for p in self.points]}, grid={self.grid})"


@dataclass
class Trajectory:
    """``states[0]`` is empty; ``actions`` ends with TERMINATE.

    ``rewards[i]`` / ``betas[i]`` belong to ``states[i]``.
    """

    states: list[State]
    actions: list[Action]
    rewards: list[float]
    betas: list[float] = field(default_factory=list)

    @property
    def length(self) -> int:
        return self.states[-1].card

    @property
    def terminal(self) -> State:
        return self.states[-1]


def transition(s: State, a: Action) -> State:
    if not isinstance(a, AddPoint):
        raise InfeasibleActionError("only AddPoint actions lead to a new state")
    p = a.point
    if s.is_full:
        raise InfeasibleActionError(f"state already holds {s.max_points} points")
    if not (0 <= p.gx < s.grid and 0 <= p.gy < s.grid):
        raise InfeasibleActionError(f"{p} outside the grid")
    if s.is_occupied(p.gx, p.gy):
        raise InfeasibleActionError(f"cell ({p.gx}, {p.gy}) is occupied")
    return s.with_point(p)


def parents(s: State) -> list[tuple[State, AddPoint]]:
    return [(s.without_point(p), AddPoint(p)) for p in s.points]


def action_id(p: ControlPoint, grid: int = GRID) -> int:
    return 2 * (p.gy * grid + p.gx) + (1 if p.kind is PointKind.PIT else 0)


def point_from_id(aid: int, grid: int = GRID) -> ControlPoint:
    cell, pit = divmod(int(aid), 2)
    gy, gx = divmod(cell, grid)
    return ControlPoint(gx, gy, PointKind.PIT if pit else PointKind.PEAK)


def num_actions(grid: int = GRID) -> int:
    return 2 * grid * grid


def feasible_add_ids(s: State) -> np.ndarray:
    """Ids of all feasible AddPoint actions (empty when the state is full)."""
    if s.is_full:
        return np.zeros(0, dtype=np.int64)
    free = np.flatnonzero(~s.occupancy.ravel())
    return np.stack([2 * free, 2 * free + 1], axis=1).ravel()


def count_feasible(s: State) -> int:
    """Number of feasible actions including TERMINATE."""
    if s.is_full:
        return 1
    return 2 * (s.grid * s.grid - s.card) + 1


def feasible_actions(s: State) -> list[Action]:
    """TERMINATE first, then AddPoint actions in id order."""
    return [TERMINATE] + [AddPoint(point_from_id(a, s.grid)) for a in feasible_add_ids(s)]


def grid_to_unit(g, grid: int = GRID):
    """Center pixel of the cell's 3x3 block, normalized over the pixel index range."""
    pixels = PIXELS_PER_CELL * grid
    return 2.0 * (PIXELS_PER_CELL * np.asarray(g, dtype=np.float64) + 1.0) / (pixels - 1) - 1.0


def cardinality_feature(card: int, max_points: int = MAX_POINTS) -> float:
    return card / (0.5 * max_points) - 1.0


def encode_point(p: ControlPoint, card: int, grid: int = GRID, max_points: int = MAX_POINTS) -> np.ndarray:
    return np.array(
        [grid_to_unit(p.gx, grid), grid_to_unit(p.gy, grid), float(p.kind), cardinality_feature(card, max_points)]
    )


def encode_state(s: State) -> np.ndarray:
    """``(card, 4)`` token matrix: (x, y, kind, normalized cardinality)."""
    if not s.points:
        return np.zeros((0, 4))
    tri = np.array([p.as_triple() for p in s.points], dtype=np.float64)
    out = np.empty((len(tri), 4))
    out[:, 0] = grid_to_unit(tri[:, 0], s.grid)
    out[:, 1] = grid_to_unit(tri[:, 1], s.grid)
    out[:, 2] = tri[:, 2]
    out[:, 3] = cardinality_feature(s.card, s.max_points)
    return out


def action_vectors(ids: np.ndarray, grid: int = GRID) -> np.ndarray:
    """``(n, 3)`` action vectors (x, y, kind) for AddPoint ids."""
    ids = np.asarray(ids, dtype=np.int64)
    cell, pit = np.divmod(ids, 2)
    gy, gx = np.divmod(cell, grid)
    out = np.empty((len(ids), 3))
    out[:, 0] = grid_to_unit(gx, grid)
    out[:, 1] = grid_to_unit(gy, grid)
    out[:, 2] = np.where(pit == 1, -1.0, 1.0)
    return out


def rasterize_features(s: State, rows: int | None = None, cols: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Binary (peaks, pits) grids with a 1 at each point's center pixel ``3g + 1``."""
    rows = rows or PIXELS_PER_CELL * s.grid
    cols = cols or PIXELS_PER_CELL * s.grid
    peaks = np.zeros((rows, cols), dtype=np.uint8)
    pits = np.zeros((rows, cols), dtype=np.uint8)
    for p in s.points:
        target = peaks if p.kind is PointKind.PEAK else pits
        target[PIXELS_PER_CELL * p.gy + 1, PIXELS_PER_CELL * p.gx + 1] = 1
    return peaks, pits


def enumerate_states(grid: int, max_points: int) -> Iterator[State]:
    """Every state of a tiny configuration, by increasing cardinality."""
    cells = [(gx, gy) for gy in range(grid) for gx in range(grid)]
    kinds = (PointKind.PEAK, PointKind.PIT)
    for size in range(max_points + 1):
        for chosen in itertools.combinations(cells, size):
            for ks in itertools.product(kinds, repeat=size):
                yield State(
                    (ControlPoint(gx, gy, k) for (gx, gy), k in zip(chosen, ks)), grid, max_points
                )


def random_state(rng: np.random.Generator, size: int, grid: int = GRID, max_points: int = MAX_POINTS) -> State:
    """Uniformly random state of the given cardinality."""
    cells = rng.choice(grid * grid, size=size, replace=False)
    kinds = rng.integers(0, 2, size=size)
    pts = []
    for c, k in zip(cells, kinds):
        gy, gx = divmod(int(c), grid)
        pts.append(ControlPoint(gx, gy, PointKind.PIT if k else PointKind.PEAK))
    return State(pts, grid, max_points)
