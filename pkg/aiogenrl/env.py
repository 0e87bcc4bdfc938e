"""Define the procedurally generated grid world."""
from collections import deque
from dataclasses import asdict, dataclass, replace
from enum import Enum, IntEnum
from math import comb, gcd
import logging
from typing import NamedTuple, Optional, Union

import numpy as np

from .const import (
    DEFAULT_GRID_SIZE,
    DEFAULT_NOISE_AMPLITUDE,
    DEFAULT_NUM_WALLS,
    GOAL_REWARD_DECAY,
    MAX_NOISE_AMPLITUDE,
    MIN_GRID_SIZE,
    MULTIROOM_MAX_ATTEMPTS,
    OBS_SHAPE,
    VIEW_SIZE,
)
from .errors import EpisodeFinished, InfeasibleSpec, InvalidAction, InvalidConfig
from .seeding import (
    GOLDEN_GAMMA,
    SALT_LAYOUT,
    child_rng,
    make_rng,
    mix_seed,
    splitmix64,
)

_LOGGER = logging.getLogger(__name__)

Observation = np.ndarray


class Variant(str, Enum):
    """Grid layout families."""

    CROSSING = "crossing"
    MULTIROOM = "multiroom"


class CellKind(IntEnum):
    """Cell contents."""

    EMPTY = 0
    WALL = 1
    GOAL = 2


class Direction(IntEnum):
    """Agent headings, clockwise from north."""

    N = 0
    E = 1
    S = 2
    W = 3


class Action(IntEnum):
    """Agent actions. Only the first three change the world."""

    LEFT = 0
    RIGHT = 1
    FORWARD = 2
    PICKUP = 3
    DROP = 4
    TOGGLE = 5
    DONE = 6


DIRECTION_VECTORS: dict[Direction, tuple[int, int]] = {
    Direction.N: (-1, 0),
    Direction.E: (0, 1),
    Direction.S: (1, 0),
    Direction.W: (0, -1),
}

VERTICAL: str = "vertical"
HORIZONTAL: str = "horizontal"

# View offsets: row 0 is farthest ahead, the agent sits at the bottom centre.
_VIEW_FORWARD = (VIEW_SIZE - 1 - np.arange(VIEW_SIZE))[:, None].repeat(
    VIEW_SIZE, axis=1
)
_VIEW_LATERAL = (np.arange(VIEW_SIZE) - VIEW_SIZE // 2)[None, :].repeat(
    VIEW_SIZE, axis=0
)


@dataclass(frozen=True)
class GridSpec:
    """Define the parameters of one procedurally generated world."""

    width: int = DEFAULT_GRID_SIZE
    height: int = DEFAULT_GRID_SIZE
    num_walls: int = DEFAULT_NUM_WALLS
    seed: int = 0
    max_steps: Optional[int] = None
    variant: Variant = Variant.CROSSING

    def __post_init__(self) -> None:
        """Fill the default step budget and validate."""
        if self.max_steps is None:
            object.__setattr__(self, "max_steps", 4 * self.width * self.height)
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.width < MIN_GRID_SIZE or self.height < MIN_GRID_SIZE:
            raise InvalidConfig(
                f"Grid must be at least {MIN_GRID_SIZE}x{MIN_GRID_SIZE}, "
                f"got {self.width}x{self.height}"
            )
        if self.num_walls < 1:
            raise InvalidConfig(f"num_walls must be >= 1, got {self.num_walls}")
        if self.max_steps < self.width * self.height:
            raise InvalidConfig(
                f"max_steps must be >= width*height ({self.width * self.height}), "
                f"got {self.max_steps}"
            )
        if not 0 <= self.seed <= 0xFFFFFFFFFFFFFFFF:
            raise InvalidConfig(
                f"seed must be a 64-bit unsigned integer, got {self.seed}"
            )

    def with_seed(self, seed: int) -> "GridSpec":
        """Return a copy of this spec with another seed."""
        return replace(self, seed=seed)

    def to_dict(self) -> dict:
        """Return the JSON form of this spec."""
        data = asdict(self)
        data["variant"] = self.variant.value
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "GridSpec":
        """Build a spec from its JSON form."""
        return cls(**data)


@dataclass(frozen=True)
class NoiseConfig:
    """Define the observation noise of never-seen evaluation environments."""

    amplitude: float = DEFAULT_NOISE_AMPLITUDE
    seed: int = 0

    def __post_init__(self) -> None:
        """Validate."""
        if not 0.0 <= self.amplitude < MAX_NOISE_AMPLITUDE:
            raise InvalidConfig(
                f"Noise amplitude must be in [0, {MAX_NOISE_AMPLITUDE}), "
                f"got {self.amplitude}"
            )

    def to_dict(self) -> dict:
        """Return the JSON form of this config."""
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "NoiseConfig":
        """Build a config from its JSON form."""
        return cls(**data)


@dataclass(frozen=True)
class WallLayout:
    """Wall lines and the gap in each."""

    orientation: str
    positions: tuple[int, ...]
    gaps: tuple[int, ...]


class StepOutcome(NamedTuple):
    """Result of one environment step."""

    obs: Observation
    reward: float
    done: bool


class GridWorld:
    """Define a single grid world episode."""

    def __init__(self, spec: GridSpec, cells: np.ndarray, layout: WallLayout) -> None:
        """Initialize."""
        self.spec: GridSpec = spec
        self.cells: np.ndarray = cells
        self.layout: WallLayout = layout
        self.start_pos: tuple[int, int] = (1, 1)
        self.start_dir: Direction = Direction.E
        self.goal_pos: tuple[int, int] = (spec.height - 2, spec.width - 2)
        self.agent_pos: tuple[int, int] = self.start_pos
        self.agent_dir: Direction = self.start_dir
        self.step_count: int = 0
        self.done: bool = False

    def reset(self) -> Observation:
        """Put the agent back on the start cell and return its view."""
        self.agent_pos = self.start_pos
        self.agent_dir = self.start_dir
        self.step_count = 0
        self.done = False
        return self.encode_observation()

    def step(self, action: Union[int, Action]) -> StepOutcome:
        """Apply one action.

        :param action: Action id in ``0..6``
        :type action: ``int``
        :raises EpisodeFinished: If the episode has already finished
        :raises InvalidAction: If ``action`` is not an action id
        :rtype: :class:`StepOutcome`
        """
        if self.done:
            raise EpisodeFinished("Episode finished, call reset() first")
        try:
            action = Action(int(action))
        except (TypeError, ValueError) as err:
            raise InvalidAction(f"Unknown action {action!r}") from err
        self.step_count += 1

        if action == Action.LEFT:
            self.agent_dir = Direction((self.agent_dir - 1) % 4)
        elif action == Action.RIGHT:
            self.agent_dir = Direction((self.agent_dir + 1) % 4)
        elif action == Action.FORWARD:
            d_row, d_col = DIRECTION_VECTORS[self.agent_dir]
            target = (self.agent_pos[0] + d_row, self.agent_pos[1] + d_col)
            if self.cells[target] != CellKind.WALL:
                self.agent_pos = target

        reward = 0.0
        if self.cells[self.agent_pos] == CellKind.GOAL:
            self.done = True
            reward = 1.0 - GOAL_REWARD_DECAY * (self.step_count / self.spec.max_steps)
        elif self.step_count >= self.spec.max_steps:
            self.done = True

        return StepOutcome(self.encode_observation(), reward, self.done)

    def encode_observation(self) -> Observation:
        """Return the egocentric 7x7x3 view in front of the agent.

        Channel 0 holds the cell kind divided by two, channel 1 the
        traversable flag and channel 2 the goal flag. Cells outside the grid
        read as walls.
        """
        fwd_row, fwd_col = DIRECTION_VECTORS[self.agent_dir]
        right_row, right_col = DIRECTION_VECTORS[Direction((self.agent_dir + 1) % 4)]
        rows = self.agent_pos[0] + _VIEW_FORWARD * fwd_row + _VIEW_LATERAL * right_row
        cols = self.agent_pos[1] + _VIEW_FORWARD * fwd_col + _VIEW_LATERAL * right_col
        inside = (
            (rows >= 0)
            & (rows < self.spec.height)
            & (cols >= 0)
            & (cols < self.spec.width)
        )

        kinds = np.full((VIEW_SIZE, VIEW_SIZE), CellKind.WALL, dtype=np.int8)
        kinds[inside] = self.cells[rows[inside], cols[inside]]

        obs = np.empty(OBS_SHAPE, dtype=np.float64)
        obs[..., 0] = kinds / 2.0
        obs[..., 1] = kinds != CellKind.WALL
        obs[..., 2] = kinds == CellKind.GOAL
        return obs


class NoisyGridWorld:
    """Wrap a world so every observation it returns is perturbed.

    Noise is keyed by the world's seed and a running draw counter, so the
    wrapped world stays reproducible while its observations never match the
    ones seen in training.
    """

    def __init__(self, world: GridWorld, noise: NoiseConfig) -> None:
        """Initialize."""
        self.world: GridWorld = world
        self.noise: NoiseConfig = NoiseConfig(
            amplitude=noise.amplitude, seed=mix_seed(noise.seed, world.spec.seed)
        )
        self._draws: int = 0

    def _perturb(self, obs: Observation) -> Observation:
        noisy = apply_noise(obs, self.noise, self._draws)
        self._draws += 1
        return noisy

    def reset(self) -> Observation:
        """Reset the wrapped world."""
        return self._perturb(self.world.reset())

    def step(self, action: Union[int, Action]) -> StepOutcome:
        """Step the wrapped world."""
        outcome = self.world.step(action)
        return outcome._replace(obs=self._perturb(outcome.obs))


def apply_noise(obs: Observation, cfg: NoiseConfig, draw_index: int) -> Observation:
    """Perturb every entry by an independent uniform draw and clamp to [0, 1].

    :param obs: Observation to perturb
    :type obs: ``numpy.ndarray``
    :param cfg: Noise amplitude and seed
    :type cfg: :class:`NoiseConfig`
    :param draw_index: Index of this draw in the noise stream
    :type draw_index: ``int``
    :rtype: ``numpy.ndarray``
    """
    if cfg.amplitude == 0.0:
        return obs.copy()
    rng = make_rng(mix_seed(cfg.seed, draw_index))
    noise = rng.uniform(-cfg.amplitude, cfg.amplitude, size=obs.shape)
    return np.clip(obs + noise, 0.0, 1.0)


def _bordered_grid(spec: GridSpec) -> np.ndarray:
    cells = np.full((spec.height, spec.width), CellKind.EMPTY, dtype=np.int8)
    cells[0, :] = cells[-1, :] = CellKind.WALL
    cells[:, 0] = cells[:, -1] = CellKind.WALL
    return cells


def _line_count(span: int, num_walls: int) -> int:
    # Walls sit on interior lines 2..span-3 and never touch each other.
    free = span - 4 - num_walls + 1
    return comb(free, num_walls) if free >= num_walls else 0


def _unrank_combination(rank: int, n_items: int, k: int) -> list[int]:
    chosen: list[int] = []
    start = 0
    for slot in range(k):
        for item in range(start, n_items):
            count = comb(n_items - item - 1, k - slot - 1)
            if rank < count:
                chosen.append(item)
                start = item + 1
                break
            rank -= count
    return chosen


def crossing_layout_count(spec: GridSpec) -> tuple[int, int]:
    """Return the number of vertical and horizontal crossing layouts."""
    k = spec.num_walls
    vertical = _line_count(spec.width, k) * (spec.height - 2) ** k
    horizontal = _line_count(spec.height, k) * (spec.width - 2) ** k
    return vertical, horizontal


def layout_period(spec: GridSpec) -> Optional[int]:
    """Return the seed period after which layouts repeat, or ``None`` if they never do.

    Crossing layouts are a function of ``seed mod period``; multi-room layouts
    are drawn from a seeded stream and have no period.
    """
    if spec.variant != Variant.CROSSING:
        return None
    total = sum(crossing_layout_count(spec))
    return total or None


def shared_layout_period(first: GridSpec, second: GridSpec) -> Optional[int]:
    """Return the period two specs share when their seeds pick from the same layouts."""
    if (first.width, first.height, first.num_walls, first.variant) != (
        second.width,
        second.height,
        second.num_walls,
        second.variant,
    ):
        return None
    return layout_period(first)


def crossing_layout(spec: GridSpec) -> WallLayout:
    """Return the crossing layout selected by ``spec.seed``.

    Layouts are enumerated and the seed is mapped through an affine bijection
    of the layout space, so any run of consecutive seeds as long as the space
    yields distinct layouts.

    :raises InfeasibleSpec: If the walls cannot fit
    """
    n_vertical, n_horizontal = crossing_layout_count(spec)
    total = n_vertical + n_horizontal
    if total == 0:
        raise InfeasibleSpec(
            f"{spec.num_walls} walls do not fit in a {spec.width}x{spec.height} grid"
        )

    multiplier = (GOLDEN_GAMMA % total) | 1
    while gcd(multiplier, total) != 1:
        multiplier += 1
    index = (multiplier * spec.seed + splitmix64(total ^ SALT_LAYOUT)) % total

    if index < n_vertical:
        orientation, span, length = VERTICAL, spec.width, spec.height - 2
    else:
        index -= n_vertical
        orientation, span, length = HORIZONTAL, spec.height, spec.width - 2

    gaps = []
    for _ in range(spec.num_walls):
        index, gap = divmod(index, length)
        gaps.append(1 + gap)
    free = span - 4 - spec.num_walls + 1
    chosen = _unrank_combination(index, free, spec.num_walls)
    lines = [2 + item + slot for slot, item in enumerate(chosen)]
    return WallLayout(orientation, tuple(lines), tuple(gaps))


def _draw_crossing(spec: GridSpec, layout: WallLayout) -> np.ndarray:
    cells = _bordered_grid(spec)
    for line, gap in zip(layout.positions, layout.gaps):
        if layout.orientation == VERTICAL:
            cells[1:-1, line] = CellKind.WALL
            cells[gap, line] = CellKind.EMPTY
        else:
            cells[line, 1:-1] = CellKind.WALL
            cells[line, gap] = CellKind.EMPTY
    return cells


def _draw_multiroom(
    spec: GridSpec, rng: np.random.Generator
) -> tuple[np.ndarray, WallLayout]:
    # Each wall splits the region that still holds the goal; rooms chain
    # from the top-left start to the bottom-right goal.
    cells = _bordered_grid(spec)
    top, left, bottom, right = 1, 1, spec.height - 2, spec.width - 2
    last_door: Optional[tuple[int, int]] = None
    orientations, positions, gaps = [], [], []

    for index in range(spec.num_walls):
        order = (VERTICAL, HORIZONTAL) if index % 2 == 0 else (HORIZONTAL, VERTICAL)
        for orientation in order:
            if orientation == VERTICAL:
                candidates = [
                    c
                    for c in range(left + 1, right)
                    if last_door is None or c != last_door[1]
                ]
            else:
                candidates = [
                    r
                    for r in range(top + 1, bottom)
                    if last_door is None or r != last_door[0]
                ]
            if candidates:
                break
        else:
            raise InfeasibleSpec(
                f"{spec.num_walls} room dividers do not fit in a "
                f"{spec.width}x{spec.height} grid"
            )

        line = int(candidates[rng.integers(len(candidates))])
        if orientation == VERTICAL:
            door = int(rng.integers(top, bottom + 1))
            cells[top : bottom + 1, line] = CellKind.WALL
            cells[door, line] = CellKind.EMPTY
            last_door = (door, line)
            left = line + 1
        else:
            door = int(rng.integers(left, right + 1))
            cells[line, left : right + 1] = CellKind.WALL
            cells[line, door] = CellKind.EMPTY
            last_door = (line, door)
            top = line + 1
        orientations.append(orientation)
        positions.append(line)
        gaps.append(door)

    return cells, WallLayout("/".join(orientations), tuple(positions), tuple(gaps))


def shortest_path_length(world: GridWorld) -> Optional[int]:
    """Return the number of moves from start to goal, ignoring heading."""
    height, width = world.cells.shape
    seen = np.zeros((height, width), dtype=bool)
    queue = deque([(world.start_pos, 0)])
    seen[world.start_pos] = True
    while queue:
        (row, col), dist = queue.popleft()
        if (row, col) == world.goal_pos:
            return dist
        for d_row, d_col in DIRECTION_VECTORS.values():
            nxt = (row + d_row, col + d_col)
            if 0 <= nxt[0] < height and 0 <= nxt[1] < width and not seen[nxt]:
                if world.cells[nxt] != CellKind.WALL:
                    seen[nxt] = True
                    queue.append((nxt, dist + 1))
    return None


def is_solvable(world: GridWorld) -> bool:
    """Return whether the goal is reachable from the start."""
    return shortest_path_length(world) is not None


def generate(spec: GridSpec) -> GridWorld:
    """Generate the world described by ``spec``.

    The result is a pure function of ``spec``.

    :param spec: Grid parameters
    :type spec: :class:`GridSpec`
    :raises InfeasibleSpec: If the walls cannot fit
    :rtype: :class:`GridWorld`
    """
    if spec.variant == Variant.CROSSING:
        layout = crossing_layout(spec)
        world = GridWorld(spec, _draw_crossing(spec, layout), layout)
    else:
        rng = child_rng(spec.seed, SALT_LAYOUT)
        for attempt in range(MULTIROOM_MAX_ATTEMPTS):
            cells, layout = _draw_multiroom(spec, rng)
            world = GridWorld(spec, cells, layout)
            if is_solvable(world):
                break
            _LOGGER.debug(
                "Multiroom attempt %s for seed %s unsolvable", attempt, spec.seed
            )
        else:
            raise InfeasibleSpec(f"No solvable multiroom layout for seed {spec.seed}")

    world.cells[world.goal_pos] = CellKind.GOAL
    if not is_solvable(world):
        raise InfeasibleSpec(f"Generated world for seed {spec.seed} is unsolvable")
    world.reset()
    return world


def derive_specs(base: GridSpec, seed_start: int, count: int) -> list[GridSpec]:
    """Return ``count`` specs sharing ``base`` with consecutive seeds."""
    return [base.with_seed(seed_start + offset) for offset in range(count)]

