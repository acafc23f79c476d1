"""Non-stationary gridworld environments.

Two environments share the same stepping interface (single stream, four
movement actions, float observations):

* ``TwoColors``: a 5x5 grid with two objects. Picking one up yields +1 or
  -1 depending on which object currently carries the positive reward, then
  agent and objects respawn to distinct random cells. The rewarding object
  flips every ``switch_period`` steps.
* ``SwitchingMDPs``: a sequence of randomly generated gridworlds (random
  per state-action rewards, random walls). Every ``period`` steps the next
  world is drawn uniformly with replacement from a pregenerated set of N.

Both are deterministic given their generator/seed: identical seeds and
action sequences reproduce identical trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# action index -> (dx, dy): up, down, left, right
ACTION_DELTAS = ((0, 1), (0, -1), (-1, 0), (1, 0))
N_ACTIONS = 4


@dataclass
class Transition:
    """One environment step; ``continuation`` is 0 at respawn boundaries."""

    __slots__ = ("obs", "action", "reward", "next_obs", "continuation")

    obs: np.ndarray
    action: int
    reward: float
    next_obs: np.ndarray
    continuation: float


class TwoColors:
    """5x5 pickup gridworld whose rewarding object flips periodically."""

    GRID = 5
    OBS_DIM = 30  # one-hot x and y for agent, object A, object B

    def __init__(self, rng: np.random.Generator, switch_period: int = 100_000):
        if switch_period <= 0:
            raise ValueError("switch_period must be positive")
        self._rng = rng
        self.switch_period = switch_period
        self.steps_since_switch = 0
        self.total_steps = 0
        self.task_index = 0
        self.rewarding_object = "A"
        self._respawn()

    @property
    def obs_dim(self) -> int:
        return self.OBS_DIM

    @property
    def n_actions(self) -> int:
        return N_ACTIONS

    @property
    def n_cells(self) -> int:
        return self.GRID * self.GRID

    def _respawn(self) -> None:
        cells = self._rng.choice(self.n_cells, size=3, replace=False)
        g = self.GRID
        self.agent_pos = (int(cells[0]) % g, int(cells[0]) // g)
        self.obj_a_pos = (int(cells[1]) % g, int(cells[1]) // g)
        self.obj_b_pos = (int(cells[2]) % g, int(cells[2]) // g)

    def agent_cell(self) -> int:
        x, y = self.agent_pos
        return y * self.GRID + x

    def observe(self) -> np.ndarray:
        """30-dim encoding: agent-x, agent-y, A-x, A-y, B-x, B-y one-hots."""
        out = np.zeros(self.OBS_DIM)
        for i, (x, y) in enumerate((self.agent_pos, self.obj_a_pos, self.obj_b_pos)):
            out[10 * i + x] = 1.0
            out[10 * i + 5 + y] = 1.0
        return out

    def step(self, action: int) -> Transition:
        if not 0 <= action < N_ACTIONS:
            raise ValueError(f"action {action} out of range [0, {N_ACTIONS})")
        obs = self.observe()
        dx, dy = ACTION_DELTAS[action]
        x, y = self.agent_pos
        g = self.GRID
        self.agent_pos = (min(max(x + dx, 0), g - 1), min(max(y + dy, 0), g - 1))

        reward = 0.0
        continuation = 1.0
        if self.agent_pos == self.obj_a_pos:
            reward = 1.0 if self.rewarding_object == "A" else -1.0
            continuation = 0.0
            self._respawn()
        elif self.agent_pos == self.obj_b_pos:
            reward = 1.0 if self.rewarding_object == "B" else -1.0
            continuation = 0.0
            self._respawn()

        self.total_steps += 1
        self.steps_since_switch += 1
        if self.steps_since_switch == self.switch_period:
            self.rewarding_object = "B" if self.rewarding_object == "A" else "A"
            self.steps_since_switch = 0
            self.task_index += 1

        return Transition(obs, action, reward, self.observe(), continuation)


@dataclass(frozen=True)
class GridMDP:
    """One randomly generated gridworld of the switching family."""

    width: int
    height: int
    walls: frozenset
    rewards: np.ndarray  # (width*height, N_ACTIONS) in [-1, 1]
    start_cell: tuple
    goal_cell: tuple


@dataclass(frozen=True)
class SwitchingSchedule:
    period: int = 100_000
    n_mdps: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.period <= 0:
            raise ValueError("period must be positive")
        if self.n_mdps <= 0:
            raise ValueError("n_mdps must be positive")


def generate_mdp(rng: np.random.Generator, width: int = 10, height: int = 10) -> GridMDP:
    """Sample rewards by the 50/20/20/10 rule and place up to 15 walls."""
    if width * height <= 17:
        raise ValueError("grid too small: need room for 15 walls plus start and goal")
    n_states = width * height
    u = rng.random((n_states, N_ACTIONS))
    rewards = np.zeros((n_states, N_ACTIONS))
    rewards[(u >= 0.5) & (u < 0.7)] = 1.0
    rewards[(u >= 0.7) & (u < 0.9)] = -1.0
    random_mask = u >= 0.9
    rewards[random_mask] = rng.uniform(-1.0, 1.0, size=int(random_mask.sum()))

    start, goal = rng.choice(n_states, size=2, replace=False)
    start_cell = (int(start) % width, int(start) // width)
    goal_cell = (int(goal) % width, int(goal) // width)
    occupied = {start_cell, goal_cell}
    walls = set()
    for _ in range(15):
        free = [
            (x, y)
            for y in range(height)
            for x in range(width)
            if (x, y) not in occupied
        ]
        pick = free[int(rng.integers(len(free)))]
        walls.add(pick)
        occupied.add(pick)
    return GridMDP(width, height, frozenset(walls), rewards, start_cell, goal_cell)


class SwitchingMDPs:
    """Continuing task drawing a new gridworld every ``period`` steps."""

    def __init__(self, schedule: SwitchingSchedule, width: int = 10, height: int = 10):
        self.schedule = schedule
        self.width = width
        self.height = height
        self._rng = np.random.default_rng(schedule.seed)
        self.mdps = [generate_mdp(self._rng, width, height) for _ in range(schedule.n_mdps)]
        self.total_steps = 0
        self.task_index = 0
        self.current = self._draw()
        self.agent_pos = self.current.start_cell

    def _draw(self) -> GridMDP:
        return self.mdps[int(self._rng.integers(self.schedule.n_mdps))]

    @property
    def obs_dim(self) -> int:
        return self.width + self.height

    @property
    def n_actions(self) -> int:
        return N_ACTIONS

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    def agent_cell(self) -> int:
        x, y = self.agent_pos
        return y * self.width + x

    def observe(self) -> np.ndarray:
        """One-hot x concatenated with one-hot y; walls are not observed."""
        out = np.zeros(self.width + self.height)
        x, y = self.agent_pos
        out[x] = 1.0
        out[self.width + y] = 1.0
        return out

    def step(self, action: int) -> Transition:
        if not 0 <= action < N_ACTIONS:
            raise ValueError(f"action {action} out of range [0, {N_ACTIONS})")
        obs = self.observe()
        reward = float(self.current.rewards[self.agent_cell(), action])
        dx, dy = ACTION_DELTAS[action]
        x, y = self.agent_pos
        nx, ny = x + dx, y + dy
        blocked = (
            nx < 0
            or nx >= self.width
            or ny < 0
            or ny >= self.height
            or (nx, ny) in self.current.walls
        )
        if not blocked:
            self.agent_pos = (nx, ny)

        self.total_steps += 1
        if self.total_steps % self.schedule.period == 0:
            self.current = self._draw()
            self.task_index += 1
            if self.agent_pos in self.current.walls:
                self.agent_pos = self.current.start_cell

        return Transition(obs, action, reward, self.observe(), 1.0)


def make_env(kind: str, rng_or_seed, period: int, n_mdps: int = 4, width: int = 10, height: int = 10):
    """Construct an environment from run-config fields."""
    if kind == "two_colors":
        rng = (
            rng_or_seed
            if isinstance(rng_or_seed, np.random.Generator)
            else np.random.default_rng(rng_or_seed)
        )
        return TwoColors(rng, switch_period=period)
    if kind == "switching":
        seed = (
            int(rng_or_seed.integers(2**31 - 1))
            if isinstance(rng_or_seed, np.random.Generator)
            else int(rng_or_seed)
        )
        return SwitchingMDPs(SwitchingSchedule(period, n_mdps, seed), width, height)
    raise ValueError(f"unknown environment kind: {kind!r}")
