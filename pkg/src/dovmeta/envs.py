"""Compositional toy task families.

Each family is a small continuous-control MDP whose tasks are indexed by a
(goal, physics) label pair. Dynamics are written over numpy arrays with a
leading task axis, so a batch of tasks steps in lockstep; a single task is
just the batch of one.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DT = 0.1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Dov:
    """One degree of variation: ordered labels and the parameters each resolves to."""

    name: str
    labels: tuple[str, ...]
    values: tuple[dict, ...]

    def __post_init__(self):
        if not self.labels:
            raise ConfigError(f"DoV {self.name!r} has no labels")
        if len(set(self.labels)) != len(self.labels):
            raise ConfigError(f"DoV {self.name!r} has duplicate labels")
        if len(self.values) != len(self.labels):
            raise ConfigError(f"DoV {self.name!r}: {len(self.labels)} labels but {len(self.values)} values")


@dataclass(frozen=True)
class DovSpec:
    dovs: tuple[Dov, ...]

    def __post_init__(self):
        if not self.dovs:
            raise ConfigError("at least one DoV is required")
        names = [d.name for d in self.dovs]
        if len(set(names)) != len(names):
            raise ConfigError("DoV names must be unique")

    @property
    def num_dovs(self) -> int:
        return len(self.dovs)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(d.name for d in self.dovs)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ConfigError(f"unknown DoV {name!r}; have {self.names}") from None

    def resolve(self, combo: Sequence[int]) -> dict:
        params = {}
        for dov, y in zip(self.dovs, combo):
            params.update(dov.values[y])
        return params


@dataclass(frozen=True)
class TaskInstance:
    task_id: int
    combo: tuple[int, ...]
    params: np.ndarray = field(compare=False)

    def label_names(self, spec: DovSpec) -> tuple[str, ...]:
        return tuple(d.labels[y] for d, y in zip(spec.dovs, self.combo))


class EnvFamily:
    """Base class; subclasses fix dimensions, parameter layout and dynamics."""

    name = ""
    obs_dim = 0
    act_dim = 0
    horizon = 0
    param_names: tuple[str, ...] = ()
    reward_min = -np.inf

    def __init__(self, spec: DovSpec | None = None, reset_noise: float = 0.0):
        self.spec = self.default_spec() if spec is None else spec
        self.reset_noise = float(reset_noise)

    @classmethod
    def default_spec(cls) -> DovSpec:
        raise NotImplementedError

    def param_vector(self, params: dict) -> np.ndarray:
        missing = set(self.param_names) - set(params)
        if missing:
            raise ConfigError(f"{self.name}: missing parameters {sorted(missing)}")
        return np.array([float(params[k]) for k in self.param_names])

    def make_task(self, task_id: int, combo: Sequence[int]) -> TaskInstance:
        combo = tuple(int(y) for y in combo)
        return TaskInstance(task_id, combo, self.param_vector(self.spec.resolve(combo)))

    def reset(self, task_params: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        task_params = np.asarray(task_params, dtype=np.float64)
        shape = task_params.shape[:-1] + (self.obs_dim,)
        state = np.zeros(shape)
        if self.reset_noise > 0.0 and rng is not None:
            state = state + self.reset_noise * rng.standard_normal(shape)
        return state

    def step(self, task_params, state, action, t: int | None = None):
        """Return ``(next_state, reward, done)``; ``done`` is True once ``t + 1`` hits the horizon."""
        task_params = np.asarray(task_params, dtype=np.float64)
        action = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        next_state, reward = self._dynamics(task_params, np.asarray(state, dtype=np.float64), action)
        done = t is not None and t + 1 >= self.horizon
        return next_state, reward, done

    def _dynamics(self, p, s, a):
        raise NotImplementedError

    def oracle_action(self, task_params, state) -> np.ndarray:
        raise NotImplementedError


class PointGoalComp(EnvFamily):
    """2-D point mass; state ``(x, y, vx, vy)``, goal on the unit circle."""

    name = "point_goal"
    obs_dim = 4
    act_dim = 2
    horizon = 50
    param_names = ("goal_x", "goal_y", "gain", "damping")
    reward_min = -4.0 * np.sqrt(2.0)
    pos_limit = 2.0

    @classmethod
    def default_spec(cls, n_goals: int = 6, physics=None) -> DovSpec:
        angles = 2.0 * np.pi * np.arange(n_goals) / n_goals
        goals = Dov(
            "goal",
            tuple(f"goal{k}" for k in range(n_goals)),
            tuple({"goal_x": float(np.cos(t)), "goal_y": float(np.sin(t))} for t in angles),
        )
        if physics is None:
            physics = [(0.5, 0.0), (1.0, 0.1), (1.5, 0.2), (2.0, 0.35), (1.0, 0.5)]
        phys = Dov(
            "physics",
            tuple(f"phys{k}" for k in range(len(physics))),
            tuple({"gain": float(g), "damping": float(d)} for g, d in physics),
        )
        return DovSpec((goals, phys))

    def _dynamics(self, p, s, a):
        goal, gain, damping = p[..., 0:2], p[..., 2:3], p[..., 3:4]
        pos, vel = s[..., 0:2], s[..., 2:4]
        vel = (1.0 - damping) * vel + gain * a * DT
        pos = np.clip(pos + vel * DT, -self.pos_limit, self.pos_limit)
        reward = -np.linalg.norm(pos - goal, axis=-1)
        return np.concatenate([pos, vel], axis=-1), reward

    def oracle_action(self, task_params, state, settle_time: float = 0.5):
        p = np.asarray(task_params, dtype=np.float64)
        s = np.asarray(state, dtype=np.float64)
        goal, gain, damping = p[..., 0:2], p[..., 2:3], p[..., 3:4]
        pos, vel = s[..., 0:2], s[..., 2:4]
        v_des = (goal - pos) / settle_time
        return np.clip((v_des - (1.0 - damping) * vel) / (gain * DT), -1.0, 1.0)


class LineVelComp(EnvFamily):
    """1-D velocity tracking; state ``(v,)`` with ``|v| <= 1``."""

    name = "line_vel"
    obs_dim = 1
    act_dim = 1
    horizon = 40
    param_names = ("v_goal", "gain", "drag")
    reward_min = -2.0
    v_limit = 1.0

    @classmethod
    def default_spec(cls, n_goals: int = 8, physics=None) -> DovSpec:
        goals = Dov(
            "goal",
            tuple(f"vel{k}" for k in range(n_goals)),
            tuple({"v_goal": float(v)} for v in np.linspace(-1.0, 1.0, n_goals)),
        )
        if physics is None:
            physics = [(0.5, 0.0), (1.0, 0.02), (1.5, 0.05), (2.0, 0.1), (0.8, 0.04)]
        phys = Dov(
            "physics",
            tuple(f"phys{k}" for k in range(len(physics))),
            tuple({"gain": float(g), "drag": float(d)} for g, d in physics),
        )
        return DovSpec((goals, phys))

    def _dynamics(self, p, s, a):
        v_goal, gain, drag = p[..., 0:1], p[..., 1:2], p[..., 2:3]
        v = np.clip((1.0 - drag) * s + gain * a * DT, -self.v_limit, self.v_limit)
        reward = -np.abs(v - v_goal)[..., 0]
        return v, reward

    def oracle_action(self, task_params, state):
        p = np.asarray(task_params, dtype=np.float64)
        s = np.asarray(state, dtype=np.float64)
        v_goal, gain, drag = p[..., 0:1], p[..., 1:2], p[..., 2:3]
        return np.clip((v_goal - (1.0 - drag) * s) / (gain * DT), -1.0, 1.0)


FAMILIES = {cls.name: cls for cls in (PointGoalComp, LineVelComp)}


def make_family(name: str, goals=None, physics=None, reset_noise: float = 0.0) -> EnvFamily:
    """Build a family by name, optionally overriding its label values.

    ``goals`` is a count (evenly spread labels); ``physics`` is a list of
    (gain, damping/drag) pairs.
    """
    try:
        cls = FAMILIES[name]
    except KeyError:
        raise ConfigError(f"unknown env family {name!r}; choose from {sorted(FAMILIES)}") from None
    kwargs = {}
    if goals is not None:
        kwargs["n_goals"] = int(goals)
    if physics is not None:
        kwargs["physics"] = [tuple(p) for p in physics]
    return cls(cls.default_spec(**kwargs), reset_noise=reset_noise)


def build_task_grid(family: EnvFamily, exclude: dict | None = None) -> list[TaskInstance]:
    """Cartesian product of all label lists, in row-major DoV order.

    ``exclude`` maps a DoV name to label indices dropped from the grid; task
    ids still refer to the position in the full product.
    """
    spec = family.spec
    for dov in spec.dovs:
        if not dov.labels:
            raise ConfigError(f"DoV {dov.name!r} has no labels")
    excluded = {spec.index(k): set(v) for k, v in (exclude or {}).items()}
    tasks = []
    for task_id, combo in enumerate(itertools.product(*(range(len(d.labels)) for d in spec.dovs))):
        if any(combo[j] in ys for j, ys in excluded.items()):
            continue
        tasks.append(family.make_task(task_id, combo))
    return tasks


def select_training_tasks(grid: Sequence[TaskInstance], alpha: float, rng: np.random.Generator):
    """Bernoulli(alpha) split with a coverage repair so every label is trained on.

    For each (DoV, label) absent from the training draw, one uniformly chosen
    held-out task bearing that label moves into the training set.
    """
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    grid = list(grid)
    chosen = rng.random(len(grid)) < alpha
    n_dovs = len(grid[0].combo) if grid else 0
    for j in range(n_dovs):
        for y in sorted({t.combo[j] for t in grid}):
            if any(c and t.combo[j] == y for c, t in zip(chosen, grid)):
                continue
            candidates = [i for i, t in enumerate(grid) if t.combo[j] == y and not chosen[i]]
            chosen[candidates[rng.integers(len(candidates))]] = True
    train = [t for c, t in zip(chosen, grid) if c]
    test = [t for c, t in zip(chosen, grid) if not c]
    return train, test


def stack_params(tasks: Sequence[TaskInstance]) -> np.ndarray:
    return np.stack([t.params for t in tasks])


def rollout_returns(family: EnvFamily, tasks: Sequence[TaskInstance], policy, rng=None) -> np.ndarray:
    """Undiscounted return of ``policy(params, state, t) -> action`` on every task at once."""
    params = stack_params(tasks)
    state = family.reset(params, rng)
    total = np.zeros(len(tasks))
    for t in range(family.horizon):
        action = policy(params, state, t)
        state, reward, _ = family.step(params, state, action, t)
        total += reward
    return total


def oracle_returns(family: EnvFamily, tasks: Sequence[TaskInstance]) -> np.ndarray:
    return rollout_returns(family, tasks, lambda p, s, t: family.oracle_action(p, s))
