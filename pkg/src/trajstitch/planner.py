"""Hierarchical diffusion planning, a value-based controller, and evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffusion import DiffusionModel, ddim_sample
from .maze import N_ACTIONS, STAY, UNREACHABLE, Dataset, MazeSpec, is_success, step

NO_REPLAN = None


@dataclass
class PlannerConfig:
    plan_horizon: int = 101
    jump: int = 25
    replanning_interval: int | None = 50
    subgoal_horizon: int = 10
    max_episode_steps: int = 300
    delta_g: float = 0.5
    ddim_steps: int = 20

    def __post_init__(self):
        if self.jump < 2:
            raise ValueError("temporal jump must be >= 2")
        if not 1 <= self.subgoal_horizon <= self.jump:
            raise ValueError("subgoal_horizon must lie in [1, jump]")
        if self.replanning_interval is not None and self.replanning_interval < 1:
            raise ValueError("replanning_interval must be positive or None")
        if not self.delta_g > 0:
            raise ValueError("delta_g must be positive")

    @property
    def n_waypoints(self) -> int:
        return math.ceil((self.plan_horizon - 1) / self.jump) + 1


@dataclass
class Plan:
    states: np.ndarray  # (L, 2)
    waypoint_indices: np.ndarray

    def __len__(self) -> int:
        return len(self.states)


@dataclass
class PlannerModels:
    spec: MazeSpec
    high: DiffusionModel  # waypoints, horizon == n_waypoints
    stitcher: DiffusionModel  # dense fill, horizon == jump + 1
    phi: object  # EmbeddingModel


def plan(high: DiffusionModel, stitcher: DiffusionModel, current, goal, config: PlannerConfig, rng) -> Plan:
    """Inpaint sparse waypoints between ``current`` and ``goal``, then fill each gap with a bridge."""
    n_wp = high.horizon
    J = stitcher.horizon - 1
    if J != config.jump:
        raise ValueError("stitcher horizon must equal jump + 1")
    current = np.asarray(current, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    wp = ddim_sample(high, rng, config.ddim_steps, cond={0: current, n_wp - 1: goal})
    parts = [wp[:1]]
    for a, b in zip(wp[:-1], wp[1:]):
        bridge = ddim_sample(stitcher, rng, config.ddim_steps, cond={0: a, J: b})
        parts.append(bridge[1:])
    states = np.concatenate(parts)
    return Plan(states, np.arange(n_wp) * J)


def low_level_act(phi, spec: MazeSpec, s, subgoal) -> int:
    """One-step lookahead: the action whose successor is latently closest to ``subgoal``."""
    nexts = np.stack([step(spec, s, a) for a in range(N_ACTIONS)])
    lat = phi.phi(np.concatenate([nexts, np.asarray(subgoal, dtype=np.float64).reshape(1, 2)]))
    d = np.linalg.norm(lat[:-1] - lat[-1], axis=1)
    a = int(np.argmax(-d))  # first maximum = smallest action id
    # a blocked move and STAY land on the same state; report the canonical STAY
    return STAY if np.array_equal(nexts[a], np.asarray(s, dtype=np.float64)) else a


@dataclass
class EpisodeOutcome:
    success: bool
    steps: int
    states: np.ndarray
    actions: np.ndarray
    n_plans: int
    plans: list = field(default_factory=list)  # dense state arrays of every plan made


def rollout_episode(spec: MazeSpec, models: PlannerModels, task, config: PlannerConfig, rng) -> EpisodeOutcome:
    """Closed loop: plan, chase subgoals ``subgoal_horizon`` ahead in the plan, replan periodically."""
    start, goal = (np.asarray(x, dtype=np.float64) for x in task)
    s = start.copy()
    states, actions = [s], []
    if is_success(s, goal, config.delta_g):
        return EpisodeOutcome(True, 0, np.array(states), np.array(actions, dtype=np.int64), 0)
    h = config.subgoal_horizon
    plans = []

    def new_plan(cur):
        pl = plan(models.high, models.stitcher, cur, goal, config, rng)
        plans.append(pl.states)
        return pl

    pl = new_plan(s)
    last = len(pl) - 1
    progress, since_adv, since_plan = 0, 0, 0
    sub = min(progress + h, last)
    success = False
    for t in range(config.max_episode_steps):
        a = low_level_act(models.phi, spec, s, pl.states[sub])
        s = step(spec, s, a)
        states.append(s)
        actions.append(a)
        since_adv += 1
        since_plan += 1
        if is_success(s, goal, config.delta_g):
            success = True
            break
        if config.replanning_interval is not None and since_plan >= config.replanning_interval:
            pl = new_plan(s)
            last = len(pl) - 1
            progress, since_adv, since_plan = 0, 0, 0
            sub = min(h, last)
            continue
        if is_success(s, pl.states[sub], config.delta_g) or since_adv >= h:
            progress = sub
            sub = min(progress + h, last)
            since_adv = 0
    return EpisodeOutcome(
        success, len(actions), np.array(states), np.array(actions, dtype=np.int64), len(plans), plans
    )


# -- metrics -------------------------------------------------------------------


def dynamic_mse(spec: MazeSpec, s, a: int, s_next) -> float:
    """||f*(s, a) - s'||^2 for an on-grid state ``s``."""
    d = step(spec, s, a) - np.asarray(s_next, dtype=np.float64)
    return float(d @ d)


def dynamic_mse_generated(spec: MazeSpec, s, a: int, s_next) -> float:
    """Dynamic MSE for a generated (possibly off-center) ``s``: it is snapped to the nearest free cell first."""
    return dynamic_mse(spec, spec.snap(s), a, s_next)


def nearest_action_mse(spec: MazeSpec, s, s_next) -> float:
    """Smallest Dynamic MSE over all actions, executing from the snapped ``s``."""
    base = spec.snap(s)
    nexts = np.stack([step(spec, base, a) for a in range(N_ACTIONS)])
    d = nexts - np.asarray(s_next, dtype=np.float64)
    return float(np.min((d * d).sum(axis=1)))


def coverage(trajectories, spec: MazeSpec) -> float:
    """Fraction of free cells containing at least one visited state."""
    if isinstance(trajectories, Dataset):
        trajectories = trajectories.trajectories
    seen = np.zeros(spec.walls.shape, dtype=bool)
    for t in trajectories:
        s = t.states if hasattr(t, "states") else np.asarray(t)
        cells = spec.containing_cells(s)
        ok = (cells[:, 0] >= 0) & (cells[:, 0] < spec.width) & (cells[:, 1] >= 0) & (cells[:, 1] < spec.height)
        cells = cells[ok]
        seen[cells[:, 1], cells[:, 0]] = True
    return float((seen & ~spec.walls).sum() / spec.n_free)


def make_tasks(spec: MazeSpec, n: int, min_distance: int, seed: int = 0, max_distance: int | None = None):
    """``n`` (start, goal) cell pairs with oracle distance in [min_distance, max_distance],
    drawn evenly across the distance strata present."""
    dist = spec.distance_matrix
    hi = int(dist.max()) if max_distance is None else max_distance
    ok = (dist >= min_distance) & (dist <= hi) & (dist != UNREACHABLE)
    pairs = np.argwhere(ok)
    if len(pairs) == 0:
        raise ValueError("no task pairs in the requested distance range")
    rng = np.random.default_rng([int(seed), 5])
    levels = np.unique(dist[pairs[:, 0], pairs[:, 1]])
    fc = spec.free_cells
    tasks = []
    for j in range(n):
        lvl = levels[j % len(levels)]
        cand = pairs[dist[pairs[:, 0], pairs[:, 1]] == lvl]
        a, b = cand[rng.integers(len(cand))]
        tasks.append(([int(v) for v in fc[a]], [int(v) for v in fc[b]]))
    return tasks


@dataclass
class EvalReport:
    success_rate: float
    per_task: list
    episode_lengths: list
    coverage: float
    dynamic_mse_median: float  # over planned transitions, nearest-action execution
    dynamic_mse_p95: float
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def evaluate(spec: MazeSpec, models: PlannerModels, tasks, config: PlannerConfig, seeds, map_fn=map) -> EvalReport:
    """Every task under every seed; each episode gets its own RNG stream ``(seed, task)``."""
    if not tasks:
        raise ValueError("need at least one task")
    jobs = [(si, ti) for si in range(len(seeds)) for ti in range(len(tasks))]

    def one(job):
        si, ti = job
        start, goal = tasks[ti]
        task = (spec.center(start), spec.center(goal))
        rng = np.random.default_rng([int(seeds[si]), ti, 13])
        return rollout_episode(spec, models, task, config, rng)

    outcomes = list(map_fn(one, jobs))
    per_task = []
    for ti, (start, goal) in enumerate(tasks):
        res = [outcomes[k] for k, (_, tj) in enumerate(jobs) if tj == ti]
        per_task.append(
            {
                "start": list(start),
                "goal": list(goal),
                "oracle_distance": int(spec.distance_matrix[spec.cell_id(start), spec.cell_id(goal)]),
                "successes": int(sum(o.success for o in res)),
                "episodes": len(res),
            }
        )
    # executed transitions are exact by construction; the informative error is in the plans
    mses = [
        nearest_action_mse(spec, p[t], p[t + 1]) for o in outcomes for p in o.plans for t in range(len(p) - 1)
    ]
    total = sum(p["episodes"] for p in per_task)
    return EvalReport(
        success_rate=sum(p["successes"] for p in per_task) / total,
        per_task=per_task,
        episode_lengths=[int(o.steps) for o in outcomes],
        coverage=coverage([o.states for o in outcomes], spec),
        dynamic_mse_median=float(np.median(mses)) if mses else 0.0,
        dynamic_mse_p95=float(np.percentile(mses, 95)) if mses else 0.0,
        config=asdict(config),
    )
