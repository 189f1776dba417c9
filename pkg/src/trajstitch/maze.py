"""Deterministic point-in-grid maze: dynamics, BFS distance oracle, dataset generators and I/O."""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

# Action ids 0..7 are the compass moves in lexicographic (dx, dy) order; 8 is "stay".
ACTION_DELTAS = np.array(
    [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1), (0, 0)],
    dtype=np.int64,
)
N_ACTIONS = 9
STAY = 8
COMPASS = tuple(range(8))
UNREACHABLE = -1


class InvalidStateError(ValueError):
    """A state or cell is off the grid, blocked, or not a cell center."""


class GenerationError(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MazeSpec:
    """Grid maze. ``walls[y, x]`` is True for blocked cells; cell (x, y) has its
    center at ``((x + 0.5) * cell_size, (y + 0.5) * cell_size)``."""

    walls: np.ndarray
    cell_size: float = 1.0
    name: str = ""

    def __post_init__(self):
        walls = np.array(self.walls, dtype=bool)
        if walls.ndim != 2 or walls.shape[0] < 1 or walls.shape[1] < 1:
            raise ValueError("walls must be a non-empty 2-D grid")
        border = np.concatenate([walls[0], walls[-1], walls[:, 0], walls[:, -1]])
        if not border.all():
            raise ValueError("outer border must be fully walled")
        if walls.all():
            raise ValueError("maze has no free cell")
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        walls.setflags(write=False)
        object.__setattr__(self, "walls", walls)

    @property
    def width(self) -> int:
        return self.walls.shape[1]

    @property
    def height(self) -> int:
        return self.walls.shape[0]

    # -- cell bookkeeping -------------------------------------------------

    @cached_property
    def free_cells(self) -> np.ndarray:
        """(n, 2) integer array of free (x, y) cells in row-major order."""
        ys, xs = np.nonzero(~self.walls)
        return np.stack([xs, ys], axis=1)

    @property
    def n_free(self) -> int:
        return len(self.free_cells)

    @cached_property
    def _cell_index(self) -> np.ndarray:
        idx = np.full(self.walls.shape, -1, dtype=np.int64)
        fc = self.free_cells
        idx[fc[:, 1], fc[:, 0]] = np.arange(len(fc))
        return idx

    def is_free(self, cell) -> bool:
        x, y = int(cell[0]), int(cell[1])
        return 0 <= x < self.width and 0 <= y < self.height and not self.walls[y, x]

    def cell_id(self, cell) -> int:
        if not self.is_free(cell):
            raise InvalidStateError(f"cell {tuple(cell)} is not a free cell")
        return int(self._cell_index[int(cell[1]), int(cell[0])])

    def center(self, cell) -> np.ndarray:
        return (np.asarray(cell, dtype=np.float64) + 0.5) * self.cell_size

    def centers(self, cells) -> np.ndarray:
        return (np.asarray(cells, dtype=np.float64) + 0.5) * self.cell_size

    def cell_of(self, state) -> tuple[int, int]:
        """Exact inverse of :meth:`center`; raises for off-center or blocked states."""
        s = np.asarray(state, dtype=np.float64)
        g = s / self.cell_size - 0.5
        cell = np.rint(g)
        if s.shape != (2,) or not np.all(np.isfinite(g)) or not np.array_equal(g, cell):
            raise InvalidStateError(f"state {s.tolist()} is not a cell center")
        c = (int(cell[0]), int(cell[1]))
        if not self.is_free(c):
            raise InvalidStateError(f"state {s.tolist()} lies on a blocked cell")
        return c

    def containing_cells(self, states) -> np.ndarray:
        """Grid cell containing each (possibly off-center) state, shape (n, 2)."""
        s = np.asarray(states, dtype=np.float64).reshape(-1, 2)
        return np.floor(s / self.cell_size).astype(np.int64)

    def snap(self, states) -> np.ndarray:
        """Nearest free-cell center for each state (ties to the lower cell id)."""
        s = np.asarray(states, dtype=np.float64)
        flat = s.reshape(-1, 2)
        centers = self.centers(self.free_cells)
        d2 = ((flat[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        return centers[np.argmin(d2, axis=1)].reshape(s.shape)

    # -- dynamics tables --------------------------------------------------

    @cached_property
    def transition_table(self) -> np.ndarray:
        """``table[cell_id, action] -> next cell_id`` under the corner-cut rule."""
        fc = self.free_cells
        table = np.empty((len(fc), N_ACTIONS), dtype=np.int64)
        for i, (x, y) in enumerate(fc):
            for a, (dx, dy) in enumerate(ACTION_DELTAS):
                nx, ny = x + dx, y + dy
                ok = self.is_free((nx, ny))
                if ok and dx != 0 and dy != 0:
                    ok = self.is_free((x + dx, y)) and self.is_free((x, y + dy))
                table[i, a] = self._cell_index[ny, nx] if ok else i
        return table

    @cached_property
    def distance_matrix(self) -> np.ndarray:
        """All-pairs BFS step counts between free cells; ``UNREACHABLE`` if disconnected."""
        table = self.transition_table
        n = len(table)
        dist = np.full((n, n), UNREACHABLE, dtype=np.int64)
        for src in range(n):
            row = dist[src]
            row[src] = 0
            queue = deque([src])
            while queue:
                u = queue.popleft()
                for v in table[u]:
                    if row[v] == UNREACHABLE:
                        row[v] = row[u] + 1
                        queue.append(v)
        dist.setflags(write=False)
        return dist

    # -- text / JSON forms ------------------------------------------------

    def to_text(self) -> str:
        # Top text line is the highest y.
        return "\n".join("".join("#" if w else "." for w in row) for row in self.walls[::-1])

    @classmethod
    def from_text(cls, text: str, cell_size: float = 1.0, name: str = "") -> MazeSpec:
        lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
        if not lines or len({len(ln) for ln in lines}) != 1:
            raise ValueError("maze text must be a non-empty rectangle")
        if any(ch not in "#." for ln in lines for ch in ln):
            raise ValueError("maze text may only contain '#' and '.'")
        walls = np.array([[ch == "#" for ch in ln] for ln in lines[::-1]], dtype=bool)
        return cls(walls, cell_size=cell_size, name=name)

    def to_json(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "walls": "".join("1" if w else "0" for w in self.walls.ravel()),
            "cell_size": self.cell_size,
        }

    @classmethod
    def from_json(cls, obj: dict) -> MazeSpec:
        w, h, bits = int(obj["width"]), int(obj["height"]), obj["walls"]
        if len(bits) != w * h or set(bits) - {"0", "1"}:
            raise DatasetFormatError("walls string does not match width*height")
        walls = np.array([b == "1" for b in bits], dtype=bool).reshape(h, w)
        return cls(walls, cell_size=float(obj.get("cell_size", 1.0)))


def open_maze(n: int, cell_size: float = 1.0) -> MazeSpec:
    """n x n free interior surrounded by a wall border."""
    walls = np.ones((n + 2, n + 2), dtype=bool)
    walls[1:-1, 1:-1] = False
    return MazeSpec(walls, cell_size=cell_size, name=f"open{n}")


# The classic 8x8 "medium" point-maze layout.
MAZE8_TEXT = """
########
#..##..#
#..#...#
##...###
#..#...#
#.#..#.#
#...#..#
########
"""


def upscale(spec: MazeSpec, factor: int) -> MazeSpec:
    """Blow every interior cell up into a factor x factor block; border stays one cell thick."""
    inner = spec.walls[1:-1, 1:-1]
    big = np.kron(inner, np.ones((factor, factor), dtype=bool))
    walls = np.ones((big.shape[0] + 2, big.shape[1] + 2), dtype=bool)
    walls[1:-1, 1:-1] = big
    return MazeSpec(walls, cell_size=spec.cell_size, name=f"{spec.name}x{factor}")


def builtin_maze(name: str) -> MazeSpec:
    if name == "maze8":
        return MazeSpec.from_text(MAZE8_TEXT, name="maze8")
    if name == "medium":
        return upscale(MazeSpec.from_text(MAZE8_TEXT, name="maze8"), 2)
    if name.startswith("open") and name[4:].isdigit():
        return open_maze(int(name[4:]))
    raise KeyError(f"unknown builtin maze {name!r}")


def load_maze(path_or_name: str) -> MazeSpec:
    p = Path(path_or_name)
    if p.exists():
        return MazeSpec.from_text(p.read_text(), name=p.stem)
    try:
        return builtin_maze(path_or_name)
    except KeyError:
        raise FileNotFoundError(f"no maze file or builtin maze named {path_or_name!r}") from None


# -- dynamics and oracle ----------------------------------------------------


def step(spec: MazeSpec, s, a: int) -> np.ndarray:
    """Exact environment dynamics f*(s, a)."""
    if not 0 <= int(a) < N_ACTIONS:
        raise ValueError(f"action {a} out of range")
    cid = spec.cell_id(spec.cell_of(s))
    nxt = spec.transition_table[cid, int(a)]
    return spec.centers(spec.free_cells[nxt])


def temporal_distance_oracle(spec: MazeSpec, a, b) -> int:
    """Minimum number of steps between free cells ``a`` and ``b`` (or ``UNREACHABLE``)."""
    return int(spec.distance_matrix[spec.cell_id(a), spec.cell_id(b)])


def is_success(s, g, delta_g: float) -> bool:
    if not delta_g > 0:
        raise ValueError("delta_g must be positive")
    d = np.asarray(s, dtype=np.float64) - np.asarray(g, dtype=np.float64)
    return bool(math.hypot(d[0], d[1]) <= delta_g)


def shortest_path(spec: MazeSpec, a: int, b: int) -> list[tuple[int, int]]:
    """BFS path between cell ids as (next_cell_id, action) hops; lowest action id wins ties."""
    dist = spec.distance_matrix
    if dist[a, b] == UNREACHABLE:
        raise GenerationError("no path between cells")
    table = spec.transition_table
    hops, cur = [], a
    while cur != b:
        for act in COMPASS:
            nxt = table[cur, act]
            if nxt != cur and dist[nxt, b] == dist[cur, b] - 1:
                hops.append((int(nxt), act))
                cur = nxt
                break
    return hops


# -- trajectories and datasets ----------------------------------------------


@dataclass(eq=False)
class Trajectory:
    states: np.ndarray  # (T, 2) world coordinates
    actions: np.ndarray  # (T,) action ids; last one is usually STAY
    episode_id: int = 0

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64).reshape(-1, 2)
        self.actions = np.asarray(self.actions, dtype=np.int64).reshape(-1)
        if len(self.states) < 1 or len(self.states) != len(self.actions):
            raise ValueError("trajectory needs T >= 1 states and T actions")

    def __len__(self) -> int:
        return len(self.states)


@dataclass(eq=False)
class Dataset:
    spec: MazeSpec
    trajectories: list[Trajectory]
    meta: dict = field(default_factory=dict)

    @property
    def n_transitions(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def all_states(self) -> np.ndarray:
        return np.concatenate([t.states for t in self.trajectories])


def episode_rng(seed: int, episode_id: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(episode_id)])


def _rollout_actions(spec: MazeSpec, start_id: int, actions) -> Trajectory:
    table = spec.transition_table
    ids = [start_id]
    for a in actions[:-1]:
        ids.append(int(table[ids[-1], a]))
    return Trajectory(spec.centers(spec.free_cells[ids]), actions)


def generate_stitch_dataset(
    spec: MazeSpec,
    n_episodes: int,
    max_span: int = 4,
    ep_len: int = 200,
    seed: int = 0,
) -> Dataset:
    """Short goal-reaching episodes confined to ``max_span`` cells of their start.

    Each episode chains BFS-shortest-path hops; every hop target is within
    ``max_span`` steps of both the current cell and the episode's first cell,
    so no episode ever strays farther than ``max_span`` from where it began.
    Episodes are cut (or padded with STAY) to exactly ``ep_len`` states.
    """
    if spec.n_free < 2:
        raise GenerationError("maze needs at least two free cells")
    if ep_len < 1 or n_episodes < 0 or max_span < 0:
        raise ValueError("invalid generation parameters")
    dist = spec.distance_matrix
    near = (dist >= 1) & (dist <= max_span)
    starts = np.nonzero(near.any(axis=1))[0] if max_span > 0 else np.arange(spec.n_free)
    if len(starts) == 0:
        raise GenerationError(f"no reachable pair within max_span={max_span}")

    trajs = []
    for ep in range(n_episodes):
        rng = episode_rng(seed, ep)
        c0 = int(starts[rng.integers(len(starts))])
        cur, actions = c0, []
        while len(actions) < ep_len - 1 and max_span > 0:
            cand = np.nonzero(near[cur] & (dist[c0] <= max_span))[0]
            if len(cand) == 0:
                break
            target = int(cand[rng.integers(len(cand))])
            for nxt, act in shortest_path(spec, cur, target):
                actions.append(act)
                cur = nxt
        actions = actions[: ep_len - 1]
        actions += [STAY] * (ep_len - len(actions))
        traj = _rollout_actions(spec, c0, actions)
        traj.episode_id = ep
        trajs.append(traj)
    meta = {
        "generator": "stitch",
        "seed": int(seed),
        "params": {"n_episodes": n_episodes, "max_span": max_span, "ep_len": ep_len},
    }
    return Dataset(spec, trajs, meta)


def generate_explore_dataset(
    spec: MazeSpec,
    n_episodes: int,
    ep_len: int = 500,
    resample_interval: int = 10,
    noise_prob: float = 0.3,
    seed: int = 0,
) -> Dataset:
    """Random-heading walks: a compass heading re-drawn every ``resample_interval``
    steps, each executed action replaced by a uniform random one with ``noise_prob``."""
    if not 0.0 <= noise_prob <= 1.0:
        raise ValueError("noise_prob must lie in [0, 1]")
    if ep_len < 1 or resample_interval < 1:
        raise ValueError("invalid generation parameters")
    trajs = []
    for ep in range(n_episodes):
        rng = episode_rng(seed, ep)
        start = int(rng.integers(spec.n_free))
        actions, heading = [], 0
        for t in range(ep_len - 1):
            if t % resample_interval == 0:
                heading = int(rng.integers(8))
            a = heading
            if rng.random() < noise_prob:
                a = int(rng.integers(N_ACTIONS))
            actions.append(a)
        actions.append(STAY)
        traj = _rollout_actions(spec, start, actions)
        traj.episode_id = ep
        trajs.append(traj)
    meta = {
        "generator": "explore",
        "seed": int(seed),
        "params": {
            "n_episodes": n_episodes,
            "ep_len": ep_len,
            "resample_interval": resample_interval,
            "noise_prob": noise_prob,
        },
    }
    return Dataset(spec, trajs, meta)


# -- normalization ------------------------------------------------------------


@dataclass(frozen=True)
class Normalizer:
    """Per-dimension affine map with a dyadic mean and power-of-two scale.

    Both constants are exactly representable binary fractions, so grid
    coordinates survive normalize/denormalize round trips bit for bit.
    """

    mean: tuple
    scale: tuple

    @classmethod
    def fit(cls, x: np.ndarray) -> Normalizer:
        x = np.asarray(x, dtype=np.float64)
        x = x.reshape(-1, x.shape[-1])
        mu = np.round(x.mean(axis=0) * 64) / 64
        sd = np.maximum(x.std(axis=0), 1e-6)
        scale = 2.0 ** np.round(np.log2(sd))
        return cls(tuple(float(v) for v in mu), tuple(float(v) for v in scale))

    def normalize(self, x):
        return (np.asarray(x, dtype=np.float64) - np.array(self.mean)) / np.array(self.scale)

    def denormalize(self, z):
        return np.asarray(z, dtype=np.float64) * np.array(self.scale) + np.array(self.mean)

    def to_json(self) -> dict:
        return {"mean": list(self.mean), "scale": list(self.scale)}

    @classmethod
    def from_json(cls, obj: dict) -> Normalizer:
        return cls(tuple(map(float, obj["mean"])), tuple(map(float, obj["scale"])))


# -- NDJSON dataset files ---------------------------------------------------


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def dataset_lines(ds: Dataset):
    meta = dict(ds.meta)
    meta.setdefault("normalizer", Normalizer.fit(ds.all_states()).to_json() if ds.trajectories else None)
    header = {"format_version": FORMAT_VERSION, "maze": ds.spec.to_json(), "meta": meta}
    yield json.dumps(header, sort_keys=True)
    for t in ds.trajectories:
        states = ",".join(f"[{_fmt(x)},{_fmt(y)}]" for x, y in t.states)
        actions = ",".join(str(int(a)) for a in t.actions)
        yield f'{{"episode_id":{int(t.episode_id)},"states":[{states}],"actions":[{actions}]}}'


def save_dataset(ds: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in dataset_lines(ds):
            fh.write(line + "\n")


def load_dataset(path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().split("\n") if ln]
    if not lines:
        raise DatasetFormatError("empty dataset file")
    try:
        header = json.loads(lines[0])
        if header.get("format_version") != FORMAT_VERSION:
            raise DatasetFormatError(f"unsupported format_version {header.get('format_version')}")
        spec = MazeSpec.from_json(header["maze"])
        trajs = []
        for ln in lines[1:]:
            rec = json.loads(ln)
            trajs.append(Trajectory(rec["states"], rec["actions"], int(rec["episode_id"])))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"corrupt dataset file: {exc}") from exc
    return Dataset(spec, trajs, header.get("meta", {}))
