"""Reward-free trajectory augmentation by latent-directed stitching.

Each rollout picks a random unit direction in latent space, then repeatedly
retrieves segments whose start is near the current end state, scores them by
progress along the direction plus novelty against everything visited so far,
and appends a diffusion-generated bridge to the best segment's end state.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .diffusion import DiffusionModel, ddim_sample
from .maze import N_ACTIONS, STAY, Dataset, MazeSpec, Normalizer, Trajectory, step
from .segments import IVFIndex, SegmentTable, topk


@dataclass
class StitchConfig:
    k: int = 10
    k_density: int = 30
    beta: float = 2.0
    n_stitch: int = 10
    n_traj: int = 100
    h_stitcher: int = 26
    n_probe: int = 8
    ddim_steps: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.k_density < 1:
            raise ValueError("k and k_density must be >= 1")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.n_stitch < 0 or self.n_traj < 0:
            raise ValueError("n_stitch and n_traj must be non-negative")


@dataclass
class RolloutState:
    tau_comp: np.ndarray  # (T, 2) composed states
    z: np.ndarray
    v_rollout: np.ndarray  # (T, latent) latents of every composed state


def sample_direction(rng, latent_dim: int) -> np.ndarray:
    if latent_dim < 1:
        raise ValueError("latent_dim must be >= 1")
    while True:
        z = rng.standard_normal(latent_dim)
        n = np.linalg.norm(z)
        if n > 0:
            return z / n


def progress_score(phi_start, phi_end, z):
    """<phi(end) - phi(start), z>; accepts single vectors or (k, d) stacks."""
    return (np.asarray(phi_end) - np.asarray(phi_start)) @ np.asarray(z)


def novelty_score(candidate, visited, k_density: int) -> float:
    """Mean distance from ``candidate`` to its k_density nearest visited latents (0 if none)."""
    visited = np.asarray(visited, dtype=np.float64)
    if len(visited) == 0:
        return 0.0
    k = min(int(k_density), len(visited))
    diff = visited - np.asarray(candidate, dtype=np.float64)
    d = np.sqrt((diff * diff).sum(axis=1))
    nearest = np.sort(np.partition(d, k - 1)[:k])
    return float(nearest.mean())


def combined_score(P, N, beta: float):
    return P + beta * N


def select_best(ids, scores) -> int:
    """Id with the highest score; ties go to the smaller id."""
    ids = np.asarray(ids)
    scores = np.asarray(scores, dtype=np.float64)
    if len(ids) == 0:
        raise ValueError("no candidates to select from")
    order = np.lexsort((ids, -scores))
    return int(ids[order[0]])


def refine_bridge(stitcher: DiffusionModel, start_state, end_state, rng, n_steps: int = 20) -> np.ndarray:
    """Stitcher sample with the first and last rows clamped to the boundary states."""
    H = stitcher.horizon
    return ddim_sample(stitcher, rng, n_steps=n_steps, cond={0: start_state, H - 1: end_state})


# -- inverse dynamics -----------------------------------------------------------


@dataclass
class InverseDynamicsModel:
    """Classifier over the 9 actions from (s_t, s_{t+1}).

    Inputs are the normalized current state and the displacement in cell units.
    """

    mlp: nn.MLPSpec
    params: np.ndarray
    normalizer: Normalizer
    cell_size: float = 1.0

    def features(self, s, s_next) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64).reshape(-1, 2)
        s_next = np.asarray(s_next, dtype=np.float64).reshape(-1, 2)
        return np.concatenate([self.normalizer.normalize(s), (s_next - s) / self.cell_size], axis=1)

    def logits(self, s, s_next) -> np.ndarray:
        return nn.forward(self.mlp, self.params, self.features(s, s_next))

    def predict(self, s, s_next) -> np.ndarray:
        return np.argmax(self.logits(s, s_next), axis=1)


@dataclass
class InverseDynamicsConfig:
    hidden: tuple = (128, 128, 128)
    steps: int = 3000
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0


def transition_pairs(dataset: Dataset, stay_pairs: bool = True):
    """(s, s_next, action) arrays; ``stay_pairs`` adds one (s, s, STAY) per distinct state.

    Stitch-style data never pauses, so without the extra pairs a classifier would
    never see a zero displacement.
    """
    s, s2, a = [], [], []
    for t in dataset.trajectories:
        if len(t) < 2:
            continue
        s.append(t.states[:-1])
        s2.append(t.states[1:])
        a.append(t.actions[:-1])
    s, s2, a = np.concatenate(s), np.concatenate(s2), np.concatenate(a)
    # Every action that leaves the state unchanged is replay-equivalent; label those STAY.
    a = np.where(np.all(s == s2, axis=1), STAY, a)
    if stay_pairs:
        u = np.unique(np.concatenate([s, s2]), axis=0)
        s, s2 = np.concatenate([s, u]), np.concatenate([s2, u])
        a = np.concatenate([a, np.full(len(u), STAY, dtype=a.dtype)])
    return s, s2, a


@dataclass
class InverseDynamicsTrainer:
    dataset: Dataset
    config: InverseDynamicsConfig
    model: InverseDynamicsModel = None
    adam: nn.AdamState = None
    rng: np.random.Generator = None
    step: int = 0
    losses: list = field(default_factory=list)

    def __post_init__(self):
        cfg = self.config
        self._s, self._s2, self._a = transition_pairs(self.dataset)
        if self.model is None:
            spec = nn.MLPSpec((4, *cfg.hidden, N_ACTIONS), "gelu")
            norm = Normalizer.fit(self.dataset.all_states())
            self.model = InverseDynamicsModel(spec, nn.init_params(spec, cfg.seed), norm, self.dataset.spec.cell_size)
        if self.adam is None:
            self.adam = nn.AdamState(cfg.lr, self.model.mlp.n_params)
        if self.rng is None:
            self.rng = np.random.default_rng([cfg.seed, 3])

    def run(self, n_steps: int, callback=None) -> list:
        m = self.model
        for _ in range(n_steps):
            idx = self.rng.integers(len(self._a), size=self.config.batch_size)
            x = m.features(self._s[idx], self._s2[idx])
            logits, cache = nn.forward_cache(m.mlp, m.params, x)
            logits = logits - logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            y = self._a[idx]
            B = len(y)
            loss = float(-np.mean(np.log(p[np.arange(B), y] + 1e-300)))
            g = p.copy()
            g[np.arange(B), y] -= 1.0
            grads, _ = nn.backward_cache(m.mlp, m.params, cache, g / B)
            nn.adam_step(self.adam, m.params, grads)
            self.step += 1
            self.losses.append(loss)
            if callback is not None:
                callback(self.step, loss)
        return self.losses

    def state_dict(self) -> dict:
        return {
            "params": self.model.params.copy(),
            "adam_m": self.adam.m.copy(),
            "adam_v": self.adam.v.copy(),
            "adam_t": self.adam.t,
            "rng": json.dumps(self.rng.bit_generator.state),
            "step": self.step,
        }

    def load_state_dict(self, state: dict) -> None:
        self.model.params[...] = state["params"]
        self.adam.m[...] = state["adam_m"]
        self.adam.v[...] = state["adam_v"]
        self.adam.t = int(state["adam_t"])
        self.rng.bit_generator.state = json.loads(str(state["rng"]))
        self.step = int(state["step"])


def train_inverse_dynamics(dataset: Dataset, config: InverseDynamicsConfig | None = None) -> InverseDynamicsModel:
    config = config or InverseDynamicsConfig()
    trainer = InverseDynamicsTrainer(dataset, config)
    trainer.run(config.steps)
    return trainer.model


def save_inverse_dynamics(model: InverseDynamicsModel, path, extra: dict | None = None) -> None:
    nn.save_params(path, model.mlp, model.params)
    side = {"normalizer": model.normalizer.to_json(), "cell_size": model.cell_size, **(extra or {})}
    with open(f"{path}.json", "w") as fh:
        json.dump(side, fh, sort_keys=True, indent=1)


def load_inverse_dynamics(path) -> InverseDynamicsModel:
    spec, params = nn.load_params(path)
    with open(f"{path}.json") as fh:
        side = json.load(fh)
    return InverseDynamicsModel(spec, params, Normalizer.from_json(side["normalizer"]), float(side["cell_size"]))


def infer_actions(f_psi: InverseDynamicsModel, states) -> np.ndarray:
    """Action per consecutive pair, plus a final STAY so the output matches the state count."""
    states = np.asarray(states, dtype=np.float64).reshape(-1, 2)
    if len(states) < 2:
        return np.full(len(states), STAY, dtype=np.int64)
    acts = f_psi.predict(states[:-1], states[1:])
    return np.append(acts, STAY).astype(np.int64)


def replay_accuracy(spec: MazeSpec, f_psi: InverseDynamicsModel, s, s_next) -> float:
    """Fraction of on-grid transitions whose predicted action reproduces ``s_next`` under step()."""
    pred = f_psi.predict(s, s_next)
    ok = [np.array_equal(step(spec, a, int(u)), b) for a, b, u in zip(s, s_next, pred)]
    return float(np.mean(ok))


# -- the stitching loop ------------------------------------------------------------


@dataclass
class StitchModels:
    phi: object  # EmbeddingModel
    stitcher: DiffusionModel
    f_psi: InverseDynamicsModel
    table: SegmentTable
    index: IVFIndex


@dataclass
class StitchEvent:
    candidates: np.ndarray
    progress: np.ndarray
    novelty: np.ndarray
    scores: np.ndarray
    best: int
    junction_from: np.ndarray  # end of the composite before this stitch
    bridge: np.ndarray  # (H, 2) refined states appended (first row duplicates junction_from)


def rollout_seed(seed: int, n: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(n), 11])


def run_rollout(
    dataset: Dataset,
    models: StitchModels,
    config: StitchConfig,
    seed,
    episode_id: int = 0,
    trace: list | None = None,
) -> Trajectory:
    """One composed trajectory; pass a list as ``trace`` to collect per-stitch diagnostics."""
    if len(models.table) == 0:
        raise ValueError("segment index is empty")
    rng = np.random.default_rng(seed)
    table = models.table
    init = int(rng.integers(len(table)))
    states = [table.states(dataset, init)]
    latents = [models.phi.phi(states[0])]
    z = sample_direction(rng, models.phi.latent_dim)
    visited = latents[0]
    end = states[0][-1]
    for _ in range(config.n_stitch):
        q = visited[-1]
        ids, _ = topk(models.index, q, config.k, config.n_probe)
        P = progress_score(table.phi_start[ids], table.phi_end[ids], z)
        N = np.array([novelty_score(table.phi_end[j], visited, config.k_density) for j in ids])
        S = combined_score(P, N, config.beta)
        best = select_best(ids, S)
        bridge = refine_bridge(models.stitcher, end, table.end_state[best], rng, config.ddim_steps)
        if trace is not None:
            trace.append(StitchEvent(ids, P, N, S, best, end.copy(), bridge))
        new = bridge[1:]
        states.append(new)
        new_lat = models.phi.phi(new)
        visited = np.concatenate([visited, new_lat])
        end = new[-1]
    states = np.concatenate(states)
    return Trajectory(states, infer_actions(models.f_psi, states), episode_id)


def content_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def model_hash(mlp: nn.MLPSpec, params: np.ndarray) -> str:
    return content_hash(nn.params_bytes(mlp, params))


def augment_dataset(dataset: Dataset, models: StitchModels, config: StitchConfig, map_fn=map) -> Dataset:
    """Run ``n_traj`` rollouts with per-rollout seeds derived from ``config.seed``.

    ``map_fn`` may be a parallel ordered map; results are kept in rollout order.
    """
    def one(n):
        return run_rollout(dataset, models, config, rollout_seed(config.seed, n), episode_id=n)

    trajs = list(map_fn(one, range(config.n_traj)))
    meta = {
        "generator": "augment",
        "seed": int(config.seed),
        "params": asdict(config),
        "source": {"generator": dataset.meta.get("generator"), "seed": dataset.meta.get("seed")},
        "model_hashes": {
            "phi": model_hash(models.phi.mlp, models.phi.params),
            "stitcher": model_hash(models.stitcher.mlp, models.stitcher.params),
            "inverse_dynamics": model_hash(models.f_psi.mlp, models.f_psi.params),
        },
    }
    return Dataset(dataset.spec, trajs, meta)
