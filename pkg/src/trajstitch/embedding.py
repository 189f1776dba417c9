"""Temporal-distance embedding trained with expectile TD regression."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import spearmanr

from . import nn
from .maze import UNREACHABLE, Dataset, MazeSpec, Normalizer


@dataclass
class EmbeddingModel:
    mlp: nn.MLPSpec
    params: np.ndarray
    normalizer: Normalizer

    @property
    def latent_dim(self) -> int:
        return self.mlp.layer_dims[-1]

    def phi(self, states) -> np.ndarray:
        s = np.asarray(states, dtype=np.float64)
        flat = self.normalizer.normalize(s.reshape(-1, 2))
        return nn.forward(self.mlp, self.params, flat).reshape(s.shape[:-1] + (self.latent_dim,))

    def copy(self) -> EmbeddingModel:
        return EmbeddingModel(self.mlp, self.params.copy(), self.normalizer)


def make_embedding(
    normalizer: Normalizer,
    hidden=(128, 128, 128),
    latent_dim: int = 32,
    activation: str = "gelu",
    seed: int = 0,
) -> EmbeddingModel:
    spec = nn.MLPSpec((2, *hidden, latent_dim), activation)
    return EmbeddingModel(spec, nn.init_params(spec, seed), normalizer)


def latent_distance(model: EmbeddingModel, s, g) -> np.ndarray:
    return np.linalg.norm(model.phi(s) - model.phi(g), axis=-1)


def value(model: EmbeddingModel, s, g):
    """V(s, g) = -||phi(s) - phi(g)||, never positive."""
    return -latent_distance(model, s, g)


def expectile_loss(u, xi: float):
    """Asymmetric squared loss |xi - 1(u < 0)| * u**2."""
    u = np.asarray(u, dtype=np.float64)
    return np.where(u < 0, 1.0 - xi, xi) * u * u


@dataclass
class EmbedTrainConfig:
    gamma: float = 0.99
    expectile: float = 0.95
    batch_size: int = 256
    train_steps: int = 20_000
    lr: float = 3e-4
    tau_polyak: float = 0.005
    p_hindsight: float = 0.8
    p_random: float = 0.2
    geometric_p: float = 0.1
    equal_threshold: float = 0.5
    hidden: tuple = (128, 128, 128)
    latent_dim: int = 32
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0 < self.expectile < 1:
            raise ValueError("expectile must lie in (0, 1)")
        if abs(self.p_hindsight + self.p_random - 1.0) > 1e-12:
            raise ValueError("p_hindsight + p_random must equal 1")
        if not 0 < self.geometric_p <= 1:
            raise ValueError("geometric_p must lie in (0, 1]")


class TupleSampler:
    """Draws (s, s', g) training tuples from a dataset of trajectories."""

    def __init__(self, dataset: Dataset):
        trajs = [t for t in dataset.trajectories if len(t) >= 2]
        if not trajs:
            raise ValueError("dataset has no trajectory with a transition")
        self.states = np.concatenate([t.states for t in trajs])
        self.lengths = np.array([len(t) for t in trajs])
        self.offsets = np.concatenate([[0], np.cumsum(self.lengths)[:-1]])

    def sample(self, n: int, config: EmbedTrainConfig, rng: np.random.Generator):
        ti = rng.integers(len(self.lengths), size=n)
        L, off = self.lengths[ti], self.offsets[ti]
        t = np.floor(rng.random(n) * (L - 1)).astype(np.int64)
        hind = rng.random(n) < config.p_hindsight
        k = rng.geometric(config.geometric_p, size=n)
        future = off + np.minimum(t + k, L - 1)
        rand = rng.integers(len(self.states), size=n)
        gi = np.where(hind, future, rand)
        return self.states[off + t], self.states[off + t + 1], self.states[gi]


def sample_training_tuple(dataset: Dataset, config: EmbedTrainConfig, rng, n: int = 1):
    return TupleSampler(dataset).sample(n, config, rng)


def td_loss_and_grads(model, target, batch, config: EmbedTrainConfig):
    """Mean expectile TD loss and its gradient with respect to ``model.params``."""
    s, s_next, g = (np.asarray(b, dtype=np.float64).reshape(-1, 2) for b in batch)
    if not (len(s) == len(s_next) == len(g)):
        raise ValueError("batch components must have equal length")
    B = len(s)
    x = model.normalizer.normalize(np.concatenate([s, g]))
    out, cache = nn.forward_cache(model.mlp, model.params, x)
    zs, zg = out[:B], out[B:]
    diff = zs - zg
    d = np.sqrt((diff * diff).sum(axis=1))
    tgt = target.phi(np.concatenate([s_next, g]))
    dbar = np.linalg.norm(tgt[:B] - tgt[B:], axis=1)
    neq = np.linalg.norm(s - g, axis=1) > config.equal_threshold
    td_target = np.where(neq, -1.0 - config.gamma * dbar, 0.0)
    u = td_target + d
    w = np.where(u < 0, 1.0 - config.expectile, config.expectile)
    loss = float(np.mean(w * u * u))
    du = 2.0 * w * u / B
    safe = np.where(d > 0, d, 1.0)
    dz = np.where(d[:, None] > 0, diff / safe[:, None], 0.0) * du[:, None]
    grads, _ = nn.backward_cache(model.mlp, model.params, cache, np.concatenate([dz, -dz]))
    return loss, grads


def polyak_update(target: EmbeddingModel, online: EmbeddingModel, tau: float) -> None:
    target.params *= 1.0 - tau
    target.params += tau * online.params


def td_train_step(model, target, batch, config: EmbedTrainConfig, adam: nn.AdamState) -> float:
    loss, grads = td_loss_and_grads(model, target, batch, config)
    nn.adam_step(adam, model.params, grads)
    polyak_update(target, model, config.tau_polyak)
    return loss


@dataclass
class EmbeddingTrainer:
    """Resumable training loop; all mutable state is captured by ``state_dict``."""

    dataset: Dataset
    config: EmbedTrainConfig
    model: EmbeddingModel = None
    target: EmbeddingModel = None
    adam: nn.AdamState = None
    rng: np.random.Generator = None
    step: int = 0
    losses: list = field(default_factory=list)

    def __post_init__(self):
        cfg = self.config
        if self.model is None:
            norm = Normalizer.fit(self.dataset.all_states())
            self.model = make_embedding(norm, cfg.hidden, cfg.latent_dim, seed=cfg.seed)
        if self.target is None:
            self.target = self.model.copy()
        if self.adam is None:
            self.adam = nn.AdamState(cfg.lr, self.model.mlp.n_params)
        if self.rng is None:
            self.rng = np.random.default_rng([cfg.seed, 1])
        self._sampler = TupleSampler(self.dataset)

    def run(self, n_steps: int, callback=None) -> list:
        for _ in range(n_steps):
            batch = self._sampler.sample(self.config.batch_size, self.config, self.rng)
            loss = td_train_step(self.model, self.target, batch, self.config, self.adam)
            self.step += 1
            self.losses.append(loss)
            if callback is not None:
                callback(self.step, loss)
        return self.losses

    def state_dict(self) -> dict:
        return {
            "params": self.model.params.copy(),
            "target_params": self.target.params.copy(),
            "adam_m": self.adam.m.copy(),
            "adam_v": self.adam.v.copy(),
            "adam_t": self.adam.t,
            "rng": json.dumps(self.rng.bit_generator.state),
            "step": self.step,
        }

    def load_state_dict(self, state: dict) -> None:
        self.model.params[...] = state["params"]
        self.target.params[...] = state["target_params"]
        self.adam.m[...] = state["adam_m"]
        self.adam.v[...] = state["adam_v"]
        self.adam.t = int(state["adam_t"])
        self.rng.bit_generator.state = json.loads(str(state["rng"]))
        self.step = int(state["step"])


def train_embedding(dataset: Dataset, config: EmbedTrainConfig) -> tuple[EmbeddingModel, list]:
    trainer = EmbeddingTrainer(dataset, config)
    trainer.run(config.train_steps)
    return trainer.model, trainer.losses


def rank_quality(model: EmbeddingModel, spec: MazeSpec, n_pairs: int, rng) -> float:
    """Spearman correlation between latent distance and BFS distance on random reachable pairs."""
    dist = spec.distance_matrix
    n = spec.n_free
    reach = (dist != UNREACHABLE) & ~np.eye(n, dtype=bool)
    pairs = np.argwhere(reach)
    if len(pairs) == 0:
        raise ValueError("no reachable pair of distinct free cells")
    pick = pairs[rng.integers(len(pairs), size=n_pairs)]
    oracle = dist[pick[:, 0], pick[:, 1]]
    if len(np.unique(oracle)) < 2:
        raise ValueError("oracle distances are constant; correlation undefined")
    centers = spec.centers(spec.free_cells)
    lat = np.linalg.norm(model.phi(centers[pick[:, 0]]) - model.phi(centers[pick[:, 1]]), axis=1)
    return float(spearmanr(lat, oracle).statistic)


# -- checkpoints ---------------------------------------------------------------


def save_embedding(model: EmbeddingModel, path, config: EmbedTrainConfig | None = None) -> None:
    nn.save_params(path, model.mlp, model.params)
    side = {
        "latent_dim": model.latent_dim,
        "normalizer": model.normalizer.to_json(),
        "gamma": config.gamma if config else None,
        "xi": config.expectile if config else None,
        "config": _jsonable(asdict(config)) if config else None,
    }
    with open(f"{path}.json", "w") as fh:
        json.dump(side, fh, sort_keys=True, indent=1)


def load_embedding(path) -> EmbeddingModel:
    spec, params = nn.load_params(path)
    with open(f"{path}.json") as fh:
        side = json.load(fh)
    return EmbeddingModel(spec, params, Normalizer.from_json(side["normalizer"]))


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
