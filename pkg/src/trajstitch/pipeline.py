"""Stage-level helpers that wire the modules together (used by the CLI and the end-to-end tests)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .augment import StitchModels
from .diffusion import DiffusionModel, DiffusionTrainer, make_diffusion, windows_from_trajectories
from .maze import Dataset, Normalizer
from .segments import build_ivf, extract_segments


@dataclass
class DiffusionTrainConfig:
    steps: int = 20_000
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 1e-5
    hidden: tuple = (256, 256, 256)
    M: int = 1000
    schedule: str = "cosine"
    stride: int = 1
    seed: int = 0
    endpoint_inputs: bool = True  # feed the clean first/last states to the network


def diffusion_trainer(trajectories, normalizer: Normalizer, horizon: int, jump: int, config: DiffusionTrainConfig):
    """A fresh trainer over every ``horizon``-state window (``jump`` steps apart) in ``trajectories``."""
    w = windows_from_trajectories(trajectories, horizon, config.stride, jump)
    if len(w) == 0:
        raise ValueError(f"no trajectory is long enough for a {horizon}x{jump} window")
    cond_index = (0, horizon - 1) if config.endpoint_inputs else ()
    model = make_diffusion(
        horizon, normalizer, hidden=config.hidden, M=config.M, kind=config.schedule, seed=config.seed,
        cond_index=cond_index,
    )
    return DiffusionTrainer(
        model,
        normalizer.normalize(w),
        batch_size=config.batch_size,
        lr=config.lr,
        weight_decay=config.weight_decay,
        seed=config.seed,
    )


def train_stitcher(dataset: Dataset, horizon: int = 26, config: DiffusionTrainConfig | None = None) -> DiffusionModel:
    config = config or DiffusionTrainConfig()
    tr = diffusion_trainer(dataset.trajectories, Normalizer.fit(dataset.all_states()), horizon, 1, config)
    tr.run(config.steps)
    return tr.sampling_model()


def train_high_level(
    trajectories, normalizer: Normalizer, n_waypoints: int, jump: int, config: DiffusionTrainConfig | None = None
) -> DiffusionModel:
    """Waypoint model over ``n_waypoints`` states spaced ``jump`` steps apart."""
    config = config or DiffusionTrainConfig()
    tr = diffusion_trainer(trajectories, normalizer, n_waypoints, jump, config)
    tr.run(config.steps)
    return tr.sampling_model()


def default_n_list(count: int) -> int:
    return max(1, min(count, int(round(np.sqrt(count)))))


def build_stitch_models(dataset: Dataset, phi, stitcher, f_psi, h_seg: int = 26, stride: int = 13,
                        n_list: int | None = None, n_probe: int = 8, seed: int = 0) -> StitchModels:
    table = extract_segments(dataset, phi, h_seg, stride)
    if len(table) == 0:
        raise ValueError("no segments could be extracted")
    n_list = default_n_list(len(table)) if n_list is None else n_list
    index = build_ivf(table.phi_start, n_list, seed, n_probe)
    return StitchModels(phi, stitcher, f_psi, table, index)
