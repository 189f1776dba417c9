"""Denoising diffusion over fixed-horizon state sequences.

The noise model is a plain MLP over the flattened (H, state_dim) window plus
a sinusoidal step embedding. Conditioning is replacement inpainting: clamped
rows are overwritten after every reverse step, and set exactly at the end.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .maze import Normalizer


class UntrainedModelError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    betas: np.ndarray  # index i-1 holds beta_i
    kind: str = "custom"

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or len(b) < 1:
            raise ValueError("need at least one diffusion step")
        if not np.all((b > 0) & (b < 1)):
            raise ValueError("betas must lie in (0, 1)")
        object.__setattr__(self, "betas", b)
        ab = np.concatenate([[1.0], np.cumprod(1.0 - b)])
        object.__setattr__(self, "alphas_bar", ab)
        post = np.empty(len(b) + 1)
        post[0] = 0.0
        post[1:] = b * (1.0 - ab[:-1]) / (1.0 - ab[1:])
        object.__setattr__(self, "posterior_var", post)

    @property
    def M(self) -> int:
        return len(self.betas)

    def beta(self, i: int) -> float:
        return float(self.betas[i - 1])


def make_schedule(M: int, kind: str = "cosine") -> DiffusionSchedule:
    if not isinstance(M, (int, np.integer)) or M < 1:
        raise ValueError("M must be a positive integer")
    if kind == "linear":
        scale = 1000.0 / M
        betas = np.linspace(scale * 1e-4, min(scale * 0.02, 0.999), M)
    elif kind == "cosine":
        s = 0.008
        t = np.arange(M + 1) / M
        f = np.cos((t + s) / (1 + s) * math.pi / 2) ** 2
        ab = f / f[0]
        betas = np.clip(1.0 - ab[1:] / ab[:-1], 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return DiffusionSchedule(betas, kind)


def q_sample(schedule: DiffusionSchedule, tau0, i, eps):
    """Closed-form forward noising sqrt(ab_i) * tau0 + sqrt(1 - ab_i) * eps.

    ``i`` may be an integer or a per-sample integer array (broadcast over the
    trailing dimensions); ``i = 0`` returns ``tau0``.
    """
    tau0 = np.asarray(tau0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if tau0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} != data shape {tau0.shape}")
    i = np.asarray(i)
    if np.any(i < 0) or np.any(i > schedule.M):
        raise ValueError("diffusion step out of range")
    ab = schedule.alphas_bar[i]
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (tau0.ndim - ab.ndim))
    return np.sqrt(ab) * tau0 + np.sqrt(1.0 - ab) * eps


def q_step(schedule: DiffusionSchedule, tau_prev, i, eps):
    """Single forward transition q(tau_i | tau_{i-1})."""
    b = schedule.beta(i)
    return math.sqrt(1.0 - b) * np.asarray(tau_prev) + math.sqrt(b) * np.asarray(eps)


def timestep_embedding(i, dim: int) -> np.ndarray:
    i = np.atleast_1d(np.asarray(i, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = i[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


@dataclass
class DiffusionModel:
    """epsilon-prediction network plus everything needed to sample from it."""

    mlp: nn.MLPSpec
    params: np.ndarray
    schedule: DiffusionSchedule
    horizon: int
    state_dim: int
    normalizer: Normalizer
    time_dim: int = 32
    trained: bool = False
    clip_x0: float | None = None
    cond_index: tuple = ()

    def eps(self, x: np.ndarray, i, c=None) -> np.ndarray:
        """Predicted noise for normalized windows ``x`` of shape (B, H, D).

        ``c`` holds the clean normalized states at ``cond_index`` when the network
        was built to see them.
        """
        return nn.forward(self.mlp, self.params, self._net_input(x, i, c)).reshape(x.shape)

    def _net_input(self, x, i, c=None):
        B = x.shape[0]
        i = np.broadcast_to(np.asarray(i), (B,))
        temb = timestep_embedding(i / self.schedule.M * 1000.0, self.time_dim)
        parts = [x.reshape(B, -1), temb]
        if self.cond_index:
            if c is None:
                raise ValueError(f"this model needs clamps at indices {list(self.cond_index)}")
            parts.append(np.broadcast_to(np.asarray(c, dtype=np.float64), (B, len(self.cond_index), self.state_dim)).reshape(B, -1))
        return np.concatenate(parts, axis=1)

    def clean_cond(self, tau0: np.ndarray):
        return tau0[:, list(self.cond_index), :] if self.cond_index else None


def make_diffusion(
    horizon: int,
    normalizer: Normalizer,
    state_dim: int = 2,
    hidden=(256, 256, 256),
    M: int = 1000,
    kind: str = "cosine",
    time_dim: int = 32,
    activation: str = "gelu",
    seed: int = 0,
    cond_index=(),
) -> DiffusionModel:
    """``cond_index`` lists window rows whose clean values are also network inputs."""
    flat = horizon * state_dim
    cond_index = tuple(int(t) % horizon for t in cond_index)
    spec = nn.MLPSpec((flat + time_dim + len(cond_index) * state_dim, *hidden, flat), activation)
    return DiffusionModel(
        spec, nn.init_params(spec, seed), make_schedule(M, kind), horizon, state_dim, normalizer, time_dim,
        cond_index=cond_index,
    )


# -- training -----------------------------------------------------------------


def loss_and_grads(model: DiffusionModel, tau0: np.ndarray, i: np.ndarray, eps: np.ndarray):
    """Mean over the batch of ||eps - eps_theta(tau_i, i)||^2 and its parameter gradient."""
    B = tau0.shape[0]
    xi = q_sample(model.schedule, tau0, i, eps)
    out, cache = nn.forward_cache(model.mlp, model.params, model._net_input(xi, i, model.clean_cond(tau0)))
    err = out - eps.reshape(B, -1)
    loss = float(np.sum(err * err) / B)
    grads, _ = nn.backward_cache(model.mlp, model.params, cache, 2.0 * err / B)
    return loss, grads


def train_loss(model: DiffusionModel, schedule: DiffusionSchedule, batch, rng) -> float:
    """Monte Carlo estimate of the noise-prediction loss on normalized windows."""
    tau0 = np.asarray(batch, dtype=np.float64)
    if tau0.shape[1:] != (model.horizon, model.state_dim):
        raise ValueError(f"windows must be (B, {model.horizon}, {model.state_dim})")
    i = rng.integers(1, schedule.M + 1, size=len(tau0))
    eps = rng.standard_normal(tau0.shape)
    xi = q_sample(schedule, tau0, i, eps)
    pred = model.eps(xi, i, model.clean_cond(tau0))
    return float(np.mean(np.sum((eps - pred) ** 2, axis=(1, 2))))


@dataclass
class DiffusionTrainer:
    model: DiffusionModel
    windows: np.ndarray  # normalized, (N, H, D)
    batch_size: int = 128
    lr: float = 2e-4
    weight_decay: float = 1e-5
    seed: int = 0
    ema_decay: float = 0.995
    adam: nn.AdamState = None
    rng: np.random.Generator = None
    step: int = 0
    losses: list = field(default_factory=list)
    ema: np.ndarray = None  # running average of the parameters, before bias correction

    def __post_init__(self):
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.ema is None:
            self.ema = np.zeros_like(self.model.params)
        if self.model.clip_x0 is None and len(self.windows):
            # Predicted clean windows get clipped to the training range while sampling;
            # without it the first DDIM step divides by sqrt(alpha_bar_M) ~ 5e-5.
            self.model.clip_x0 = float(np.abs(self.windows).max())
        if self.adam is None:
            self.adam = nn.AdamState(self.lr, self.model.mlp.n_params, weight_decay=self.weight_decay)
        if self.rng is None:
            self.rng = np.random.default_rng([self.seed, 2])

    def run(self, n_steps: int, callback=None) -> list:
        M = self.model.schedule.M
        for _ in range(n_steps):
            idx = self.rng.integers(len(self.windows), size=self.batch_size)
            tau0 = self.windows[idx]
            i = self.rng.integers(1, M + 1, size=self.batch_size)
            eps = self.rng.standard_normal(tau0.shape)
            loss, grads = loss_and_grads(self.model, tau0, i, eps)
            nn.adam_step(self.adam, self.model.params, grads)
            self.ema *= self.ema_decay
            self.ema += (1.0 - self.ema_decay) * self.model.params
            self.step += 1
            self.losses.append(loss)
            if callback is not None:
                callback(self.step, loss)
        self.model.trained = True
        return self.losses

    def ema_params(self) -> np.ndarray:
        """Bias-corrected average of the iterates; the initial parameters before any step."""
        if self.step == 0:
            return self.model.params.copy()
        return self.ema / (1.0 - self.ema_decay**self.step)

    def sampling_model(self) -> DiffusionModel:
        """A copy of the model carrying the averaged parameters, which sample with less noise."""
        return replace(self.model, params=self.ema_params(), trained=self.step > 0)

    def state_dict(self) -> dict:
        return {
            "params": self.model.params.copy(),
            "adam_m": self.adam.m.copy(),
            "adam_v": self.adam.v.copy(),
            "adam_t": self.adam.t,
            "rng": json.dumps(self.rng.bit_generator.state),
            "step": self.step,
            "ema": self.ema.copy(),
        }

    def load_state_dict(self, state: dict) -> None:
        self.model.params[...] = state["params"]
        self.ema[...] = state["ema"]
        self.adam.m[...] = state["adam_m"]
        self.adam.v[...] = state["adam_v"]
        self.adam.t = int(state["adam_t"])
        self.rng.bit_generator.state = json.loads(str(state["rng"]))
        self.step = int(state["step"])
        self.model.trained = self.step > 0


# -- sampling -----------------------------------------------------------------


def _net_cond(model: DiffusionModel, idx, norm_vals):
    if not model.cond_index:
        return None
    missing = [t for t in model.cond_index if t not in idx]
    if missing:
        raise ValueError(f"this model needs clamps at indices {missing}")
    return norm_vals[[idx.index(t) for t in model.cond_index]]


def _prep_cond(model: DiffusionModel, cond):
    if not cond:
        _net_cond(model, [], None)
        return [], None, None
    items = sorted((int(t), np.asarray(v, dtype=np.float64)) for t, v in dict(cond).items())
    idx = [t for t, _ in items]
    if len(set(idx)) != len(idx) or min(idx) < 0 or max(idx) >= model.horizon:
        raise ValueError("clamp indices must be distinct and within the horizon")
    world = np.stack([v.reshape(-1) for _, v in items])
    if world.shape[1] != model.state_dim:
        raise ValueError("clamp value has the wrong state dimension")
    return idx, world, model.normalizer.normalize(world)


def _clamp(model, x, idx, norm_vals, i, rng):
    if not idx:
        return
    if i == 0:
        x[:, idx, :] = norm_vals
    else:
        eps = rng.standard_normal((x.shape[0], len(idx), model.state_dim))
        x[:, idx, :] = q_sample(model.schedule, np.broadcast_to(norm_vals, eps.shape), i, eps)


def _finish(model, x, idx, world_vals, squeeze):
    out = model.normalizer.denormalize(x)
    if idx:
        out[:, idx, :] = world_vals  # exact clamps in world units
    return out[0] if squeeze else out


def _x0_hat(model, x, i, eps_hat):
    ab = model.schedule.alphas_bar[i]
    x0 = (x - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)
    if model.clip_x0 is not None:
        x0 = np.clip(x0, -model.clip_x0, model.clip_x0)
    return x0


def ddpm_sample(model: DiffusionModel, rng, cond=None, n: int | None = None, require_trained: bool = True):
    """Ancestral sampling. Returns (H, D) world-unit states, or (n, H, D) if ``n`` is given."""
    if require_trained and not model.trained:
        raise UntrainedModelError("diffusion model has not been trained")
    sch = model.schedule
    B = 1 if n is None else n
    idx, world, normv = _prep_cond(model, cond)
    c = _net_cond(model, idx, normv)
    x = rng.standard_normal((B, model.horizon, model.state_dim))
    _clamp(model, x, idx, normv, sch.M, rng)
    for i in range(sch.M, 0, -1):
        eps_hat = model.eps(x, i, c)
        b = sch.beta(i)
        ab = sch.alphas_bar[i]
        if model.clip_x0 is None:
            mean = (x - b / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(1.0 - b)
        else:
            x0 = _x0_hat(model, x, i, eps_hat)
            ab_prev = sch.alphas_bar[i - 1]
            mean = (math.sqrt(ab_prev) * b / (1 - ab)) * x0 + (math.sqrt(1 - b) * (1 - ab_prev) / (1 - ab)) * x
        if i > 1:
            x = mean + math.sqrt(sch.posterior_var[i]) * rng.standard_normal(x.shape)
        else:
            x = mean
        _clamp(model, x, idx, normv, i - 1, rng)
    return _finish(model, x, idx, world, n is None)


def ddim_timesteps(M: int, n_steps: int) -> np.ndarray:
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if n_steps > M:
        raise ValueError("n_steps cannot exceed the number of diffusion steps")
    ts = np.floor(np.arange(1, n_steps + 1) * M / n_steps).astype(np.int64)
    return ts


def ddim_sample(
    model: DiffusionModel,
    rng,
    n_steps: int = 20,
    cond=None,
    n: int | None = None,
    require_trained: bool = True,
):
    """Deterministic (eta = 0) DDIM over an evenly strided subsequence of steps."""
    if require_trained and not model.trained:
        raise UntrainedModelError("diffusion model has not been trained")
    sch = model.schedule
    ts = ddim_timesteps(sch.M, n_steps)
    B = 1 if n is None else n
    idx, world, normv = _prep_cond(model, cond)
    c = _net_cond(model, idx, normv)
    x = rng.standard_normal((B, model.horizon, model.state_dim))
    _clamp(model, x, idx, normv, sch.M, rng)
    for k in range(len(ts) - 1, -1, -1):
        i = int(ts[k])
        prev = int(ts[k - 1]) if k > 0 else 0
        eps_hat = model.eps(x, i, c)
        x0 = _x0_hat(model, x, i, eps_hat)
        ab_prev = sch.alphas_bar[prev]
        if model.clip_x0 is not None:
            ab = sch.alphas_bar[i]
            eps_hat = (x - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)
        x = math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps_hat
        _clamp(model, x, idx, normv, prev, rng)
    return _finish(model, x, idx, world, n is None)


# -- checkpoints -----------------------------------------------------------------


def save_diffusion(model: DiffusionModel, path, extra: dict | None = None) -> None:
    nn.save_params(path, model.mlp, model.params)
    side = {
        "schedule_kind": model.schedule.kind,
        "M": model.schedule.M,
        "H": model.horizon,
        "state_dim": model.state_dim,
        "time_dim": model.time_dim,
        "normalizer": model.normalizer.to_json(),
        "trained": model.trained,
        "clip_x0": model.clip_x0,
        "cond_index": list(model.cond_index),
    }
    if extra:
        side.update(extra)
    with open(f"{path}.json", "w") as fh:
        json.dump(side, fh, sort_keys=True, indent=1)


def load_diffusion(path) -> DiffusionModel:
    spec, params = nn.load_params(path)
    with open(f"{path}.json") as fh:
        side = json.load(fh)
    return DiffusionModel(
        spec,
        params,
        make_schedule(int(side["M"]), side["schedule_kind"]),
        int(side["H"]),
        int(side["state_dim"]),
        Normalizer.from_json(side["normalizer"]),
        int(side["time_dim"]),
        bool(side["trained"]),
        side.get("clip_x0"),
        tuple(side.get("cond_index", ())),
    )


def windows_from_trajectories(trajectories, horizon: int, stride: int = 1, jump: int = 1) -> np.ndarray:
    """All length-``horizon`` windows (states every ``jump`` steps) at the given stride."""
    span = (horizon - 1) * jump + 1
    out = []
    for t in trajectories:
        s = np.asarray(t.states if hasattr(t, "states") else t)
        for start in range(0, len(s) - span + 1, stride):
            out.append(s[start : start + span : jump])
    if not out:
        return np.zeros((0, horizon, 2))
    return np.stack(out)
