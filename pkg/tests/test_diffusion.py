import math

import numpy as np
import pytest

from trajstitch import diffusion
from trajstitch.diffusion import (
    DiffusionSchedule,
    DiffusionTrainer,
    UntrainedModelError,
    ddim_sample,
    ddim_timesteps,
    ddpm_sample,
    make_diffusion,
    make_schedule,
    q_sample,
    q_step,
)
from trajstitch.maze import Normalizer

UNIT = Normalizer((0.0, 0.0), (1.0, 1.0))


def test_schedule_hand_values():
    s = DiffusionSchedule(np.array([0.1, 0.2]))
    assert s.alphas_bar[0] == 1.0
    assert s.alphas_bar[2] == pytest.approx(0.72)
    assert s.posterior_var[2] == pytest.approx(0.2 * (1 - 0.9) / (1 - 0.72))


@pytest.mark.parametrize("kind", ["cosine", "linear"])
def test_schedule_monotone(kind):
    s = make_schedule(1000, kind)
    assert np.all(np.diff(s.alphas_bar) < 0)
    assert np.all((s.betas > 0) & (s.betas < 1))


def test_schedule_errors():
    with pytest.raises(ValueError):
        make_schedule(0)
    with pytest.raises(ValueError):
        make_schedule(10, "quadratic")
    with pytest.raises(ValueError):
        DiffusionSchedule(np.array([0.5, 1.0]))


def test_q_sample_hand_value():
    s = DiffusionSchedule(np.array([0.75]))  # alpha_bar_1 = 0.25
    out = q_sample(s, np.array([1.0]), 1, np.array([2.0]))
    assert out[0] == pytest.approx(0.5 + math.sqrt(0.75) * 2.0)


def test_q_sample_step_zero_is_identity():
    s = make_schedule(10)
    x = np.random.default_rng(0).normal(size=(3, 4, 2))
    assert np.array_equal(q_sample(s, x, 0, np.zeros_like(x)), x)
    with pytest.raises(ValueError):
        q_sample(s, x, 0, np.zeros((3, 4)))


def marginal_z_scores(schedule, steps, seed, n=10_000):
    """z-scores of the empirical mean and variance of iterated single-step noising
    against the closed-form marginal, per coordinate and per step."""
    rng = np.random.default_rng(seed)
    tau0 = np.array([1.5, -0.5])
    out = []
    for i in steps:
        x = np.broadcast_to(tau0, (n, 2)).copy()
        for j in range(1, i + 1):
            x = q_step(schedule, x, j, rng.standard_normal(x.shape))
        ab = schedule.alphas_bar[i]
        var = 1 - ab
        out += list((x.mean(0) - math.sqrt(ab) * tau0) / math.sqrt(var / n))
        out += list((x.var(0, ddof=1) - var) / (var * math.sqrt(2 / (n - 1))))
    return np.array(out)


def test_iterated_noising_is_calibrated():
    # Across repeated runs the z-scores must look standard normal; a biased
    # marginal would shift the mean, a wrong variance would inflate the spread.
    s = make_schedule(50, "cosine")
    z = np.concatenate([marginal_z_scores(s, (1, 9, 25, 50), seed, n=4000) for seed in range(12)])
    assert abs(z.mean()) < 4 / math.sqrt(len(z))
    assert 0.8 < z.std() < 1.2
    assert np.mean(np.abs(z) > 3) < 0.02


def zero_model(horizon=3, M=20):
    m = make_diffusion(horizon, UNIT, hidden=(4,), M=M)
    m.params[:] = 0.0
    m.trained = True
    return m


def test_zero_model_loss_is_dimension():
    m = zero_model(horizon=5)
    rng = np.random.default_rng(1)
    batch = rng.normal(size=(4000, 5, 2))
    loss = diffusion.train_loss(m, m.schedule, batch, rng)
    # E||eps||^2 = H * D = 10, sd of the mean ~ sqrt(2 * 10 / 4000)
    assert abs(loss - 10.0) < 4 * math.sqrt(20 / 4000)


def test_loss_matches_composition():
    m = make_diffusion(4, UNIT, hidden=(8, 8), M=50, seed=3)
    rng = np.random.default_rng(2)
    tau0 = rng.normal(size=(3, 4, 2))
    i = np.array([1, 25, 50])
    eps = rng.normal(size=tau0.shape)
    loss, _ = diffusion.loss_and_grads(m, tau0, i, eps)
    manual = 0.0
    for b in range(3):
        xi = q_sample(m.schedule, tau0[b], i[b], eps[b])
        pred = m.eps(xi[None], i[b])[0]
        manual += np.sum((eps[b] - pred) ** 2)
    assert loss == pytest.approx(manual / 3, rel=1e-12)


def test_loss_gradient_finite_differences():
    m = make_diffusion(2, UNIT, hidden=(6,), M=10, seed=1)
    rng = np.random.default_rng(3)
    tau0, eps = rng.normal(size=(2, 2, 2)), rng.normal(size=(2, 2, 2))
    i = np.array([3, 9])
    _, g = diffusion.loss_and_grads(m, tau0, i, eps)
    h = 1e-6
    for k in rng.choice(m.params.size, 20, replace=False):
        old = m.params[k]
        m.params[k] = old + h
        fp, _ = diffusion.loss_and_grads(m, tau0, i, eps)
        m.params[k] = old - h
        fm, _ = diffusion.loss_and_grads(m, tau0, i, eps)
        m.params[k] = old
        assert g[k] == pytest.approx((fp - fm) / (2 * h), rel=1e-4, abs=1e-7)


def test_memorization_lowers_loss():
    m = make_diffusion(4, UNIT, hidden=(32, 32), M=50, seed=0)
    window = np.linspace(-1, 1, 8).reshape(1, 4, 2)
    tr = DiffusionTrainer(m, window, batch_size=32, lr=1e-3)
    tr.run(600)
    first, last = np.mean(tr.losses[:50]), np.mean(tr.losses[-50:])
    assert last < 0.5 * first


def test_untrained_model_refuses_to_sample():
    m = make_diffusion(3, UNIT, hidden=(4,), M=5)
    with pytest.raises(UntrainedModelError):
        ddpm_sample(m, np.random.default_rng(0))
    with pytest.raises(UntrainedModelError):
        ddim_sample(m, np.random.default_rng(0), 2)


def test_clamps_are_bit_exact():
    m = make_diffusion(6, Normalizer((3.0, 2.0), (4.0, 2.0)), hidden=(16,), M=30, seed=4)
    m.trained = True
    a, b = np.array([1.1, 7.3]), np.array([-0.7, 0.123456789])
    cond = {0: a, 5: b}
    for sampler in (lambda r: ddpm_sample(m, r, cond, n=20), lambda r: ddim_sample(m, r, 7, cond, n=20)):
        out = sampler(np.random.default_rng(5))
        assert out.shape == (20, 6, 2)
        assert np.all(out[:, 0] == a) and np.all(out[:, 5] == b)


def test_clamps_exact_with_full_ddim():
    m = zero_model(horizon=4, M=12)
    a = np.array([0.3, 0.1])
    out = ddim_sample(m, np.random.default_rng(0), 12, {3: a})
    assert np.array_equal(out[3], a)


def test_bad_clamps():
    m = zero_model()
    with pytest.raises(ValueError):
        ddim_sample(m, np.random.default_rng(0), 2, {3: [0.0, 0.0]})
    with pytest.raises(ValueError):
        ddim_sample(m, np.random.default_rng(0), 2, {0: [0.0, 0.0, 0.0]})


def test_ddpm_one_step_hand_formula():
    beta = 0.3
    m = make_diffusion(2, UNIT, hidden=(4,), M=1)
    m.schedule = DiffusionSchedule(np.array([beta]))
    m.params[:] = 0.0
    m.trained = True
    prior = np.random.default_rng(7).standard_normal((1, 2, 2))
    out = ddpm_sample(m, np.random.default_rng(7))
    assert np.allclose(out, prior[0] / math.sqrt(1 - beta), rtol=0, atol=1e-15)


def test_ddim_timesteps():
    assert ddim_timesteps(1000, 20).tolist() == list(range(50, 1001, 50))
    assert ddim_timesteps(10, 10).tolist() == list(range(1, 11))
    with pytest.raises(ValueError):
        ddim_timesteps(10, 0)
    with pytest.raises(ValueError):
        ddim_timesteps(10, 11)


def test_ddim_deterministic():
    m = make_diffusion(5, UNIT, hidden=(8,), M=40, seed=2)
    m.trained = True
    a = ddim_sample(m, np.random.default_rng(3), 10, {0: [0.5, 0.5]})
    b = ddim_sample(m, np.random.default_rng(3), 10, {0: [0.5, 0.5]})
    assert np.array_equal(a, b)


def energy_distance(x, y):
    def mean_dist(a, b):
        return np.mean(np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1))

    return 2 * mean_dist(x, y) - mean_dist(x, x) - mean_dist(y, y)


@pytest.fixture(scope="module")
def point_model():
    """Tiny model trained on a 1-state Gaussian N(mu, 0.01 I)."""
    mu = np.array([0.6, -0.4])
    rng = np.random.default_rng(0)
    data = (mu + 0.1 * rng.standard_normal((4000, 2))).reshape(4000, 1, 2)
    norm = Normalizer.fit(data.reshape(-1, 2))
    m = make_diffusion(1, norm, hidden=(64, 64), M=100, seed=1)
    tr = DiffusionTrainer(m, norm.normalize(data), batch_size=256, lr=2e-3)
    tr.run(2500)
    return tr.sampling_model(), mu


def test_ddpm_recovers_point_mean(point_model):
    m, mu = point_model
    out = ddpm_sample(m, np.random.default_rng(1), n=1000)[:, 0]
    assert np.all(np.abs(out.mean(0) - mu) < 3 * 0.1 / math.sqrt(1000))


class GaussianOracle(diffusion.DiffusionModel):
    """Bayes-optimal noise prediction for data N(m, s^2 I) in normalized units."""

    m, s = 0.0, 1.0

    def eps(self, x, i, c=None):
        ab = self.schedule.alphas_bar[i]
        return math.sqrt(1 - ab) * (x - math.sqrt(ab) * self.m) / (ab * self.s**2 + 1 - ab)


def test_ddpm_with_exact_noise_model_is_unbiased():
    base = make_diffusion(1, UNIT, hidden=(2,), M=100)
    o = GaussianOracle(base.mlp, base.params, base.schedule, 1, 2, UNIT, trained=True)
    o.m, o.s = np.array([0.6, -0.4]), 0.1
    z = []
    for seed in range(8):
        out = ddpm_sample(o, np.random.default_rng(seed), n=1000)[:, 0]
        z.append((out.mean(0) - o.m) / (0.1 / math.sqrt(1000)))
    z = np.array(z)
    assert np.all(np.abs(z.mean(0)) < 3 / math.sqrt(len(z)))
    assert np.all(np.abs(z) < 4)


def test_ema_is_bias_corrected_average():
    m = make_diffusion(2, UNIT, hidden=(4,), M=10, seed=0)
    data = np.random.default_rng(0).normal(size=(20, 2, 2))
    tr = DiffusionTrainer(m, data, batch_size=4, lr=1e-2, ema_decay=0.5)
    assert np.array_equal(tr.ema_params(), m.params)
    iterates = []
    tr.run(3, callback=lambda *_: iterates.append(m.params.copy()))
    w = np.array([0.25, 0.5, 1.0])  # decay^(t - s), normalized by 1 - 0.5^3
    expect = (0.5 * (w[:, None] * np.array(iterates)).sum(0)) / (1 - 0.5**3)
    assert np.allclose(tr.ema_params(), expect, rtol=0, atol=1e-14)
    sm = tr.sampling_model()
    assert sm.trained and sm.params is not m.params and np.array_equal(sm.params, tr.ema_params())


def test_ddim_matches_ddpm_distribution(point_model):
    m, _ = point_model
    ddpm_a = ddpm_sample(m, np.random.default_rng(2), n=400)[:, 0]
    ddpm_b = ddpm_sample(m, np.random.default_rng(3), n=400)[:, 0]
    ddim = ddim_sample(m, np.random.default_rng(4), 20, n=400)[:, 0]
    null = energy_distance(ddpm_a, ddpm_b)
    assert energy_distance(ddim, ddpm_a) < max(5 * null, 0.01)


def test_checkpoint_roundtrip(tmp_path):
    m = make_diffusion(3, Normalizer((1.0, 2.0), (2.0, 4.0)), hidden=(8,), M=25, kind="linear", seed=6)
    m.trained = True
    m.clip_x0 = 1.5
    path = tmp_path / "d.nn"
    diffusion.save_diffusion(m, path)
    back = diffusion.load_diffusion(path)
    assert back.horizon == 3 and back.schedule.kind == "linear" and back.clip_x0 == 1.5
    a = ddim_sample(m, np.random.default_rng(0), 5)
    b = ddim_sample(back, np.random.default_rng(0), 5)
    assert np.array_equal(a, b)


def test_trainer_resume_bitwise():
    data = np.random.default_rng(0).normal(size=(50, 3, 2))

    def fresh():
        return DiffusionTrainer(make_diffusion(3, UNIT, hidden=(8,), M=20, seed=0), data, batch_size=8)

    full = fresh()
    full.run(30)
    part = fresh()
    part.run(10)
    state = part.state_dict()
    again = fresh()
    again.load_state_dict(state)
    again.run(20)
    assert np.array_equal(again.model.params, full.model.params)
    assert np.array_equal(again.ema_params(), full.ema_params())


def test_windows_from_trajectories():
    traj = np.arange(20, dtype=float).reshape(10, 2)
    w = diffusion.windows_from_trajectories([traj], horizon=3, stride=2, jump=2)
    # span 5 -> starts 0, 2, 4
    assert w.shape == (3, 3, 2)
    assert np.array_equal(w[1], traj[[2, 4, 6]])
    assert diffusion.windows_from_trajectories([traj], horizon=11).shape == (0, 11, 2)
