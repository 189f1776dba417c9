import numpy as np
import pytest

from trajstitch import augment, maze, pipeline
from trajstitch.augment import (
    InverseDynamicsConfig,
    StitchConfig,
    combined_score,
    infer_actions,
    novelty_score,
    progress_score,
    sample_direction,
    select_best,
)
from trajstitch.diffusion import make_diffusion
from trajstitch.embedding import make_embedding
from trajstitch.maze import STAY, Normalizer


def test_direction_is_unit():
    rng = np.random.default_rng(0)
    for d in (1, 2, 32):
        for _ in range(200):
            assert abs(np.linalg.norm(sample_direction(rng, d)) - 1) < 1e-12
    assert {float(sample_direction(rng, 1)[0]) for _ in range(100)} == {-1.0, 1.0}
    with pytest.raises(ValueError):
        sample_direction(rng, 0)


def test_direction_mean_is_zero():
    rng = np.random.default_rng(1)
    z = np.stack([sample_direction(rng, 4) for _ in range(20_000)])
    # each coordinate has variance 1/d
    assert np.all(np.abs(z.mean(0)) < 3 * np.sqrt(0.25 / len(z)))


def test_progress_hand_values():
    z = np.array([1.0, 0, 0, 0])
    assert progress_score(np.zeros(4), np.array([3.0, 4, 0, 0]), z) == 3.0
    assert progress_score(np.ones(4), np.ones(4), z) == 0.0
    d = np.array([0.6, 0.8, 0, 0])
    assert progress_score(d, np.zeros(4), d) == pytest.approx(-1.0)
    stacked = progress_score(np.zeros((2, 4)), np.array([[1.0, 0, 0, 0], [2.0, 5, 0, 0]]), z)
    assert stacked.tolist() == [1.0, 2.0]


def test_novelty_hand_values():
    assert novelty_score([1.0], [[0.0], [10.0]], 2) == 5.0
    assert novelty_score([2.0, 2.0], [[2.0, 2.0]] * 3 + [[9.0, 9.0]], 3) == 0.0
    assert novelty_score([0.0], np.zeros((0, 1)), 30) == 0.0
    # young rollout: k_density clamps to |V|
    assert novelty_score([0.0], [[3.0]], 30) == 3.0


def test_novelty_matches_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(300):
        n, d, k = rng.integers(1, 60), rng.integers(1, 6), rng.integers(1, 40)
        V, c = rng.normal(size=(n, d)), rng.normal(size=d)
        dists = sorted(float(np.sqrt(((v - c) ** 2).sum())) for v in V)
        kk = min(k, n)
        assert novelty_score(c, V, k) == pytest.approx(sum(dists[:kk]) / kk, rel=1e-12)


def test_combined_score():
    assert combined_score(3.0, 0.5, 2.0) == 4.0
    P, N = np.array([1.0, -2.0, 0.5]), np.array([0.1, 3.0, 0.2])
    assert np.array_equal(combined_score(P, N, 0.0), P)
    ids = np.array([4, 9, 2])
    assert select_best(ids, combined_score(P + 7.0, N, 2.0)) == select_best(ids, combined_score(P, N, 2.0))


def test_select_best():
    assert select_best([5], [0.3]) == 5
    assert select_best([7, 3, 5], [1.0, 4.0, 4.0]) == 3
    assert select_best([1, 2], [-np.inf, -1.0]) == 2
    rng = np.random.default_rng(3)
    for _ in range(200):
        ids = rng.permutation(50)[:10]
        s = rng.integers(0, 4, size=10).astype(float)
        best = max(zip(s, -ids))
        assert select_best(ids, s) == -best[1]
    with pytest.raises(ValueError):
        select_best([], [])


def test_config_validation():
    with pytest.raises(ValueError):
        StitchConfig(k=0)
    with pytest.raises(ValueError):
        StitchConfig(beta=-1.0)


@pytest.fixture(scope="module")
def f_psi():
    ds = maze.generate_stitch_dataset(maze.builtin_maze("maze8"), 40, ep_len=100, seed=0)
    return augment.train_inverse_dynamics(ds, InverseDynamicsConfig(hidden=(64, 64), steps=1500)), ds


def test_inverse_dynamics_replays_env_transitions(f_psi):
    model, _ = f_psi
    spec = maze.builtin_maze("maze8")
    held = maze.generate_explore_dataset(spec, 10, ep_len=100, seed=9)
    s, s2, _ = augment.transition_pairs(held, stay_pairs=False)
    assert augment.replay_accuracy(spec, model, s, s2) >= 0.99


def test_inverse_dynamics_identical_pair_is_stay(f_psi):
    model, ds = f_psi
    s = ds.trajectories[0].states[3]
    assert infer_actions(model, np.stack([s, s])).tolist() == [STAY, STAY]
    assert infer_actions(model, s[None]).tolist() == [STAY]


def test_infer_actions_recovers_recorded_moves(f_psi):
    model, ds = f_psi
    t = ds.trajectories[1]
    acts = infer_actions(model, t.states)
    assert len(acts) == len(t.states) and acts[-1] == STAY
    moved = np.any(t.states[1:] != t.states[:-1], axis=1)
    assert np.mean(acts[:-1][moved] == t.actions[:-1][moved]) >= 0.99


def test_stay_labels_canonicalised():
    spec = maze.open_maze(3)
    c = spec.center((1, 1))
    traj = maze.Trajectory(np.stack([c, c, spec.center((2, 1))]), np.array([0, 6, STAY]))
    _, _, a = augment.transition_pairs(maze.Dataset(spec, [traj]), stay_pairs=False)
    assert a.tolist() == [STAY, 6]


def test_inverse_dynamics_file_roundtrip(f_psi, tmp_path):
    model, ds = f_psi
    p = tmp_path / "f.nn"
    augment.save_inverse_dynamics(model, p)
    back = augment.load_inverse_dynamics(p)
    t = ds.trajectories[2].states
    assert np.array_equal(infer_actions(back, t), infer_actions(model, t))


@pytest.fixture(scope="module")
def toy_models(f_psi):
    f, ds = f_psi
    norm = Normalizer.fit(ds.all_states())
    phi = make_embedding(norm, hidden=(16,), latent_dim=4, seed=0)
    stitcher = make_diffusion(6, norm, hidden=(16,), M=20, seed=0)
    stitcher.trained = True
    stitcher.clip_x0 = 1.5
    models = pipeline.build_stitch_models(ds, phi, stitcher, f, h_seg=6, stride=3, n_list=5, n_probe=2)
    return ds, models


def test_rollout_length_and_latent_growth(toy_models):
    ds, models = toy_models
    cfg = StitchConfig(k=4, k_density=5, n_stitch=3, ddim_steps=4)
    trace = []
    t = augment.run_rollout(ds, models, cfg, augment.rollout_seed(0, 0), 0, trace)
    H = models.stitcher.horizon
    assert len(t) == 6 + 3 * (H - 1) and len(t.actions) == len(t.states)
    assert len(trace) == 3
    pos = 6
    for ev in trace:
        assert np.array_equal(ev.bridge[0], ev.junction_from)
        assert np.array_equal(ev.bridge[-1], models.table.end_state[ev.best])
        assert np.array_equal(t.states[pos - 1], ev.junction_from)
        assert np.array_equal(t.states[pos : pos + H - 1], ev.bridge[1:])
        assert np.array_equal(ev.scores, ev.progress + cfg.beta * ev.novelty)
        assert ev.best == select_best(ev.candidates, ev.scores)
        pos += H - 1


def test_novelty_defined_from_first_stitch(toy_models):
    ds, models = toy_models
    trace = []
    augment.run_rollout(ds, models, StitchConfig(k=4, n_stitch=1, ddim_steps=2), augment.rollout_seed(1, 0), 0, trace)
    # the initial segment is already visited, so novelty is defined from the start
    assert np.all(trace[0].novelty >= 0)


def test_zero_stitches_returns_initial_segment(toy_models):
    ds, models = toy_models
    t = augment.run_rollout(ds, models, StitchConfig(n_stitch=0), augment.rollout_seed(0, 0))
    assert len(t) == 6
    starts = models.table.start_state
    assert any(np.array_equal(t.states[0], s) for s in starts)


def test_augment_is_deterministic(toy_models):
    ds, models = toy_models
    cfg = StitchConfig(k=3, n_stitch=2, n_traj=4, ddim_steps=3, seed=5)
    a = augment.augment_dataset(ds, models, cfg)
    b = augment.augment_dataset(ds, models, cfg)
    assert [x.episode_id for x in a.trajectories] == [0, 1, 2, 3]
    for x, y in zip(a.trajectories, b.trajectories):
        assert np.array_equal(x.states, y.states) and np.array_equal(x.actions, y.actions)
    H = models.stitcher.horizon
    assert sum(len(x) - 1 for x in a.trajectories) == 4 * (6 - 1 + 2 * (H - 1))
    assert a.meta["params"]["beta"] == cfg.beta and set(a.meta["model_hashes"]) == {"phi", "stitcher", "inverse_dynamics"}


def test_augment_parallel_map_matches_serial(toy_models):
    from concurrent.futures import ThreadPoolExecutor

    ds, models = toy_models
    cfg = StitchConfig(k=3, n_stitch=2, n_traj=3, ddim_steps=3, seed=2)
    a = augment.augment_dataset(ds, models, cfg)
    with ThreadPoolExecutor(2) as ex:
        b = augment.augment_dataset(ds, models, cfg, map_fn=ex.map)
    for x, y in zip(a.trajectories, b.trajectories):
        assert np.array_equal(x.states, y.states)


def test_refine_bridge_same_endpoints(toy_models):
    _, models = toy_models
    s = models.table.start_state[0]
    br = augment.refine_bridge(models.stitcher, s, s, np.random.default_rng(0), 4)
    assert br.shape == (6, 2) and np.array_equal(br[0], s) and np.array_equal(br[-1], s)
