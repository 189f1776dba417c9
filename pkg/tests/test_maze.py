import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajstitch import maze
from trajstitch.maze import (
    STAY,
    UNREACHABLE,
    InvalidStateError,
    MazeSpec,
    Normalizer,
    builtin_maze,
    generate_explore_dataset,
    generate_stitch_dataset,
    is_success,
    open_maze,
    step,
    temporal_distance_oracle,
)

EAST, NE, N = 6, 7, 4


def two_rooms():
    # two 2x1 pockets separated by a full wall column
    return MazeSpec.from_text(
        """
        #######
        #..#..#
        #######
        """
    )


def test_stay_is_identity():
    spec = open_maze(5)
    c = spec.center((3, 3))
    assert np.array_equal(step(spec, c, STAY), c)


def test_move_into_wall_keeps_state():
    spec = open_maze(3)
    c = spec.center((1, 1))
    assert np.array_equal(step(spec, c, 0), c)  # south-west into the border


def test_diagonal_from_corner():
    # the open 3x3 interior occupies cells 1..3; its corner is (1, 1)
    spec = open_maze(3)
    assert np.array_equal(step(spec, spec.center((1, 1)), NE), spec.center((2, 2)))


def test_corner_cut_blocks_diagonal():
    spec = MazeSpec.from_text(
        """
        #####
        #.#.#
        #...#
        #####
        """
    )
    # from (1,1) going NE to (2,2) is blocked: (2,2) is a wall
    s = spec.center((1, 1))
    assert np.array_equal(step(spec, s, NE), s)
    # from (2,1) going NE to (3,2): north neighbour (2,2) is a wall, so the cut is refused
    s = spec.center((2, 1))
    assert np.array_equal(step(spec, s, NE), s)
    assert np.array_equal(step(spec, spec.center((3, 1)), N), spec.center((3, 2)))


def test_step_rejects_invalid_states():
    spec = open_maze(3)
    with pytest.raises(InvalidStateError):
        step(spec, [0.5, 0.5], STAY)  # wall cell
    with pytest.raises(InvalidStateError):
        step(spec, [1.7, 1.5], STAY)  # off-center


def test_oracle_hand_values():
    spec = open_maze(3)
    assert temporal_distance_oracle(spec, (1, 1), (1, 1)) == 0
    assert temporal_distance_oracle(spec, (1, 1), (3, 3)) == 2
    assert temporal_distance_oracle(two_rooms(), (1, 1), (4, 1)) == UNREACHABLE
    with pytest.raises(InvalidStateError):
        temporal_distance_oracle(spec, (0, 0), (1, 1))


def test_oracle_symmetric_and_triangle():
    d = builtin_maze("maze8").distance_matrix
    assert np.array_equal(d, d.T)
    lhs = d[:, None, :]
    rhs = d[:, :, None] + d[None, :, :]
    assert np.all(lhs <= rhs)


def test_builtin_sizes():
    m8 = builtin_maze("maze8")
    assert m8.walls.shape == (8, 8) and m8.n_free == 26 and m8.distance_matrix.max() == 11
    med = builtin_maze("medium")
    assert med.walls.shape == (14, 14) and med.n_free == 104
    assert (med.distance_matrix != UNREACHABLE).all()


def test_text_roundtrip():
    spec = builtin_maze("maze8")
    again = MazeSpec.from_text(spec.to_text())
    assert np.array_equal(spec.walls, again.walls)
    assert np.array_equal(MazeSpec.from_json(spec.to_json()).walls, spec.walls)


def test_border_must_be_walled():
    with pytest.raises(ValueError):
        MazeSpec(np.zeros((3, 3), dtype=bool))


def test_is_success_examples():
    s = np.array([1.5, 1.5])
    assert is_success(s, s, 0.1)
    assert not is_success(s, s + [1.0, 0.0], 0.5)
    assert is_success(s, s + [1.0, 1.0], 1.5)
    with pytest.raises(ValueError):
        is_success(s, s, 0.0)


def test_stitch_dataset_shapes_and_closure():
    spec = builtin_maze("maze8")
    ds = generate_stitch_dataset(spec, 20, max_span=4, ep_len=200, seed=3)
    assert len(ds.trajectories) == 20
    for t in ds.trajectories:
        assert len(t) == 200
        for s, a, s2 in zip(t.states[:-1], t.actions[:-1], t.states[1:]):
            assert np.array_equal(step(spec, s, a), s2)


def test_stitch_hops_within_span():
    spec = builtin_maze("medium")
    ds = generate_stitch_dataset(spec, 30, max_span=4, seed=1)
    for t in ds.trajectories:
        c0 = spec.cell_of(t.states[0])
        for s in t.states:
            assert temporal_distance_oracle(spec, c0, spec.cell_of(s)) <= 4


def test_stitch_zero_span_is_all_stay():
    ds = generate_stitch_dataset(builtin_maze("maze8"), 4, max_span=0, ep_len=10, seed=0)
    for t in ds.trajectories:
        assert np.all(t.actions == STAY)
        assert np.all(t.states == t.states[0])


def test_stitch_no_pair_raises():
    spec = MazeSpec.from_text("###\n#.#\n###")
    with pytest.raises(maze.GenerationError):
        generate_stitch_dataset(spec, 1)


def test_explore_straight_line():
    spec = open_maze(6)
    ds = generate_explore_dataset(spec, 5, ep_len=20, resample_interval=20, noise_prob=0.0, seed=2)
    for t in ds.trajectories:
        moves = np.diff(t.states, axis=0)
        nonzero = moves[np.any(moves != 0, axis=1)]
        # one heading: every actual move has the same displacement and all moves precede the stop
        assert len(np.unique(nonzero, axis=0)) <= 1
        moving = np.any(moves != 0, axis=1)
        if moving.any():
            first_stop = np.argmin(moving) if not moving.all() else len(moving)
            assert not moving[first_stop:].any()


def test_explore_closure():
    spec = builtin_maze("maze8")
    ds = generate_explore_dataset(spec, 5, ep_len=100, seed=4)
    for t in ds.trajectories:
        for s, a, s2 in zip(t.states[:-1], t.actions[:-1], t.states[1:]):
            assert np.array_equal(step(spec, s, a), s2)


def test_generation_deterministic(tmp_path):
    spec = builtin_maze("maze8")
    a, b = tmp_path / "a.ndjson", tmp_path / "b.ndjson"
    maze.save_dataset(generate_stitch_dataset(spec, 10, seed=5), a)
    maze.save_dataset(generate_stitch_dataset(spec, 10, seed=5), b)
    assert a.read_bytes() == b.read_bytes()


def test_dataset_roundtrip(tmp_path):
    spec = builtin_maze("maze8")
    ds = generate_explore_dataset(spec, 3, ep_len=30, seed=1)
    ds.trajectories[0].states = ds.trajectories[0].states + 0.1  # non-grid floats must survive too
    p = tmp_path / "d.ndjson"
    maze.save_dataset(ds, p)
    back = maze.load_dataset(p)
    header = json.loads(p.read_text().splitlines()[0])
    assert header["format_version"] == 1 and "normalizer" in header["meta"]
    for t, u in zip(ds.trajectories, back.trajectories):
        assert np.array_equal(t.states, u.states) and np.array_equal(t.actions, u.actions)


def test_corrupt_dataset(tmp_path):
    p = tmp_path / "bad.ndjson"
    p.write_text('{"format_version": 9}\n')
    with pytest.raises(maze.DatasetFormatError):
        maze.load_dataset(p)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-40, 40), min_size=2, max_size=40))
def test_normalizer_roundtrip_grid_values(vals):
    x = (np.array(vals, dtype=np.float64).reshape(-1, 1) + 0.5) * np.ones((1, 2))
    norm = Normalizer.fit(x * np.array([1.0, 2.0]))
    z = norm.normalize(x)
    assert np.array_equal(norm.denormalize(z), x)
    assert np.array_equal(norm.normalize(norm.denormalize(z)), z)


def test_snap_and_containing_cells():
    spec = open_maze(3)
    assert np.array_equal(spec.snap([1.6, 2.4]), [1.5, 2.5])
    assert np.array_equal(spec.snap([0.1, 0.1]), [1.5, 1.5])  # wall corner snaps to nearest free cell
    assert spec.containing_cells([[1.99, 2.0]]).tolist() == [[1, 2]]
