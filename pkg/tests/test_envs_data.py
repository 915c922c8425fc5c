import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ldcq.data import (EpisodeTrajectory, collect_dataset, count_windows, discounted_return,
                       discounted_returns, load_dataset, save_dataset, slice_snippets,
                       stack_snippets)
from ldcq.envs import (EnvDescriptor, GridMaze, RandomWalk1D, TrimodalEnv, make_env,
                       rw1d_behavior, rw1d_step)
from ldcq.errors import ConfigError, EmptyOutputError, ShapeError


# --- rw1d -----------------------------------------------------------------------

def test_rw1d_step_rules():
    assert rw1d_step(0.0, 0.9) == (0.9, -1.0, False)
    assert rw1d_step(9.5, 0.9) == (10.0, 10.0, True)
    assert rw1d_step(-9.5, -1.0) == (-10.0, 10.0, True)
    with pytest.raises(ShapeError):
        rw1d_step(0.0, 1.5)


def test_rw1d_behavior_support():
    rng = np.random.default_rng(0)
    a = np.array([rw1d_behavior(rng) for _ in range(4000)])
    assert np.all((np.abs(a) >= 0.8) & (np.abs(a) <= 1.0))
    assert 0.45 < np.mean(a > 0) < 0.55


def test_rw1d_batch_matches_scalar():
    env = RandomWalk1D()
    rng = np.random.default_rng(1)
    s = rng.uniform(-10, 10, size=(50, 1))
    a = rng.uniform(-1, 1, size=(50, 1))
    nxt, r, d = env.step_batch(s, a)
    for i in range(50):
        n1, r1, d1 = rw1d_step(s[i, 0], a[i, 0])
        assert (nxt[i, 0], r[i], d[i]) == (n1, r1, d1)


def test_rw1d_dataset_timeout_or_wall():
    ds = collect_dataset(RandomWalk1D(), 20, seed=0)
    for ep in ds:
        assert ep.terminal != ep.timeout
        if ep.terminal:
            assert abs(ep.states[-1, 0]) == 10.0 and ep.rewards[-1] == 10.0
        else:
            assert len(ep) == 500
        assert np.all(ep.rewards[:-1] == -1.0)


# --- trimodal ---------------------------------------------------------------------

def test_trimodal_geometry_and_speed():
    env = TrimodalEnv()
    np.testing.assert_allclose(np.linalg.norm(env.sites, axis=1), 1.5)
    ang = np.degrees(np.arctan2(env.sites[:, 1], env.sites[:, 0])) % 360
    np.testing.assert_allclose(np.sort(ang), [90, 210, 330], atol=1e-9)
    nxt, _, _ = env.step_batch(np.zeros((1, 2)), np.array([[5.0, 5.0]]))
    assert np.linalg.norm(nxt) == pytest.approx(env.max_speed)


def test_trimodal_arrival_reward():
    env = TrimodalEnv()
    s = env.sites[0] - np.array([0.0, 0.2])
    nxt, r, d = env.step_batch(s[None], np.array([[0.0, 0.1]]))
    assert d[0] and r[0] == 1.0


def test_trimodal_behavior_goes_to_one_site():
    env = make_env("trimodal")
    ds = collect_dataset(env, 60, seed=3)
    ends = env.site_index(np.array([ep.states[-1] for ep in ds]))
    assert sum(ep.terminal for ep in ds) >= 50
    assert set(np.unique(ends)) == {0, 1, 2}


# --- grid maze ---------------------------------------------------------------------

def test_gridmaze_layouts_and_bfs():
    for name in ("tee", "u"):
        m = GridMaze(name)
        assert m.junctions
        for a in m.cells[:5]:
            for b in m.cells:
                n = m.path_length(a, b)
                assert n >= abs(a[0] - b[0]) + abs(a[1] - b[1])


def test_gridmaze_walls_block():
    m = GridMaze("tee")
    s = m.center((1, 1))
    for _ in range(10):
        s, _, _ = m.step(s, np.array([-0.25, 0.0]))
    assert m.free[m.cell_of(s)]
    assert s[0] >= 1.0


def test_gridmaze_goal_reward():
    m = GridMaze("tee")
    s = np.array([1.5, 1.9])
    nxt, r, d = m.step_batch(s[None], np.array([[0.0, 0.2]]), goals=np.array([[1, 2]]))
    assert d[0] and r[0] == 1.0
    nxt, r, d = m.step_batch(s[None], np.array([[0.0, 0.2]]))
    assert not d[0] and r[0] == 0.0


def test_gridmaze_rejects_bad_goal_and_layout():
    m = GridMaze("tee")
    with pytest.raises(ShapeError):
        m.set_goal((0, 0))
    with pytest.raises(ConfigError):
        GridMaze("spiral")
    with pytest.raises(ConfigError):
        make_env("cartpole")


def test_gridmaze_behavior_visits_many_cells():
    m = GridMaze("tee")
    ds = collect_dataset(m, 5, seed=0)
    cells = {m.cell_of(s) for ep in ds for s in ep.states}
    assert len(cells) >= 0.8 * len(m.cells)
    assert all(ep.timeout for ep in ds)


# --- descriptors and episodes ---------------------------------------------------------

def test_descriptor_roundtrip_and_validation():
    d = GridMaze("u").descriptor
    assert EnvDescriptor.from_dict(d.to_dict()) == d
    with pytest.raises(ConfigError):
        EnvDescriptor("x", 1, 2, (-1.0,), (1.0,), 10)


def test_episode_validation():
    with pytest.raises(ShapeError):
        EpisodeTrajectory(np.zeros((3, 1)), np.zeros((3, 1)), np.zeros(3))
    with pytest.raises(ShapeError):
        EpisodeTrajectory(np.zeros((2, 1)), np.zeros((1, 1)), np.zeros(1), terminal=True, timeout=True)


def test_collect_deterministic():
    a = collect_dataset(make_env("trimodal"), 3, seed=9)
    b = collect_dataset(make_env("trimodal"), 3, seed=9)
    for x, y in zip(a, b):
        assert np.array_equal(x.states, y.states)


def test_dataset_roundtrip(tmp_path):
    env = make_env("gridmaze-u")
    ds = collect_dataset(env, 2, seed=1, max_steps=20)
    path = save_dataset(tmp_path / "d.jsonl", env.descriptor, ds)
    desc, back, header = load_dataset(path)
    assert desc == env.descriptor and header["version"] == 1
    for x, y in zip(ds, back):
        assert np.array_equal(x.states, y.states) and np.array_equal(x.actions, y.actions)
        assert (x.terminal, x.timeout) == (y.terminal, y.timeout)


def test_load_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.jsonl"
    p.write_text('{"format": "other"}\n')
    with pytest.raises(ConfigError):
        load_dataset(p)


# --- snippets -------------------------------------------------------------------------

def _episode(L, terminal=True):
    s = np.arange(L + 1, dtype=float)[:, None]
    return EpisodeTrajectory(s, np.ones((L, 1)) * 0.5, np.arange(L, dtype=float),
                             terminal=terminal, timeout=not terminal)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 30), min_size=1, max_size=5), st.integers(1, 8), st.integers(1, 4))
def test_snippet_counts_and_padding(lengths, H, stride):
    ds = [_episode(L, terminal=bool(i % 2)) for i, L in enumerate(lengths)]
    if not any(L >= H for L in lengths):
        with pytest.raises(EmptyOutputError):
            slice_snippets(ds, H, stride)
        return
    snips = slice_snippets(ds, H, stride)
    assert len(snips) == sum(count_windows(L, stride) for L in lengths)
    for sn in snips:
        ep = ds[sn.episode]
        L = len(ep)
        assert sn.steps_valid == min(H, L - sn.start)
        assert np.array_equal(sn.next_state, ep.states[sn.start + sn.steps_valid])
        assert np.all(sn.states[sn.steps_valid:] == sn.next_state)
        assert not sn.actions[sn.steps_valid:].any() and not sn.rewards[sn.steps_valid:].any()
        assert sn.terminal_within == (ep.terminal and sn.start + sn.steps_valid == L)


def test_stack_snippets_shapes():
    arr = stack_snippets(slice_snippets([_episode(7)], 3, 2))
    assert arr.states.shape == (4, 3, 1) and arr.actions.shape == (4, 3, 1)
    assert arr.terminal.tolist() == [False, False, True, True]
    assert arr.steps_valid.tolist() == [3, 3, 3, 1]
    with pytest.raises(EmptyOutputError):
        stack_snippets([])


def test_discounted_return_oracle():
    assert discounted_return([1.0, 2.0, 3.0], 2, 0.5) == pytest.approx(2.0)
    got = discounted_returns(np.array([[1.0, 1.0, 1.0]]), np.array([3]), 0.9)
    assert got[0] == pytest.approx(1 + 0.9 + 0.81)
    with pytest.raises(ConfigError):
        discounted_return([1.0], 1, 1.0)
