import heapq
import math

import numpy as np
import pytest

from gridnav.env import (
    CELL_SIZE,
    MAX_DEPTH,
    N_RAYS,
    OBS_CHANNELS,
    Action,
    Pose,
    World,
    cell_center,
    connected_free_cells,
    euclidean,
    generate_world,
    geodesic_distance,
    heading_difference,
    is_success,
    render_observation,
    step,
)


def open_room(n=16, seed=0):
    """All-free interior; handy for geometry tests."""
    world = generate_world(seed, n)
    grid = np.zeros((n, n), dtype=np.uint8)
    grid[0, :] = grid[-1, :] = grid[:, 0] = grid[:, -1] = 1
    textures = np.full((n, n), 3, dtype=np.uint8)
    grid.setflags(write=False)
    textures.setflags(write=False)
    return World(seed=seed, n=n, loop_p=0.0, grid=grid, textures=textures)


# -- world generation ---------------------------------------------------------

def test_same_seed_same_world():
    a, b = generate_world(7, 32), generate_world(7, 32)
    assert np.array_equal(a.grid, b.grid)
    assert np.array_equal(a.textures, b.textures)


def test_different_seed_different_world():
    assert not np.array_equal(generate_world(1, 32).grid, generate_world(2, 32).grid)


def test_boundary_is_wall():
    w = generate_world(3, 24)
    assert w.grid[0, :].all() and w.grid[-1, :].all()
    assert w.grid[:, 0].all() and w.grid[:, -1].all()


def test_free_cells_single_connected_component():
    for seed in range(5):
        w = generate_world(seed, 32)
        assert connected_free_cells(w) == int((w.grid == 0).sum())


def test_world_json_round_trip():
    w = generate_world(11, 24, loop_p=0.1, name="t")
    w2 = World.from_json(w.to_json())
    assert np.array_equal(w.grid, w2.grid)
    assert np.array_equal(w.textures, w2.textures)
    assert w.to_json() == w2.to_json()


def test_world_size_floor():
    with pytest.raises(ValueError):
        generate_world(0, 8)


# -- step ---------------------------------------------------------------------

def test_forward_moves_quarter_meter():
    w = open_room()
    p = Pose(*cell_center(5, 5), 0)
    p2, done = step(w, p, Action.MOVE_FORWARD)
    assert not done
    assert p2.x == pytest.approx(p.x + 0.25)
    assert p2.y == pytest.approx(p.y)


def test_turn_left_is_plus_thirty():
    w = open_room()
    p = Pose(*cell_center(5, 5), 0)
    assert step(w, p, Action.TURN_LEFT)[0].heading == 30
    assert step(w, p, Action.TURN_RIGHT)[0].heading == 330


def test_forward_into_wall_silently_blocked():
    w = open_room()
    p = Pose(*cell_center(1, 5), 180)  # facing the boundary wall
    p2, done = step(w, p, Action.MOVE_FORWARD)
    assert p2 == p and not done


def test_stop_sets_done_and_keeps_pose():
    w = open_room()
    p = Pose(*cell_center(5, 5), 90)
    p2, done = step(w, p, Action.STOP)
    assert done and p2 == p


def test_step_fuzz_never_enters_wall():
    rng = np.random.default_rng(0)
    w = generate_world(5, 32)
    free = w.free_cells()
    ix, iy = free[len(free) // 2]
    pose = Pose(*cell_center(int(ix), int(iy)), 0)
    for _ in range(100_000):
        a = Action(int(rng.integers(1, 4)))  # moves only; STOP is a no-op
        pose, _ = step(w, pose, a)
    assert w.is_free_point(pose.x, pose.y)


# -- rendering ----------------------------------------------------------------

def test_render_depth_of_wall_quarter_meter_ahead():
    w = open_room()
    # Wall face at x = 15 * 0.25 = 3.75; stand 0.25 m away, facing it.
    p = Pose(15 * CELL_SIZE - 0.25, cell_center(5, 8)[1], 0)
    obs = render_observation(w, p)
    assert obs.shape == (OBS_CHANNELS, N_RAYS)
    center = obs[0, N_RAYS // 2 - 1 : N_RAYS // 2 + 1]
    assert np.allclose(center, 0.25 / MAX_DEPTH, rtol=1e-3)


def test_render_deterministic():
    w = generate_world(9, 32)
    free = w.free_cells()
    p = Pose(*cell_center(int(free[4][0]), int(free[4][1])), 60)
    assert np.array_equal(render_observation(w, p), render_observation(w, p))


def test_render_depth_in_unit_interval_and_one_hot_textures():
    w = generate_world(13, 32)
    free = w.free_cells()
    for i in range(0, len(free), max(1, len(free) // 20)):
        p = Pose(*cell_center(int(free[i][0]), int(free[i][1])), 30 * (i % 12))
        obs = render_observation(w, p)
        assert (obs[0] >= 0).all() and (obs[0] <= 1).all()
        assert np.array_equal(obs[1:].sum(axis=0), np.ones(N_RAYS))


def test_render_four_fold_symmetry():
    # Uniform-texture square room, agent dead center: rotating the pose by
    # 90 degrees must reproduce the same raster (rays rotate with it).
    n = 17
    grid = np.zeros((n, n), dtype=np.uint8)
    grid[0, :] = grid[-1, :] = grid[:, 0] = grid[:, -1] = 1
    textures = np.full((n, n), 7, dtype=np.uint8)
    grid.setflags(write=False)
    textures.setflags(write=False)
    w = World(seed=0, n=n, loop_p=0.0, grid=grid, textures=textures)
    center = cell_center(n // 2, n // 2)
    base = render_observation(w, Pose(*center, 0))
    for heading in (90, 180, 270):
        rotated = render_observation(w, Pose(*center, heading))
        assert np.allclose(base, rotated, atol=1e-9)


# -- geodesic distance ----------------------------------------------------------

def test_geodesic_same_pose_is_zero():
    w = open_room()
    p = Pose(*cell_center(4, 4), 0)
    assert geodesic_distance(w, p, p) == 0.0


def test_geodesic_straight_corridor():
    w = open_room(n=20)
    a = Pose(*cell_center(2, 10), 0)
    b = Pose(*cell_center(12, 10), 0)  # 10 cell edges apart
    assert geodesic_distance(w, a, b) == pytest.approx(2.5)


def test_geodesic_around_obstacle_matches_dijkstra_oracle():
    n = 16
    grid = np.zeros((n, n), dtype=np.uint8)
    grid[0, :] = grid[-1, :] = grid[:, 0] = grid[:, -1] = 1
    grid[8, 2:14] = 1  # wall slab with a gap near the top
    textures = np.zeros((n, n), dtype=np.uint8)
    grid.setflags(write=False)
    textures.setflags(write=False)
    w = World(seed=0, n=n, loop_p=0.0, grid=grid, textures=textures)

    a = Pose(*cell_center(4, 6), 0)
    b = Pose(*cell_center(12, 6), 0)

    # Independent Dijkstra over the same cell graph.
    start, goal = w.cell_of(a.x, a.y), w.cell_of(b.x, b.y)
    dist = {start: 0}
    heap = [(0, start)]
    while heap:
        d, cell = heapq.heappop(heap)
        if cell == goal:
            break
        if d > dist[cell]:
            continue
        cx, cy = cell
        for nxt in ((cx + 1, cy), (cx - 1, cy), (cx, cy + 1), (cx, cy - 1)):
            if not w.is_wall(*nxt) and d + 1 < dist.get(nxt, 1 << 30):
                dist[nxt] = d + 1
                heapq.heappush(heap, (d + 1, nxt))
    assert geodesic_distance(w, a, b) == pytest.approx(dist[goal] * CELL_SIZE)
    assert geodesic_distance(w, a, b) > euclidean(a, b)


def test_geodesic_lower_bounded_by_euclidean():
    rng = np.random.default_rng(3)
    w = generate_world(21, 32)
    free = w.free_cells()
    for _ in range(300):
        i, j = rng.integers(len(free), size=2)
        a = Pose(*cell_center(int(free[i][0]), int(free[i][1])), 0)
        b = Pose(*cell_center(int(free[j][0]), int(free[j][1])), 0)
        g = geodesic_distance(w, a, b)
        assert g >= euclidean(a, b) - CELL_SIZE


def test_geodesic_unreachable_is_infinite():
    n = 16
    grid = np.ones((n, n), dtype=np.uint8)
    grid[2, 2] = 0
    grid[5, 5] = 0
    textures = np.zeros((n, n), dtype=np.uint8)
    grid.setflags(write=False)
    textures.setflags(write=False)
    w = World(seed=0, n=n, loop_p=0.0, grid=grid, textures=textures)
    a = Pose(*cell_center(2, 2), 0)
    b = Pose(*cell_center(5, 5), 0)
    assert geodesic_distance(w, a, b) == math.inf


# -- success criterion ----------------------------------------------------------

def test_success_requires_stop_within_radius():
    w = open_room()
    goal = Pose(*cell_center(8, 8), 0)
    at_goal = Pose(*cell_center(8, 8), 90)
    near = Pose(goal.x + 0.9, goal.y, 0)
    far = Pose(goal.x + 1.2, goal.y, 0)
    assert is_success(w, at_goal, goal, called_stop=True)
    assert is_success(w, near, goal, called_stop=True)
    assert not is_success(w, near, goal, called_stop=False)
    assert not is_success(w, far, goal, called_stop=True)


def test_heading_difference_wraps():
    assert heading_difference(0, 30) == 30
    assert heading_difference(30, 330) == 60
    assert heading_difference(0, 180) == 180
    assert heading_difference(350 % 360, 10) == 20
