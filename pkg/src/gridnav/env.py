"""Deterministic maze gridworld with raycast egocentric observations.

Worlds are seeded DFS mazes (with extra loop-carving) on a 0.25 m cell grid.
The agent has a continuous (x, y) position and a heading that is always a
multiple of 30 degrees.  MOVE_FORWARD translates 0.25 m along the heading
unless the destination point lands inside a wall cell, in which case the
pose is silently unchanged: the agent gets no collision signal.

Observations are 1-D egocentric rasters: 32 rays across a 90 degree field
of view, each ray carrying a normalized hit distance plus a one-hot texture
id of the wall cell it hit.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

CELL_SIZE = 0.25
MAX_DEPTH = 8.0
N_RAYS = 32
N_TEXTURES = 16
OBS_CHANNELS = 1 + N_TEXTURES
FOV_DEG = 90.0
TURN_DEG = 30
SUCCESS_RADIUS = 1.0
# Radius comparisons tolerate a nanometer so float drift along a path can
# never flip a pose that is geometrically exactly on the 1 m boundary.
RADIUS_TOL = 1e-9
WORLD_FORMAT_VERSION = 1


class Action(IntEnum):
    STOP = 0
    MOVE_FORWARD = 1
    TURN_LEFT = 2
    TURN_RIGHT = 3


ENV_ACTIONS = (Action.STOP, Action.MOVE_FORWARD, Action.TURN_LEFT, Action.TURN_RIGHT)
MOVE_ACTIONS = (Action.MOVE_FORWARD, Action.TURN_LEFT, Action.TURN_RIGHT)


@dataclass(frozen=True)
class Pose:
    """Agent position in meters plus heading in degrees (multiple of 30)."""

    x: float
    y: float
    heading: int

    def __post_init__(self):
        if self.heading % TURN_DEG != 0 or not (0 <= self.heading < 360):
            raise ValueError(f"heading must be a multiple of {TURN_DEG} in [0, 360): {self.heading}")

    def position(self) -> tuple[float, float]:
        return (self.x, self.y)


def euclidean(a: Pose, b: Pose) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


def heading_difference(a: int, b: int) -> int:
    """Wrapped absolute heading difference in degrees, in [0, 180]."""
    d = (b - a + 180) % 360 - 180
    return abs(d) if d != -180 else 180


@dataclass(frozen=True, eq=False)
class World:
    """Immutable seeded maze: cell grid (1 = wall), per-cell texture ids."""

    seed: int
    n: int
    loop_p: float
    grid: np.ndarray
    textures: np.ndarray
    name: str = ""

    def in_bounds(self, ix: int, iy: int) -> bool:
        return 0 <= ix < self.n and 0 <= iy < self.n

    def is_wall(self, ix: int, iy: int) -> bool:
        if not self.in_bounds(ix, iy):
            return True
        return bool(self.grid[ix, iy])

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return (int(math.floor(x / CELL_SIZE)), int(math.floor(y / CELL_SIZE)))

    def is_free_point(self, x: float, y: float) -> bool:
        ix, iy = self.cell_of(x, y)
        return not self.is_wall(ix, iy)

    def free_cells(self) -> np.ndarray:
        return np.argwhere(self.grid == 0)

    def to_json(self) -> str:
        return json.dumps(
            {
                "format": "gridnav-world",
                "version": WORLD_FORMAT_VERSION,
                "seed": int(self.seed),
                "n": int(self.n),
                "loop_p": float(self.loop_p),
                "name": self.name,
            },
            separators=(",", ":"),
        )

    @staticmethod
    def from_json(text: str) -> "World":
        spec = json.loads(text)
        if spec.get("format") != "gridnav-world" or spec.get("version") != WORLD_FORMAT_VERSION:
            raise ValueError(f"unsupported world spec: {text[:80]}")
        return generate_world(spec["seed"], spec["n"], spec["loop_p"], spec.get("name", ""))


def cell_center(ix: int, iy: int) -> tuple[float, float]:
    return ((ix + 0.5) * CELL_SIZE, (iy + 0.5) * CELL_SIZE)


def generate_world(seed: int, n: int = 64, loop_p: float = 0.08, name: str = "") -> World:
    """Seeded maze: DFS carving on the odd sublattice, then loop-adding.

    The outer boundary stays wall and the free cells form one connected
    component (carving only ever removes walls between connected rooms).
    """
    if n < 16:
        raise ValueError(f"world size must be at least 16 cells, got {n}")
    rng = np.random.default_rng(seed)
    grid = np.ones((n, n), dtype=np.uint8)

    hi = n - 2 if (n - 2) % 2 == 1 else n - 3
    start = (1, 1)
    grid[start] = 0
    visited = {start}
    stack = [start]
    while stack:
        cx, cy = stack[-1]
        neighbors = []
        for dx, dy in ((2, 0), (-2, 0), (0, 2), (0, -2)):
            nx, ny = cx + dx, cy + dy
            if 1 <= nx <= hi and 1 <= ny <= hi and (nx, ny) not in visited:
                neighbors.append((nx, ny))
        if neighbors:
            nx, ny = neighbors[int(rng.integers(len(neighbors)))]
            grid[(cx + nx) // 2, (cy + ny) // 2] = 0
            grid[nx, ny] = 0
            visited.add((nx, ny))
            stack.append((nx, ny))
        else:
            stack.pop()

    # Loop-adding: knock down interior walls that separate two free cells so
    # the maze is not a tree (gives alternative routes and open patches).
    for ix in range(1, n - 1):
        for iy in range(1, n - 1):
            if not grid[ix, iy]:
                continue
            horiz = not grid[ix - 1, iy] and not grid[ix + 1, iy]
            vert = not grid[ix, iy - 1] and not grid[ix, iy + 1]
            if (horiz or vert) and rng.random() < loop_p:
                grid[ix, iy] = 0

    textures = rng.integers(0, N_TEXTURES, size=(n, n)).astype(np.uint8)
    grid.setflags(write=False)
    textures.setflags(write=False)
    return World(seed=seed, n=n, loop_p=loop_p, grid=grid, textures=textures, name=name)


def step(world: World, pose: Pose, action: Action) -> tuple[Pose, bool]:
    """One environment transition; returns (new pose, episode done)."""
    action = Action(action)
    if action == Action.STOP:
        return pose, True
    if action == Action.TURN_LEFT:
        return Pose(pose.x, pose.y, (pose.heading + TURN_DEG) % 360), False
    if action == Action.TURN_RIGHT:
        return Pose(pose.x, pose.y, (pose.heading - TURN_DEG) % 360), False
    rad = math.radians(pose.heading)
    nx = pose.x + CELL_SIZE * math.cos(rad)
    ny = pose.y + CELL_SIZE * math.sin(rad)
    if world.is_free_point(nx, ny):
        return Pose(nx, ny, pose.heading), False
    return pose, False  # silent collision: blocked, no signal


def _cast_ray(world: World, x: float, y: float, angle_deg: float) -> tuple[float, int]:
    """DDA grid traversal; returns (distance to wall entry, texture id)."""
    rad = math.radians(angle_deg)
    dx, dy = math.cos(rad), math.sin(rad)
    ix, iy = world.cell_of(x, y)

    if dx > 0:
        step_x, t_max_x = 1, ((ix + 1) * CELL_SIZE - x) / dx
        t_delta_x = CELL_SIZE / dx
    elif dx < 0:
        step_x, t_max_x = -1, (ix * CELL_SIZE - x) / dx
        t_delta_x = -CELL_SIZE / dx
    else:
        step_x, t_max_x, t_delta_x = 0, math.inf, math.inf
    if dy > 0:
        step_y, t_max_y = 1, ((iy + 1) * CELL_SIZE - y) / dy
        t_delta_y = CELL_SIZE / dy
    elif dy < 0:
        step_y, t_max_y = -1, (iy * CELL_SIZE - y) / dy
        t_delta_y = -CELL_SIZE / dy
    else:
        step_y, t_max_y, t_delta_y = 0, math.inf, math.inf

    while True:
        if t_max_x < t_max_y:
            t = t_max_x
            t_max_x += t_delta_x
            ix += step_x
        else:
            t = t_max_y
            t_max_y += t_delta_y
            iy += step_y
        if world.is_wall(ix, iy):
            if world.in_bounds(ix, iy):
                return t, int(world.textures[ix, iy])
            return t, 0  # off-grid counts as untextured wall
        # Boundary walls guarantee termination.


def render_observation(world: World, pose: Pose) -> np.ndarray:
    """Egocentric raster [OBS_CHANNELS, N_RAYS] for ``pose``.

    Rays sit at pixel centers across the field of view, so none is ever
    exactly axis-aligned for the discrete headings (no corner-tie artifacts).
    Channel 0 is hit distance normalized by MAX_DEPTH (clipped to 1);
    channels 1..16 one-hot the texture of the wall cell the ray hit.
    """
    obs = np.zeros((OBS_CHANNELS, N_RAYS), dtype=np.float64)
    base = pose.heading - FOV_DEG / 2.0
    ray_step = FOV_DEG / N_RAYS
    for k in range(N_RAYS):
        angle = base + (k + 0.5) * ray_step
        dist, tex = _cast_ray(world, pose.x, pose.y, angle)
        obs[0, k] = min(dist / MAX_DEPTH, 1.0)
        obs[1 + tex, k] = 1.0
    return obs


def geodesic_distance(world: World, a: Pose, b: Pose) -> float:
    """Shortest traversable distance between two positions.

    BFS over 4-connected free cells at 0.25 m per edge, plus each pose's
    offset from its cell center so the result never undercuts the straight
    line distance.  Heading is ignored.  Returns inf when unreachable.
    """
    ca, cb = world.cell_of(a.x, a.y), world.cell_of(b.x, b.y)
    if world.is_wall(*ca) or world.is_wall(*cb):
        raise ValueError("geodesic_distance requires both poses in free space")
    if ca == cb:
        return euclidean(a, b)
    edges = _bfs_cell_distance(world, ca, cb)
    if edges < 0:
        return math.inf
    off_a = math.hypot(*(np.subtract((a.x, a.y), cell_center(*ca))))
    off_b = math.hypot(*(np.subtract((b.x, b.y), cell_center(*cb))))
    return edges * CELL_SIZE + off_a + off_b


def _bfs_cell_distance(world: World, start: tuple[int, int], goal: tuple[int, int]) -> int:
    n = world.n
    dist = np.full((n, n), -1, dtype=np.int32)
    dist[start] = 0
    queue = deque([start])
    while queue:
        cx, cy = queue.popleft()
        if (cx, cy) == goal:
            return int(dist[cx, cy])
        d = dist[cx, cy] + 1
        for nx, ny in ((cx + 1, cy), (cx - 1, cy), (cx, cy + 1), (cx, cy - 1)):
            if 0 <= nx < n and 0 <= ny < n and not world.grid[nx, ny] and dist[nx, ny] < 0:
                dist[nx, ny] = d
                queue.append((nx, ny))
    return -1


def connected_free_cells(world: World) -> int:
    """Size of the free component containing the first free cell."""
    free = world.free_cells()
    if len(free) == 0:
        return 0
    start = (int(free[0][0]), int(free[0][1]))
    seen = np.zeros((world.n, world.n), dtype=bool)
    seen[start] = True
    queue = deque([start])
    count = 0
    while queue:
        cx, cy = queue.popleft()
        count += 1
        for nx, ny in ((cx + 1, cy), (cx - 1, cy), (cx, cy + 1), (cx, cy - 1)):
            if world.in_bounds(nx, ny) and not world.grid[nx, ny] and not seen[nx, ny]:
                seen[nx, ny] = True
                queue.append((nx, ny))
    return count


def within_success_radius(pose: Pose, goal_pose: Pose) -> bool:
    return euclidean(pose, goal_pose) <= SUCCESS_RADIUS + RADIUS_TOL


def is_success(world: World, pose: Pose, goal_pose: Pose, called_stop: bool) -> bool:
    """Goal reached: STOP was called within SUCCESS_RADIUS of the goal."""
    return bool(called_stop and within_success_radius(pose, goal_pose))
