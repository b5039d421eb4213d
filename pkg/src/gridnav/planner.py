"""Action-optimal route search over the gridworld transition system.

A* over states keyed by (cell x, cell y, heading) with unit cost per action.
FORWARD edges are expanded only at axis-aligned headings (0/90/180/270):
axis moves preserve a pose's offset inside its cell exactly, which makes the
state graph a pure function of the world (every arrival at a key carries the
same pose), guarantees that returned plans replay exactly through ``step``,
and keeps the graph identical for any correct search over it.  Diagonal
forwards remain legal environment actions; the planner just never emits
them.

The goal is any state within the success radius of the goal position; STOP
is appended.  Ties are broken by push order with FORWARD expanded before
LEFT before RIGHT, so plans are deterministic.
"""

from __future__ import annotations

import heapq

from .env import (
    CELL_SIZE,
    SUCCESS_RADIUS,
    Action,
    Pose,
    World,
    euclidean,
    step,
    within_success_radius,
)
from .errors import PlanningError

_EXPANSION_ORDER = (Action.MOVE_FORWARD, Action.TURN_LEFT, Action.TURN_RIGHT)
AXIS_HEADINGS = (0, 90, 180, 270)


def _heuristic(pose: Pose, goal: Pose) -> float:
    # Admissible and consistent: every action shortens the remaining
    # distance-to-radius by at most one forward step.
    return max(0.0, euclidean(pose, goal) - SUCCESS_RADIUS) / CELL_SIZE


def planner_successors(world: World, pose: Pose):
    """(action, next pose) pairs the planner may take from ``pose``."""
    out = []
    for action in _EXPANSION_ORDER:
        if action == Action.MOVE_FORWARD and pose.heading not in AXIS_HEADINGS:
            continue
        nxt, _ = step(world, pose, action)
        if action == Action.MOVE_FORWARD and nxt == pose:
            continue  # blocked
        out.append((action, nxt))
    return out


def plan_shortest_path(world: World, start: Pose, goal: Pose) -> list[Action]:
    """Minimal-action route from ``start`` to within 1 m of ``goal``, plus STOP."""
    if not world.is_free_point(start.x, start.y) or not world.is_free_point(goal.x, goal.y):
        raise PlanningError("start and goal must lie in free space")
    if within_success_radius(start, goal):
        return [Action.STOP]

    def key(p: Pose) -> tuple[int, int, int]:
        ix, iy = world.cell_of(p.x, p.y)
        return (ix, iy, p.heading)

    start_key = key(start)
    g_best = {start_key: 0}
    parent: dict[tuple[int, int, int], tuple[tuple[int, int, int], Action]] = {}
    pose_at = {start_key: start}
    settled: set[tuple[int, int, int]] = set()

    counter = 0
    heap: list[tuple[float, int, tuple[int, int, int]]] = []
    heapq.heappush(heap, (_heuristic(start, goal), counter, start_key))

    while heap:
        _, _, k = heapq.heappop(heap)
        if k in settled:
            continue
        settled.add(k)
        pose = pose_at[k]
        g = g_best[k]

        if within_success_radius(pose, goal):
            actions: list[Action] = []
            while k != start_key:
                k, action = parent[k]
                actions.append(action)
            actions.reverse()
            actions.append(Action.STOP)
            return actions

        for action, nxt in planner_successors(world, pose):
            nkey = key(nxt)
            ng = g + 1
            if nkey in settled or ng >= g_best.get(nkey, 1 << 30):
                continue
            g_best[nkey] = ng
            parent[nkey] = (k, action)
            pose_at[nkey] = nxt
            counter += 1
            heapq.heappush(heap, (ng + _heuristic(nxt, goal), counter, nkey))

    raise PlanningError(
        f"no route from ({start.x:.2f}, {start.y:.2f}) to within "
        f"{SUCCESS_RADIUS} m of ({goal.x:.2f}, {goal.y:.2f})"
    )


def plan_forward_distance(plan: list[Action]) -> float:
    """Translation distance of a plan in meters (0.25 per FORWARD)."""
    return CELL_SIZE * sum(1 for a in plan if a == Action.MOVE_FORWARD)


def shortest_path_length(world: World, start: Pose, goal: Pose) -> float:
    """Optimal achievable path length to the goal region, for SPL baselines.

    Measured the same way agent paths are (translation distance of the
    minimal-action route), so an agent executing the optimal route scores
    an SPL term of exactly 1.
    """
    return plan_forward_distance(plan_shortest_path(world, start, goal))
