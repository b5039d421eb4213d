"""Expert trajectories: collection, categorization, storage, window sampling.

The expert is the route planner (optionally with epsilon-random deviations
followed by replanning, so that success filtering has something to filter).
Trajectories store poses, not rasters; observations are re-rendered on
demand, which keeps files small and makes replay validation exact.

Dataset files are newline-delimited JSON with a schema-versioned header
line.  Loading replays every record through the environment and rejects the
file if any pose sequence or success flag fails to reproduce.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .env import (
    Action,
    Pose,
    World,
    cell_center,
    euclidean,
    generate_world,
    geodesic_distance,
    heading_difference,
    is_success,
    render_observation,
    step,
)
from .errors import DatasetFormatError, EpisodeRejected, PlanningError
from .planner import plan_shortest_path

logger = logging.getLogger(__name__)

DATASET_FORMAT_VERSION = 1

CATEGORY_STRAIGHT = "straight"
CATEGORY_CURVED = "curved"
DIFFICULTIES = ("easy", "medium", "hard")
# Geodesic bins in meters, left-inclusive.
DIFFICULTY_BINS = {"easy": (1.5, 3.0), "medium": (3.0, 5.0), "hard": (5.0, 10.0)}
DEFAULT_MAX_STEPS = {"easy": 100, "medium": 350, "hard": 350}
STRAIGHT_RATIO = 1.2
STRAIGHT_HEADING_DEG = 45

EXPERT_OPTIMAL = "optimal"
EXPERT_NOISY = "noisy"


@dataclass(frozen=True)
class EpisodeSpec:
    """One navigation problem: a world, a start pose, and a goal pose."""

    world_seed: int
    start: Pose
    goal: Pose
    category: str
    difficulty: str
    max_steps: int
    geodesic: float
    euclid: float
    index: int = 0


@dataclass
class Trajectory:
    """An executed episode: actions plus the pose after each action."""

    spec: EpisodeSpec
    actions: list[int]
    poses: list[Pose]  # poses[0] is the start; len == len(actions) + 1
    success: bool
    expert: str  # "optimal" or "noisy(eps)"

    def __len__(self) -> int:
        return len(self.actions)

    def replays_exactly(self, world: World) -> bool:
        pose = self.poses[0]
        for i, action in enumerate(self.actions):
            pose, _ = step(world, pose, Action(action))
            if pose != self.poses[i + 1]:
                return False
        called_stop = bool(self.actions) and self.actions[-1] == Action.STOP
        return self.success == is_success(world, pose, self.spec.goal, called_stop)


@dataclass
class DatasetManifest:
    version: int
    global_seed: int
    split: str
    world_n: int
    world_loop_p: float
    counts: dict[str, int] = field(default_factory=dict)
    episodes: int = 0


@dataclass
class Dataset:
    manifest: DatasetManifest
    trajectories: list[Trajectory]
    _worlds: dict[int, World] = field(default_factory=dict)

    def world_for(self, traj: Trajectory) -> World:
        seed = traj.spec.world_seed
        if seed not in self._worlds:
            self._worlds[seed] = generate_world(
                seed, self.manifest.world_n, self.manifest.world_loop_p
            )
        return self._worlds[seed]

    def __len__(self) -> int:
        return len(self.trajectories)


def categorize_episode(world: World, start: Pose, goal: Pose) -> tuple[str, str]:
    """Straight/curved category plus difficulty bin of a start-goal pair.

    Straight means geodesic/euclidean ratio below 1.2 and start-goal heading
    difference below 45 degrees; geodesic distance outside [1.5, 10] m is
    rejected for resampling.
    """
    geo = geodesic_distance(world, start, goal)
    euc = euclidean(start, goal)
    if math.isinf(geo) or not (DIFFICULTY_BINS["easy"][0] <= geo <= DIFFICULTY_BINS["hard"][1]):
        raise EpisodeRejected(f"geodesic distance {geo:.3f} m outside [1.5, 10]")
    straight = (geo / euc < STRAIGHT_RATIO if euc > 0 else False) and (
        heading_difference(start.heading, goal.heading) < STRAIGHT_HEADING_DEG
    )
    category = CATEGORY_STRAIGHT if straight else CATEGORY_CURVED
    for name, (lo, hi) in DIFFICULTY_BINS.items():
        if lo <= geo < hi or (name == "hard" and geo == hi):
            return category, name
    raise EpisodeRejected(f"geodesic distance {geo:.3f} m fits no bin")


def expert_label(kind: str, eps: float) -> str:
    return EXPERT_OPTIMAL if kind == EXPERT_OPTIMAL else f"{EXPERT_NOISY}({eps:g})"


def collect_episode(
    world: World,
    spec: EpisodeSpec,
    expert: str = EXPERT_OPTIMAL,
    eps: float = 0.2,
    rng: np.random.Generator | None = None,
    budget_factor: float | None = None,
) -> Trajectory:
    """Run the expert on an episode; failures are recorded, never raised.

    The optimal expert executes the planned route.  The noisy expert takes a
    uniform random non-STOP action with probability eps at each step and
    replans afterwards.  Episodes truncate at ``spec.max_steps``, or at
    ``budget_factor`` times the optimal plan length when that is tighter
    (a binding budget makes the noisy expert fail sometimes, so success
    filtering has real work to do).
    """
    if expert == EXPERT_NOISY and rng is None:
        raise ValueError("noisy expert requires an rng")
    pose = spec.start
    actions: list[int] = []
    poses: list[Pose] = [pose]
    try:
        queue = list(plan_shortest_path(world, pose, spec.goal))
    except PlanningError:
        queue = []
    budget = spec.max_steps
    if budget_factor is not None:
        budget = min(budget, max(len(queue) + 1, math.ceil(len(queue) * budget_factor)))
    done = False
    while not done and len(actions) < budget and queue:
        if expert == EXPERT_NOISY and rng.random() < eps:
            action = Action(int(rng.integers(1, 4)))  # uniform over non-STOP
            pose, done = step(world, pose, action)
            actions.append(int(action))
            poses.append(pose)
            try:
                queue = list(plan_shortest_path(world, pose, spec.goal))
            except PlanningError:
                queue = []
            continue
        action = queue.pop(0)
        pose, done = step(world, pose, action)
        actions.append(int(action))
        poses.append(pose)
    called_stop = bool(actions) and actions[-1] == Action.STOP
    success = is_success(world, pose, spec.goal, called_stop)
    return Trajectory(
        spec=spec,
        actions=actions,
        poses=poses,
        success=success,
        expert=expert_label(expert, eps),
    )


def filter_successful(trajectories: list[Trajectory]) -> list[Trajectory]:
    kept = [t for t in trajectories if t.success]
    if trajectories and not kept:
        logger.warning("filter_successful: all %d trajectories failed", len(trajectories))
    return kept


def count_table(trajectories: list[Trajectory]) -> list[dict]:
    """Per (category, difficulty) totals and success counts."""
    totals: Counter = Counter()
    succ: Counter = Counter()
    for t in trajectories:
        key = (t.spec.category, t.spec.difficulty)
        totals[key] += 1
        if t.success:
            succ[key] += 1
    rows = []
    for category in (CATEGORY_CURVED, CATEGORY_STRAIGHT):
        for difficulty in DIFFICULTIES:
            key = (category, difficulty)
            if totals[key] == 0:
                continue
            rows.append(
                {
                    "split": category,
                    "difficulty": difficulty,
                    "total": totals[key],
                    "successful": succ[key],
                    "percent": round(100.0 * succ[key] / totals[key], 2),
                }
            )
    return rows


# ---------------------------------------------------------------------------
# training windows
# ---------------------------------------------------------------------------

@dataclass
class TrainingWindow:
    goal_obs: np.ndarray
    observations: list[np.ndarray]
    actions: list[int]  # expert actions for each window step (the targets)


def sample_training_window(
    world: World, traj: Trajectory, context: int, rng: np.random.Generator
) -> TrainingWindow:
    """A contiguous window of up to ``context`` steps with a random start.

    Shorter trajectories yield a shorter window (T' = len); padding to the
    batch context is the trainer's job via the loss ignore mask.  The
    observation at step t is rendered from the pose the action was taken in.
    """
    n = len(traj.actions)
    if n == 0:
        raise ValueError("cannot sample a window from an empty trajectory")
    if n >= context:
        start = int(rng.integers(0, n - context + 1))
        length = context
    else:
        start, length = 0, n
    observations = [
        render_observation(world, traj.poses[start + t]) for t in range(length)
    ]
    actions = [int(a) for a in traj.actions[start : start + length]]
    goal_obs = render_observation(world, traj.spec.goal)
    return TrainingWindow(goal_obs=goal_obs, observations=observations, actions=actions)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

@dataclass
class GenerationConfig:
    seed: int = 0
    split: str = "train"
    episodes: int = 200
    n_worlds: int = 8
    world_n: int = 48
    world_loop_p: float = 0.08
    world_salt: int = 1  # distinct salts give disjoint world pools per split
    difficulty_mix: dict = field(
        default_factory=lambda: {"easy": 1 / 3, "medium": 1 / 3, "hard": 1 / 3}
    )
    expert: str = EXPERT_NOISY
    expert_eps: float = 0.2
    # Noisy collection truncates at this multiple of the optimal plan length
    # (capped by the episode budget); None means episode budget only.
    budget_factor: float | None = 1.5
    max_steps: dict = field(default_factory=lambda: dict(DEFAULT_MAX_STEPS))
    max_sample_tries: int = 2000


def derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0])


def make_worlds(cfg: GenerationConfig) -> list[World]:
    return [
        generate_world(derived_seed(cfg.seed, cfg.world_salt, i), cfg.world_n, cfg.world_loop_p)
        for i in range(cfg.n_worlds)
    ]


def difficulty_schedule(mix: dict, episodes: int) -> list[str]:
    """Deterministic assignment matching the requested proportions exactly."""
    total = sum(mix.values())
    quotas = {d: mix.get(d, 0.0) / total for d in DIFFICULTIES}
    assigned = {d: 0 for d in DIFFICULTIES}
    out = []
    for i in range(episodes):
        deficit = {d: quotas[d] * (i + 1) - assigned[d] for d in DIFFICULTIES}
        pick = max(DIFFICULTIES, key=lambda d: (deficit[d], -DIFFICULTIES.index(d)))
        assigned[pick] += 1
        out.append(pick)
    return out


def sample_episode_spec(
    world: World,
    difficulty: str,
    rng: np.random.Generator,
    max_steps: int,
    max_tries: int = 2000,
) -> EpisodeSpec:
    """Rejection-sample a start/goal pair whose geodesic falls in the bin.

    Poses sit at cell centers with random headings.  Pairs closer than the
    success radius in a straight line are rejected as degenerate (they would
    be solvable by an immediate STOP).
    """
    lo, hi = DIFFICULTY_BINS[difficulty]
    free = world.free_cells()
    for _ in range(max_tries):
        i, j = rng.integers(len(free), size=2)
        start = Pose(*cell_center(*map(int, free[i])), int(rng.integers(12)) * 30)
        goal = Pose(*cell_center(*map(int, free[j])), int(rng.integers(12)) * 30)
        euc = euclidean(start, goal)
        if euc <= 1.0:
            continue
        geo = geodesic_distance(world, start, goal)
        in_bin = lo <= geo < hi or (difficulty == "hard" and geo == hi)
        if not in_bin:
            continue
        category, got = categorize_episode(world, start, goal)
        assert got == difficulty
        return EpisodeSpec(
            world_seed=world.seed,
            start=start,
            goal=goal,
            category=category,
            difficulty=difficulty,
            max_steps=max_steps,
            geodesic=geo,
            euclid=euc,
        )
    raise EpisodeRejected(
        f"no {difficulty} episode found in world seed {world.seed} after {max_tries} tries"
    )


_SCHEDULE_CACHE: dict = {}


def _schedule_cached(cfg: GenerationConfig) -> list[str]:
    key = (tuple(sorted(cfg.difficulty_mix.items())), cfg.episodes)
    if key not in _SCHEDULE_CACHE:
        _SCHEDULE_CACHE[key] = difficulty_schedule(cfg.difficulty_mix, cfg.episodes)
    return _SCHEDULE_CACHE[key]


def generate_episode(cfg: GenerationConfig, worlds: list[World], index: int) -> Trajectory:
    """Generate and execute one episode; pure function of (cfg, index)."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2, index]))
    difficulty = _schedule_cached(cfg)[index]
    world = worlds[index % len(worlds)]
    spec = sample_episode_spec(
        world, difficulty, rng, cfg.max_steps[difficulty], cfg.max_sample_tries
    )
    spec = replace(spec, index=index)
    factor = cfg.budget_factor if cfg.expert == EXPERT_NOISY else None
    return collect_episode(world, spec, cfg.expert, cfg.expert_eps, rng, budget_factor=factor)


def generate_dataset(cfg: GenerationConfig, jobs: int = 1) -> Dataset:
    """All episodes for a split, ordered by index regardless of parallelism."""
    worlds = make_worlds(cfg)
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            trajectories = list(
                pool.map(_generate_episode_job, [(cfg, i) for i in range(cfg.episodes)],
                         chunksize=max(1, cfg.episodes // (jobs * 4)))
            )
    else:
        trajectories = [generate_episode(cfg, worlds, i) for i in range(cfg.episodes)]
    manifest = DatasetManifest(
        version=DATASET_FORMAT_VERSION,
        global_seed=cfg.seed,
        split=cfg.split,
        world_n=cfg.world_n,
        world_loop_p=cfg.world_loop_p,
        counts=_count_map(trajectories),
        episodes=len(trajectories),
    )
    return Dataset(manifest=manifest, trajectories=trajectories,
                   _worlds={w.seed: w for w in worlds})


def _generate_episode_job(args: tuple[GenerationConfig, int]) -> Trajectory:
    cfg, index = args
    worlds = _worlds_cached(cfg)
    return generate_episode(cfg, worlds, index)


_WORLD_POOL_CACHE: dict = {}


def _worlds_cached(cfg: GenerationConfig) -> list[World]:
    key = (cfg.seed, cfg.world_salt, cfg.n_worlds, cfg.world_n, cfg.world_loop_p)
    if key not in _WORLD_POOL_CACHE:
        _WORLD_POOL_CACHE[key] = make_worlds(cfg)
    return _WORLD_POOL_CACHE[key]


def _count_map(trajectories: list[Trajectory]) -> dict[str, int]:
    counts: Counter = Counter()
    for t in trajectories:
        counts[f"{t.spec.category}/{t.spec.difficulty}"] += 1
        if t.success:
            counts[f"{t.spec.category}/{t.spec.difficulty}/successful"] += 1
    return dict(sorted(counts.items()))


def filtered_dataset(dataset: Dataset) -> Dataset:
    """Successful trajectories only, with the manifest counts recomputed."""
    kept = filter_successful(dataset.trajectories)
    manifest = DatasetManifest(
        version=dataset.manifest.version,
        global_seed=dataset.manifest.global_seed,
        split=dataset.manifest.split,
        world_n=dataset.manifest.world_n,
        world_loop_p=dataset.manifest.world_loop_p,
        counts=_count_map(kept),
        episodes=len(kept),
    )
    return Dataset(manifest=manifest, trajectories=kept, _worlds=dataset._worlds)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _pose_to_list(p: Pose) -> list:
    return [p.x, p.y, p.heading]


def _pose_from_list(v) -> Pose:
    return Pose(float(v[0]), float(v[1]), int(v[2]))


def serialize_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write NDJSON: a schema-versioned header line, then one episode per line."""
    path = Path(path)
    m = dataset.manifest
    header = {
        "format": "gridnav-dataset",
        "version": m.version,
        "global_seed": m.global_seed,
        "split": m.split,
        "world_n": m.world_n,
        "world_loop_p": m.world_loop_p,
        "episodes": m.episodes,
        "counts": m.counts,
    }
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for t in dataset.trajectories:
            record = {
                "index": t.spec.index,
                "world_seed": t.spec.world_seed,
                "start": _pose_to_list(t.spec.start),
                "goal": _pose_to_list(t.spec.goal),
                "category": t.spec.category,
                "difficulty": t.spec.difficulty,
                "max_steps": t.spec.max_steps,
                "geodesic": t.spec.geodesic,
                "euclid": t.spec.euclid,
                "expert": t.expert,
                "actions": t.actions,
                "poses": [_pose_to_list(p) for p in t.poses],
                "success": t.success,
            }
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def load_dataset(path: str | Path, validate: bool = True) -> Dataset:
    """Load a dataset file; by default re-replays every record exactly."""
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}: empty dataset file")
    header = json.loads(lines[0])
    if header.get("format") != "gridnav-dataset":
        raise DatasetFormatError(f"{path}: not a gridnav dataset")
    if header.get("version") != DATASET_FORMAT_VERSION:
        raise DatasetFormatError(
            f"{path}: unsupported version {header.get('version')}, "
            f"expected {DATASET_FORMAT_VERSION}"
        )
    manifest = DatasetManifest(
        version=header["version"],
        global_seed=header["global_seed"],
        split=header["split"],
        world_n=header["world_n"],
        world_loop_p=header["world_loop_p"],
        counts=header.get("counts", {}),
        episodes=header.get("episodes", 0),
    )
    dataset = Dataset(manifest=manifest, trajectories=[])
    for lineno, line in enumerate(lines[1:]):
        rec = json.loads(line)
        try:
            actions = [int(a) for a in rec["actions"]]
            if any(a not in (0, 1, 2, 3) for a in actions):
                raise DatasetFormatError(
                    f"record {lineno}: invalid action id in {actions}"
                )
            spec = EpisodeSpec(
                world_seed=rec["world_seed"],
                start=_pose_from_list(rec["start"]),
                goal=_pose_from_list(rec["goal"]),
                category=rec["category"],
                difficulty=rec["difficulty"],
                max_steps=rec["max_steps"],
                geodesic=rec["geodesic"],
                euclid=rec["euclid"],
                index=rec["index"],
            )
            traj = Trajectory(
                spec=spec,
                actions=actions,
                poses=[_pose_from_list(p) for p in rec["poses"]],
                success=bool(rec["success"]),
                expert=rec["expert"],
            )
        except DatasetFormatError:
            raise
        except (KeyError, ValueError, TypeError) as exc:
            raise DatasetFormatError(f"record {lineno}: malformed ({exc})") from exc
        if len(traj.poses) != len(traj.actions) + 1:
            raise DatasetFormatError(
                f"record {lineno}: {len(traj.poses)} poses for {len(traj.actions)} actions"
            )
        if validate and not traj.replays_exactly(dataset.world_for(traj)):
            raise DatasetFormatError(f"record {lineno}: replay mismatch")
        dataset.trajectories.append(traj)
    if manifest.episodes != len(dataset.trajectories):
        raise DatasetFormatError(
            f"{path}: header claims {manifest.episodes} episodes, "
            f"found {len(dataset.trajectories)}"
        )
    if validate and manifest.counts != _count_map(dataset.trajectories):
        raise DatasetFormatError(f"{path}: header counts do not match records")
    return dataset
