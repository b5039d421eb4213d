"""Offline expert-match accuracy and online autoregressive rollouts.

Offline: teacher-forced inference over non-overlapping windows of expert
trajectories, scored against the expert's actions, aggregated overall and by
window start index (accuracy tends to dip mid-trajectory, which is why the
per-start breakdown exists).

Online: the agent keeps a FIFO buffer of the last T (observation, action)
pairs, feeds it through the policy with the goal image, samples the next
action (top-k), and steps the environment until STOP or the step budget.
Success and SPL follow the standard navigation metrics; the SPL reference
length is the optimal planner route's translation distance, the tightest
length any policy in this action space can achieve.
"""

from __future__ import annotations

import csv
import json
from collections import Counter, deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Dataset, EpisodeSpec, Trajectory
from .env import (
    CELL_SIZE,
    Action,
    Pose,
    World,
    is_success,
    render_observation,
    step,
)
from .model import DecoderModel
from .planner import plan_shortest_path

REPORT_VERSION = 1
DEFAULT_STEP_BUDGETS = {"easy": 100, "medium": 350, "hard": 350}
LENGTH_HISTOGRAM_BIN = 5


# ---------------------------------------------------------------------------
# policies
# ---------------------------------------------------------------------------

class ModelPolicy:
    """Teacher-forced window predictions and rollout sampling for a model."""

    def __init__(self, model: DecoderModel, k: int | None = None):
        self.model = model
        self.k = model.config.top_k if k is None else k

    def predict_window(self, goal_obs, observations, actions) -> list[int]:
        logits = self.model.forward(goal_obs, observations, actions)
        out = logits.data.copy()
        out[:, 4:] = -np.inf  # SOS and any padding ids are never legal
        return [int(i) for i in np.argmax(out, axis=1)]

    def act(self, goal_obs, observations, action_history, rng) -> int:
        logits = self.model.forward(goal_obs, observations, action_history)
        return self.model.sample_action(logits.data[-1], mode="top_k", rng=rng, k=self.k)


class RandomPolicy:
    """Uniform over the 4 environment actions; the floor baseline."""

    def __init__(self, n_actions: int = 4):
        self.n_actions = n_actions
        self._offline_rng = np.random.default_rng(0)

    def predict_window(self, goal_obs, observations, actions) -> list[int]:
        return [int(a) for a in self._offline_rng.integers(0, self.n_actions, len(actions))]

    def act(self, goal_obs, observations, action_history, rng) -> int:
        return int(rng.integers(0, self.n_actions))


class ConstantPolicy:
    def __init__(self, action: int):
        self.action = int(action)

    def predict_window(self, goal_obs, observations, actions) -> list[int]:
        return [self.action] * len(actions)

    def act(self, goal_obs, observations, action_history, rng) -> int:
        return self.action


class OraclePolicy:
    """Echoes the expert actions it is scored against; the ceiling baseline."""

    def predict_window(self, goal_obs, observations, actions) -> list[int]:
        return [int(a) for a in actions]


# ---------------------------------------------------------------------------
# offline window accuracy
# ---------------------------------------------------------------------------

@dataclass
class WindowReport:
    context: int
    overall_accuracy: float
    total_steps: int
    per_split: dict = field(default_factory=dict)  # (category, difficulty) -> dict
    per_start: dict = field(default_factory=dict)  # (category, difficulty, start) -> dict


def iter_windows(n: int, context: int):
    """Non-overlapping [start, end) windows partitioning ``n`` steps."""
    for start in range(0, n, context):
        yield start, min(start + context, n)


def offline_window_rows(policy, dataset: Dataset, context: int) -> list[dict]:
    """Per-window prediction outcomes; the raw log every report derives from."""
    rows = []
    for traj in dataset.trajectories:
        world = dataset.world_for(traj)
        goal_obs = render_observation(world, traj.spec.goal)
        window_lengths = 0
        for start, end in iter_windows(len(traj.actions), context):
            obs = [render_observation(world, traj.poses[t]) for t in range(start, end)]
            acts = traj.actions[start:end]
            preds = policy.predict_window(goal_obs, obs, acts)
            hits = sum(int(p == a) for p, a in zip(preds, acts))
            window_lengths += end - start
            rows.append(
                {
                    "index": traj.spec.index,
                    "category": traj.spec.category,
                    "difficulty": traj.spec.difficulty,
                    "start": start,
                    "steps": end - start,
                    "hits": hits,
                }
            )
        assert window_lengths == len(traj.actions)  # windows partition the trajectory
    return rows


def window_report_from_rows(rows: list[dict], context: int) -> WindowReport:
    step_totals: Counter = Counter()
    step_correct: Counter = Counter()
    start_accs: dict = {}
    total = correct = 0
    for row in rows:
        key = (row["category"], row["difficulty"])
        total += row["steps"]
        correct += row["hits"]
        step_totals[key] += row["steps"]
        step_correct[key] += row["hits"]
        start_accs.setdefault((*key, row["start"]), []).append(row["hits"] / row["steps"])
    per_split = {
        key: {
            "accuracy": step_correct[key] / step_totals[key],
            "steps": step_totals[key],
        }
        for key in step_totals
    }
    per_start = {
        key: {
            "mean": float(np.mean(v)),
            "variance": float(np.var(v)),
            "windows": len(v),
        }
        for key, v in sorted(start_accs.items())
    }
    return WindowReport(
        context=context,
        overall_accuracy=correct / total if total else 0.0,
        total_steps=total,
        per_split=per_split,
        per_start=per_start,
    )


def offline_window_accuracy(policy, dataset: Dataset, context: int) -> WindowReport:
    """Teacher-forced accuracy against expert actions over window partitions."""
    return window_report_from_rows(offline_window_rows(policy, dataset, context), context)


def write_window_log(rows: list[dict], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": "gridnav-window-log", "version": REPORT_VERSION},
                            separators=(",", ":")) + "\n")
        for row in rows:
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")


def read_window_log(path: str | Path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = json.loads(lines[0])
    if header.get("format") != "gridnav-window-log":
        raise ValueError(f"{path}: not a window log")
    return [json.loads(line) for line in lines[1:]]


def trajectory_length_histogram(
    trajectories: list[Trajectory], bin_width: int = LENGTH_HISTOGRAM_BIN
) -> dict:
    """Binned episode-length counts per (category, difficulty)."""
    hist: dict = {}
    for traj in trajectories:
        key = (traj.spec.category, traj.spec.difficulty)
        bin_lo = (len(traj.actions) // bin_width) * bin_width
        hist.setdefault(key, Counter())[bin_lo] += 1
    return hist


# ---------------------------------------------------------------------------
# online rollout
# ---------------------------------------------------------------------------

class ContextBuffer:
    """FIFO of (observation, action) pairs with capacity T."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._pairs: deque = deque(maxlen=capacity)

    def push_observation(self, obs) -> None:
        self._pairs.append([obs, None])

    def set_last_action(self, action: int) -> None:
        self._pairs[-1][1] = int(action)

    @property
    def observations(self) -> list:
        return [o for o, _ in self._pairs]

    @property
    def action_history(self) -> list[int]:
        return [a for _, a in list(self._pairs)[:-1]]

    def __len__(self) -> int:
        return len(self._pairs)


@dataclass
class RolloutResult:
    index: int
    category: str
    difficulty: str
    success: bool
    path_length: float
    shortest_length: float
    steps: int
    actions: list[int]
    final_pose: Pose
    max_buffer: int = 0


def online_rollout(
    policy,
    world: World,
    spec: EpisodeSpec,
    context: int,
    max_steps: int,
    rng: np.random.Generator,
) -> RolloutResult:
    """Autoregressive episode: FIFO context, sampled actions, env stepping."""
    goal_obs = render_observation(world, spec.goal)
    buffer = ContextBuffer(context)
    pose = spec.start
    actions: list[int] = []
    path_length = 0.0
    max_buffer = 0
    shortest = CELL_SIZE * sum(
        1 for a in plan_shortest_path(world, spec.start, spec.goal) if a == Action.MOVE_FORWARD
    )
    done = False
    while not done and len(actions) < max_steps:
        buffer.push_observation(render_observation(world, pose))
        max_buffer = max(max_buffer, len(buffer))
        action = policy.act(goal_obs, buffer.observations, buffer.action_history, rng)
        buffer.set_last_action(action)
        new_pose, done = step(world, pose, Action(action))
        if action == Action.MOVE_FORWARD and new_pose != pose:
            path_length += CELL_SIZE
        pose = new_pose
        actions.append(int(action))
    called_stop = bool(actions) and actions[-1] == Action.STOP
    return RolloutResult(
        index=spec.index,
        category=spec.category,
        difficulty=spec.difficulty,
        success=is_success(world, pose, spec.goal, called_stop),
        path_length=path_length,
        shortest_length=shortest,
        steps=len(actions),
        actions=actions,
        final_pose=pose,
        max_buffer=max_buffer,
    )


def expert_rollout(world: World, spec: EpisodeSpec) -> RolloutResult:
    """The optimal planner driven through the same metrics pipeline."""
    from .dataset import collect_episode

    traj = collect_episode(world, spec, expert="optimal")
    path_length = CELL_SIZE * sum(
        1
        for i, a in enumerate(traj.actions)
        if a == Action.MOVE_FORWARD and traj.poses[i + 1] != traj.poses[i]
    )
    shortest = CELL_SIZE * sum(1 for a in traj.actions if a == Action.MOVE_FORWARD)
    return RolloutResult(
        index=spec.index,
        category=spec.category,
        difficulty=spec.difficulty,
        success=traj.success,
        path_length=path_length,
        shortest_length=shortest,
        steps=len(traj.actions),
        actions=[int(a) for a in traj.actions],
        final_pose=traj.poses[-1],
    )


def compute_success_spl(results) -> tuple[float, float]:
    """(success rate, SPL) over per-episode (success, path, shortest) triples.

    SPL term per episode: S * l / max(p, l).  Requires positive shortest
    lengths; a failed episode contributes 0.
    """
    results = list(results)
    if not results:
        return 0.0, 0.0
    spl_sum = 0.0
    succ_sum = 0.0
    for success, path, shortest in results:
        if shortest <= 0:
            raise ValueError(f"shortest length must be positive, got {shortest}")
        s = 1.0 if success else 0.0
        succ_sum += s
        spl_sum += s * shortest / max(path, shortest)
    return succ_sum / len(results), spl_sum / len(results)


@dataclass
class RolloutReport:
    policy: str
    episodes: int
    success_rate: float
    spl: float
    per_split: dict = field(default_factory=dict)  # (category, difficulty) -> dict


def summarize_rollouts(policy_name: str, results: list[RolloutResult]) -> RolloutReport:
    overall = compute_success_spl(
        (r.success, r.path_length, r.shortest_length) for r in results
    )
    per_split: dict = {}
    groups: dict = {}
    for r in results:
        groups.setdefault((r.category, r.difficulty), []).append(r)
    for key, rs in sorted(groups.items()):
        sr, spl = compute_success_spl((r.success, r.path_length, r.shortest_length) for r in rs)
        per_split[key] = {
            "episodes": len(rs),
            "success_rate": sr,
            "spl": spl,
            "mean_steps": float(np.mean([r.steps for r in rs])),
        }
    return RolloutReport(
        policy=policy_name,
        episodes=len(results),
        success_rate=overall[0],
        spl=overall[1],
        per_split=per_split,
    )


def rollout_dataset_episodes(
    policy,
    dataset: Dataset,
    context: int,
    seed: int = 0,
    budgets: dict | None = None,
    episodes: list[int] | None = None,
) -> list[RolloutResult]:
    """Roll the policy over episode specs from a dataset, by episode index.

    Each episode draws its own rng from (seed, index) so results do not
    depend on evaluation order or parallelism.
    """
    budgets = dict(DEFAULT_STEP_BUDGETS if budgets is None else budgets)
    specs = [t.spec for t in dataset.trajectories]
    if episodes is not None:
        specs = [specs[i] for i in episodes]
    results = []
    for spec in specs:
        world = dataset._worlds.get(spec.world_seed)
        if world is None:
            from .env import generate_world

            world = generate_world(
                spec.world_seed, dataset.manifest.world_n, dataset.manifest.world_loop_p
            )
            dataset._worlds[spec.world_seed] = world
        rng = np.random.default_rng(np.random.SeedSequence([seed, 31, spec.index]))
        results.append(
            online_rollout(policy, world, spec, context, budgets[spec.difficulty], rng)
        )
    return results


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

def write_window_accuracy_csv(report: WindowReport, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "difficulty", "start_index", "accuracy", "variance", "windows"])
        for (category, difficulty), stats in sorted(report.per_split.items()):
            writer.writerow(
                [category, difficulty, "all", repr(stats["accuracy"]), "", stats["steps"]]
            )
        for (category, difficulty, start), stats in report.per_start.items():
            writer.writerow(
                [
                    category,
                    difficulty,
                    start,
                    repr(stats["mean"]),
                    repr(stats["variance"]),
                    stats["windows"],
                ]
            )


def write_rollout_results_csv(reports: list[RolloutReport], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["policy", "split", "difficulty", "episodes", "success_rate", "spl", "mean_steps"]
        )
        for report in reports:
            writer.writerow(
                [
                    report.policy,
                    "all",
                    "all",
                    report.episodes,
                    repr(report.success_rate),
                    repr(report.spl),
                    "",
                ]
            )
            for (category, difficulty), stats in report.per_split.items():
                writer.writerow(
                    [
                        report.policy,
                        category,
                        difficulty,
                        stats["episodes"],
                        repr(stats["success_rate"]),
                        repr(stats["spl"]),
                        repr(stats["mean_steps"]),
                    ]
                )


def write_length_histogram_csv(hist: dict, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "difficulty", "bin_lo", "bin_hi", "count"])
        for (category, difficulty), counts in sorted(hist.items()):
            for bin_lo in sorted(counts):
                writer.writerow(
                    [category, difficulty, bin_lo, bin_lo + LENGTH_HISTOGRAM_BIN, counts[bin_lo]]
                )


def write_rollout_log(results: list[RolloutResult], path: str | Path) -> None:
    """Per-episode NDJSON log, sufficient to rebuild every report row."""
    with Path(path).open("w", encoding="utf-8") as fh:
        header = {"format": "gridnav-rollout-log", "version": REPORT_VERSION}
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for r in results:
            fh.write(
                json.dumps(
                    {
                        "index": r.index,
                        "category": r.category,
                        "difficulty": r.difficulty,
                        "success": r.success,
                        "path_length": r.path_length,
                        "shortest_length": r.shortest_length,
                        "steps": r.steps,
                        "actions": r.actions,
                        "final_pose": [r.final_pose.x, r.final_pose.y, r.final_pose.heading],
                    },
                    separators=(",", ":"),
                )
                + "\n"
            )


def read_rollout_log(path: str | Path) -> list[RolloutResult]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = json.loads(lines[0])
    if header.get("format") != "gridnav-rollout-log":
        raise ValueError(f"{path}: not a rollout log")
    out = []
    for line in lines[1:]:
        rec = json.loads(line)
        out.append(
            RolloutResult(
                index=rec["index"],
                category=rec["category"],
                difficulty=rec["difficulty"],
                success=rec["success"],
                path_length=rec["path_length"],
                shortest_length=rec["shortest_length"],
                steps=rec["steps"],
                actions=rec["actions"],
                final_pose=Pose(*rec["final_pose"][:2], int(rec["final_pose"][2])),
            )
        )
    return out


def report_json(
    window_report: WindowReport | None,
    rollout_reports: list[RolloutReport],
    histogram: dict | None,
) -> dict:
    """Combined machine-readable report (schema-versioned)."""
    body: dict = {"format": "gridnav-report", "version": REPORT_VERSION}
    if window_report is not None:
        body["offline"] = {
            "context": window_report.context,
            "overall_accuracy": window_report.overall_accuracy,
            "total_steps": window_report.total_steps,
            "per_split": {
                f"{c}/{d}": stats for (c, d), stats in sorted(window_report.per_split.items())
            },
            "per_start": {
                f"{c}/{d}/{s}": stats for (c, d, s), stats in window_report.per_start.items()
            },
        }
    if rollout_reports:
        body["online"] = [
            {
                "policy": r.policy,
                "episodes": r.episodes,
                "success_rate": r.success_rate,
                "spl": r.spl,
                "per_split": {f"{c}/{d}": stats for (c, d), stats in r.per_split.items()},
            }
            for r in rollout_reports
        ]
    if histogram is not None:
        body["length_histogram"] = {
            f"{c}/{d}": dict(sorted(counts.items())) for (c, d), counts in sorted(histogram.items())
        }
    return body
