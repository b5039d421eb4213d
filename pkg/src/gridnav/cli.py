"""Command line surface: generate / train / eval / report.

Every command is a pure function of (config, seed) apart from a single
``created_at`` field isolated in config.resolved.json.  ``--jobs N`` only
parallelizes embarrassingly parallel episode work (generation, rollouts)
with per-episode derived rngs, so N=1 and N=8 produce identical bytes.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import os

# Pin BLAS threading before numpy loads anywhere below: identical reduction
# partitioning is part of the bitwise-determinism contract.
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import argparse
import copy
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from .dataset import (
    Dataset,
    GenerationConfig,
    count_table,
    filtered_dataset,
    generate_dataset,
    load_dataset,
    serialize_dataset,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DatasetFormatError,
    GridNavError,
    NumericError,
    PlanningError,
)
from .evaluation import (
    ModelPolicy,
    RandomPolicy,
    expert_rollout,
    online_rollout,
    read_rollout_log,
    read_window_log,
    offline_window_rows,
    report_json,
    summarize_rollouts,
    trajectory_length_histogram,
    window_report_from_rows,
    write_length_histogram_csv,
    write_rollout_log,
    write_rollout_results_csv,
    write_window_accuracy_csv,
    write_window_log,
)
from .model import DecoderModel, ModelConfig
from .training import TrainConfig, load_train_checkpoint, train

OUT_ROOT_ENV = "GRIDNAV_OUT_ROOT"

DEFAULTS: dict = {
    "seed": 0,
    "world": {"n": 48, "loop_p": 0.08, "train_worlds": 8, "test_worlds": 4},
    "episodes": {
        "train": 2000,
        "test": 300,
        "difficulty_mix": {"easy": 1 / 3, "medium": 1 / 3, "hard": 1 / 3},
        "train_expert_eps": 0.2,
        "budget_factor": 1.5,
        "max_steps": {"easy": 100, "medium": 350, "hard": 350},
    },
    "model": {
        "layers": 4,
        "heads": 4,
        "d_model": 128,
        "d_ffn": 256,
        "context": 8,
        "obs_feature_dim": 128,
        "mlp_hidden": 128,
        "top_k": 2,
        "activation": "gelu",
        "use_bias": True,
        "head_width": "split",
    },
    "train": {
        "batch_size": 16,
        "epochs": 20,
        "lr0": 1e-4,
        "weight_decay": 0.01,
        "lr_decay": 0.9,
        "grad_clip": 1.0,
    },
    "eval": {
        "budgets": {"easy": 100, "medium": 350, "hard": 350},
        "max_episodes": 0,  # 0 = every episode in the test set
    },
}

PROFILES: dict = {
    "desk": {},  # the defaults
    "smoke": {
        "world": {"n": 32, "train_worlds": 2, "test_worlds": 1},
        "episodes": {"train": 40, "test": 10},
        "model": {
            "layers": 2,
            "heads": 2,
            "d_model": 32,
            "d_ffn": 64,
            "obs_feature_dim": 32,
            "mlp_hidden": 32,
        },
        "train": {"epochs": 2, "batch_size": 8},
        "eval": {"max_episodes": 5},
    },
    "paper": {
        "model": {
            "layers": 12,
            "heads": 8,
            "d_model": 384,
            "d_ffn": 1024,
            "obs_feature_dim": 512,
            "mlp_hidden": 512,
        },
    },
}


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

def _merge(base: dict, overlay: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in overlay.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where} expects a table")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def _coerce(text: str, like) -> object:
    if isinstance(like, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def _apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override must look like key=value, got {assignment!r}")
    dotted, text = assignment.split("=", 1)
    keys = dotted.split(".")
    node = cfg
    for key in keys[:-1]:
        if key not in node or not isinstance(node[key], dict):
            raise ConfigError(f"unknown config key: {dotted}")
        node = node[key]
    leaf = keys[-1]
    if leaf not in node:
        raise ConfigError(f"unknown config key: {dotted}")
    if isinstance(node[leaf], dict):
        raise ConfigError(f"config key {dotted} is a table, not a value")
    node[leaf] = _coerce(text, node[leaf])


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    profile = getattr(args, "profile", None) or "desk"
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r} (choose from {sorted(PROFILES)})")
    cfg = _merge(cfg, PROFILES[profile])
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise DatasetFormatError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: invalid JSON ({exc})") from exc
        cfg = _merge(cfg, file_cfg)
    for assignment in getattr(args, "set", None) or []:
        _apply_override(cfg, assignment)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = int(args.seed)
    cfg["profile"] = profile
    return cfg


def write_resolved_config(cfg: dict, out_dir: Path) -> None:
    body = dict(cfg)
    body["created_at"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.json").write_text(
        json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def out_dir_for(args) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    root = os.environ.get(OUT_ROOT_ENV, "runs")
    return Path(root) / args.command


def model_config_from(cfg: dict) -> ModelConfig:
    return ModelConfig(**cfg["model"])


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def _generation_config(cfg: dict, split: str) -> GenerationConfig:
    eps = cfg["episodes"]["train_expert_eps"]
    if split == "train":
        expert = "noisy" if eps > 0 else "optimal"
        episodes = cfg["episodes"]["train"]
        n_worlds, salt = cfg["world"]["train_worlds"], 1
    else:
        expert = "optimal"  # the held-out reference is the clean expert
        episodes = cfg["episodes"]["test"]
        n_worlds, salt = cfg["world"]["test_worlds"], 3
    return GenerationConfig(
        seed=cfg["seed"],
        split=split,
        episodes=episodes,
        n_worlds=n_worlds,
        world_n=cfg["world"]["n"],
        world_loop_p=cfg["world"]["loop_p"],
        world_salt=salt,
        difficulty_mix=dict(cfg["episodes"]["difficulty_mix"]),
        expert=expert,
        expert_eps=eps,
        budget_factor=cfg["episodes"]["budget_factor"],
        max_steps=dict(cfg["episodes"]["max_steps"]),
    )


def write_counts_csv(rows: list[dict], path: Path) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["split", "difficulty", "total", "successful", "percent"]
        )
        writer.writeheader()
        writer.writerows(rows)


def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    out = out_dir_for(args)
    write_resolved_config(cfg, out)
    jobs = max(1, args.jobs)
    counts_rows = []
    empty = False
    for split in ("train", "test"):
        gen_cfg = _generation_config(cfg, split)
        data = generate_dataset(gen_cfg, jobs=jobs)
        for row in count_table(data.trajectories):
            row["split"] = f"{split}/{row['split']}"
            counts_rows.append(row)
        kept = filtered_dataset(data)
        serialize_dataset(kept, out / f"{split}.ndjson")
        print(f"{split}: collected {len(data)} episodes, kept {len(kept)} successful")
        if split == "train" and len(kept) == 0:
            empty = True
    write_counts_csv(counts_rows, out / "counts.csv")
    if empty:
        print("error: success filtering left zero training episodes", file=sys.stderr)
        return 3
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = out_dir_for(args)
    write_resolved_config(cfg, out)
    dataset_path = Path(args.dataset) if args.dataset else out.parent / "generate" / "train.ndjson"
    if not dataset_path.exists():
        raise DatasetFormatError(f"dataset not found: {dataset_path}")
    dataset = load_dataset(dataset_path, validate=not args.no_validate)

    resume_body = None
    if args.resume:
        model, resume_body = load_train_checkpoint(args.resume)
        if not resume_body:
            raise CheckpointError(f"{args.resume}: not a trainer checkpoint, cannot resume")
    else:
        model = DecoderModel(model_config_from(cfg), seed=cfg["seed"])
    train_cfg = TrainConfig(seed=cfg["seed"], **cfg["train"])
    print(
        f"training {model.trainable_parameter_count():,} parameters on "
        f"{len(dataset)} trajectories (lr0={train_cfg.lr0}, epochs={train_cfg.epochs})"
    )
    result = train(model, dataset, train_cfg, out_dir=out, resume=resume_body, log=print)
    print(f"final checkpoint: {result.final_checkpoint}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

_ROLLOUT_WORKER_CACHE: dict = {}


def _rollout_one(task: tuple) -> "object":
    (ckpt, dataset_path, policy_name, context, seed, budgets, index) = task
    key = (ckpt, dataset_path)
    if key not in _ROLLOUT_WORKER_CACHE:
        data = load_dataset(dataset_path, validate=False)
        model = load_train_checkpoint(ckpt)[0] if ckpt else None
        _ROLLOUT_WORKER_CACHE[key] = (data, model)
    data, model = _ROLLOUT_WORKER_CACHE[key]
    traj = data.trajectories[index]
    world = data.world_for(traj)
    spec = traj.spec
    if policy_name == "expert":
        return expert_rollout(world, spec)
    policy = ModelPolicy(model) if policy_name == "model" else RandomPolicy()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 31, spec.index]))
    return online_rollout(policy, world, spec, context, budgets[spec.difficulty], rng)


def _run_rollouts(ckpt, dataset_path, policy_name, context, seed, budgets, indices, jobs):
    tasks = [
        (ckpt if policy_name == "model" else None, str(dataset_path), policy_name,
         context, seed, dict(budgets), i)
        for i in indices
    ]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_rollout_one, tasks, chunksize=max(1, len(tasks) // (jobs * 4))))
    return [_rollout_one(t) for t in tasks]


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    out = out_dir_for(args)
    write_resolved_config(cfg, out)
    if not (args.offline or args.online):
        raise ConfigError("eval requires at least one of --offline / --online")
    dataset_path = Path(args.dataset) if args.dataset else out.parent / "generate" / "test.ndjson"
    if not dataset_path.exists():
        raise DatasetFormatError(f"dataset not found: {dataset_path}")
    ckpt = args.checkpoint
    if ckpt is None:
        raise ConfigError("eval requires --checkpoint")
    model, _ = load_train_checkpoint(ckpt)
    if args.context and args.context != model.config.context:
        raise ConfigError(
            f"requested context {args.context} != checkpoint context "
            f"{model.config.context}"
        )
    context = model.config.context
    dataset = load_dataset(dataset_path, validate=not args.no_validate)

    window_report = None
    rollout_reports = []
    histogram = trajectory_length_histogram(dataset.trajectories)
    write_length_histogram_csv(histogram, out / "length_histogram.csv")

    if args.offline:
        rows = offline_window_rows(ModelPolicy(model), dataset, context)
        write_window_log(rows, out / "offline_windows.ndjson")
        window_report = window_report_from_rows(rows, context)
        write_window_accuracy_csv(window_report, out / "window_accuracy.csv")
        print(f"offline window accuracy: {window_report.overall_accuracy:.4f}")

    if args.online:
        limit = cfg["eval"]["max_episodes"]
        indices = list(range(len(dataset)))
        if limit:
            indices = indices[:limit]
        budgets = cfg["eval"]["budgets"]
        policies = ["model"] + list(args.baseline or [])
        for policy_name in policies:
            results = _run_rollouts(
                ckpt, dataset_path, policy_name, context, cfg["seed"], budgets,
                indices, max(1, args.jobs),
            )
            write_rollout_log(results, out / f"rollouts_{policy_name}.ndjson")
            report = summarize_rollouts(policy_name, results)
            rollout_reports.append(report)
            print(
                f"online [{policy_name}]: success={report.success_rate:.3f} "
                f"spl={report.spl:.3f} over {report.episodes} episodes"
            )
        write_rollout_results_csv(rollout_reports, out / "rollout_results.csv")

    body = report_json(window_report, rollout_reports, histogram)
    (out / "report.json").write_text(
        json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def cmd_report(args) -> int:
    src = Path(args.run_dir)
    if not src.exists():
        raise DatasetFormatError(f"run directory not found: {src}")
    out = Path(args.out) if args.out else src
    out.mkdir(parents=True, exist_ok=True)
    wrote = []
    window_log = src / "offline_windows.ndjson"
    if window_log.exists():
        rows = read_window_log(window_log)
        report = window_report_from_rows(rows, context=0)
        write_window_accuracy_csv(report, out / "window_accuracy.csv")
        wrote.append("window_accuracy.csv")
    reports = []
    for log in sorted(src.glob("rollouts_*.ndjson")):
        name = log.stem.replace("rollouts_", "")
        reports.append(summarize_rollouts(name, read_rollout_log(log)))
    if reports:
        write_rollout_results_csv(reports, out / "rollout_results.csv")
        wrote.append("rollout_results.csv")
    if not wrote:
        raise DatasetFormatError(f"{src}: no per-episode logs to report from")
    print(f"re-rendered: {', '.join(wrote)}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridnav",
        description="goal-conditioned decoder navigation: data, training, evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file merged over the defaults")
        p.add_argument("--seed", type=int, help="global seed (overrides config)")
        p.add_argument("--out", help=f"output directory (default: ${OUT_ROOT_ENV}/<command>)")
        p.add_argument("--profile", choices=sorted(PROFILES), default="desk",
                       help="named preset: smoke (tiny/fast), desk (default), paper (full size)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted config override, e.g. --set train.epochs=5")
        p.add_argument("--jobs", type=int, default=1,
                       help="parallel workers for episode generation/rollouts")

    p_gen = sub.add_parser("generate", help="generate worlds and expert datasets")
    common(p_gen)

    p_train = sub.add_parser("train", help="behavior-clone the decoder on a dataset")
    common(p_train)
    p_train.add_argument("--dataset", help="training dataset (default <out>/../generate/train.ndjson)")
    p_train.add_argument("--resume", help="trainer checkpoint to continue from")
    p_train.add_argument("--no-validate", action="store_true",
                         help="skip replay validation when loading the dataset")

    p_eval = sub.add_parser("eval", help="offline window accuracy and online rollouts")
    common(p_eval)
    p_eval.add_argument("--checkpoint", help="model or trainer checkpoint to evaluate")
    p_eval.add_argument("--dataset", help="test dataset (default <out>/../generate/test.ndjson)")
    p_eval.add_argument("--offline", action="store_true", help="teacher-forced window accuracy")
    p_eval.add_argument("--online", action="store_true", help="autoregressive rollouts")
    p_eval.add_argument("--baseline", action="append", choices=["random", "expert"],
                        help="extra rollout baselines (repeatable)")
    p_eval.add_argument("--context", type=int, default=0,
                        help="expected context length; must match the checkpoint")
    p_eval.add_argument("--no-validate", action="store_true",
                        help="skip replay validation when loading the dataset")

    p_rep = sub.add_parser("report", help="re-render CSV tables from per-episode logs")
    p_rep.add_argument("run_dir", help="directory containing eval logs")
    p_rep.add_argument("--out", help="where to write the CSVs (default: run_dir)")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "generate":
            return cmd_generate(args)
        if args.command == "train":
            return cmd_train(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "report":
            return cmd_report(args)
        parser.error(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DatasetFormatError, CheckpointError, PlanningError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except GridNavError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
