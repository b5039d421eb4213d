"""Behavior-cloning trainer: AdamW, epoch-decayed LR, per-epoch checkpoints.

Each epoch makes one pass over the filtered trajectories in a shuffled
order, sampling one context window per trajectory.  Windows shorter than
the context are padded at the loss level with an ignore index, so short
(easy) episodes still train without fake timesteps.
"""

from __future__ import annotations

import base64
import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import Dataset, TrainingWindow, sample_training_window
from .errors import CheckpointError, NumericError
from .model import (
    CHECKPOINT_FORMAT,
    CHECKPOINT_VERSION,
    DecoderModel,
    checkpoint_dict,
    model_from_checkpoint_dict,
)

IGNORE_INDEX = -1
TRAIN_CHECKPOINT_FORMAT = "gridnav-train-checkpoint"


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 20
    lr0: float = 1e-4
    weight_decay: float = 0.01
    lr_decay: float = 0.9
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    """Geometric epoch-wise decay from the initial rate."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return cfg.lr0 * cfg.lr_decay**epoch


class AdamW:
    """Adam with decoupled weight decay (decay applied directly to weights)."""

    def __init__(
        self,
        named_params: list[tuple[str, Tensor]],
        weight_decay: float = 0.01,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.named_params = named_params
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in named_params}
        self.v = {name: np.zeros_like(t.data) for name, t in named_params}

    def step(self, lr: float) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for name, p in self.named_params:
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            # decoupled decay, separate from the moment update
            p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_dict(self) -> dict:
        def pack(arr):
            return {
                "shape": list(arr.shape),
                "data": base64.b64encode(np.ascontiguousarray(arr).tobytes()).decode("ascii"),
            }

        return {
            "step_count": self.step_count,
            "weight_decay": self.weight_decay,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "m": {k: pack(v) for k, v in self.m.items()},
            "v": {k: pack(v) for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        def unpack(payload):
            raw = base64.b64decode(payload["data"])
            return np.frombuffer(raw, dtype=np.float64).reshape(payload["shape"]).copy()

        self.step_count = state["step_count"]
        self.weight_decay = state["weight_decay"]
        self.beta1, self.beta2, self.eps = state["beta1"], state["beta2"], state["eps"]
        self.m = {k: unpack(v) for k, v in state["m"].items()}
        self.v = {k: unpack(v) for k, v in state["v"].items()}


def global_grad_norm(params: list[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return math.sqrt(total)


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale all gradients so their global norm is at most ``max_norm``."""
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


@dataclass
class Batch:
    windows: list[TrainingWindow]
    targets: np.ndarray  # [B, T] padded with IGNORE_INDEX

    @property
    def real_steps(self) -> int:
        return int((self.targets != IGNORE_INDEX).sum())


def make_batch(
    dataset: Dataset,
    indices,
    context: int,
    rng: np.random.Generator,
) -> Batch:
    """One training window per trajectory index, targets padded to context."""
    windows = []
    targets = np.full((len(indices), context), IGNORE_INDEX, dtype=np.int64)
    for row, idx in enumerate(indices):
        traj = dataset.trajectories[int(idx)]
        win = sample_training_window(dataset.world_for(traj), traj, context, rng)
        windows.append(win)
        targets[row, : len(win.actions)] = win.actions
    return Batch(windows=windows, targets=targets)


def batch_loss(model: DecoderModel, batch: Batch) -> tuple[Tensor, float]:
    """Cross-entropy over all real positions in the batch, plus the accuracy."""
    logit_blocks = []
    target_rows = []
    for row, win in enumerate(batch.windows):
        steps = len(win.actions)
        logits = model.forward(win.goal_obs, win.observations, win.actions)
        logit_blocks.append(logits)
        target_rows.append(batch.targets[row, :steps])
    all_logits = logit_blocks[0] if len(logit_blocks) == 1 else ad.concat(logit_blocks, axis=0)
    all_targets = np.concatenate(target_rows)
    loss = ad.cross_entropy(all_logits, all_targets, ignore_index=IGNORE_INDEX)
    valid = all_targets != IGNORE_INDEX
    preds = np.argmax(all_logits.data, axis=1)
    accuracy = float((preds[valid] == all_targets[valid]).mean()) if valid.any() else 0.0
    return loss, accuracy


def train_step(
    model: DecoderModel,
    batch: Batch,
    optimizer: AdamW,
    lr: float,
    grad_clip: float = 1.0,
) -> tuple[float, float]:
    """Forward, backward, clip, AdamW update.  Returns (loss, accuracy)."""
    model.zero_grad()
    loss, accuracy = batch_loss(model, batch)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value} at lr={lr}")
    ad.backward(loss)
    clip_grad_norm(model.parameters(), grad_clip)
    optimizer.step(lr)
    return value, accuracy


@dataclass
class TrainResult:
    metrics: list[dict] = field(default_factory=list)
    checkpoint_paths: list[Path] = field(default_factory=list)
    final_checkpoint: Path | None = None


def save_train_checkpoint(
    model: DecoderModel,
    optimizer: AdamW,
    epoch: int,
    cfg: TrainConfig,
    path: str | Path,
    final: bool = False,
) -> None:
    body = {
        "format": TRAIN_CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "epoch": epoch,
        "final": final,
        "train_config": asdict(cfg),
        "model": checkpoint_dict(model),
        "optimizer": optimizer.state_dict(),
    }
    Path(path).write_text(
        json.dumps(body, sort_keys=True, separators=(",", ":")), encoding="utf-8"
    )


def load_train_checkpoint(path: str | Path) -> tuple[DecoderModel, dict]:
    """Returns the model plus the raw body (optimizer state, epoch, config)."""
    try:
        body = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if body.get("format") == CHECKPOINT_FORMAT:
        # plain model checkpoint: no trainer state
        return model_from_checkpoint_dict(body, source=str(path)), {}
    if body.get("format") != TRAIN_CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a gridnav checkpoint")
    model = model_from_checkpoint_dict(body["model"], source=str(path))
    return model, body


def write_metrics_csv(rows: list[dict], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "step", "lr", "loss", "accuracy"])
        writer.writeheader()
        writer.writerows(rows)


def train(
    model: DecoderModel,
    dataset: Dataset,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    resume: dict | None = None,
    log=None,
) -> TrainResult:
    """Full training loop over successful trajectories.

    Deterministic for a fixed (dataset, model seed, cfg.seed): the epoch
    shuffle and each batch's window sampling use rngs derived from them.
    """
    if len(dataset.trajectories) == 0:
        raise ValueError("training requires a non-empty dataset")
    context = model.config.context
    optimizer = AdamW(model.named_parameters(), weight_decay=cfg.weight_decay)
    start_epoch = 0
    global_step = 0
    if resume:
        optimizer.load_state_dict(resume["optimizer"])
        start_epoch = resume["epoch"] + 1
        global_step = optimizer.step_count

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    result = TrainResult()
    n = len(dataset.trajectories)

    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_schedule(cfg, epoch)
        shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 101, epoch]))
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        epoch_acc = 0.0
        batches = 0
        for lo in range(0, n, cfg.batch_size):
            indices = order[lo : lo + cfg.batch_size]
            batch_rng = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, 202, global_step])
            )
            batch = make_batch(dataset, indices, context, batch_rng)
            loss, acc = train_step(model, batch, optimizer, lr, cfg.grad_clip)
            epoch_loss += loss
            epoch_acc += acc
            batches += 1
            global_step += 1
        row = {
            "epoch": epoch,
            "step": global_step,
            "lr": lr,
            "loss": epoch_loss / batches,
            "accuracy": epoch_acc / batches,
        }
        result.metrics.append(row)
        if log is not None:
            log(f"epoch {epoch}: lr={lr:.3g} loss={row['loss']:.4f} acc={row['accuracy']:.3f}")
        if out_dir is not None:
            path = out_dir / f"ckpt_epoch_{epoch:03d}.json"
            save_train_checkpoint(model, optimizer, epoch, cfg, path, final=False)
            result.checkpoint_paths.append(path)

    if out_dir is not None:
        final_path = out_dir / "ckpt_final.json"
        save_train_checkpoint(model, optimizer, cfg.epochs - 1, cfg, final_path, final=True)
        result.final_checkpoint = final_path
        write_metrics_csv(result.metrics, out_dir / "metrics.csv")
    return result
