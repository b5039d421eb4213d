"""Goal-conditioned decoder-only transformer over observation/action tokens.

Input layout per forward pass: a goal token, then interleaved per-timestep
pairs of (observation token, action token), where the action stream is
shifted right by one step and the vacancy at step 1 is filled by a dedicated
start-of-sequence action id.  Learned position embeddings are added to both
tokens of a timestep; the goal token gets none.  A stack of pre-LN causal
self-attention layers feeds an actor head that reads each timestep's action
logits from the hidden state at that timestep's observation token.

Observations are encoded by a frozen seeded random projection (a stand-in
for a large pretrained image encoder: fixed features, no gradient) followed
by a trainable 2-layer MLP.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .env import N_RAYS, OBS_CHANNELS
from .errors import CheckpointError, ContextOverflowError, ShapeError

N_ENV_ACTIONS = 4
SOS_ID = 4  # fills the shift-right vacancy; never a legal output
ACTION_VOCAB = N_ENV_ACTIONS + 1
CHECKPOINT_FORMAT = "gridnav-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    heads: int = 4
    d_model: int = 128
    d_ffn: int = 256
    context: int = 8
    vocab: int = ACTION_VOCAB
    obs_channels: int = OBS_CHANNELS
    obs_width: int = N_RAYS
    obs_feature_dim: int = 128
    mlp_hidden: int = 128
    top_k: int = 2
    activation: str = "gelu"
    use_bias: bool = True
    # "split" gives each head width d_model/heads (standard); "full" gives
    # every head the full d_model width as the attention equations are
    # sometimes written, at ~heads-times the parameter cost.
    head_width: str = "split"

    def __post_init__(self):
        if self.layers < 1 or self.heads < 1 or self.d_model < 1:
            raise ValueError("layers, heads and d_model must be positive")
        if self.context < 1:
            raise ValueError("context must be at least 1")
        if self.vocab < ACTION_VOCAB:
            raise ValueError(f"vocab must be >= {ACTION_VOCAB} (4 env actions + SOS)")
        if not 1 <= self.top_k <= self.vocab:
            raise ValueError(f"top_k must be in [1, {self.vocab}]")
        if self.head_width not in ("split", "full"):
            raise ValueError(f"unknown head_width {self.head_width!r}")
        if self.head_width == "split" and self.d_model % self.heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.activation not in ("gelu", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads if self.head_width == "split" else self.d_model

    @property
    def obs_input_dim(self) -> int:
        return self.obs_channels * self.obs_width

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


def paper_config() -> ModelConfig:
    """The full-size configuration the architecture is specified at."""
    return ModelConfig(
        layers=12,
        heads=8,
        d_model=384,
        d_ffn=1024,
        context=8,
        obs_feature_dim=512,
        mlp_hidden=512,
    )


@dataclass
class LayerWeights:
    ln1_gain: Tensor
    ln1_bias: Tensor
    wq: list[Tensor]
    wk: list[Tensor]
    wv: list[Tensor]
    bq: list[Tensor]
    bk: list[Tensor]
    bv: list[Tensor]
    wo: Tensor
    bo: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor


class DecoderModel:
    """Weights plus forward/sampling for the goal-conditioned decoder."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        c = config

        def matrix(fan_in, shape):
            return Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape),
                          requires_grad=True)

        def zeros(shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        def ones(shape):
            return Tensor(np.ones(shape), requires_grad=True)

        # Frozen observation features: fixed at init, never trained.
        self.frozen_projection = Tensor(
            rng.normal(0.0, 1.0 / math.sqrt(c.obs_input_dim),
                       size=(c.obs_input_dim, c.obs_feature_dim)),
            requires_grad=False,
        )
        self.enc_w1 = matrix(c.obs_feature_dim, (c.obs_feature_dim, c.mlp_hidden))
        self.enc_b1 = zeros(c.mlp_hidden)
        self.enc_w2 = matrix(c.mlp_hidden, (c.mlp_hidden, c.d_model))
        self.enc_b2 = zeros(c.d_model)

        self.action_embedding = Tensor(
            rng.normal(0.0, 0.02, size=(c.vocab, c.d_model)), requires_grad=True
        )
        self.position_embedding = Tensor(
            rng.normal(0.0, 0.02, size=(c.context, c.d_model)), requires_grad=True
        )

        hd = c.head_dim
        self.layers: list[LayerWeights] = []
        for _ in range(c.layers):
            self.layers.append(
                LayerWeights(
                    ln1_gain=ones(c.d_model),
                    ln1_bias=zeros(c.d_model),
                    wq=[matrix(c.d_model, (c.d_model, hd)) for _ in range(c.heads)],
                    wk=[matrix(c.d_model, (c.d_model, hd)) for _ in range(c.heads)],
                    wv=[matrix(c.d_model, (c.d_model, hd)) for _ in range(c.heads)],
                    bq=[zeros(hd) for _ in range(c.heads)],
                    bk=[zeros(hd) for _ in range(c.heads)],
                    bv=[zeros(hd) for _ in range(c.heads)],
                    wo=matrix(c.heads * hd, (c.heads * hd, c.d_model)),
                    bo=zeros(c.d_model),
                    ln2_gain=ones(c.d_model),
                    ln2_bias=zeros(c.d_model),
                    ffn_w1=matrix(c.d_model, (c.d_model, c.d_ffn)),
                    ffn_b1=zeros(c.d_ffn),
                    ffn_w2=matrix(c.d_ffn, (c.d_ffn, c.d_model)),
                    ffn_b2=zeros(c.d_model),
                )
            )
        self.final_ln_gain = ones(c.d_model)
        self.final_ln_bias = zeros(c.d_model)
        self.head_w1 = matrix(c.d_model, (c.d_model, c.d_model))
        self.head_b1 = zeros(c.d_model)
        self.head_w2 = matrix(c.d_model, (c.d_model, c.vocab))
        self.head_b2 = zeros(c.vocab)

        self._mask_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    # -- parameter bookkeeping ------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """Trainable tensors in a fixed order (checkpoint and optimizer keys)."""
        bias = self.config.use_bias
        out = [
            ("enc_w1", self.enc_w1),
            ("enc_b1", self.enc_b1),
            ("enc_w2", self.enc_w2),
            ("enc_b2", self.enc_b2),
            ("action_embedding", self.action_embedding),
            ("position_embedding", self.position_embedding),
        ]
        for i, layer in enumerate(self.layers):
            prefix = f"layer{i}"
            out.append((f"{prefix}.ln1_gain", layer.ln1_gain))
            out.append((f"{prefix}.ln1_bias", layer.ln1_bias))
            for h in range(self.config.heads):
                out.append((f"{prefix}.h{h}.wq", layer.wq[h]))
                out.append((f"{prefix}.h{h}.wk", layer.wk[h]))
                out.append((f"{prefix}.h{h}.wv", layer.wv[h]))
                if bias:
                    out.append((f"{prefix}.h{h}.bq", layer.bq[h]))
                    out.append((f"{prefix}.h{h}.bk", layer.bk[h]))
                    out.append((f"{prefix}.h{h}.bv", layer.bv[h]))
            out.append((f"{prefix}.wo", layer.wo))
            if bias:
                out.append((f"{prefix}.bo", layer.bo))
            out.append((f"{prefix}.ln2_gain", layer.ln2_gain))
            out.append((f"{prefix}.ln2_bias", layer.ln2_bias))
            out.append((f"{prefix}.ffn_w1", layer.ffn_w1))
            if bias:
                out.append((f"{prefix}.ffn_b1", layer.ffn_b1))
            out.append((f"{prefix}.ffn_w2", layer.ffn_w2))
            if bias:
                out.append((f"{prefix}.ffn_b2", layer.ffn_b2))
        out.extend(
            [
                ("final_ln_gain", self.final_ln_gain),
                ("final_ln_bias", self.final_ln_bias),
                ("head_w1", self.head_w1),
                ("head_b1", self.head_b1),
                ("head_w2", self.head_w2),
                ("head_b2", self.head_b2),
            ]
        )
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def trainable_parameter_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def frozen_checksum(self) -> str:
        return hashlib.sha256(self.frozen_projection.data.tobytes()).hexdigest()

    # -- encoding -------------------------------------------------------------

    def _activation(self, x: Tensor) -> Tensor:
        return ad.gelu(x) if self.config.activation == "gelu" else ad.relu(x)

    def _encode_batch(self, rasters: np.ndarray) -> Tensor:
        """Encode [n, C, W] rasters to [n, d]; gradient reaches only the MLP."""
        c = self.config
        n = rasters.shape[0]
        flat = Tensor(rasters.reshape(n, c.obs_input_dim))
        feats = ad.matmul(flat, self.frozen_projection)  # constant: no tape
        h = self._activation(ad.add(ad.matmul(feats, self.enc_w1), self.enc_b1))
        return ad.add(ad.matmul(h, self.enc_w2), self.enc_b2)

    def encode_observation(self, obs: np.ndarray) -> Tensor:
        """Embed one observation raster to a d-vector."""
        c = self.config
        obs = np.asarray(obs, dtype=np.float64)
        if obs.shape != (c.obs_channels, c.obs_width):
            raise ShapeError(
                f"observation shape {obs.shape} != ({c.obs_channels}, {c.obs_width})"
            )
        return ad.reshape(self._encode_batch(obs[None]), (c.d_model,))

    def embed_actions(self, actions: Sequence[int], steps: int | None = None) -> Tensor:
        """Embed the shift-right action stream for ``steps`` timesteps.

        ``actions`` are the unshifted per-step actions; row 0 embeds the SOS
        id and row t embeds actions[t-1].  During rollout the current step's
        action does not exist yet, so ``actions`` may be one shorter.
        """
        steps = len(actions) if steps is None else steps
        if len(actions) not in (steps, steps - 1):
            raise ValueError(f"got {len(actions)} actions for {steps} steps")
        ids = [SOS_ID] + [int(a) for a in actions[: steps - 1]]
        if any(not 0 <= a < self.config.vocab for a in ids):
            raise IndexError(f"action id out of range [0, {self.config.vocab}): {ids}")
        return ad.embedding_lookup(self.action_embedding, ids)

    def assemble_sequence(
        self, goal_emb: Tensor, obs_embs: Tensor, act_embs: Tensor
    ) -> tuple[Tensor, list[tuple[str, int]]]:
        """Interleave [goal, obs_1, act_1, obs_2, act_2, ...] with positions.

        Position embedding t is added to both tokens of timestep t; the goal
        token is position-free.  Returns the [1 + 2T', d] sequence and a
        per-index role tag (timesteps 1-based).
        """
        c = self.config
        steps = obs_embs.shape[0]
        if steps > c.context:
            raise ContextOverflowError(f"{steps} timesteps exceed context {c.context}")
        if act_embs.shape != obs_embs.shape:
            raise ShapeError(f"obs {obs_embs.shape} vs act {act_embs.shape}")
        pos = ad.slice_rows(self.position_embedding, 0, steps)
        pairs = ad.concat([ad.add(obs_embs, pos), ad.add(act_embs, pos)], axis=1)
        interleaved = ad.reshape(pairs, (2 * steps, c.d_model))
        x = ad.concat([ad.reshape(goal_emb, (1, c.d_model)), interleaved], axis=0)
        roles = [("goal", 0)]
        for t in range(1, steps + 1):
            roles.append(("obs", t))
            roles.append(("act", t))
        return x, roles

    # -- transformer ------------------------------------------------------------

    def _masks(self, s: int) -> tuple[np.ndarray, np.ndarray]:
        # keep[i, j] = 1 where j <= i; the additive term drives masked
        # scores to -1e9 exactly, which underflows to zero attention weight.
        if s not in self._mask_cache:
            keep = np.tril(np.ones((s, s)))
            self._mask_cache[s] = (keep, (1.0 - keep) * -1e9)
        return self._mask_cache[s]

    def attention_head(
        self, x: Tensor, layer: int, head: int, return_weights: bool = False
    ):
        """Causal scaled dot-product attention for one head: [S, head_dim]."""
        lw = self.layers[layer]
        q = ad.matmul(x, lw.wq[head])
        k = ad.matmul(x, lw.wk[head])
        v = ad.matmul(x, lw.wv[head])
        if self.config.use_bias:
            q = ad.add(q, lw.bq[head])
            k = ad.add(k, lw.bk[head])
            v = ad.add(v, lw.bv[head])
        keep, neg = self._masks(x.shape[0])
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(self.config.head_dim))
        masked = ad.add(ad.mul(scores, Tensor(keep)), Tensor(neg))
        weights = ad.softmax(masked, axis=-1)
        out = ad.matmul(weights, v)
        if return_weights:
            return out, weights
        return out

    def mhsa(self, x: Tensor, layer: int) -> Tensor:
        """Concatenated per-head attention projected back to d_model."""
        heads = [self.attention_head(x, layer, h) for h in range(self.config.heads)]
        cat = heads[0] if len(heads) == 1 else ad.concat(heads, axis=1)
        out = ad.matmul(cat, self.layers[layer].wo)
        if self.config.use_bias:
            out = ad.add(out, self.layers[layer].bo)
        return out

    def _ffn(self, x: Tensor, layer: int) -> Tensor:
        lw = self.layers[layer]
        h = ad.matmul(x, lw.ffn_w1)
        if self.config.use_bias:
            h = ad.add(h, lw.ffn_b1)
        h = self._activation(h)
        h = ad.matmul(h, lw.ffn_w2)
        if self.config.use_bias:
            h = ad.add(h, lw.ffn_b2)
        return h

    def decoder_layer(self, x: Tensor, layer: int) -> Tensor:
        """Pre-LN residual block: attention then feed-forward."""
        lw = self.layers[layer]
        y = ad.add(self.mhsa(ad.layer_norm(x, lw.ln1_gain, lw.ln1_bias), layer), x)
        z = ad.add(self._ffn(ad.layer_norm(y, lw.ln2_gain, lw.ln2_bias), layer), y)
        return z

    def forward(
        self,
        goal_obs: np.ndarray,
        observations: Sequence[np.ndarray],
        actions: Sequence[int],
    ) -> Tensor:
        """Logits [T', vocab]: row t predicts the action of timestep t.

        ``actions`` are the unshifted ground-truth/history actions; the
        shift-right happens inside ``embed_actions``.  Logits for timestep t
        are read at the observation token of timestep t, so they depend only
        on the goal, observations up to t, and actions strictly before t.
        """
        steps = len(observations)
        if steps < 1:
            raise ValueError("forward requires at least one observation")
        if steps > self.config.context:
            raise ContextOverflowError(
                f"{steps} timesteps exceed context {self.config.context}"
            )
        rasters = np.stack(
            [np.asarray(goal_obs, dtype=np.float64)]
            + [np.asarray(o, dtype=np.float64) for o in observations]
        )
        if rasters.shape[1:] != (self.config.obs_channels, self.config.obs_width):
            raise ShapeError(
                f"observation shape {rasters.shape[1:]} != "
                f"({self.config.obs_channels}, {self.config.obs_width})"
            )
        embs = self._encode_batch(rasters)
        goal_emb = ad.slice_rows(embs, 0, 1)
        obs_embs = ad.slice_rows(embs, 1, steps + 1)
        act_embs = self.embed_actions(actions, steps=steps)
        x, _ = self.assemble_sequence(goal_emb, obs_embs, act_embs)
        for i in range(self.config.layers):
            x = self.decoder_layer(x, i)
        x = ad.layer_norm(x, self.final_ln_gain, self.final_ln_bias)
        obs_token_rows = [1 + 2 * t for t in range(steps)]
        h = ad.gather_rows(x, obs_token_rows)
        h = self._activation(ad.add(ad.matmul(h, self.head_w1), self.head_b1))
        return ad.add(ad.matmul(h, self.head_w2), self.head_b2)

    # -- sampling ---------------------------------------------------------------

    def sample_action(
        self,
        logits,
        mode: str = "top_k",
        rng: np.random.Generator | None = None,
        k: int | None = None,
    ) -> int:
        """Pick an env action from one logits row; the SOS id is never legal.

        Greedy takes the argmax (ties to the lowest id).  Top-k renormalizes
        a softmax over the k highest logits and samples from it.
        """
        arr = np.array(logits.data if isinstance(logits, Tensor) else logits,
                       dtype=np.float64).reshape(-1)
        if arr.shape != (self.config.vocab,):
            raise ShapeError(f"logits shape {arr.shape} != ({self.config.vocab},)")
        arr[SOS_ID] = -np.inf
        if mode == "greedy":
            return int(np.argmax(arr))
        if mode != "top_k":
            raise ValueError(f"unknown sampling mode {mode!r}")
        if rng is None:
            raise ValueError("top_k sampling requires an rng")
        k = self.config.top_k if k is None else k
        order = np.argsort(-arr, kind="stable")[:k]
        top = arr[order] - arr[order].max()
        probs = np.exp(top)
        probs /= probs.sum()
        return int(rng.choice(order, p=probs))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _tensor_payload(t: Tensor) -> dict:
    return {
        "shape": list(t.shape),
        "data": base64.b64encode(np.ascontiguousarray(t.data).tobytes()).decode("ascii"),
    }


def _tensor_restore(payload: dict) -> np.ndarray:
    raw = base64.b64decode(payload["data"])
    return np.frombuffer(raw, dtype=np.float64).reshape(payload["shape"]).copy()


def checkpoint_dict(model: DecoderModel) -> dict:
    tensors = {name: _tensor_payload(t) for name, t in model.named_parameters()}
    tensors["frozen_projection"] = _tensor_payload(model.frozen_projection)
    body = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "seed": model.seed,
        "tensors": tensors,
    }
    body["checksum"] = _body_checksum(body)
    return body


def _body_checksum(body: dict) -> str:
    stripped = {k: v for k, v in body.items() if k != "checksum"}
    canonical = json.dumps(stripped, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def save_checkpoint(model: DecoderModel, path: str | Path) -> None:
    """Write a versioned, checksummed JSON checkpoint (byte-deterministic)."""
    body = checkpoint_dict(model)
    Path(path).write_text(
        json.dumps(body, sort_keys=True, separators=(",", ":")), encoding="utf-8"
    )


def load_checkpoint(path: str | Path) -> DecoderModel:
    """Reconstruct a model; rejects version or checksum mismatches."""
    try:
        body = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    return model_from_checkpoint_dict(body, source=str(path))


def model_from_checkpoint_dict(body: dict, source: str = "<dict>") -> DecoderModel:
    if body.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{source}: not a {CHECKPOINT_FORMAT} file")
    if body.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{source}: version {body.get('version')} != {CHECKPOINT_VERSION}"
        )
    if body.get("checksum") != _body_checksum(body):
        raise CheckpointError(f"{source}: checksum mismatch (corrupted checkpoint)")
    model = DecoderModel(ModelConfig.from_dict(body["config"]), seed=body["seed"])
    tensors = body["tensors"]
    for name, t in model.named_parameters():
        if name not in tensors:
            raise CheckpointError(f"{source}: missing tensor {name}")
        data = _tensor_restore(tensors[name])
        if data.shape != t.shape:
            raise CheckpointError(
                f"{source}: tensor {name} shape {data.shape} != {t.shape}"
            )
        t.data = data
    model.frozen_projection.data = _tensor_restore(tensors["frozen_projection"])
    return model
