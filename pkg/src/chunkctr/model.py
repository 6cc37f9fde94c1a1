"""Model assembly: configuration, parameters, forward pass, loss and
metrics, the training loop, and checkpoint serialization."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, f32_grid
from .attention import (
    BlockParams,
    block,
    block_pair,
    chunk_masks,
    full_mask,
    pad_bucket_ids,
    partition,
)
from .errors import CheckpointError, ConfigError, MetricError, ShapeError, TrainingError
from .interest import TargetAttentionParams, aggregate, attention_scores, pool_chunks
from .lsh import ProjectionMatrix, assign_buckets

CHECKPOINT_MAGIC = b"TBIN"
CHECKPOINT_VERSION = 1

ATTENTION_SCHEMAS = ("sc-sa", "c-sa", "g-sa")
OPTIMIZERS = ("adam", "sgd")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for model shape, data shape, and optimization."""

    seq_len: int = 128  # behaviors per sample
    chunk_size: int = 8
    hash_bits: int = 4
    num_blocks: int = 4  # total transformer blocks; must be even
    model_dim: int = 32  # width inside the blocks
    behavior_dim: int = 32  # raw behavior embedding width
    target_dim: int = 32
    user_dim: int = 8
    num_heads: int = 1
    score_hidden: int = 32  # hidden width of the relevance MLP
    head_hidden: int = 32  # hidden width of the output head
    attention: str = "sc-sa"
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 16
    steps: int = 1000
    eval_every: int = 100
    seed: int = 0

    def __post_init__(self) -> None:
        for name in (
            "seq_len", "chunk_size", "hash_bits", "num_blocks", "model_dim",
            "behavior_dim", "target_dim", "user_dim", "num_heads",
            "score_hidden", "head_hidden", "batch_size", "eval_every",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.learning_rate < 0.0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.chunk_size % 2 != 0:
            raise ConfigError(f"chunk_size must be even, got {self.chunk_size}")
        if self.num_blocks % 2 != 0:
            raise ConfigError(f"num_blocks must be even, got {self.num_blocks}")
        if self.model_dim % self.num_heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}"
            )
        if self.attention not in ATTENTION_SCHEMAS:
            raise ConfigError(f"attention must be one of {ATTENTION_SCHEMAS}, got {self.attention!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")


@dataclass(frozen=True)
class Sample:
    """One example: user profile, target item, behavior sequence, label."""

    user: np.ndarray  # (user_dim,)
    target: np.ndarray  # (target_dim,)
    behaviors: np.ndarray  # (L, behavior_dim)
    label: int

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise ConfigError(f"label must be 0 or 1, got {self.label}")
        if np.asarray(self.behaviors).ndim != 2 or np.asarray(self.behaviors).shape[0] < 1:
            raise ShapeError("behaviors must be a non-empty 2-D sequence")


@dataclass
class ModelParams:
    """All model state: fixed projection plus learnable tensors."""

    config: TrainConfig
    projection: ProjectionMatrix
    input_w: Tensor
    input_b: Tensor
    blocks: list[BlockParams]
    target: TargetAttentionParams
    head_w1: Tensor
    head_b1: Tensor
    head_w2: Tensor
    head_b2: Tensor

    def parameters(self) -> list[tuple[str, Tensor]]:
        """Learnable tensors in the fixed checkpoint order."""
        named: list[tuple[str, Tensor]] = [("input.w", self.input_w), ("input.b", self.input_b)]
        for i, blk in enumerate(self.blocks):
            named.extend((f"block{i}.{n}", t) for n, t in blk.tensors())
        named.extend((f"target.{n}", t) for n, t in self.target.tensors())
        named.extend(
            [
                ("head.w1", self.head_w1),
                ("head.b1", self.head_b1),
                ("head.w2", self.head_w2),
                ("head.b2", self.head_b2),
            ]
        )
        return named


def init_params(config: TrainConfig, zero_residual: bool = True) -> ModelParams:
    """Fresh parameters drawn from config.seed, on the f32 grid.

    Block weights start at normal(0, 0.02) with residual-branch output
    projections at zero, so every block is the identity map at
    initialization. The feature funnel (input projection, target
    attention, head) uses fan-scaled init so its activations start at
    unit scale. Pass zero_residual=False to randomize the residual
    outputs too (gradient checks do, so those paths carry signal).
    """
    rng = np.random.default_rng(config.seed)
    d = config.model_dim

    def normal(rows: int, cols: int) -> Tensor:
        return Tensor(f32_grid(0.02 * rng.standard_normal((rows, cols))))

    def scaled(rows: int, cols: int) -> Tensor:
        std = math.sqrt(2.0 / (rows + cols))
        return Tensor(f32_grid(std * rng.standard_normal((rows, cols))))

    def residual_out(rows: int, cols: int) -> Tensor:
        if zero_residual:
            return Tensor(np.zeros((rows, cols)))
        return normal(rows, cols)

    def zeros(rows: int, cols: int) -> Tensor:
        return Tensor(np.zeros((rows, cols)))

    def ones(rows: int, cols: int) -> Tensor:
        return Tensor(np.ones((rows, cols)))

    projection = ProjectionMatrix.sample(
        config.behavior_dim, config.hash_bits, seed=int(rng.integers(0, 2**31 - 1))
    )
    blocks = []
    for _ in range(config.num_blocks):
        blocks.append(
            BlockParams(
                w_q=normal(d, d),
                w_k=normal(d, d),
                w_v=normal(d, d),
                w_o=residual_out(d, d),
                ln1_gain=ones(1, d),
                ln1_bias=zeros(1, d),
                ln2_gain=ones(1, d),
                ln2_bias=zeros(1, d),
                mlp_w1=normal(d, 4 * d),
                mlp_b1=zeros(1, 4 * d),
                mlp_w2=residual_out(4 * d, d),
                mlp_b2=zeros(1, d),
            )
        )
    target = TargetAttentionParams(
        target_w=scaled(config.target_dim, d),
        target_b=zeros(1, d),
        score_w1=scaled(2 * d, config.score_hidden),
        score_b1=zeros(1, config.score_hidden),
        score_w2=scaled(config.score_hidden, 1),
        score_b2=zeros(1, 1),
    )
    head_in = d + config.target_dim + config.user_dim
    return ModelParams(
        config=config,
        projection=projection,
        input_w=scaled(config.behavior_dim, d),
        input_b=zeros(1, d),
        blocks=blocks,
        target=target,
        head_w1=scaled(head_in, config.head_hidden),
        head_b1=zeros(1, config.head_hidden),
        head_w2=scaled(config.head_hidden, 1),
        head_b2=zeros(1, 1),
    )


def _run_blocks(x: Tensor, ids: np.ndarray, layout, params: ModelParams) -> Tensor:
    cfg = params.config
    if cfg.attention == "sc-sa":
        masks_plain = chunk_masks(ids, layout)
        shifted_ids = np.roll(ids, -layout.shift)
        masks_shifted = chunk_masks(shifted_ids, layout)
        for i in range(0, cfg.num_blocks, 2):
            x = block_pair(
                x, ids, layout, params.blocks[i], params.blocks[i + 1],
                n_heads=cfg.num_heads, masks_plain=masks_plain, masks_shifted=masks_shifted,
            )
    elif cfg.attention == "c-sa":
        masks_plain = chunk_masks(ids, layout)
        for blk in params.blocks:
            x = block(x, ids, layout, blk, shifted=False, n_heads=cfg.num_heads, masks=masks_plain)
    else:  # g-sa ablation: full-sequence attention in every block
        masks_full = [full_mask(ids)]
        for blk in params.blocks:
            x = block(
                x, ids, layout, blk,
                shifted=False, n_heads=cfg.num_heads, global_attn=True, masks=masks_full,
            )
    return x


def forward(params: ModelParams, sample: Sample) -> Tensor:
    """Predicted click probability as a 1x1 graph node.

    Pipeline: hash and stable-sort the behaviors, project to the model
    width, run the transformer blocks over padded chunks, pool chunks
    into interests, score them against the target, and feed the weighted
    interest plus target and user features to the sigmoid head.
    """
    cfg = params.config
    behaviors = np.asarray(sample.behaviors, dtype=np.float64)
    if behaviors.shape[1] != cfg.behavior_dim:
        raise ShapeError(
            f"behaviors have width {behaviors.shape[1]}, config expects {cfg.behavior_dim}"
        )
    assignment, _ = assign_buckets(behaviors, params.projection)
    projected = ad.linear(Tensor(behaviors), params.input_w, params.input_b)
    ordered = ad.gather_rows(projected, assignment.perm)
    sorted_ids = assignment.bucket_ids[assignment.perm]

    layout = partition(behaviors.shape[0], cfg.chunk_size)
    x = ad.pad_rows(ordered, layout.pad_count)
    ids = pad_bucket_ids(sorted_ids, layout)
    x = _run_blocks(x, ids, layout, params)

    interests = pool_chunks(x, layout)
    target = Tensor(np.asarray(sample.target, dtype=np.float64).reshape(1, -1))
    if target.cols != cfg.target_dim:
        raise ShapeError(f"target has width {target.cols}, config expects {cfg.target_dim}")
    scores = attention_scores(interests, target, params.target)
    pooled_interest = aggregate(interests, scores)

    user = Tensor(np.asarray(sample.user, dtype=np.float64).reshape(1, -1))
    if user.cols != cfg.user_dim:
        raise ShapeError(f"user profile has width {user.cols}, config expects {cfg.user_dim}")
    features = ad.concat_cols(pooled_interest, target, user)
    hidden = ad.relu(ad.linear(features, params.head_w1, params.head_b1))
    logit = ad.linear(hidden, params.head_w2, params.head_b2)
    return ad.sigmoid(logit)


def predict(params: ModelParams, sample: Sample) -> float:
    return float(forward(params, sample).value[0, 0])


def predict_many(params: ModelParams, samples: Sequence[Sample]) -> np.ndarray:
    return np.array([predict(params, s) for s in samples])


def bce_loss(preds, labels) -> "Tensor | float":
    """Mean binary cross entropy, clamped at 1e-7 before the logs.

    A Tensor input yields a 1x1 graph node (training); an array input
    yields a float (the evaluation-time LogLoss).
    """
    if isinstance(preds, Tensor):
        return ad.binary_cross_entropy(preds, labels)
    preds = np.asarray(preds, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if preds.size == 0:
        raise ShapeError("bce_loss: empty batch")
    if preds.size != labels.size:
        raise ShapeError(f"bce_loss: {preds.size} preds vs {labels.size} labels")
    p = np.clip(preds, ad.BCE_CLAMP, 1.0 - ad.BCE_CLAMP)
    return float(-np.mean(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p)))


def auc(preds, labels) -> float:
    """Rank-sum AUC; tied prediction pairs contribute 0.5 each.

    Equivalent to the pairwise count of positives ranked above negatives.
    """
    preds = np.asarray(preds, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if preds.size != labels.size:
        raise ShapeError(f"auc: {preds.size} preds vs {labels.size} labels")
    positive = labels == 1
    n_pos = int(positive.sum())
    n_neg = preds.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("auc: undefined for a single-class batch")
    order = np.argsort(preds, kind="stable")
    sorted_preds = preds[order]
    ranks = np.empty(preds.size, dtype=np.float64)
    # average 1-based ranks within each tie group
    boundaries = np.flatnonzero(np.diff(sorted_preds)) + 1
    starts = np.concatenate([[0], boundaries])
    stops = np.concatenate([boundaries, [preds.size]])
    for lo, hi in zip(starts, stops):
        ranks[order[lo:hi]] = (lo + 1 + hi) / 2.0
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def evaluate(params: ModelParams, samples: Sequence[Sample]) -> dict[str, float]:
    """Held-out metrics: {"auc": ..., "logloss": ...}."""
    preds = predict_many(params, samples)
    labels = np.array([s.label for s in samples])
    return {"auc": auc(preds, labels), "logloss": bce_loss(preds, labels)}


class SGD:
    """Plain gradient descent on the f32 parameter grid."""

    def __init__(self, params: Sequence[tuple[str, Tensor]], learning_rate: float):
        self.params = list(params)
        self.learning_rate = learning_rate

    def step(self) -> None:
        for _, p in self.params:
            p.value = f32_grid(p.value - self.learning_rate * p.grad)


class Adam:
    """Adam with bias correction; moments are training-only state and are
    not serialized with checkpoints."""

    def __init__(
        self,
        params: Sequence[tuple[str, Tensor]],
        learning_rate: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for _, p in self.params]
        self.v = [np.zeros_like(p.value) for _, p in self.params]

    def step(self) -> None:
        self.t += 1
        bias1 = 1.0 - self.beta1**self.t
        bias2 = 1.0 - self.beta2**self.t
        for i, (_, p) in enumerate(self.params):
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            update = (self.m[i] / bias1) / (np.sqrt(self.v[i] / bias2) + self.eps)
            p.value = f32_grid(p.value - self.learning_rate * update)


class Trainer:
    """Owns optimizer state over one parameter set."""

    def __init__(self, params: ModelParams, config: TrainConfig | None = None):
        self.params = params
        self.config = config if config is not None else params.config
        named = params.parameters()
        if self.config.optimizer == "adam":
            self.optimizer: "Adam | SGD" = Adam(named, self.config.learning_rate)
        else:
            self.optimizer = SGD(named, self.config.learning_rate)

    def step(self, batch: Sequence[Sample]) -> float:
        """Forward the batch, mean BCE, backward, one optimizer update."""
        if not batch:
            raise ShapeError("train step: empty batch")
        for _, p in self.params.parameters():
            p.zero_grad()
        preds = [forward(self.params, s) for s in batch]
        stacked = preds[0] if len(preds) == 1 else ad.concat_rows(*preds)
        labels = np.array([s.label for s in batch], dtype=np.float64)
        loss = ad.binary_cross_entropy(stacked, labels)
        value = float(loss.value[0, 0])
        if not np.isfinite(value):
            raise TrainingError(f"aborting: non-finite training loss {value}")
        loss.backward()
        self.optimizer.step()
        return value


def train(
    params: ModelParams,
    train_samples: Sequence[Sample],
    *,
    val_samples: Sequence[Sample] | None = None,
    config: TrainConfig | None = None,
    on_metrics: Callable[[dict], None] | None = None,
) -> list[dict]:
    """Run config.steps optimizer steps with batches drawn from config.seed.

    Every eval_every steps (and at the final step) the validation split is
    scored and a record {step, loss, auc, logloss} is collected and passed
    to on_metrics.
    """
    cfg = config if config is not None else params.config
    trainer = Trainer(params, cfg)
    rng = np.random.default_rng(cfg.seed)
    records: list[dict] = []
    for step_index in range(1, cfg.steps + 1):
        picks = rng.integers(0, len(train_samples), size=cfg.batch_size)
        loss = trainer.step([train_samples[i] for i in picks])
        due = step_index % cfg.eval_every == 0 or step_index == cfg.steps
        if due and val_samples:
            scored = evaluate(params, val_samples)
            record = {
                "step": step_index,
                "loss": loss,
                "auc": scored["auc"],
                "logloss": scored["logloss"],
            }
            records.append(record)
            if on_metrics is not None:
                on_metrics(record)
    return records


def _checkpoint_entries(params: ModelParams) -> list[tuple[str, np.ndarray]]:
    entries = [("projection.matrix", params.projection.matrix)]
    entries.extend((name, t.value) for name, t in params.parameters())
    return entries


def save_checkpoint(params: ModelParams, path) -> None:
    """Serialize the model to one binary file.

    Layout: magic "TBIN", u32 version, u32 header length, UTF-8 JSON
    header (config, projection seed, tensor table), then every tensor in
    the declared order as u32 rows, u32 cols, rows*cols little-endian f32.
    Values live on the f32 grid, so the round-trip is bit-exact.
    """
    entries = _checkpoint_entries(params)
    header = {
        "config": asdict(params.config),
        "projection_seed": params.projection.seed,
        "tensors": [[name, int(a.shape[0]), int(a.shape[1])] for name, a in entries],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in entries:
            fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
            fh.write(arr.astype("<f4").tobytes())


def load_checkpoint(path) -> ModelParams:
    """Rebuild ModelParams from a checkpoint file.

    Any mismatch (magic, version, tensor table, shapes, truncation, or
    trailing bytes) raises CheckpointError before anything is returned,
    so no partial state can escape.
    """
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (header_len,) = struct.unpack_from("<I", data, 8)
    offset = 12
    if offset + header_len > len(data):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[offset : offset + header_len].decode("utf-8"))
        config = TrainConfig(**header["config"])
    except (ValueError, TypeError, KeyError) as exc:
        raise CheckpointError(f"{path}: invalid header ({exc})") from exc
    offset += header_len

    params = init_params(config)
    expected = _checkpoint_entries(params)
    declared = [[name, a.shape[0], a.shape[1]] for name, a in expected]
    if [list(t) for t in header["tensors"]] != declared:
        raise CheckpointError(f"{path}: tensor table does not match the config architecture")

    loaded: list[np.ndarray] = []
    for name, arr in expected:
        if offset + 8 > len(data):
            raise CheckpointError(f"{path}: truncated before tensor {name}")
        rows, cols = struct.unpack_from("<II", data, offset)
        offset += 8
        if (rows, cols) != arr.shape:
            raise CheckpointError(
                f"{path}: tensor {name} has shape ({rows}, {cols}), expected {arr.shape}"
            )
        nbytes = rows * cols * 4
        if offset + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated inside tensor {name}")
        values = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=offset)
        loaded.append(values.astype(np.float64).reshape(rows, cols))
        offset += nbytes
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")

    params.projection = ProjectionMatrix(matrix=loaded[0], seed=int(header["projection_seed"]))
    for (_, tensor), values in zip(params.parameters(), loaded[1:]):
        tensor.value = values
        tensor.grad = np.zeros_like(values)
    return params
