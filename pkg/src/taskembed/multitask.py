"""Multitask conditional-adapter training, single-task baselines and evaluation."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, asdict, fields
from typing import Mapping

import numpy as np

from . import tensor as T
from .adapters import (AdapterWeights, ConditionalAdapterWeights, FeatureProjection,
                       TaskEmbeddingTable, effective_embedding, parameter_counts)
from .encoder import EncoderWeights, TokenBatch, encode
from .tasks import TaskCollection, TaskSpec, canonical_label
from .tensor import Tensor

# re-exported for callers that think of tasks as part of multitask training
__all__ = ["TaskSpec", "TaskCollection", "TrainConfig", "TaskHead", "SharedLabelHead",
           "RunArtifact", "SingleTaskModel", "EvalResult", "sample_task", "task_probabilities",
           "capped_loss", "train_multitask", "train_single", "evaluate", "zero_shot_evaluate"]


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr: float = 2e-5
    single_epochs: int = 3
    multitask_epochs: int = 1
    example_cap: int = 30_000
    loss_cap: float = 1.0
    cap_mode: str = "clip"            # "clip" (min) or "rescale"
    seeds_per_task: int = 1
    sampler: str = "sqrt"             # "sqrt" or "uniform"
    head_mode: str = "per_task"       # "per_task" or "shared"
    variant: str = "ca_mtl"
    embedding_mode: str = "latent"
    bottleneck: int = 256
    dim_z: int = 32
    embedding_init_std: float = 0.1
    seed: int = 0
    # multitask overrides; None falls back to lr / batch_size
    multitask_lr: float | None = None
    multitask_batch_size: int | None = None

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Desk-scale defaults for the 2-layer, d=64 encoder."""
        base = dict(lr=1e-3, example_cap=2000, bottleneck=32, single_epochs=12,
                    multitask_epochs=24, multitask_lr=3e-3, multitask_batch_size=32,
                    cap_mode="rescale", embedding_init_std=0.01)
        base.update(overrides)
        return cls(**base)

    @property
    def mt_lr(self) -> float:
        return self.lr if self.multitask_lr is None else self.multitask_lr

    @property
    def mt_batch_size(self) -> int:
        return self.batch_size if self.multitask_batch_size is None else self.multitask_batch_size

    def replace(self, **kw) -> "TrainConfig":
        d = asdict(self)
        d.update(kw)
        return TrainConfig(**d)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------

class TaskHead:
    """Per-task softmax layer over h_cls."""

    def __init__(self, hidden: int, n_labels: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = Tensor(rng.normal(0.0, std, (hidden, n_labels)), requires_grad=True)
        self.bias = Tensor(np.zeros(n_labels), requires_grad=True)

    def __call__(self, h: Tensor, labels=None) -> Tensor:
        return h @ self.weight + self.bias

    def params(self) -> dict[str, Tensor]:
        return {"w": self.weight, "b": self.bias}

    def num_parameters(self) -> int:
        return self.weight.size + self.bias.size


class SharedLabelHead:
    """One row per canonical label name, shared by every task using that name."""

    def __init__(self, hidden: int, rng: np.random.Generator, std: float = 0.02):
        self.hidden = hidden
        self.std = std
        self.rng = rng
        self.rows: dict[str, Tensor] = {}
        self.bias: dict[str, Tensor] = {}

    def add_labels(self, names) -> None:
        for name in sorted({canonical_label(n) for n in names}):
            if name not in self.rows:
                self.rows[name] = Tensor(self.rng.normal(0.0, self.std, (1, self.hidden)), requires_grad=True)
                self.bias[name] = Tensor(np.zeros(1), requires_grad=True)

    def row_index(self, name: str) -> int:
        return sorted(self.rows).index(canonical_label(name))

    def __call__(self, h: Tensor, labels) -> Tensor:
        names = [canonical_label(n) for n in labels]
        missing = [n for n in names if n not in self.rows]
        if missing:
            raise KeyError(f"label names not in the shared table: {missing}")
        w = T.concat([self.rows[n] for n in names], axis=0)
        b = T.concat([self.bias[n] for n in names], axis=0)
        return h @ w.transpose() + b

    def params(self) -> dict[str, Tensor]:
        out = {f"row/{k}": v for k, v in self.rows.items()}
        out.update({f"bias/{k}": v for k, v in self.bias.items()})
        return out


# ---------------------------------------------------------------------------
# sampling and loss capping
# ---------------------------------------------------------------------------

def task_probabilities(sizes, mode: str = "sqrt") -> np.ndarray:
    sizes = np.asarray(sizes, dtype=float)
    if sizes.size == 0:
        raise ValueError("empty task collection")
    if np.any(sizes < 1):
        raise ValueError("every task needs at least one example")
    w = np.sqrt(sizes) if mode == "sqrt" else np.ones_like(sizes)
    return w / w.sum()


def sample_task(sizes, rng: np.random.Generator, mode: str = "sqrt") -> int:
    """Index of a task drawn with probability proportional to sqrt(size)."""
    p = task_probabilities(sizes, mode)
    return int(rng.choice(len(p), p=p))


def capped_loss(loss: Tensor, cap: float = 1.0, mode: str = "clip") -> Tensor:
    """min(loss, cap).  ``rescale`` keeps a gradient scaled by cap/loss instead."""
    value = loss.item()
    if value < 0:
        raise ValueError("negative loss")
    if mode == "clip":
        return T.minimum(loss, cap)
    if mode == "rescale":
        return loss * (cap / value) if value > cap else loss
    raise ValueError(f"unknown cap mode {mode!r}")


class _BatchStream:
    """Shuffled pass over at most ``cap`` training examples, reshuffled per pass."""

    def __init__(self, task: TaskSpec, batch_size: int, cap: int, rng: np.random.Generator,
                 max_len: int):
        self.task = task
        self.sequences = [ex.sequence for ex in task.train]
        self.labels = np.array([ex.label for ex in task.train])
        self.batch_size = batch_size
        self.cap = min(cap, len(task.train))
        self.rng = rng
        self.max_len = max_len
        self._order: np.ndarray = np.empty(0, dtype=int)
        self._pos = 0

    def next(self) -> tuple[TokenBatch, np.ndarray]:
        if self._pos >= len(self._order):
            self._order = self.rng.permutation(len(self.sequences))[: self.cap]
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        batch = TokenBatch.from_sequences([self.sequences[i] for i in idx], self.max_len)
        return batch, self.labels[idx]


def _batches(examples, batch_size: int, max_len: int):
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        yield (TokenBatch.from_sequences([ex.sequence for ex in chunk], max_len),
               np.array([ex.label for ex in chunk]))


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    accuracy: float
    n: int
    per_class: dict[str, tuple[int, int]]   # label -> (correct, total)
    predictions: np.ndarray = field(default=None, repr=False)


def _score(logit_fn, task: TaskSpec, split: str, batch_size: int = 256, max_len: int = 32) -> EvalResult:
    examples = task.split(split)
    if not examples:
        raise ValueError(f"split {split!r} of {task.id!r} is empty")
    preds, gold = [], []
    with T.no_grad():
        for batch, labels in _batches(examples, batch_size, max_len):
            logits = logit_fn(batch).data
            preds.append(np.argmax(logits, axis=1))   # first maximum wins ties
            gold.append(labels)
    preds, gold = np.concatenate(preds), np.concatenate(gold)
    per_class = {}
    for i, name in enumerate(task.labels):
        sel = gold == i
        per_class[name] = (int((preds[sel] == i).sum()), int(sel.sum()))
    return EvalResult(float((preds == gold).mean()), len(gold), per_class, preds)


@dataclass
class RunArtifact:
    config: TrainConfig
    encoder: EncoderWeights
    adapter: ConditionalAdapterWeights
    table: TaskEmbeddingTable | None
    heads: dict[str, TaskHead] | SharedLabelHead
    projection: FeatureProjection | None = None
    features: dict[str, np.ndarray] = field(default_factory=dict)
    task_ids: list[str] = field(default_factory=list)
    excluded: list[str] = field(default_factory=list)
    log: list[tuple] = field(default_factory=list)
    task_labels: dict[str, list[str]] = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)

    @property
    def shared(self) -> bool:
        return isinstance(self.heads, SharedLabelHead)

    def embedding(self, task_id: str, seed: int = 0) -> Tensor:
        if task_id not in self.task_ids and self.config.embedding_mode == "latent":
            raise KeyError(f"unknown task id {task_id!r}")
        return effective_embedding(task_id, self.config.embedding_mode, self.table,
                                   self.projection, self.features.get(task_id), seed)

    def head_logits(self, task: TaskSpec, h: Tensor) -> Tensor:
        if self.shared:
            return self.heads(h, task.labels)
        if task.id not in self.heads:
            raise KeyError(f"no head for task {task.id!r}")
        return self.heads[task.id](h)

    def logits(self, task: TaskSpec, batch: TokenBatch, z: Tensor | None = None) -> Tensor:
        z = self.embedding(task.id) if z is None else z
        _, h = encode(batch, self.encoder, self.adapter, z)
        return self.head_logits(task, h)

    def trainable(self) -> dict[str, Tensor]:
        params = {f"adapter/{k}": v for k, v in self.adapter.params.items()}
        if self.table is not None:
            params.update(self.table.params())
        if self.projection is not None:
            params["proj/w"] = self.projection.weight
        if self.shared:
            params.update({f"head/{k}": v for k, v in self.heads.params().items()})
        else:
            for tid, head in self.heads.items():
                params.update({f"head/{tid}/{k}": v for k, v in head.params().items()})
        return params

    def embedding_matrix(self) -> tuple[np.ndarray, list[str], list[int]]:
        """Effective embeddings of every trained (task, seed)."""
        rows, ids, seeds = [], [], []
        for tid in self.task_ids:
            for s in range(self.config.seeds_per_task):
                rows.append(self.embedding(tid, s).data.copy())
                ids.append(tid)
                seeds.append(s)
        return np.array(rows), ids, seeds

    def parameter_counts(self) -> dict[str, int]:
        return parameter_counts(self.config.variant, encoder_params=self.encoder.num_parameters(),
                                adapter=self.adapter, dim_z=self.config.dim_z,
                                projection=self.projection)


@dataclass
class SingleTaskModel:
    task_id: str
    mode: str
    encoder: EncoderWeights
    adapter: AdapterWeights | None
    head: TaskHead
    log: list[float] = field(default_factory=list)

    def logits(self, task: TaskSpec, batch: TokenBatch, z=None) -> Tensor:
        _, h = encode(batch, self.encoder, self.adapter)
        return self.head(h)

    def trainable(self) -> dict[str, Tensor]:
        params = {f"head/{k}": v for k, v in self.head.params().items()}
        if self.mode == "full_fine_tune":
            params.update({f"enc/{k}": v for k, v in self.encoder.encoder_params().items()})
        else:
            params.update({f"adapter/{k}": v for k, v in self.adapter.params.items()})
        return params

    def parameter_counts(self) -> dict[str, int]:
        return parameter_counts(self.mode, encoder_params=self.encoder.num_parameters(),
                                adapter=self.adapter)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def steps_per_epoch(collection: TaskCollection, config: TrainConfig) -> int:
    total = sum(min(len(t.train), config.example_cap) for t in collection)
    return max(1, total // config.mt_batch_size)


def train_multitask(collection: TaskCollection, encoder: EncoderWeights, config: TrainConfig,
                    features: Mapping[str, np.ndarray] | None = None,
                    excluded=(), steps: int | None = None) -> RunArtifact:
    """Jointly optimise adapter, task embeddings and heads; the encoder stays frozen."""
    if len(collection) == 0:
        raise ValueError("empty task collection")
    if not encoder.frozen:
        raise ValueError("multitask training expects a frozen encoder")
    features = {k: np.asarray(v, dtype=float) for k, v in (features or {}).items()}
    mode = config.embedding_mode
    cfg = encoder.config
    rng = np.random.default_rng(config.seed)
    init_rng = np.random.default_rng([config.seed, 1])
    adapter = ConditionalAdapterWeights.init(config.variant, cfg.hidden, config.bottleneck,
                                             cfg.n_insertion_points, config.dim_z, init_rng)
    adapter.ln_eps = cfg.ln_eps
    table = None
    if mode in ("latent", "latent_plus_features"):
        table = TaskEmbeddingTable.init(collection.ids, config.dim_z, config.seeds_per_task,
                                        init_rng, config.embedding_init_std)
        if table.dim_z != adapter.dim_z:
            raise ValueError("task embedding and adapter disagree on dim(z)")
    projection = None
    if mode != "latent":
        missing = [t for t in collection.ids if t not in features]
        if missing:
            raise ValueError(f"embedding mode {mode!r} needs features for {missing[:3]}...")
        in_dim = len(next(iter(features.values())))
        # zero-init for the additive features-aware term, random for projected baselines
        projection = FeatureProjection.init(in_dim, config.dim_z,
                                            None if mode == "latent_plus_features" else init_rng)
    if config.head_mode == "shared":
        heads = SharedLabelHead(cfg.hidden, init_rng)
        for task in collection:
            heads.add_labels(task.labels)
    else:
        heads = {t.id: TaskHead(cfg.hidden, len(t.labels), init_rng) for t in collection}

    art = RunArtifact(config, encoder, adapter, table, heads, projection, features,
                      list(collection.ids), list(excluded),
                      task_labels={t.id: list(t.labels) for t in collection})
    params = art.trainable()
    opt = T.Adam(params, lr=config.mt_lr)
    streams = [_BatchStream(t, config.mt_batch_size, config.example_cap, rng, cfg.max_len)
               for t in collection]
    sizes = [s.cap for s in streams]
    probs = task_probabilities(sizes, config.sampler)
    n_steps = steps if steps is not None else config.multitask_epochs * steps_per_epoch(collection, config)
    digest = encoder.digest()
    for step in range(n_steps):
        i = int(rng.choice(len(probs), p=probs))
        task = collection[i]
        seed_idx = int(rng.integers(config.seeds_per_task)) if config.seeds_per_task > 1 else 0
        batch, labels = streams[i].next()
        opt.zero_grad()
        z = art.embedding(task.id, seed_idx)
        _, h = encode(batch, encoder, adapter, z)
        raw = T.cross_entropy(art.head_logits(task, h), labels)
        loss = capped_loss(raw, config.loss_cap, config.cap_mode)
        loss.backward()
        opt.step()
        art.log.append((step, task.id, seed_idx, raw.item(), loss.item()))
    art.manifest = {"encoder_digest": digest, "steps": n_steps, "variant": config.variant,
                    "dim_z": config.dim_z, "embedding_mode": mode, "excluded": list(excluded),
                    "seed": config.seed}
    if encoder.digest() != digest:
        raise RuntimeError("frozen encoder weights changed during multitask training")
    return art


def train_single(task: TaskSpec, encoder: EncoderWeights, mode: str,
                 config: TrainConfig) -> SingleTaskModel:
    """Full fine-tuning (copy of the encoder) or a plain per-task adapter."""
    if not task.train:
        raise ValueError(f"task {task.id!r} has no training examples")
    cfg = encoder.config
    rng = np.random.default_rng([config.seed, zlib.crc32(task.id.encode())])
    init_rng = np.random.default_rng([config.seed, 2])
    head = TaskHead(cfg.hidden, len(task.labels), init_rng)
    if mode == "full_fine_tune":
        model = SingleTaskModel(task.id, mode, encoder.copy().unfreeze(), None, head)
    elif mode == "plain_adapter":
        if not encoder.frozen:
            raise ValueError("plain adapters expect a frozen encoder")
        adapter = AdapterWeights.init(cfg.hidden, config.bottleneck, cfg.n_insertion_points, init_rng)
        adapter.ln_eps = cfg.ln_eps
        model = SingleTaskModel(task.id, mode, encoder, adapter, head)
    else:
        raise ValueError(f"unknown single-task mode {mode!r}")
    params = model.trainable()
    opt = T.Adam(params, lr=config.lr)
    stream = _BatchStream(task, config.batch_size, config.example_cap, rng, cfg.max_len)
    n_steps = config.single_epochs * math.ceil(stream.cap / config.batch_size)
    for _ in range(n_steps):
        batch, labels = stream.next()
        opt.zero_grad()
        loss = T.cross_entropy(model.logits(task, batch), labels)
        loss.backward()
        opt.step()
        model.log.append(loss.item())
    return model


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(model, task: TaskSpec, split: str = "test") -> EvalResult:
    """Unweighted accuracy of ``model`` on one split of ``task``."""
    if isinstance(model, RunArtifact):
        if task.id not in model.task_ids:
            raise KeyError(f"unknown task id {task.id!r}")
    elif isinstance(model, SingleTaskModel) and model.task_id != task.id:
        raise KeyError(f"model was trained on {model.task_id!r}, not {task.id!r}")
    return _score(lambda b: model.logits(task, b), task, split, max_len=model.encoder.config.max_len)


def zero_shot_evaluate(artifact: RunArtifact, task: TaskSpec, z_hat, split: str = "test") -> EvalResult:
    """Condition on ``z_hat`` and score only the rows of the task's label names."""
    if not artifact.shared:
        raise ValueError("zero-shot evaluation needs a shared-label artifact")
    missing = [l for l in task.labels if l not in artifact.heads.rows]
    if missing:
        raise KeyError(f"label names unknown to the trained suite: {missing}")
    z = Tensor(np.asarray(z_hat.data if isinstance(z_hat, Tensor) else z_hat, dtype=float))
    if z.shape != (artifact.config.dim_z,):
        raise ValueError(f"z_hat must have dimension {artifact.config.dim_z}")
    return _score(lambda b: artifact.logits(task, b, z), task, split,
                  max_len=artifact.encoder.config.max_len)
