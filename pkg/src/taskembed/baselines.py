"""TextEmb and diagonal empirical-Fisher task representations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoder import EncoderWeights, TokenBatch, encode
from .tensor import Tensor


@dataclass
class BaselineEmbedding:
    task_id: str
    kind: str                  # "textemb" | "fisher"
    vector: np.ndarray
    n: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n <= 0:
            raise ValueError("a baseline embedding needs n > 0 examples")
        if self.kind == "fisher" and np.any(self.vector < 0):
            raise ValueError("Fisher vectors are non-negative")


def _unpack(model):
    """(encoder, adapter) from an EncoderWeights or a trained single-task model."""
    if isinstance(model, EncoderWeights):
        return model, None
    return model.encoder, getattr(model, "adapter", None)


def text_emb(task, model, max_examples: int | None = None, batch_size: int = 64) -> np.ndarray:
    """Mean over examples of the mean output state over each example's tokens."""
    examples = task.train[:max_examples] if max_examples else task.train
    if not examples:
        raise ValueError(f"task {task.id!r} has no training examples")
    encoder, adapter = _unpack(model)
    total = np.zeros(encoder.config.hidden)
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        batch = TokenBatch.from_sequences([ex.sequence for ex in chunk], encoder.config.max_len)
        states, _ = encode(batch, encoder, adapter)
        m = batch.mask[:, :, None]
        total += ((states.data * m).sum(axis=1) / m.sum(axis=1)).sum(axis=0)
    return total / len(examples)


def fisher_emb(task, model, n_examples: int | None = None, batch_size: int = 64) -> np.ndarray:
    """(1/n) sum_k (d log P(y_k | x_k) / d h_cls)^2 for a fine-tuned model.

    ``model`` must expose ``encoder``, ``adapter`` and a ``head`` mapping
    h_cls to logits, as returned by :func:`taskembed.multitask.train_single`.
    """
    if model is None or not hasattr(model, "head"):
        raise ValueError("Fisher embeddings need a fine-tuned model with a head")
    examples = task.train[:n_examples] if n_examples else task.train
    if not examples:
        raise ValueError("n must be positive")
    encoder, adapter = _unpack(model)
    total = np.zeros(encoder.config.hidden)
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        batch = TokenBatch.from_sequences([ex.sequence for ex in chunk], encoder.config.max_len)
        _, h_cls = encode(batch, encoder, adapter)
        h = Tensor(h_cls.data, requires_grad=True)
        logp = T.log_softmax(model.head(h))
        labels = np.array([ex.label for ex in chunk])
        # rows are independent, so the gradient of the sum is per-example
        T.tsum(logp[np.arange(len(chunk)), labels]).backward()
        total += (h.grad ** 2).sum(axis=0)
    return total / len(examples)


def project_baseline(vector, projection) -> np.ndarray:
    return projection(np.asarray(vector, dtype=float)).data
