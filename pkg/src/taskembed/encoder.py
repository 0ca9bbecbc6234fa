"""Small post-LN transformer encoder with adapter hooks and MLM pretraining."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field, asdict
from typing import Protocol, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

PAD, CLS, SEP, MASK, UNK = 0, 1, 2, 3, 4
N_SPECIAL = 5


@dataclass
class EncoderConfig:
    num_layers: int = 2
    num_heads: int = 4
    hidden: int = 64
    ffn: int = 128
    vocab_size: int = 512
    max_len: int = 32
    ln_eps: float = 1e-5
    init_std: float = 0.02

    def __post_init__(self):
        if self.hidden % self.num_heads:
            raise ValueError("hidden size must be divisible by num_heads")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.num_heads

    @property
    def n_insertion_points(self) -> int:
        return 2 * self.num_layers


class Adapter(Protocol):
    def forward(self, h: Tensor, point: int, z: Tensor | None = None) -> Tensor: ...


def build_sequence(fields: Sequence[Sequence[int]]) -> list[int]:
    """[CLS] f1 [SEP] (f2 [SEP])."""
    if not 1 <= len(fields) <= 2:
        raise ValueError("one or two text fields expected")
    seq = [CLS]
    for f in fields:
        seq.extend(int(t) for t in f)
        seq.append(SEP)
    return seq


@dataclass
class TokenBatch:
    ids: np.ndarray     # (B, L) int64
    mask: np.ndarray    # (B, L) bool, True on real tokens

    @classmethod
    def from_sequences(cls, seqs: Sequence[Sequence[int]], max_len: int | None = None) -> "TokenBatch":
        if not seqs:
            raise ValueError("empty batch")
        length = max(len(s) for s in seqs)
        if max_len is not None and length > max_len:
            raise ValueError(f"sequence of length {length} exceeds max_len {max_len}")
        ids = np.full((len(seqs), length), PAD, dtype=np.int64)
        mask = np.zeros((len(seqs), length), dtype=bool)
        for i, s in enumerate(seqs):
            if s[0] != CLS:
                raise ValueError("sequences must start with [CLS]")
            ids[i, :len(s)] = s
            mask[i, :len(s)] = True
        return cls(ids, mask)

    def __len__(self) -> int:
        return self.ids.shape[0]


def _param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.hidden, cfg.ffn
    shapes = {"tok_emb": (cfg.vocab_size, d), "pos_emb": (cfg.max_len, d),
              "emb_ln.g": (d,), "emb_ln.b": (d,)}
    for i in range(cfg.num_layers):
        for proj in "qkvo":
            shapes[f"l{i}.{proj}.w"] = (d, d)
            shapes[f"l{i}.{proj}.b"] = (d,)
        shapes[f"l{i}.ln1.g"] = (d,)
        shapes[f"l{i}.ln1.b"] = (d,)
        shapes[f"l{i}.ff1.w"] = (d, f)
        shapes[f"l{i}.ff1.b"] = (f,)
        shapes[f"l{i}.ff2.w"] = (f, d)
        shapes[f"l{i}.ff2.b"] = (d,)
        shapes[f"l{i}.ln2.g"] = (d,)
        shapes[f"l{i}.ln2.b"] = (d,)
    shapes["mlm.b"] = (cfg.vocab_size,)
    return shapes


@dataclass
class EncoderWeights:
    config: EncoderConfig
    params: dict[str, Tensor]
    frozen: bool = False
    manifest: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config: EncoderConfig, seed: int = 0) -> "EncoderWeights":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in _param_shapes(config).items():
            if name.endswith(".g"):
                arr = np.ones(shape)
            elif name.endswith(".b"):
                arr = np.zeros(shape)
            else:
                arr = rng.normal(0.0, config.init_std, shape)
            params[name] = Tensor(arr, requires_grad=True)
        return cls(config, params, frozen=False, manifest={"init_seed": seed})

    def freeze(self) -> "EncoderWeights":
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def unfreeze(self) -> "EncoderWeights":
        self.frozen = False
        for p in self.params.values():
            p.requires_grad = True
        return self

    def copy(self) -> "EncoderWeights":
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()}
        return EncoderWeights(copy.deepcopy(self.config), params, self.frozen, copy.deepcopy(self.manifest))

    def encoder_params(self) -> dict[str, Tensor]:
        """Parameters of f_theta proper (the MLM output bias excluded)."""
        return {k: v for k, v in self.params.items() if not k.startswith("mlm.")}

    def num_parameters(self) -> int:
        return sum(p.size for p in self.encoder_params().values())

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(self.params[k].data.tobytes())
        return h.hexdigest()

    def config_dict(self) -> dict:
        return asdict(self.config)


def _attention(x: Tensor, w: EncoderWeights, i: int, mask_bias: np.ndarray) -> Tensor:
    cfg = w.config
    p = w.params
    B, L, d = x.shape
    H, dh = cfg.num_heads, cfg.head_dim

    def heads(name):
        y = x @ p[f"l{i}.{name}.w"] + p[f"l{i}.{name}.b"]
        return y.reshape(B, L, H, dh).transpose(0, 2, 1, 3)

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)) + mask_bias
    attn = T.softmax(scores)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, L, d)
    return ctx @ p[f"l{i}.o.w"] + p[f"l{i}.o.b"]


def attention_weights(batch: TokenBatch, w: EncoderWeights, layer: int = 0) -> np.ndarray:
    """Attention probabilities of ``layer`` (B, H, L, L), no adapters."""
    states = _embed(batch, w)
    x = states
    for i in range(layer):
        x = _layer(x, w, i, _mask_bias(batch), None, None)
    cfg = w.config
    p = w.params
    B, L, d = x.shape
    H, dh = cfg.num_heads, cfg.head_dim
    q = (x.data @ p[f"l{layer}.q.w"].data + p[f"l{layer}.q.b"].data).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
    k = (x.data @ p[f"l{layer}.k.w"].data + p[f"l{layer}.k.b"].data).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
    scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh) + _mask_bias(batch)
    return T.softmax(Tensor(scores)).data


def _mask_bias(batch: TokenBatch) -> np.ndarray:
    # -1e30 underflows to an exact zero probability after the max shift
    return np.where(batch.mask, 0.0, -1e30)[:, None, None, :]


def _embed(batch: TokenBatch, w: EncoderWeights) -> Tensor:
    cfg = w.config
    B, L = batch.ids.shape
    if L > cfg.max_len:
        raise ValueError(f"sequence length {L} exceeds max_len {cfg.max_len}")
    p = w.params
    x = T.embedding(p["tok_emb"], batch.ids) + T.embedding(p["pos_emb"], np.arange(L))
    return T.layer_norm(x, p["emb_ln.g"], p["emb_ln.b"], cfg.ln_eps)


def _layer(x: Tensor, w: EncoderWeights, i: int, mask_bias, adapter, z) -> Tensor:
    p, eps = w.params, w.config.ln_eps
    h = _attention(x, w, i, mask_bias)
    if adapter is not None:
        h = adapter.forward(h, 2 * i, z)
    x = T.layer_norm(x + h, p[f"l{i}.ln1.g"], p[f"l{i}.ln1.b"], eps)
    h = T.gelu(x @ p[f"l{i}.ff1.w"] + p[f"l{i}.ff1.b"]) @ p[f"l{i}.ff2.w"] + p[f"l{i}.ff2.b"]
    if adapter is not None:
        h = adapter.forward(h, 2 * i + 1, z)
    return T.layer_norm(x + h, p[f"l{i}.ln2.g"], p[f"l{i}.ln2.b"], eps)


def encode(batch: TokenBatch, weights: EncoderWeights, adapter: Adapter | None = None,
           z: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Return (per-token states (B, L, d), h_cls (B, d)).

    ``adapter`` is applied to each attention and feed-forward sublayer output
    before the residual connection; conditional adapters also take ``z``.
    """
    if batch.ids.size and batch.ids.max() >= weights.config.vocab_size:
        raise IndexError("token id outside the vocabulary")
    x = _embed(batch, weights)
    bias = _mask_bias(batch)
    for i in range(weights.config.num_layers):
        x = _layer(x, weights, i, bias, adapter, z)
    return x, x[:, 0, :]


# ---------------------------------------------------------------------------
# masked language modelling
# ---------------------------------------------------------------------------

def mask_tokens(ids: np.ndarray, rng: np.random.Generator, vocab_size: int,
                rate: float = 0.15) -> tuple[np.ndarray, np.ndarray]:
    """BERT-style corruption of non-special tokens.

    Returns (corrupted ids, boolean target mask).  Of the selected positions,
    80% become [MASK], 10% a random content token, 10% stay unchanged.
    """
    eligible = ids >= N_SPECIAL
    selected = eligible & (rng.random(ids.shape) < rate)
    corrupted = ids.copy()
    roll = rng.random(ids.shape)
    corrupted[selected & (roll < 0.8)] = MASK
    swap = selected & (roll >= 0.8) & (roll < 0.9)
    corrupted[swap] = rng.integers(N_SPECIAL, vocab_size, size=int(swap.sum()))
    return corrupted, selected


def mlm_loss(batch: TokenBatch, targets: np.ndarray, selected: np.ndarray,
             weights: EncoderWeights) -> Tensor:
    states, _ = encode(batch, weights)
    B, L, d = states.shape
    flat = states.reshape(B * L, d)
    rows = np.flatnonzero(selected.reshape(-1))
    picked = flat[rows]
    logits = picked @ weights.params["tok_emb"].transpose() + weights.params["mlm.b"]
    return T.cross_entropy(logits, targets.reshape(-1)[rows])


def _length_bucketed_batches(corpus, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One shuffled epoch of batches drawn from length-sorted chunks (less padding)."""
    lengths = np.array([len(s) for s in corpus])
    order = np.lexsort((rng.random(len(corpus)), lengths))
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def mlm_pretrain(corpus: Sequence[Sequence[int]], config: EncoderConfig, steps: int,
                 seed: int = 0, batch_size: int = 64, lr: float = 1e-3,
                 mask_rate: float = 0.15) -> EncoderWeights:
    """Pretrain on ``corpus`` (token sequences with leading [CLS]), then freeze.

    The loss trace lands in ``weights.manifest["mlm_loss"]``.
    """
    if len(corpus) == 0:
        raise ValueError("empty MLM corpus")
    weights = EncoderWeights.init(config, seed)
    rng = np.random.default_rng(seed + 1)
    opt = T.Adam(weights.params, lr=lr)
    losses: list[float] = []
    batches: list[np.ndarray] = []
    for _ in range(steps):
        if not batches:
            batches = _length_bucketed_batches(corpus, batch_size, rng)
        idx = batches.pop()
        batch = TokenBatch.from_sequences([corpus[j] for j in idx], config.max_len)
        corrupted, selected = mask_tokens(batch.ids, rng, config.vocab_size, mask_rate)
        if not selected.any():
            continue
        opt.zero_grad()
        loss = mlm_loss(TokenBatch(corrupted, batch.mask), batch.ids, selected, weights)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    weights.manifest.update({"pretrain_seed": seed, "steps": steps, "mlm_loss": losses})
    return weights.freeze()
