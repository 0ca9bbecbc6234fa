"""Plain, CA-MTL-style conditional and hypernetwork-generated adapters.

Every bundle is an exact identity at initialization: the up-projection (or
the hypernetwork that generates it) starts at zero, as do all shift terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor

VARIANTS = ("ca_mtl", "hypernet")
EMBEDDING_MODES = ("latent", "latent_plus_features", "projected_textemb", "projected_fisher")


def adapter_forward(h: Tensor, down: Tensor, up: Tensor, gamma, beta, eps: float = 1e-5) -> Tensor:
    """h + LayerNorm_{gamma,beta}(U GeLU(D h)) with D: d x a, U: a x d."""
    if h.shape[-1] != down.shape[0] or up.shape[1] != h.shape[-1]:
        raise ValueError(f"adapter dims: h {h.shape}, D {down.shape}, U {up.shape}")
    inner = T.gelu(h @ down) @ up
    return h + T.layer_norm(inner, gamma, beta, eps)


def condition_layernorm(z: Tensor, w_gamma: Tensor, w_beta: Tensor) -> tuple[Tensor, Tensor]:
    if z.shape[-1] != w_gamma.shape[0] or z.shape[-1] != w_beta.shape[0]:
        raise ValueError("z dimension does not match the conditioning weights")
    zr = z.reshape(1, -1)
    return (zr @ w_gamma).reshape(-1), (zr @ w_beta).reshape(-1)


def film(h: Tensor, z: Tensor, w_h: Tensor, w_b: Tensor) -> Tensor:
    """h + (W_h z) * h + W_b z."""
    if z.shape[-1] != w_h.shape[0] or h.shape[-1] != w_h.shape[1]:
        raise ValueError("FiLM dimension mismatch")
    zr = z.reshape(1, -1)
    scale = (zr @ w_h).reshape(-1)
    shift = (zr @ w_b).reshape(-1)
    return h + scale * h + shift


def hypernet_generate(z: Tensor, w_down: Tensor, w_up: Tensor, hidden: int,
                      bottleneck: int) -> tuple[Tensor, Tensor]:
    """D = reshape(W_D z) (d x a), U = reshape(W_U z) (a x d)."""
    if z.shape[-1] != w_down.shape[1] or w_down.shape[0] != hidden * bottleneck:
        raise ValueError("hypernetwork dimension mismatch")
    zc = z.reshape(-1, 1)
    down = (w_down @ zc).reshape(hidden, bottleneck)
    up = (w_up @ zc).reshape(bottleneck, hidden)
    return down, up


def _param(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


class _Bundle:
    params: dict[str, Tensor]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state(self, arrays: Mapping[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.data = np.array(arrays[k], dtype=np.float64)


@dataclass
class AdapterWeights(_Bundle):
    """Per-task Houlsby adapters, one per insertion point."""

    hidden: int
    bottleneck: int
    n_points: int
    params: dict[str, Tensor] = field(default_factory=dict)
    ln_eps: float = 1e-5

    @classmethod
    def init(cls, hidden: int, bottleneck: int, n_points: int, rng: np.random.Generator,
             std: float = 0.02) -> "AdapterWeights":
        if bottleneck >= hidden:
            raise ValueError("adapter bottleneck must be smaller than the hidden size")
        params = {}
        for k in range(n_points):
            params[f"p{k}.down"] = _param(rng.normal(0.0, std, (hidden, bottleneck)))
            params[f"p{k}.up"] = _param(np.zeros((bottleneck, hidden)))
            params[f"p{k}.ln_g"] = _param(np.ones(hidden))
            params[f"p{k}.ln_b"] = _param(np.zeros(hidden))
        return cls(hidden, bottleneck, n_points, params)

    def forward(self, h: Tensor, point: int, z: Tensor | None = None) -> Tensor:
        p = self.params
        return adapter_forward(h, p[f"p{point}.down"], p[f"p{point}.up"],
                               p[f"p{point}.ln_g"], p[f"p{point}.ln_b"], self.ln_eps)


@dataclass
class ConditionalAdapterWeights(_Bundle):
    """One adapter shared by all tasks and modulated by a task embedding."""

    variant: str
    hidden: int
    bottleneck: int
    n_points: int
    dim_z: int
    params: dict[str, Tensor] = field(default_factory=dict)
    ln_eps: float = 1e-5

    @classmethod
    def init(cls, variant: str, hidden: int, bottleneck: int, n_points: int, dim_z: int,
             rng: np.random.Generator, std: float = 0.02) -> "ConditionalAdapterWeights":
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        if bottleneck >= hidden:
            raise ValueError("adapter bottleneck must be smaller than the hidden size")
        d, a = hidden, bottleneck
        params = {}
        for k in range(n_points):
            if variant == "ca_mtl":
                params[f"p{k}.down"] = _param(rng.normal(0.0, std, (d, a)))
                params[f"p{k}.up"] = _param(np.zeros((a, d)))
                params[f"p{k}.w_gamma"] = _param(rng.normal(0.0, std, (dim_z, d)))
                params[f"p{k}.w_beta"] = _param(np.zeros((dim_z, d)))
                params[f"p{k}.w_h"] = _param(np.zeros((dim_z, d)))
                params[f"p{k}.w_b"] = _param(np.zeros((dim_z, d)))
            else:
                params[f"p{k}.w_down"] = _param(rng.normal(0.0, std, (d * a, dim_z)))
                params[f"p{k}.w_up"] = _param(np.zeros((a * d, dim_z)))
                params[f"p{k}.ln_g"] = _param(np.ones(d))
                params[f"p{k}.ln_b"] = _param(np.zeros(d))
        return cls(variant, hidden, bottleneck, n_points, dim_z, params)

    def forward(self, h: Tensor, point: int, z: Tensor | None = None) -> Tensor:
        if z is None:
            raise ValueError("conditional adapter needs a task embedding")
        if z.shape != (self.dim_z,):
            raise ValueError(f"task embedding of shape {z.shape}, expected ({self.dim_z},)")
        p = self.params
        if self.variant == "ca_mtl":
            h = film(h, z, p[f"p{point}.w_h"], p[f"p{point}.w_b"])
            gamma, beta = condition_layernorm(z, p[f"p{point}.w_gamma"], p[f"p{point}.w_beta"])
            return adapter_forward(h, p[f"p{point}.down"], p[f"p{point}.up"], gamma, beta, self.ln_eps)
        down, up = hypernet_generate(z, p[f"p{point}.w_down"], p[f"p{point}.w_up"],
                                     self.hidden, self.bottleneck)
        return adapter_forward(h, down, up, p[f"p{point}.ln_g"], p[f"p{point}.ln_b"], self.ln_eps)


@dataclass
class TaskEmbeddingTable:
    dim_z: int = 32
    seeds: int = 1
    entries: dict[tuple[str, int], Tensor] = field(default_factory=dict)

    @classmethod
    def init(cls, task_ids, dim_z: int, seeds: int, rng: np.random.Generator,
             std: float = 0.1) -> "TaskEmbeddingTable":
        table = cls(dim_z, seeds)
        for tid in task_ids:
            for s in range(seeds):
                table.entries[(tid, s)] = _param(rng.normal(0.0, std, dim_z))
        return table

    def __getitem__(self, key: tuple[str, int]) -> Tensor:
        tid, s = key
        if s >= self.seeds:
            raise IndexError(f"seed index {s} >= K={self.seeds}")
        try:
            return self.entries[key]
        except KeyError:
            raise KeyError(f"unknown task id {tid!r}") from None

    def __len__(self) -> int:
        return len(self.entries)

    def task_ids(self) -> list[str]:
        return list(dict.fromkeys(t for t, _ in self.entries))

    def params(self) -> dict[str, Tensor]:
        return {f"z/{t}/{s}": v for (t, s), v in self.entries.items()}

    def mean(self) -> np.ndarray:
        return np.mean([v.data for v in self.entries.values()], axis=0)


@dataclass
class FeatureProjection:
    """W_phi mapping a feature vector (aspects or a baseline embedding) to R^dim_z."""

    in_dim: int
    dim_z: int
    weight: Tensor = None

    @classmethod
    def init(cls, in_dim: int, dim_z: int, rng: np.random.Generator | None = None,
             std: float = 0.02) -> "FeatureProjection":
        arr = np.zeros((in_dim, dim_z)) if rng is None else rng.normal(0.0, std, (in_dim, dim_z))
        return cls(in_dim, dim_z, _param(arr))

    def __call__(self, phi) -> Tensor:
        phi = phi if isinstance(phi, Tensor) else Tensor(phi)
        if phi.shape != (self.in_dim,):
            raise ValueError(f"feature vector of shape {phi.shape}, expected ({self.in_dim},)")
        return (phi.reshape(1, -1) @ self.weight).reshape(-1)


def effective_embedding(task_id: str, mode: str, table: TaskEmbeddingTable | None = None,
                        projection: FeatureProjection | None = None, features=None,
                        seed: int = 0) -> Tensor:
    """The conditioning vector for ``task_id`` under ``mode``.

    latent                z_i
    latent_plus_features  z_i + W_phi phi_i   (mean of z for tasks not in the table)
    projected_*           W_phi phi_i, phi being a TextEmb or Fisher vector
    """
    if mode not in EMBEDDING_MODES:
        raise ValueError(f"unknown embedding mode {mode!r}")
    if mode == "latent":
        return table[(task_id, seed)]
    if features is None:
        raise ValueError(f"mode {mode!r} needs a feature vector for task {task_id!r}")
    projected = projection(features)
    if mode != "latent_plus_features":
        return projected
    if (task_id, seed) in table.entries:
        return table[(task_id, seed)] + projected
    return Tensor(table.mean()) + projected


def parameter_counts(strategy: str, *, encoder_params: int, adapter=None, dim_z: int = 32,
                     projection: FeatureProjection | None = None) -> dict[str, int]:
    """Trained and task-specific encoder parameter counts for a strategy.

    ``encoder_params`` is the backbone size; ``adapter`` an initialized bundle
    (plain for ``plain_adapter``, conditional otherwise).  Heads are excluded.
    """
    if strategy == "full_fine_tune":
        return {"trained": encoder_params, "task_specific": encoder_params}
    if strategy == "plain_adapter":
        n = adapter.num_parameters()
        return {"trained": n, "task_specific": n}
    trained = adapter.num_parameters() + (projection.weight.size if projection is not None else 0)
    return {"trained": trained, "task_specific": dim_z}
