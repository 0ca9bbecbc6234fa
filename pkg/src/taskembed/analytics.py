"""Measurements over task-embedding spaces."""

from __future__ import annotations

import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from math import comb

import numpy as np
from scipy.special import logsumexp


@dataclass
class EmbeddingSpace:
    matrix: np.ndarray
    task_ids: list[str]
    seeds: list[int]
    task_types: list[str]
    run_id: str = ""

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        n = self.matrix.shape[0]
        if not (len(self.task_ids) == len(self.seeds) == len(self.task_types) == n):
            raise ValueError("metadata length does not match the row count")
        keys = list(zip(self.task_ids, self.seeds))
        if len(set(keys)) != n:
            raise ValueError("duplicate (task id, seed index) rows")

    def __len__(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def collapse(self, seed: int = 0) -> "EmbeddingSpace":
        """Keep a single row per task (the given seed index)."""
        rows = [i for i, s in enumerate(self.seeds) if s == seed]
        return self.select(rows)

    def select(self, rows) -> "EmbeddingSpace":
        rows = list(rows)
        return EmbeddingSpace(self.matrix[rows], [self.task_ids[i] for i in rows],
                              [self.seeds[i] for i in rows], [self.task_types[i] for i in rows],
                              self.run_id)

    def row(self, task_id: str, seed: int = 0) -> np.ndarray:
        for i, (t, s) in enumerate(zip(self.task_ids, self.seeds)):
            if t == task_id and s == seed:
                return self.matrix[i]
        raise KeyError((task_id, seed))

    def type_of(self, task_id: str) -> str:
        return self.task_types[self.task_ids.index(task_id)]


def _normalized(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-norm embedding; training probably degenerated")
    return matrix / norms[:, None]


def cosine_similarity_matrix(matrix: np.ndarray) -> np.ndarray:
    u = _normalized(np.asarray(matrix, dtype=float))
    return u @ u.T


def _knn_from_sims(sims: np.ndarray, row: int, k: int) -> list[int]:
    s = sims[row].copy()
    s[row] = -np.inf
    # stable sort on -similarity keeps lower row indices first among ties
    order = np.argsort(-s, kind="stable")
    return [int(i) for i in order[:k]]


def cosine_knn(space, row: int, k: int) -> list[int]:
    matrix = space.matrix if isinstance(space, EmbeddingSpace) else np.asarray(space, dtype=float)
    if not 0 < k < matrix.shape[0]:
        raise ValueError("k must be positive and smaller than the row count")
    return _knn_from_sims(cosine_similarity_matrix(matrix), row, k)


# ---------------------------------------------------------------------------
# stability
# ---------------------------------------------------------------------------

@dataclass
class StabilityReport:
    k: int
    per_task: dict[str, float]
    per_type: dict[str, float]
    overall: float
    run_ids: list[str] = field(default_factory=list)
    baseline: float | None = None
    baseline_se: float | None = None

    def as_dict(self) -> dict:
        return {"k": self.k, "overall": self.overall, "per_type": self.per_type,
                "per_task": self.per_task, "run_ids": self.run_ids,
                "baseline": self.baseline, "baseline_se": self.baseline_se}


def _by_type(per_task: dict[str, float], type_of: dict[str, str]) -> dict[str, float]:
    groups = defaultdict(list)
    for tid, rate in per_task.items():
        groups[type_of[tid]].append(rate)
    return {t: float(np.mean(v)) for t, v in sorted(groups.items())}


def _position_hits(matrix: np.ndarray, task_ids, k: int) -> np.ndarray:
    sims = cosine_similarity_matrix(matrix)
    np.fill_diagonal(sims, -np.inf)
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    ids = np.asarray(task_ids)
    return (ids[order] == ids[:, None]).any(axis=1)


def position_stability(space: EmbeddingSpace, k: int = 10) -> StabilityReport:
    """Rate at which an embedding's k-NN contains a sibling seed of its task."""
    counts = Counter(space.task_ids)
    if min(counts.values()) < 2:
        raise ValueError("position stability needs K >= 2 embeddings per task")
    if len(space) <= k:
        raise ValueError("row count must exceed k")
    hits = _position_hits(space.matrix, space.task_ids, k)
    per_task = defaultdict(list)
    for tid, h in zip(space.task_ids, hits):
        per_task[tid].append(float(h))
    per_task = {t: float(np.mean(v)) for t, v in per_task.items()}
    type_of = dict(zip(space.task_ids, space.task_types))
    return StabilityReport(k, per_task, _by_type(per_task, type_of), float(hits.mean()),
                           [space.run_id])


def random_position_baseline(n_tasks: int, seeds: int = 3, k: int = 10, dim: int = 32,
                             trials: int = 1000, rng: np.random.Generator | None = None
                             ) -> tuple[float, float]:
    """Monte-Carlo position stability of isotropic Gaussian spaces: (mean, standard error)."""
    rng = rng or np.random.default_rng(0)
    ids = np.repeat(np.arange(n_tasks), seeds)
    rates = np.empty(trials)
    for i in range(trials):
        rates[i] = _position_hits(rng.standard_normal((n_tasks * seeds, dim)), ids, k).mean()
    return float(rates.mean()), float(rates.std(ddof=1) / np.sqrt(trials))


def exact_position_baseline(n_tasks: int, seeds: int = 3, k: int = 10) -> float:
    """P(at least one of K-1 siblings among k neighbours drawn from M-1 rows)."""
    m = n_tasks * seeds
    return 1.0 - comb(m - seeds, k) / comb(m - 1, k)


def jaccard(a, b) -> float:
    a, b = set(a), set(b)
    union = a | b
    return len(a & b) / len(union) if union else 1.0


def neighborhood_stability(space_a: EmbeddingSpace, space_b: EmbeddingSpace, k: int = 10,
                           seed: int = 0) -> StabilityReport:
    """Per-task Jaccard overlap of k-NN task sets across two runs."""
    a = space_a.collapse(seed) if len(set(space_a.seeds)) > 1 else space_a
    b = space_b.collapse(seed) if len(set(space_b.seeds)) > 1 else space_b
    if sorted(a.task_ids) != sorted(b.task_ids):
        raise ValueError("the two runs do not cover the same task ids")
    order = [b.task_ids.index(t) for t in a.task_ids]
    b = b.select(order)
    if len(a) <= k:
        raise ValueError("row count must exceed k")
    sa, sb = cosine_similarity_matrix(a.matrix), cosine_similarity_matrix(b.matrix)
    per_task = {}
    for i, tid in enumerate(a.task_ids):
        na = {a.task_ids[j] for j in _knn_from_sims(sa, i, k)}
        nb = {a.task_ids[j] for j in _knn_from_sims(sb, i, k)}
        per_task[tid] = jaccard(na, nb)
    type_of = dict(zip(a.task_ids, a.task_types))
    return StabilityReport(k, per_task, _by_type(per_task, type_of),
                           float(np.mean(list(per_task.values()))), [a.run_id, b.run_id])


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------

@dataclass
class PCAResult:
    components: np.ndarray          # (n_components, dim), rows orthonormal
    explained_variance: np.ndarray
    mean: np.ndarray
    coords: np.ndarray


def pca(matrix, n_components: int = 2) -> PCAResult:
    x = np.asarray(matrix.matrix if isinstance(matrix, EmbeddingSpace) else matrix, dtype=float)
    if x.shape[0] <= n_components:
        raise ValueError("need more rows than components")
    mu = x.mean(axis=0)
    xc = x - mu
    if np.allclose(xc, 0.0):
        raise ValueError("all rows are equal; nothing to project")
    cov = xc.T @ xc / (x.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    top = np.argsort(vals)[::-1][:n_components]
    comps = vecs[:, top].T
    # sign convention: largest-magnitude loading positive
    signs = np.sign(comps[np.arange(n_components), np.abs(comps).argmax(axis=1)])
    comps = comps * signs[:, None]
    return PCAResult(comps, vals[top], mu, xc @ comps.T)


# ---------------------------------------------------------------------------
# diagonal-covariance Gaussian mixture
# ---------------------------------------------------------------------------

@dataclass
class GMMModel:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihood: list[float] = field(default_factory=list)
    reseeded: bool = False
    fitted: bool = True

    def _log_joint(self, x: np.ndarray) -> np.ndarray:
        diff = x[:, None, :] - self.means[None]
        logpdf = -0.5 * (np.log(2 * np.pi * self.variances)[None] + diff ** 2 / self.variances[None]).sum(-1)
        return logpdf + np.log(self.weights)[None]

    def predict_proba(self, x) -> np.ndarray:
        lj = self._log_joint(np.atleast_2d(np.asarray(x, dtype=float)))
        return np.exp(lj - logsumexp(lj, axis=1, keepdims=True))

    def score(self, x) -> float:
        """Mean per-point log-likelihood."""
        return float(logsumexp(self._log_joint(np.atleast_2d(x)), axis=1).mean())


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = np.min(((x[:, None] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        if d2.sum() == 0:
            centers.append(x[rng.integers(len(x))])
        else:
            centers.append(x[rng.choice(len(x), p=d2 / d2.sum())])
    return np.array(centers)


def gmm_fit(points, n_components: int = 8, em_iterations: int = 200, seed: int = 0,
            var_floor: float = 1e-6, tol: float = 1e-10) -> tuple[GMMModel, np.ndarray]:
    """EM for a diagonal-covariance mixture with k-means++ seeding.

    A component whose responsibility mass vanishes is re-seeded once (the
    likelihood trace restarts); a second collapse is reported as a warning.
    """
    x = np.asarray(points, dtype=float)
    n, d = x.shape
    if n < n_components:
        raise ValueError("need at least as many points as components")
    rng = np.random.default_rng(seed)
    spread = np.maximum(x.var(axis=0), var_floor)

    def start():
        return (np.full(n_components, 1.0 / n_components), _kmeans_pp(x, n_components, rng),
                np.tile(spread, (n_components, 1)))

    w, mu, var = start()
    trace: list[float] = []
    reseeded = False
    for _ in range(em_iterations):
        model = GMMModel(w, mu, var)
        lj = model._log_joint(x)
        ll = logsumexp(lj, axis=1)
        trace.append(float(ll.sum()))
        resp = np.exp(lj - ll[:, None])
        nk = resp.sum(axis=0)
        if np.any(nk < 1e-8):
            if not reseeded:
                reseeded = True
                w, mu, var = start()
                trace = []
                continue
            warnings.warn("GMM component collapsed after re-seeding", RuntimeWarning)
            nk = np.maximum(nk, 1e-12)
        w = nk / n
        mu = resp.T @ x / nk[:, None]
        var = np.maximum(resp.T @ (x ** 2) / nk[:, None] - mu ** 2, var_floor)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < tol * max(1.0, abs(trace[-1])):
            break
    model = GMMModel(w, mu, var, reseeded=reseeded)
    trace.append(float(logsumexp(model._log_joint(x), axis=1).sum()))
    model.log_likelihood = trace
    return model, model.predict_proba(x)


# ---------------------------------------------------------------------------
# probing and regression
# ---------------------------------------------------------------------------

def majority_baseline(labels) -> float:
    labels = list(labels)
    if not labels:
        raise ValueError("empty label list")
    counts = Counter(labels)
    return max(counts.values()) / len(labels)


def majority_label(labels):
    counts = Counter(labels)
    best = max(counts.values())
    return min(l for l, c in counts.items() if c == best)


@dataclass
class ProbeReport:
    aspect: str
    accuracy: float
    majority: float
    n: int
    predictions: list = field(default_factory=list)
    flagged_folds: list[int] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"aspect": self.aspect, "accuracy": self.accuracy, "majority": self.majority,
                "n": self.n, "flagged_folds": self.flagged_folds}


def logistic_probe_loo(embeddings, labels, aspect: str = "", C: float = 1.0,
                       max_iter: int = 1000) -> ProbeReport:
    """Leave-one-task-out accuracy of an L2 multinomial logistic regression.

    Features are standardised inside each fold (statistics from the training
    rows only), so the result does not depend on the overall embedding scale.
    """
    from sklearn.linear_model import LogisticRegression
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    x = np.asarray(embeddings, dtype=float)
    y = np.asarray(labels)
    if len(set(y.tolist())) < 2:
        # a single class: every fold predicts it
        return ProbeReport(aspect, 1.0, 1.0, len(y), list(y))
    preds, flagged = [], []
    for i in range(len(y)):
        train = np.arange(len(y)) != i
        classes = set(y[train].tolist())
        if len(classes) < 2:
            preds.append(majority_label(y[train].tolist()))
            flagged.append(i)
            continue
        if y[i] not in classes:
            flagged.append(i)
        clf = make_pipeline(StandardScaler(), LogisticRegression(C=C, max_iter=max_iter))
        clf.fit(x[train], y[train])
        preds.append(clf.predict(x[i:i + 1])[0])
    acc = float(np.mean(np.asarray(preds) == y))
    return ProbeReport(aspect, acc, majority_baseline(y.tolist()), len(y), preds, flagged)


class SingularSystemError(np.linalg.LinAlgError):
    """Ridge normal equations are singular; raise lambda."""


@dataclass
class RidgeModel:
    coef: np.ndarray        # (p, m)
    intercept: np.ndarray   # (m,)
    lam: float

    def predict(self, phi) -> np.ndarray:
        phi = np.asarray(phi, dtype=float)
        return phi @ self.coef + self.intercept


def ridge_fit(phi, z, lam: float = 1.0) -> RidgeModel:
    """Closed-form multi-output ridge with an unpenalized intercept."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    x = np.asarray(phi, dtype=float)
    y = np.asarray(z, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if x.shape[0] != y.shape[0]:
        raise ValueError("phi and z rows are not aligned")
    xm, ym = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - xm, y - ym
    gram = xc.T @ xc + lam * np.eye(x.shape[1])
    if lam == 0 and np.linalg.matrix_rank(gram) < gram.shape[0]:
        raise SingularSystemError("singular normal equations at lambda=0")
    coef = np.linalg.solve(gram, xc.T @ yc)
    return RidgeModel(coef, ym - xm @ coef, lam)


def ridge_predict(model: RidgeModel, phi) -> np.ndarray:
    return model.predict(phi)


@dataclass
class RegressionReport:
    lam: float
    mse: float
    mean_predictor_mse: float
    folds: str = "leave-one-out"
    per_lambda: dict[float, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"lambda": self.lam, "mse": self.mse, "mean_predictor_mse": self.mean_predictor_mse,
                "folds": self.folds, "per_lambda": {str(k): v for k, v in self.per_lambda.items()}}


def ridge_loo(phi, z, lambdas=(0.01, 0.1, 1.0, 10.0)) -> RegressionReport:
    """Leave-one-out MSE for each lambda; reports the best against the mean predictor."""
    x, y = np.asarray(phi, dtype=float), np.asarray(z, dtype=float)
    n = len(x)
    per = {}
    for lam in lambdas:
        errs = []
        for i in range(n):
            keep = np.arange(n) != i
            pred = ridge_fit(x[keep], y[keep], lam).predict(x[i])
            errs.append(np.mean((pred - y[i]) ** 2))
        per[float(lam)] = float(np.mean(errs))
    base = float(np.mean([np.mean((y[np.arange(n) != i].mean(axis=0) - y[i]) ** 2) for i in range(n)]))
    best = min(per, key=per.get)
    return RegressionReport(best, per[best], base, per_lambda=per)


def select_lambda(phi, z, lambdas=(0.01, 0.1, 1.0, 10.0)) -> float:
    return ridge_loo(phi, z, lambdas).lam


def same_type_mean(space: EmbeddingSpace, task_type: str, exclude=()) -> np.ndarray:
    excl = set(exclude)
    rows = [i for i, (t, ty) in enumerate(zip(space.task_ids, space.task_types))
            if ty == task_type and t not in excl]
    if not rows:
        raise ValueError(f"no embeddings of type {task_type!r}")
    return space.matrix[rows].mean(axis=0)
