"""Desk experiment: stages shared by the CLI and the end-to-end runner."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analytics as A
from .baselines import fisher_emb, text_emb
from .config import ExperimentConfig
from .encoder import EncoderWeights, mlm_pretrain
from .multitask import (RunArtifact, TrainConfig, evaluate, train_multitask, train_single,
                        zero_shot_evaluate)
from .taskgen import (ASPECT_BLOCKS, AspectVector, extract_aspects, fit_domain_gmm,
                      generate_task, holdout_ids, lexicons, spec_dict, suite_specs)
from .tasks import TaskCollection, TaskSpec

log = logging.getLogger(__name__)

SINGLE_STRATEGIES = ("full_fine_tune", "plain_adapter")
MULTITASK_STRATEGIES = ("ca_mtl", "hypernet", "projected_textemb", "projected_fisher")
ZERO_SHOT_SOURCES = ("ridge", "features_aware", "same_type_mean", "random", "oracle")


# ---------------------------------------------------------------------------
# suite, backbone, aspects
# ---------------------------------------------------------------------------

def build_suite(cfg: ExperimentConfig):
    s = cfg.suite
    specs = suite_specs(s.n_per_type, s.n_domains, s.size_profile, s.length_profile, cfg.seed)
    lex = lexicons(s.n_domains, cfg.encoder.vocab_size)
    return TaskCollection([generate_task(g, lex[g.domain]) for g in specs]), specs


def suite_manifest(cfg: ExperimentConfig, specs, aspects: dict | None = None) -> dict:
    tasks = []
    for g in specs:
        row = {"task_id": g.task_id, "genspec": spec_dict(g)}
        if aspects and g.task_id in aspects:
            row["aspects"] = aspects[g.task_id].values.tolist()
        tasks.append(row)
    return {"master_seed": cfg.seed, "config_hash": cfg.digest(), "n_tasks": len(tasks),
            "aspect_blocks": [list(b) for b in ASPECT_BLOCKS], "tasks": tasks}


def mlm_corpus(collection: TaskCollection) -> list[list[int]]:
    return [ex.sequence for task in collection for ex in task.train]


def pretrain_encoder(cfg: ExperimentConfig, collection: TaskCollection) -> EncoderWeights:
    return mlm_pretrain(mlm_corpus(collection), cfg.encoder, steps=cfg.analysis.mlm_steps,
                        seed=cfg.seed, batch_size=cfg.train.batch_size, lr=cfg.analysis.mlm_lr)


def compute_aspects(collection: TaskCollection, encoder: EncoderWeights, cfg: ExperimentConfig):
    gmm = fit_domain_gmm(collection, encoder, cfg.analysis.gmm_components, cfg.seed)
    aspects = {t.id: extract_aspects(t, collection, encoder, gmm, cfg.analysis.quartiles)
               for t in collection}
    return aspects, gmm


# ---------------------------------------------------------------------------
# embedding spaces
# ---------------------------------------------------------------------------

def latent_space(art: RunArtifact, collection: TaskCollection, run_id: str = "") -> A.EmbeddingSpace:
    matrix, ids, seeds = art.embedding_matrix()
    return A.EmbeddingSpace(matrix, ids, seeds, [collection[t].task_type for t in ids], run_id)


def vector_space(vectors: dict, collection: TaskCollection, run_id: str = "") -> A.EmbeddingSpace:
    ids = [t.id for t in collection if t.id in vectors]
    return A.EmbeddingSpace(np.array([vectors[t] for t in ids]), ids, [0] * len(ids),
                            [collection[t].task_type for t in ids], run_id)


def unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


# ---------------------------------------------------------------------------
# accuracy tables
# ---------------------------------------------------------------------------

def majority_accuracies(collection: TaskCollection, split: str = "test") -> dict[str, float]:
    return {t.id: A.majority_baseline([ex.label for ex in t.split(split)]) for t in collection}


def accuracies(model_for, collection: TaskCollection, split: str = "test") -> dict[str, float]:
    return {t.id: evaluate(model_for(t.id), t, split).accuracy for t in collection}


def table1_report(acc: dict[str, dict[str, float]], params: dict[str, dict],
                  majority: dict[str, float]) -> dict:
    rows = [{"strategy": "majority_class", "mean_accuracy": float(np.mean(list(majority.values()))),
             "trained_params": None, "task_specific_params": None, "beats_majority_frac": None}]
    for name, per_task in acc.items():
        wins = [per_task[t] > majority[t] for t in per_task]
        rows.append({"strategy": name, "mean_accuracy": float(np.mean(list(per_task.values()))),
                     "trained_params": params[name]["trained"],
                     "task_specific_params": params[name]["task_specific"],
                     "beats_majority_frac": float(np.mean(wins))})
    return {"rows": rows, "per_task": acc, "majority": majority}


# ---------------------------------------------------------------------------
# analyses
# ---------------------------------------------------------------------------

def stability_within_report(space: A.EmbeddingSpace, cfg: ExperimentConfig) -> dict:
    k = cfg.analysis.k
    rep = A.position_stability(space, k)
    n_tasks = len(set(space.task_ids))
    seeds = len(space) // n_tasks
    mc, se = A.random_position_baseline(n_tasks, seeds, k, space.dim, cfg.analysis.baseline_trials,
                                        np.random.default_rng(cfg.seed))
    rep.baseline, rep.baseline_se = mc, se
    out = rep.as_dict()
    out.update(exact_baseline=A.exact_position_baseline(n_tasks, seeds, k),
               ratio=rep.overall / mc if mc > 0 else float("inf"), trials=cfg.analysis.baseline_trials)
    return out


def stability_across_report(spaces: list[A.EmbeddingSpace], cfg: ExperimentConfig) -> dict:
    if len(spaces) < 2:
        raise ValueError("stability_across needs at least two runs")
    k = cfg.analysis.k
    pairs = []
    for i in range(len(spaces)):
        for j in range(i + 1, len(spaces)):
            pairs.append(A.neighborhood_stability(spaces[i], spaces[j], k).as_dict())
    n = len(set(spaces[0].task_ids))
    rng = np.random.default_rng(cfg.seed)
    # Jaccard of two independent uniform k-subsets of the n-1 other tasks
    sims = []
    for _ in range(cfg.analysis.baseline_trials):
        a = set(rng.choice(n - 1, k, replace=False).tolist())
        b = set(rng.choice(n - 1, k, replace=False).tolist())
        sims.append(A.jaccard(a, b))
    return {"k": k, "pairs": pairs, "overall": float(np.mean([p["overall"] for p in pairs])),
            "baseline": float(np.mean(sims)), "baseline_se": float(np.std(sims, ddof=1) / np.sqrt(len(sims)))}


ASPECT_NAMES = tuple(name for name, _ in ASPECT_BLOCKS)


def probe_report(space: A.EmbeddingSpace, aspects: dict[str, AspectVector], seed: int = 0,
                 shuffles: int = 20) -> dict:
    """LOO logistic probes, one row per aspect, plus majority and shuffled-label rows."""
    space = space.collapse(0)
    x = space.matrix
    rows, majority = [], {}
    for name in ASPECT_NAMES:
        y = [aspects[t].label(name) for t in space.task_ids]
        rep = A.logistic_probe_loo(x, y, name)
        majority[name] = rep.majority
        rows.append({"row": name, "accuracy": rep.accuracy, "majority": rep.majority,
                     "gain": rep.accuracy - rep.majority, "n": rep.n,
                     "flagged_folds": len(rep.flagged_folds)})
    rows.append({"row": "majority", **{n: majority[n] for n in ASPECT_NAMES}})
    # permutation control on the task-type labels
    rng = np.random.default_rng(seed)
    y = np.array([aspects[t].label("task_type") for t in space.task_ids])
    accs = [A.logistic_probe_loo(x, rng.permutation(y), "task_type_shuffled").accuracy
            for _ in range(shuffles)]
    maj = majority["task_type"]
    noise = 2.0 * np.sqrt(maj * (1 - maj) / len(y))
    rows.append({"row": "task_type_shuffled", "accuracy": float(np.mean(accs)), "majority": maj,
                 "gain": float(np.mean(accs)) - maj, "noise_band": float(noise),
                 "permutations": shuffles})
    return {"run_id": space.run_id, "rows": rows}


def aspect_matrix(task_ids, aspects) -> np.ndarray:
    return np.array([aspects[t].values for t in task_ids])


def regress_report(space: A.EmbeddingSpace, aspects: dict, lambdas) -> dict:
    space = space.collapse(0)
    rep = A.ridge_loo(aspect_matrix(space.task_ids, aspects), space.matrix, lambdas)
    return {"run_id": space.run_id, **rep.as_dict()}


def pca_report(space: A.EmbeddingSpace) -> dict:
    res = A.pca(space.matrix, 2)
    rows = [{"task_id": t, "seed": s, "type": ty, "x": float(c[0]), "y": float(c[1])}
            for t, s, ty, c in zip(space.task_ids, space.seeds, space.task_types, res.coords)]
    return {"run_id": space.run_id, "explained_variance": res.explained_variance.tolist(),
            "components": res.components.tolist(), "rows": rows}


# ---------------------------------------------------------------------------
# zero-shot
# ---------------------------------------------------------------------------

def zero_shot_report(art: RunArtifact, collection: TaskCollection, heldout, aspects: dict,
                     sources=ZERO_SHOT_SOURCES, cfg: ExperimentConfig | None = None,
                     features_art: RunArtifact | None = None, split: str = "test") -> dict:
    """Accuracy of each embedding source on each held-out task; sources sorted by mean."""
    cfg = cfg or ExperimentConfig()
    heldout = [collection[t] for t in heldout]
    space = latent_space(art, collection, "zero_shot").collapse(0)
    train_ids = [t for t in space.task_ids if t not in {h.id for h in heldout}]
    per_task: dict[str, dict[str, float]] = {}
    extra: dict[str, dict] = {}
    for source in sources:
        scores = {}
        if source == "ridge":
            rows = [space.task_ids.index(t) for t in train_ids]
            phi = aspect_matrix(train_ids, aspects)
            lam = A.select_lambda(phi, space.matrix[rows], cfg.analysis.ridge_lambdas)
            model = A.ridge_fit(phi, space.matrix[rows], lam)
            extra[source] = {"lambda": lam}
            for task in heldout:
                scores[task.id] = zero_shot_evaluate(art, task, model.predict(aspects[task.id].values),
                                                     split).accuracy
        elif source == "features_aware":
            if features_art is None:
                raise ValueError("the features_aware source needs a features-aware run")
            for task in heldout:
                if task.id in features_art.task_ids:
                    raise ValueError(f"{task.id} was seen by the features-aware run")
                # mean latent z plus the projection of the task's aspects
                z = features_art.embedding(task.id)
                scores[task.id] = zero_shot_evaluate(features_art, task, z, split).accuracy
        elif source == "same_type_mean":
            train_space = space.select([space.task_ids.index(t) for t in train_ids])
            for task in heldout:
                z = A.same_type_mean(train_space, task.task_type)
                scores[task.id] = zero_shot_evaluate(art, task, z, split).accuracy
        elif source == "random":
            rng = np.random.default_rng(cfg.seed)
            draws = cfg.analysis.random_draws
            per_draw = np.zeros((draws, len(heldout)))
            for d in range(draws):
                for j, task in enumerate(heldout):
                    z = rng.standard_normal(art.config.dim_z)
                    per_draw[d, j] = zero_shot_evaluate(art, task, z, split).accuracy
            for j, task in enumerate(heldout):
                scores[task.id] = float(per_draw[:, j].mean())
            means = per_draw.mean(axis=1)
            extra[source] = {"draws": draws, "se": float(means.std(ddof=1) / np.sqrt(draws))}
        elif source == "oracle":
            # consistency check on tasks the run did see, one per type
            seen = {}
            for t in train_ids:
                seen.setdefault(collection[t].task_type, t)
            checks = []
            for t in seen.values():
                task = collection[t]
                zs = zero_shot_evaluate(art, task, art.embedding(t), split).accuracy
                sup = evaluate(art, task, split).accuracy
                scores[t] = zs
                checks.append({"task_id": t, "zero_shot": zs, "supervised": sup, "equal": zs == sup})
            extra[source] = {"checks": checks, "all_equal": all(c["equal"] for c in checks)}
        else:
            raise ValueError(f"unknown embedding source {source!r}")
        per_task[source] = scores
    summary = [{"source": s, "mean_accuracy": float(np.mean(list(per_task[s].values()))),
                "n_tasks": len(per_task[s]), **extra.get(s, {})} for s in per_task]
    summary.sort(key=lambda r: -r["mean_accuracy"])
    return {"heldout": [t.id for t in heldout], "split": split, "sources": summary,
            "per_task": per_task}


# ---------------------------------------------------------------------------
# end-to-end desk run
# ---------------------------------------------------------------------------

@dataclass
class DeskResults:
    config: ExperimentConfig
    suite: TaskCollection
    specs: list
    encoder: EncoderWeights
    aspects: dict
    gmm: object
    single: dict = field(default_factory=dict)       # mode -> {task id -> model}
    runs: dict = field(default_factory=dict)         # name -> RunArtifact
    baselines: dict = field(default_factory=dict)    # "textemb"/"fisher" -> {task id -> vector}
    accuracy: dict = field(default_factory=dict)     # strategy -> {task id -> acc}
    params: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    heldout: list = field(default_factory=list)
    wall_seconds: float = 0.0


class _Timer:
    def __init__(self, res: DeskResults, name: str):
        self.res, self.name = res, name

    def __enter__(self):
        self.t0 = time.perf_counter()
        log.info("stage %s", self.name)

    def __exit__(self, *exc):
        self.res.timings[self.name] = time.perf_counter() - self.t0
        log.info("stage %s done in %.1fs", self.name, self.res.timings[self.name])


def run_desk_pipeline(cfg: ExperimentConfig | None = None, out_dir=None,
                      strategies=SINGLE_STRATEGIES + MULTITASK_STRATEGIES) -> DeskResults:
    """Every run and analysis behind the desk-scale results; artifacts go to ``out_dir``."""
    cfg = cfg or ExperimentConfig()
    t0 = time.perf_counter()
    collection, specs = build_suite(cfg)
    res = DeskResults(cfg, collection, specs, None, {}, None)
    res.timings["generate"] = time.perf_counter() - t0
    with _Timer(res, "pretrain"):
        res.encoder = pretrain_encoder(cfg, collection)
    with _Timer(res, "aspects"):
        res.aspects, res.gmm = compute_aspects(collection, res.encoder, cfg)
    tc = cfg.train_config()
    majority = majority_accuracies(collection)

    for mode in SINGLE_STRATEGIES:
        if mode not in strategies and not (mode == "plain_adapter" and "projected_fisher" in strategies):
            continue
        with _Timer(res, mode):
            res.single[mode] = {t.id: train_single(t, res.encoder, mode, tc) for t in collection}
        if mode in strategies:
            res.accuracy[mode] = accuracies(lambda tid: res.single[mode][tid], collection)
            res.params[mode] = next(iter(res.single[mode].values())).parameter_counts()

    with _Timer(res, "baselines"):
        res.baselines["textemb"] = {t.id: text_emb(t, res.encoder, tc.example_cap) for t in collection}
        if "plain_adapter" in res.single:
            res.baselines["fisher"] = {t.id: fisher_emb(t, res.single["plain_adapter"][t.id],
                                                        tc.example_cap) for t in collection}

    def multitask(name, config, tasks=collection, features=None, excluded=()):
        with _Timer(res, name):
            art = train_multitask(tasks, res.encoder, config, features, excluded)
        res.runs[name] = art
        return art

    for name in MULTITASK_STRATEGIES:
        if name not in strategies:
            continue
        if name in ("ca_mtl", "hypernet"):
            art = multitask(name, tc.replace(variant=name))
        else:
            kind = name.split("_", 1)[1]
            feats = {t: unit(v) for t, v in res.baselines[kind].items()}
            art = multitask(name, tc.replace(embedding_mode=name), features=feats)
        res.accuracy[name] = accuracies(lambda tid: art, collection)
        res.params[name] = art.parameter_counts()
    res.reports["table1"] = table1_report(res.accuracy, res.params, majority)

    # stability: K seeds in one run, and two independent K=1 runs
    k3 = multitask("ca_mtl_k3", tc.replace(seeds_per_task=cfg.analysis.stability_seeds,
                                           seed=cfg.seed + 1))
    spaces = {name: latent_space(art, collection, name) for name, art in res.runs.items()
              if name in ("ca_mtl", "ca_mtl_k3")}
    with _Timer(res, "analysis"):
        res.reports["stability_within"] = stability_within_report(spaces["ca_mtl_k3"], cfg)
        if "ca_mtl" in spaces:
            res.reports["stability_across"] = stability_across_report(
                [spaces["ca_mtl"], spaces["ca_mtl_k3"].collapse(0)], cfg)
            probe_space = spaces["ca_mtl"]
        else:
            probe_space = spaces["ca_mtl_k3"].collapse(0)
        res.reports["probe"] = probe_report(probe_space, res.aspects, cfg.seed)
        res.reports["regress"] = regress_report(probe_space, res.aspects, cfg.analysis.ridge_lambdas)
        res.reports["pca"] = pca_report(probe_space)

    # zero-shot: shared label heads, one held-out task per type
    res.heldout = holdout_ids(collection)
    train_tasks = collection.without(res.heldout)
    shared = tc.replace(head_mode="shared")
    zs = multitask("shared_holdout", shared, train_tasks, excluded=res.heldout)
    phi = {t: a.values for t, a in res.aspects.items()}
    fa = multitask("features_aware", shared.replace(embedding_mode="latent_plus_features"),
                   train_tasks, features=phi, excluded=res.heldout)
    with _Timer(res, "zero_shot"):
        res.reports["zeroshot"] = zero_shot_report(zs, collection, res.heldout, res.aspects,
                                                   ZERO_SHOT_SOURCES, cfg, fa)
    res.wall_seconds = time.perf_counter() - t0
    if out_dir is not None:
        write_desk_outputs(res, Path(out_dir))
    return res


def write_desk_outputs(res: DeskResults, out: Path) -> None:
    from . import io as tio
    from .plots import write_pca_svg

    out = tio.fresh_dir(out)
    tio.write_suite(out / "suite", res.suite, suite_manifest(res.config, res.specs, res.aspects))
    res.config.save(out / "config.ini")
    tio.save_encoder(out / "encoder.bin", res.encoder)
    for name, art in res.runs.items():
        tio.save_run(out / "runs" / name, art, {"config_hash": res.config.digest()})
    for mode, models in res.single.items():
        tio.save_single_models(out / "runs" / mode, models, res.config.train_config())
    spaces = out / "spaces"
    spaces.mkdir()
    for name in res.runs:
        tio.write_space_tsv(spaces / f"{name}.tsv", latent_space(res.runs[name], res.suite, name))
    for kind, vecs in res.baselines.items():
        tio.write_space_tsv(spaces / f"{kind}.tsv", vector_space(vecs, res.suite, kind), kind)
    reports = out / "reports"
    reports.mkdir()
    for name, rep in res.reports.items():
        tio.write_json(reports / f"{name}.json", rep)
    tio.write_csv(reports / "table1.csv", res.reports["table1"]["rows"])
    tio.write_csv(reports / "probe.csv", res.reports["probe"]["rows"])
    tio.write_csv(reports / "zeroshot.csv", res.reports["zeroshot"]["sources"])
    tio.write_csv(reports / "pca.tsv", res.reports["pca"]["rows"], delimiter="\t")
    write_pca_svg(reports / "pca.svg", res.reports["pca"]["rows"])
    tio.write_json(reports / "timings.json", {"stages": res.timings, "wall_seconds": res.wall_seconds})
