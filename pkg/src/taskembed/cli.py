"""Command-line interface.

    taskembed generate  --out suite/
    taskembed pretrain  --suite suite/ --out encoder.bin
    taskembed train     --mode multitask --suite suite/ --encoder encoder.bin --out runs/ca
    taskembed embed     --suite suite/ --encoder encoder.bin --out spaces/ [--run runs/ca]
    taskembed analyze   --analysis probe --run runs/ca --aspects spaces/aspects.tsv --out rep/
    taskembed zeroshot  --run runs/zs --suite suite/ --aspects spaces/aspects.tsv --out rep/

Exit status: 0 success, 1 usage error, 2 data error, 3 non-finite values.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io as tio
from . import pipeline as P
from .analytics import EmbeddingSpace
from .baselines import fisher_emb, text_emb
from .config import ExperimentConfig
from .multitask import train_multitask, train_single
from .plots import write_pca_svg
from .taskgen import ASPECT_BLOCKS, ASPECT_DIM, AspectVector, holdout_ids
from .tensor import NonFiniteError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NAN = 0, 1, 2, 3
TRAIN_MODES = ("pretrain", "multitask", "single", "multitask_k3", "multitask_shared_holdout")
ANALYSES = ("stability_within", "stability_across", "probe", "regress", "pca", "table1")

log = logging.getLogger("taskembed")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig().with_env()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _out(args, cfg: ExperimentConfig, default: str) -> Path:
    return Path(args.out) if args.out else Path(cfg.output_dir) / default


def _need(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"missing prerequisite: {what} (pass it explicitly)")
    path = Path(path)
    if not path.exists():
        raise tio.ArtifactError(f"missing prerequisite {what}: {path} does not exist")
    return path


def _suite(args):
    collection, manifest = tio.read_suite(_need(args.suite, "generated suite directory (--suite)"))
    return collection, manifest


def _encoder(args):
    return tio.load_encoder(_need(args.encoder, "pretrained encoder checkpoint (--encoder)"))


def _space(path, collection=None) -> EmbeddingSpace:
    path = Path(path)
    if path.is_dir():
        art = tio.load_run(path)
        types = {}
        if collection is not None:
            types = {t.id: t.task_type for t in collection}
        m, ids, seeds = art.embedding_matrix()
        manifest = tio.read_json(path / "manifest.json")
        types.update(manifest.get("task_types", {}))
        return EmbeddingSpace(m, ids, seeds, [types.get(t, "?") for t in ids], path.name)
    return tio.read_space_tsv(path)


def _aspects(path) -> dict:
    space = tio.read_space_tsv(_need(path, "aspect table (--aspects, written by `embed`)"))
    if space.dim != ASPECT_DIM:
        raise tio.ArtifactError(f"aspect table has {space.dim} columns, expected {ASPECT_DIM}")
    blocks, start = {}, 0
    for name, size in ASPECT_BLOCKS:
        blocks[name] = slice(start, start + size)
        start += size
    return {t: AspectVector(v.copy(), dict(blocks)) for t, v in zip(space.task_ids, space.matrix)}


def _check_compatible(paths) -> None:
    dims, suites = set(), set()
    for p in paths:
        p = Path(p)
        if p.is_dir():
            m = tio.read_json(p / "manifest.json")
            if m.get("kind") == "multitask":   # single-task runs carry no latent space
                dims.add(m.get("dim_z"))
            if m.get("suite_hash"):
                suites.add(m["suite_hash"])
        else:
            dims.add(tio.read_space_tsv(p).dim)
    if len(dims) > 1:
        raise tio.ArtifactError(f"incompatible artifacts: different dim(z) {sorted(map(str, dims))}")
    if len(suites) > 1:
        raise tio.ArtifactError("incompatible artifacts: trained on different suite manifests")


def _report(out: Path, name: str, report: dict, rows_key: str | None = "rows") -> None:
    out.mkdir(parents=True, exist_ok=True)
    if (out / f"{name}.json").exists():
        raise FileExistsError(f"refusing to overwrite {out / name}.json")
    tio.write_json(out / f"{name}.json", report)
    if rows_key and rows_key in report:
        tio.write_csv(out / f"{name}.csv", report[rows_key])
    print(f"wrote {out / name}.json")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg, "suite")
    if out.exists() and any(out.iterdir()):
        # identical reruns are allowed to be checked, never silently overwritten
        raise FileExistsError(f"refusing to overwrite existing suite {out}")
    collection, specs = P.build_suite(cfg)
    tio.write_suite(out, collection, P.suite_manifest(cfg, specs))
    cfg.save(out / "config.ini")
    print(f"wrote {len(collection)} tasks to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    collection, manifest = _suite(args)
    out = _out(args, cfg, "encoder.bin")
    if out.exists():
        raise FileExistsError(f"refusing to overwrite {out}")
    out.parent.mkdir(parents=True, exist_ok=True)
    enc = P.pretrain_encoder(cfg, collection)
    enc.manifest["suite_hash"] = tio.config_hash(manifest)
    enc.manifest["config_hash"] = cfg.digest()
    tio.save_encoder(out, enc)
    losses = enc.manifest["mlm_loss"]
    if losses:
        print(f"mlm loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    print(f"wrote {out}")
    return EXIT_OK


def _features(args, collection) -> dict | None:
    if not args.features:
        return None
    space = tio.read_space_tsv(_need(args.features, "feature table (--features)"))
    feats = {t: v for t, v in zip(space.task_ids, space.matrix)}
    missing = [t.id for t in collection if t.id not in feats]
    if missing:
        raise tio.ArtifactError(f"feature table lacks tasks {missing[:4]}")
    if args.embedding_mode and args.embedding_mode.startswith("projected"):
        feats = {t: P.unit(v) for t, v in feats.items()}
    return feats


def cmd_train(args) -> int:
    if args.mode == "pretrain":
        return cmd_pretrain(args)
    cfg = _config(args)
    collection, manifest = _suite(args)
    enc = _encoder(args)
    out = _out(args, cfg, args.mode)
    overrides = {}
    if args.variant:
        overrides["variant"] = args.variant
    if args.embedding_mode:
        overrides["embedding_mode"] = args.embedding_mode
    tc = cfg.train_config(**overrides)
    extra = {"suite_hash": tio.config_hash(manifest), "config_hash": cfg.digest(),
             "train_mode": args.mode, "task_types": {t.id: t.task_type for t in collection}}
    if args.mode == "single":
        models = {t.id: train_single(t, enc, args.single_mode, tc) for t in collection}
        tio.save_single_models(out, models, tc, extra)
        print(f"wrote {out}")
        return EXIT_OK
    excluded: list[str] = []
    if args.mode == "multitask_k3":
        tc = tc.replace(seeds_per_task=args.seeds)
    elif args.mode == "multitask_shared_holdout":
        tc = tc.replace(head_mode="shared")
        excluded = args.holdout or holdout_ids(collection)
        unknown = [t for t in excluded if t not in collection]
        if unknown:
            raise tio.ArtifactError(f"unknown held-out task ids {unknown}")
    tasks = collection.without(excluded) if excluded else collection
    art = train_multitask(tasks, enc, tc, _features(args, collection), excluded)
    tio.save_run(out, art, extra)
    print(f"wrote {out} ({len(art.log)} steps)")
    return EXIT_OK


def cmd_embed(args) -> int:
    cfg = _config(args)
    collection, _ = _suite(args)
    enc = _encoder(args)
    out = tio.fresh_dir(_out(args, cfg, "spaces"))
    kinds = args.kinds.split(",")
    written = []
    if "textemb" in kinds:
        vecs = {t.id: text_emb(t, enc, cfg.train.example_cap) for t in collection}
        tio.write_space_tsv(out / "textemb.tsv", P.vector_space(vecs, collection, "textemb"), "textemb")
        written.append("textemb.tsv")
    if "fisher" in kinds:
        single = _need(args.single, "plain-adapter single-task run (--single) for Fisher embeddings")
        models = tio.load_single_models(single, enc)
        vecs = {t.id: fisher_emb(t, models[t.id], cfg.train.example_cap) for t in collection
                if t.id in models}
        tio.write_space_tsv(out / "fisher.tsv", P.vector_space(vecs, collection, "fisher"), "fisher")
        written.append("fisher.tsv")
    if "aspects" in kinds:
        aspects, _ = P.compute_aspects(collection, enc, cfg)
        vecs = {t: a.values for t, a in aspects.items()}
        tio.write_space_tsv(out / "aspects.tsv", P.vector_space(vecs, collection, "aspects"), "aspects")
        written.append("aspects.tsv")
    for run in args.run or []:
        space = _space(run, collection)
        tio.write_space_tsv(out / f"latent_{Path(run).name}.tsv", space, "latent")
        written.append(f"latent_{Path(run).name}.tsv")
    print("wrote " + ", ".join(str(out / w) for w in written))
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _config(args)
    runs = args.run or []
    out = _out(args, cfg, "reports")
    a = args.analysis
    if a == "stability_across" and len(runs) < 2:
        raise UsageError("stability_across needs a second run: pass two --run artifacts "
                         f"(got {len(runs)})")
    if not runs:
        raise UsageError(f"{a} needs at least one --run artifact")
    _check_compatible(runs)
    if a == "table1":
        _report(out, a, _table1(runs, args), "rows")
        return EXIT_OK
    collection = _suite(args)[0] if args.suite else None
    spaces = [_space(r, collection) for r in runs]
    if a == "stability_within":
        _report(out, a, P.stability_within_report(spaces[0], cfg), None)
    elif a == "stability_across":
        _report(out, a, P.stability_across_report([s.collapse(0) for s in spaces], cfg), "pairs")
    elif a == "probe":
        _report(out, a, P.probe_report(spaces[0], _aspects(args.aspects), cfg.seed))
    elif a == "regress":
        rep = P.regress_report(spaces[0], _aspects(args.aspects), cfg.analysis.ridge_lambdas)
        _report(out, a, rep, None)
    elif a == "pca":
        rep = P.pca_report(spaces[0])
        _report(out, a, rep)
        tio.write_csv(out / "pca.tsv", rep["rows"], ["task_id", "type", "x", "y"], delimiter="\t")
        if args.svg:
            write_pca_svg(out / "pca.svg", rep["rows"])
    return EXIT_OK


def _table1(runs, args) -> dict:
    if not args.suite:
        raise UsageError("table1 needs --suite")
    collection, _ = _suite(args)
    enc = _encoder(args) if args.encoder else None
    acc, params = {}, {}
    for r in runs:
        r = Path(r)
        manifest = tio.read_json(r / "manifest.json")
        if manifest.get("kind") == "single":
            models = tio.load_single_models(r, enc)
            name = manifest["mode"]
            acc[name] = P.accuracies(lambda tid: models[tid], collection.subset(list(models)))
            params[name] = next(iter(models.values())).parameter_counts()
        else:
            art = tio.load_run(r)
            name = r.name
            acc[name] = P.accuracies(lambda tid: art, collection.subset(art.task_ids))
            params[name] = art.parameter_counts()
    return P.table1_report(acc, params, P.majority_accuracies(collection))


def cmd_zeroshot(args) -> int:
    cfg = _config(args)
    collection, _ = _suite(args)
    art = tio.load_run(_need(args.run, "shared-label training run (--run)"))
    if not art.shared:
        raise tio.ArtifactError("zero-shot evaluation needs a run trained with shared label heads")
    sources = args.sources.split(",")
    bad = [s for s in sources if s not in P.ZERO_SHOT_SOURCES]
    if bad:
        raise UsageError(f"unknown embedding sources {bad}")
    tasks = args.task or art.excluded
    if not tasks:
        raise UsageError("no held-out tasks: pass --task or use a run with excluded tasks")
    features_art = tio.load_run(args.features_run) if args.features_run else None
    if "features_aware" in sources and features_art is None:
        raise UsageError("the features_aware source needs --features-run")
    aspects = _aspects(args.aspects) if {"ridge"} & set(sources) else {}
    rep = P.zero_shot_report(art, collection, tasks, aspects, sources, cfg, features_art)
    _report(_out(args, cfg, "zeroshot"), "zeroshot", rep, "sources")
    for row in rep["sources"]:
        print(f"{row['source']:16s} {row['mean_accuracy']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="taskembed", description="Conditional-adapter task embeddings at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="INI experiment config")
        sp.add_argument("--seed", type=int, help="master seed (overrides config and environment)")
        sp.add_argument("--out", help="output path (default: under the config output_dir)")
        return sp

    common(sub.add_parser("generate", help="write the synthetic task suite"))

    sp = common(sub.add_parser("pretrain", help="MLM-pretrain the frozen encoder"))
    sp.add_argument("--suite")

    sp = common(sub.add_parser("train", help="train a run artifact"))
    sp.add_argument("--mode", required=True, choices=TRAIN_MODES)
    sp.add_argument("--suite")
    sp.add_argument("--encoder")
    sp.add_argument("--variant", choices=("ca_mtl", "hypernet"))
    sp.add_argument("--embedding-mode", dest="embedding_mode",
                    choices=("latent", "latent_plus_features", "projected_textemb", "projected_fisher"))
    sp.add_argument("--features", help="TSV of per-task feature vectors (aspects, textemb, fisher)")
    sp.add_argument("--single-mode", dest="single_mode", default="plain_adapter",
                    choices=("full_fine_tune", "plain_adapter"))
    sp.add_argument("--holdout", nargs="*", help="task ids excluded from shared-label training")
    sp.add_argument("--seeds", type=int, default=3, help="embeddings per task for multitask_k3")

    sp = common(sub.add_parser("embed", help="export TextEmb / Fisher / aspect / latent spaces"))
    sp.add_argument("--suite")
    sp.add_argument("--encoder")
    sp.add_argument("--kinds", default="textemb,aspects")
    sp.add_argument("--single", help="plain-adapter single-task run, for Fisher embeddings")
    sp.add_argument("--run", action="append", help="multitask run whose latent space to export")

    sp = common(sub.add_parser("analyze", help="stability, probing, regression, PCA, table1"))
    sp.add_argument("--analysis", required=True, choices=ANALYSES)
    sp.add_argument("--run", action="append", help="run directory or embedding TSV (repeatable)")
    sp.add_argument("--suite")
    sp.add_argument("--encoder")
    sp.add_argument("--aspects")
    sp.add_argument("--svg", action="store_true", help="also write a PCA scatter plot")

    sp = common(sub.add_parser("zeroshot", help="zero-shot accuracy of held-out tasks"))
    sp.add_argument("--run")
    sp.add_argument("--suite")
    sp.add_argument("--aspects")
    sp.add_argument("--task", action="append", help="held-out task id (default: the run's excluded ids)")
    sp.add_argument("--sources", default=",".join(P.ZERO_SHOT_SOURCES))
    sp.add_argument("--features-run", dest="features_run")
    return p


COMMANDS = {"generate": cmd_generate, "pretrain": cmd_pretrain, "train": cmd_train,
            "embed": cmd_embed, "analyze": cmd_analyze, "zeroshot": cmd_zeroshot}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NAN
    except (tio.ArtifactError, FileNotFoundError, FileExistsError, KeyError, ValueError,
            OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
