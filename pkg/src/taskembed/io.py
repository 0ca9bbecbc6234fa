"""On-disk formats: checkpoints, run directories, embedding TSVs and reports.

A checkpoint is ``MAGIC | u32 header length | JSON header | tensor records``,
each record being a tensor in the ``tensor.write_tensor`` layout.  The header
lists the record names in order.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Mapping

import numpy as np

from .adapters import (AdapterWeights, ConditionalAdapterWeights, FeatureProjection,
                       TaskEmbeddingTable)
from .analytics import EmbeddingSpace
from .encoder import EncoderConfig, EncoderWeights
from .multitask import RunArtifact, SharedLabelHead, SingleTaskModel, TaskHead, TrainConfig
from .tasks import TaskCollection, read_task, write_task
from .tensor import Tensor, read_tensor, write_tensor

MAGIC = b"TEMBCKP1"
LOG_COLUMNS = ("step", "task_id", "seed_index", "raw_loss", "capped_loss")


class ArtifactError(ValueError):
    """A file on disk is missing, truncated or inconsistent."""


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def save_checkpoint(path, header: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    header = dict(header)
    header["tensors"] = list(tensors)
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in tensors:
            write_tensor(fh, tensors[name])


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"missing checkpoint {path}")
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ArtifactError(f"{path} is not a checkpoint file")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n))
        try:
            tensors = {name: read_tensor(fh) for name in header["tensors"]}
        except (EOFError, struct.error) as exc:
            raise ArtifactError(f"{path}: truncated checkpoint") from exc
    return header, tensors


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"missing file {path}")
    with open(path) as fh:
        return json.load(fh)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o).__name__)


def write_csv(path, rows: list[Mapping], columns=None, delimiter: str = ",") -> None:
    if columns is None:
        columns = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore", delimiter=delimiter)
        w.writeheader()
        for r in rows:
            w.writerow(r)


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

def _encoder_tensors(enc: EncoderWeights, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.data for k, v in enc.params.items()}


def _encoder_from(header: Mapping, tensors: Mapping, prefix: str = "") -> EncoderWeights:
    cfg = EncoderConfig(**header["encoder_config"])
    enc = EncoderWeights.init(cfg, 0)
    for k, p in enc.params.items():
        if prefix + k not in tensors:
            raise ArtifactError(f"checkpoint lacks encoder tensor {k!r}")
        p.data = tensors[prefix + k].copy()
    enc.manifest = dict(header.get("encoder_manifest", {}))
    if header.get("encoder_frozen", True):
        enc.freeze()
    return enc


def save_encoder(path, enc: EncoderWeights) -> None:
    save_checkpoint(path, {"kind": "encoder", "encoder_config": enc.config_dict(),
                           "encoder_manifest": enc.manifest, "encoder_frozen": enc.frozen,
                           "digest": enc.digest()}, _encoder_tensors(enc))


def load_encoder(path) -> EncoderWeights:
    header, tensors = load_checkpoint(path)
    if header.get("kind") != "encoder":
        raise ArtifactError(f"{path} does not hold an encoder")
    enc = _encoder_from(header, tensors)
    if enc.digest() != header["digest"]:
        raise ArtifactError(f"{path}: encoder digest mismatch")
    return enc


# ---------------------------------------------------------------------------
# run artifacts
# ---------------------------------------------------------------------------

def save_run(directory, art: RunArtifact, extra_manifest: Mapping | None = None) -> Path:
    """checkpoint.bin + manifest.json + train_log.csv in a fresh directory."""
    directory = fresh_dir(directory)
    tensors = _encoder_tensors(art.encoder, "enc/")
    tensors.update({k: v.data for k, v in art.trainable().items()})
    for tid, phi in sorted(art.features.items()):
        tensors[f"feat/{tid}"] = phi
    header = {
        "kind": "multitask",
        "encoder_config": art.encoder.config_dict(),
        "encoder_manifest": art.encoder.manifest,
        "train_config": asdict(art.config),
        "task_ids": art.task_ids,
        "excluded": art.excluded,
        "task_labels": art.task_labels,
        "adapter": {"variant": art.adapter.variant, "hidden": art.adapter.hidden,
                    "bottleneck": art.adapter.bottleneck, "n_points": art.adapter.n_points,
                    "dim_z": art.adapter.dim_z},
        "head_mode": "shared" if art.shared else "per_task",
        "shared_labels": sorted(art.heads.rows) if art.shared else [],
        "projection_in_dim": art.projection.in_dim if art.projection is not None else None,
    }
    save_checkpoint(directory / "checkpoint.bin", header, tensors)
    manifest = dict(art.manifest)
    manifest.update({"kind": "multitask", "variant": art.config.variant, "dim_z": art.config.dim_z,
                     "seeds_per_task": art.config.seeds_per_task, "task_ids": art.task_ids,
                     "excluded": art.excluded, "config_hash": config_hash(asdict(art.config))})
    manifest.update(extra_manifest or {})
    write_json(directory / "manifest.json", manifest)
    write_train_log(directory / "train_log.csv", art.log)
    return directory


def write_train_log(path, log) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for step, tid, seed, raw, capped in log:
            w.writerow([step, tid, seed, repr(float(raw)), repr(float(capped))])


def read_train_log(path) -> list[tuple]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        if tuple(next(r)) != LOG_COLUMNS:
            raise ArtifactError(f"{path}: unexpected training-log header")
        return [(int(a), b, int(c), float(d), float(e)) for a, b, c, d, e in r]


def load_run(directory) -> RunArtifact:
    directory = Path(directory)
    header, tensors = load_checkpoint(directory / "checkpoint.bin")
    if header.get("kind") != "multitask":
        raise ArtifactError(f"{directory} is not a multitask run")
    manifest = read_json(directory / "manifest.json")
    config = TrainConfig.from_dict(header["train_config"])
    enc = _encoder_from(header, tensors, "enc/")
    a = header["adapter"]
    adapter = ConditionalAdapterWeights.init(a["variant"], a["hidden"], a["bottleneck"],
                                             a["n_points"], a["dim_z"], np.random.default_rng(0))
    adapter.ln_eps = enc.config.ln_eps
    adapter.load_state({k: tensors[f"adapter/{k}"] for k in adapter.params})
    table = None
    z_keys = [k for k in tensors if k.startswith("z/")]
    if z_keys:
        table = TaskEmbeddingTable(config.dim_z, config.seeds_per_task)
        for k in z_keys:
            _, tid, s = k.rsplit("/", 2)
            table.entries[(tid, int(s))] = Tensor(tensors[k].copy(), requires_grad=True)
    projection = None
    if header.get("projection_in_dim") is not None:
        projection = FeatureProjection(header["projection_in_dim"], config.dim_z,
                                       Tensor(tensors["proj/w"].copy(), requires_grad=True))
    if header["head_mode"] == "shared":
        heads = SharedLabelHead(enc.config.hidden, np.random.default_rng(0))
        for name in header["shared_labels"]:
            heads.rows[name] = Tensor(tensors[f"head/row/{name}"].copy(), requires_grad=True)
            heads.bias[name] = Tensor(tensors[f"head/bias/{name}"].copy(), requires_grad=True)
    else:
        heads = {}
        for tid, labels in header["task_labels"].items():
            h = TaskHead.__new__(TaskHead)
            h.weight = Tensor(tensors[f"head/{tid}/w"].copy(), requires_grad=True)
            h.bias = Tensor(tensors[f"head/{tid}/b"].copy(), requires_grad=True)
            heads[tid] = h
    features = {k[len("feat/"):]: v.copy() for k, v in tensors.items() if k.startswith("feat/")}
    log = read_train_log(directory / "train_log.csv") if (directory / "train_log.csv").exists() else []
    return RunArtifact(config, enc, adapter, table, heads, projection, features,
                       list(header["task_ids"]), list(header["excluded"]), log,
                       {k: list(v) for k, v in header["task_labels"].items()}, manifest)


def save_single_models(directory, models: Mapping[str, SingleTaskModel], config: TrainConfig,
                       extra_manifest: Mapping | None = None) -> Path:
    """All per-task models of one single-task strategy in one checkpoint."""
    directory = fresh_dir(directory)
    first = next(iter(models.values()))
    tensors: dict[str, np.ndarray] = {}
    if first.mode == "plain_adapter":
        tensors.update(_encoder_tensors(first.encoder, "enc/"))
    for tid, m in models.items():
        tensors.update({f"task/{tid}/{k}": v.data for k, v in m.trainable().items()})
    header = {"kind": "single", "mode": first.mode, "encoder_config": first.encoder.config_dict(),
              "encoder_manifest": first.encoder.manifest, "train_config": asdict(config),
              "task_ids": list(models), "bottleneck": config.bottleneck,
              "n_labels": {tid: int(m.head.bias.size) for tid, m in models.items()}}
    save_checkpoint(directory / "checkpoint.bin", header, tensors)
    manifest = {"kind": "single", "mode": first.mode, "task_ids": list(models),
                "config_hash": config_hash(asdict(config))}
    manifest.update(extra_manifest or {})
    write_json(directory / "manifest.json", manifest)
    rows = [(i, tid, 0, loss, loss) for tid, m in models.items() for i, loss in enumerate(m.log)]
    write_train_log(directory / "train_log.csv", rows)
    return directory


def load_single_models(directory, base_encoder: EncoderWeights | None = None) -> dict[str, SingleTaskModel]:
    directory = Path(directory)
    header, tensors = load_checkpoint(directory / "checkpoint.bin")
    if header.get("kind") != "single":
        raise ArtifactError(f"{directory} is not a single-task run")
    mode = header["mode"]
    if mode == "plain_adapter":
        base = _encoder_from(header, tensors, "enc/")
    else:
        base = base_encoder or EncoderWeights.init(EncoderConfig(**header["encoder_config"]), 0)
    cfg = base.config
    models = {}
    for tid in header["task_ids"]:
        pre = f"task/{tid}/"
        head = TaskHead.__new__(TaskHead)
        head.weight = Tensor(tensors[pre + "head/w"].copy(), requires_grad=True)
        head.bias = Tensor(tensors[pre + "head/b"].copy(), requires_grad=True)
        if mode == "full_fine_tune":
            enc = base.copy().unfreeze()
            for k, p in enc.encoder_params().items():
                p.data = tensors[pre + f"enc/{k}"].copy()
            models[tid] = SingleTaskModel(tid, mode, enc, None, head)
        else:
            adapter = AdapterWeights.init(cfg.hidden, header["bottleneck"], cfg.n_insertion_points,
                                          np.random.default_rng(0))
            adapter.ln_eps = cfg.ln_eps
            adapter.load_state({k: tensors[pre + f"adapter/{k}"] for k in adapter.params})
            models[tid] = SingleTaskModel(tid, mode, base, adapter, head)
    return models


# ---------------------------------------------------------------------------
# embedding spaces
# ---------------------------------------------------------------------------

def write_space_tsv(path, space: EmbeddingSpace, kind: str = "latent") -> None:
    with open(path, "w") as fh:
        cols = ["task_id", "seed", "type", "kind"] + [f"v{j}" for j in range(space.dim)]
        fh.write("\t".join(cols) + "\n")
        for i in range(len(space)):
            vals = "\t".join(repr(float(x)) for x in space.matrix[i])
            fh.write(f"{space.task_ids[i]}\t{space.seeds[i]}\t{space.task_types[i]}\t{kind}\t{vals}\n")


def read_space_tsv(path, run_id: str = "") -> EmbeddingSpace:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"missing embedding file {path}")
    with open(path) as fh:
        head = fh.readline().rstrip("\n").split("\t")
        if head[:4] != ["task_id", "seed", "type", "kind"]:
            raise ArtifactError(f"{path}: not an embedding-space TSV")
        ids, seeds, types, rows = [], [], [], []
        for line in fh:
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            ids.append(parts[0])
            seeds.append(int(parts[1]))
            types.append(parts[2])
            rows.append([float(x) for x in parts[4:]])
    return EmbeddingSpace(np.array(rows), ids, seeds, types, run_id or path.stem)


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------

def write_suite(directory, collection: TaskCollection, manifest: Mapping) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for task in collection:
        write_task(task, directory / f"{task.id}.jsonl")
    write_json(directory / "manifest.json", manifest)
    return directory


def read_suite(directory) -> tuple[TaskCollection, dict]:
    directory = Path(directory)
    manifest = read_json(directory / "manifest.json")
    ids = [t["task_id"] for t in manifest["tasks"]]
    missing = [t for t in ids if not (directory / f"{t}.jsonl").exists()]
    if missing:
        raise ArtifactError(f"suite {directory} lacks task files for {missing}")
    return TaskCollection([read_task(directory / f"{t}.jsonl") for t in ids]), manifest


def fresh_dir(path) -> Path:
    """A new output directory; existing artifacts are never overwritten."""
    path = Path(path)
    if path.exists() and any(path.iterdir()):
        raise FileExistsError(f"refusing to overwrite existing artifact {path}")
    path.mkdir(parents=True, exist_ok=True)
    return path
