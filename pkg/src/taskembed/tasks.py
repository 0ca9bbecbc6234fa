"""Task containers and the one-task-per-JSONL file format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

from .encoder import build_sequence

TASK_TYPES = ("Acceptability", "Discourse", "Emotion", "Facticity", "Grammar",
              "NLI", "Paraphrase-detection", "Other")
SPLITS = ("train", "validation", "test")


def canonical_label(name: str) -> str:
    return name.strip().lower()


@dataclass(frozen=True)
class Example:
    texts: tuple[tuple[int, ...], ...]
    label: int

    @property
    def sequence(self) -> list[int]:
        return build_sequence(self.texts)

    @property
    def length(self) -> int:
        return sum(len(t) for t in self.texts)


@dataclass
class TaskSpec:
    id: str
    task_type: str
    num_fields: int
    labels: list[str]
    train: list[Example] = field(default_factory=list)
    validation: list[Example] = field(default_factory=list)
    test: list[Example] = field(default_factory=list)
    seed: int = 0
    domain: int | None = None   # generator metadata, never used as a feature

    def __post_init__(self):
        if self.task_type not in TASK_TYPES:
            raise ValueError(f"unknown task type {self.task_type!r}")
        if self.num_fields not in (1, 2):
            raise ValueError("num_fields must be 1 or 2")
        self.labels = [canonical_label(x) for x in self.labels]
        for split in SPLITS:
            for ex in getattr(self, split):
                if len(ex.texts) != self.num_fields:
                    raise ValueError(f"{self.id}: example with {len(ex.texts)} fields")
                if not 0 <= ex.label < len(self.labels):
                    raise ValueError(f"{self.id}: label index {ex.label} out of range")

    def split(self, name: str) -> list[Example]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


class TaskCollection(Sequence[TaskSpec]):
    def __init__(self, tasks: Sequence[TaskSpec] = ()):
        self._tasks = list(tasks)
        ids = [t.id for t in self._tasks]
        if len(set(ids)) != len(ids):
            raise ValueError("task ids must be unique")
        self._index = {t.id: i for i, t in enumerate(self._tasks)}

    def __getitem__(self, key):
        if isinstance(key, str):
            try:
                return self._tasks[self._index[key]]
            except KeyError:
                raise KeyError(f"unknown task id {key!r}") from None
        return self._tasks[key]

    def __len__(self) -> int:
        return len(self._tasks)

    def __iter__(self) -> Iterator[TaskSpec]:
        return iter(self._tasks)

    def __contains__(self, key) -> bool:
        return key in self._index if isinstance(key, str) else key in self._tasks

    @property
    def ids(self) -> list[str]:
        return [t.id for t in self._tasks]

    def subset(self, ids) -> "TaskCollection":
        return TaskCollection([self[i] for i in ids])

    def without(self, ids) -> "TaskCollection":
        drop = set(ids)
        return TaskCollection([t for t in self._tasks if t.id not in drop])


# ---------------------------------------------------------------------------
# JSONL: header line, then one example per line
# ---------------------------------------------------------------------------

def write_task(task: TaskSpec, path: Path) -> None:
    header = {"id": task.id, "type": task.task_type, "fields": task.num_fields,
              "labels": task.labels, "seed": task.seed, "domain": task.domain}
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for split in SPLITS:
            for ex in task.split(split):
                row = {"texts": [list(t) for t in ex.texts], "label": ex.label, "split": split}
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_task(path: Path) -> TaskSpec:
    with open(path) as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty task file")
    header = json.loads(lines[0])
    splits: dict[str, list[Example]] = {s: [] for s in SPLITS}
    for ln in lines[1:]:
        row = json.loads(ln)
        ex = Example(tuple(tuple(int(t) for t in f) for f in row["texts"]), int(row["label"]))
        splits[row["split"]].append(ex)
    return TaskSpec(header["id"], header["type"], int(header["fields"]), list(header["labels"]),
                    seed=int(header.get("seed", 0)), domain=header.get("domain"), **splits)
