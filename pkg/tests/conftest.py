from dataclasses import replace

import numpy as np
import pytest

from taskembed.encoder import CLS, SEP, EncoderConfig, EncoderWeights, TokenBatch
from taskembed.tasks import Example, TaskCollection, TaskSpec

TINY = EncoderConfig(num_layers=2, num_heads=2, hidden=8, ffn=16, vocab_size=48, max_len=12)


@pytest.fixture
def tiny_encoder():
    return EncoderWeights.init(TINY, seed=3).freeze()


@pytest.fixture
def sharp_encoder():
    # large init spreads h_cls across inputs, so small trainable parts can fit a task
    return EncoderWeights.init(replace(TINY, init_std=1.0), seed=3).freeze()


@pytest.fixture
def tiny_batch():
    rng = np.random.default_rng(0)
    seqs = [[CLS, *rng.integers(5, TINY.vocab_size, n).tolist(), SEP] for n in (3, 6, 1)]
    return TokenBatch.from_sequences(seqs, TINY.max_len)


def toy_task(task_id="toy_0", task_type="Other", n=40, seed=0, labels=("a", "b"), vocab=48,
             rule=None) -> TaskSpec:
    """A single-field task whose label is decided by the presence of token 5 or 6."""
    rng = np.random.default_rng(seed)
    splits = {}
    for name, size in (("train", n), ("validation", n // 4), ("test", n // 2)):
        exs = []
        for i in range(size):
            y = i % len(labels)
            body = rng.integers(10, vocab, 4).tolist()
            body[int(rng.integers(4))] = 5 + y if rule is None else rule(y)
            exs.append(Example((tuple(body),), y))
        splits[name] = exs
    return TaskSpec(task_id, task_type, 1, tuple(labels), splits["train"], splits["validation"],
                    splits["test"], seed)


@pytest.fixture
def toy_collection():
    return TaskCollection([toy_task(f"toy_{i}", seed=i) for i in range(4)])


# acceptance criteria report: one line per criterion in the terminal summary
_CRITERIA: dict[int, tuple[bool, str]] = {}
N_CRITERIA = 10


@pytest.fixture
def criterion():
    def record(n: int, ok: bool, detail: str) -> bool:
        _CRITERIA[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if not any(item for item in terminalreporter.stats.get("passed", []) + terminalreporter.stats.get(
            "failed", []) if "test_acceptance" in item.nodeid):
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        ok, detail = _CRITERIA.get(n, (False, "not run or errored"))
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
