"""Synthetic task suites and label-free task aspects.

Vocabulary layout (ids):
  0-4     [PAD] [CLS] [SEP] [MASK] [UNK]
  5-32    family markers shared by every domain (negation, hedging marker,
          affect classes, discourse connectives, malformed tokens)
  40-     disjoint domain lexicons; the first half of each lexicon plays the
          role of nouns, the second half of verbs

Each example draws its content from one topic of its domain (a fixed quarter
of the lexicon, synonym pairs kept together), so "unrelated" text is off-topic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .encoder import N_SPECIAL
from .tasks import TASK_TYPES, Example, TaskCollection, TaskSpec

NEGATION = (5, 6)
HEDGE = (7, 8)
AFFECT = {"joy": (9, 10, 11), "anger": (12, 13, 14), "sadness": (15, 16, 17), "fear": (18, 19, 20)}
CONNECTIVES = {"contrast": (21, 22), "cause": (23, 24), "temporal": (25, 26), "addition": (27, 28)}
MALFORMED = (29, 30, 31, 32)
LEXICON_START = 40
LEXICON_SIZE = 56
N_TOPICS = 4

FAMILY_LABELS = {
    "Acceptability": ["acceptable", "unacceptable"],
    "Discourse": list(CONNECTIVES),
    "Emotion": list(AFFECT),
    "Facticity": ["factual", "hedged"],
    "Grammar": ["grammatical", "ungrammatical"],
    "NLI": ["entailment", "neutral", "contradiction"],
    "Paraphrase-detection": ["paraphrase", "unrelated"],
    "Other": ["even", "odd"],
}
PAIR_FAMILIES = {"NLI", "Paraphrase-detection", "Facticity"}

SIZE_PROFILE = (160, 240, 400, 640)
LENGTH_PROFILE = ((3, 5), (6, 8), (9, 11), (12, 14))
SPLIT_FRACTIONS = (0.6, 0.1, 0.3)


@dataclass(frozen=True)
class DomainLexicon:
    domain: int
    tokens: tuple[int, ...]

    @classmethod
    def build(cls, domain: int, size: int = LEXICON_SIZE) -> "DomainLexicon":
        if size < 32:
            raise ValueError("domain lexicons need at least 32 tokens")
        start = LEXICON_START + domain * size
        return cls(domain, tuple(range(start, start + size)))

    @property
    def nouns(self) -> tuple[int, ...]:
        return self.tokens[: len(self.tokens) // 2]

    @property
    def verbs(self) -> tuple[int, ...]:
        return self.tokens[len(self.tokens) // 2:]

    def synonym(self, tok: int) -> int:
        # adjacent ids within a word class are synonyms
        i = self.tokens.index(tok)
        return self.tokens[i ^ 1]

    def topic_of(self, tok: int) -> int:
        half = len(self.tokens) // 2
        return (self.tokens.index(tok) % half // 2) % N_TOPICS

    def topic(self, k: int, words=None) -> tuple[int, ...]:
        """Tokens of topic ``k``, optionally restricted to ``self.nouns``/``self.verbs``."""
        pool = self.tokens if words is None else words
        return tuple(t for t in pool if self.topic_of(t) == k)


def lexicons(n_domains: int, vocab_size: int = 512) -> list[DomainLexicon]:
    if LEXICON_START + n_domains * LEXICON_SIZE > vocab_size:
        raise ValueError(f"{n_domains} domains do not fit a vocabulary of {vocab_size}")
    return [DomainLexicon.build(d) for d in range(n_domains)]


@dataclass
class GenSpec:
    family: str
    domain: int
    n_examples: int
    length_range: tuple[int, int]
    labels: list[str]
    seed: int
    task_id: str = ""

    def __post_init__(self):
        if self.family not in TASK_TYPES:
            raise ValueError(f"unknown family {self.family!r}")
        lo, hi = self.length_range
        if not 1 <= lo <= hi:
            raise ValueError("bad length range")
        if self.n_examples < 8 * len(self.labels):
            raise ValueError("need at least 8 examples per label")

    @property
    def num_fields(self) -> int:
        return 2 if self.family in PAIR_FAMILIES else 1


# ---------------------------------------------------------------------------
# family rules; each returns a tuple of fields for a target label index
# ---------------------------------------------------------------------------

def _topic(rng) -> int:
    return int(rng.integers(N_TOPICS))


def _content(rng, lex: DomainLexicon, n: int, topic: int, exclude=()) -> list[int]:
    pool = [t for t in lex.topic(topic) if t not in exclude]
    return [int(t) for t in rng.choice(pool, size=n, replace=n > len(pool))]


def _alternating(rng, lex: DomainLexicon, n: int, topic: int) -> list[int]:
    nouns, verbs = lex.topic(topic, lex.nouns), lex.topic(topic, lex.verbs)
    return [int(rng.choice(nouns if i % 2 == 0 else verbs)) for i in range(n)]


def _violations(seq, lex: DomainLexicon) -> int:
    nouns = set(lex.nouns)
    return sum((a in nouns) == (b in nouns) for a, b in zip(seq, seq[1:]))


def _grammar(rng, lex, lo, hi, label):
    n = int(rng.integers(max(lo, 4), max(hi, 4) + 1))
    seq = _alternating(rng, lex, n, _topic(rng))
    if label == 0:
        return (seq,)
    while True:
        out = list(seq)
        for start in range(0, n, 3):
            window = out[start:start + 3]
            out[start:start + 3] = [window[j] for j in rng.permutation(len(window))]
        if _violations(out, lex) >= 2:
            return (out,)


def _acceptability(rng, lex, lo, hi, label):
    n = int(rng.integers(lo, hi + 1))
    seq = _alternating(rng, lex, n, _topic(rng))
    if label == 1:
        seq[int(rng.integers(n))] = int(rng.choice(MALFORMED))
    return (seq,)


def _emotion(rng, lex, lo, hi, label, labels):
    # two affect tokens of the target class
    n = int(rng.integers(max(lo, 3), max(hi, 3) + 1))
    seq = _content(rng, lex, n - 2, _topic(rng))
    for tok in rng.choice(AFFECT[labels[label]], size=2):
        seq.insert(int(rng.integers(len(seq) + 1)), int(tok))
    return (seq,)


def _discourse(rng, lex, lo, hi, label, labels):
    # three clauses joined by two connectives of the target class
    n = int(rng.integers(max(lo, 5), max(hi, 5) + 1))
    cuts = np.sort(rng.choice(np.arange(1, n - 2), size=2, replace=False))
    cuts[1] += 1
    topic = _topic(rng)
    seq = _content(rng, lex, n - 2, topic)
    for c in cuts:
        seq.insert(int(c), int(rng.choice(CONNECTIVES[labels[label]])))
    return (seq,)


def _other(rng, lex, lo, hi, label):
    lengths = [n for n in range(lo, hi + 1) if n % 2 == label]
    if not lengths:
        lengths = [hi + 1 if (hi + 1) % 2 == label else hi + 2]
    return (_content(rng, lex, int(rng.choice(lengths)), _topic(rng)),)


def _nli(rng, lex, lo, hi, label):
    n = int(rng.integers(max(lo, 2), max(hi, 2) + 1))
    topic = _topic(rng)
    premise = _content(rng, lex, n, topic)
    k = max(1, n // 2)
    if label == 1:
        # fresh, off-topic tokens: certainly not contained in the premise
        hyp = _content(rng, lex, k, _other_topic(rng, topic))
    else:
        keep = sorted(rng.choice(n, size=k, replace=False))
        hyp = [premise[i] for i in keep]
        if label == 2:
            hyp.insert(int(rng.integers(len(hyp) + 1)), int(rng.choice(NEGATION)))
    return premise, hyp


def _other_topic(rng, topic: int) -> int:
    return (topic + 1 + int(rng.integers(N_TOPICS - 1))) % N_TOPICS


def _paraphrase(rng, lex, lo, hi, label):
    n = int(rng.integers(max(lo, 2), max(hi, 2) + 1))
    topic = _topic(rng)
    first = _content(rng, lex, n, topic)
    if label == 1:
        return first, _content(rng, lex, n, _other_topic(rng, topic))
    second = [lex.synonym(t) if rng.random() < 0.25 else t for t in first]
    i = int(rng.integers(n - 1))
    second[i], second[i + 1] = second[i + 1], second[i]
    return first, second


def _facticity(rng, lex, lo, hi, label):
    n = int(rng.integers(max(lo, 2), max(hi, 2) + 1))
    topic = _topic(rng)
    claim = _content(rng, lex, n, topic)
    source = _content(rng, lex, n, topic)
    if label == 1:
        source[int(rng.integers(n))] = int(rng.choice(HEDGE))
    return claim, source


_RULES = {
    "Grammar": _grammar, "Acceptability": _acceptability, "Other": _other,
    "NLI": _nli, "Paraphrase-detection": _paraphrase, "Facticity": _facticity,
}


def _check_labels(spec: GenSpec) -> None:
    allowed = FAMILY_LABELS[spec.family]
    if spec.family in ("Emotion", "Discourse"):
        if len(spec.labels) < 2 or not set(spec.labels) <= set(allowed):
            raise ValueError(f"{spec.family} labels must be a subset of {allowed} with >= 2 names")
    elif list(spec.labels) != allowed:
        raise ValueError(f"{spec.family} requires labels {allowed}")


def generate_task(spec: GenSpec, lexicon: DomainLexicon | None = None) -> TaskSpec:
    """Deterministic labelled task; labels balanced to within one example."""
    _check_labels(spec)
    lex = lexicon or DomainLexicon.build(spec.domain)
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.length_range
    n_labels = len(spec.labels)
    targets = np.arange(spec.n_examples) % n_labels
    rng.shuffle(targets)
    examples = []
    for y in targets:
        if spec.family in ("Emotion", "Discourse"):
            rule = _emotion if spec.family == "Emotion" else _discourse
            fields = rule(rng, lex, lo, hi, int(y), spec.labels)
        else:
            fields = _RULES[spec.family](rng, lex, lo, hi, int(y))
        examples.append(Example(tuple(tuple(f) for f in fields), int(y)))
    n_train = int(round(SPLIT_FRACTIONS[0] * spec.n_examples))
    n_val = int(round(SPLIT_FRACTIONS[1] * spec.n_examples))
    return TaskSpec(spec.task_id or f"{spec.family.lower()}_{spec.seed}", spec.family,
                    spec.num_fields, list(spec.labels),
                    train=examples[:n_train], validation=examples[n_train:n_train + n_val],
                    test=examples[n_train + n_val:], seed=spec.seed, domain=spec.domain)


def _slug(family: str) -> str:
    return family.lower().replace("-detection", "")


def suite_specs(n_per_type: int = 4, n_domains: int = 8, size_profile=SIZE_PROFILE,
                length_profile=LENGTH_PROFILE, master_seed: int = 0) -> list[GenSpec]:
    """GenSpecs covering every type, domain, size bin and length bin."""
    if n_per_type < 1:
        raise ValueError("n_per_type must be >= 1")
    if n_domains < 4:
        raise ValueError("at least 4 domains are required")
    seeds = np.random.SeedSequence(master_seed).generate_state(len(TASK_TYPES) * n_per_type)
    specs = []
    for t, family in enumerate(TASK_TYPES):
        for j in range(n_per_type):
            specs.append(GenSpec(
                family=family,
                domain=(t + 2 * j) % n_domains,
                n_examples=size_profile[(t + j) % len(size_profile)],
                length_range=tuple(length_profile[(3 * t + j) % len(length_profile)]),
                labels=list(FAMILY_LABELS[family]),
                seed=int(seeds[t * n_per_type + j]),
                task_id=f"{_slug(family)}_{j}",
            ))
    return specs


def generate_suite(n_per_type: int = 4, n_domains: int = 8, size_profile=SIZE_PROFILE,
                   length_profile=LENGTH_PROFILE, master_seed: int = 0) -> TaskCollection:
    specs = suite_specs(n_per_type, n_domains, size_profile, length_profile, master_seed)
    lex = lexicons(n_domains)
    return TaskCollection([generate_task(s, lex[s.domain]) for s in specs])


def holdout_ids(collection: TaskCollection) -> list[str]:
    """One task per type, rotating the replica index across types."""
    out = []
    for t, family in enumerate(TASK_TYPES):
        same = [task.id for task in collection if task.task_type == family]
        if same:
            out.append(same[t % len(same)])
    return out


def spec_dict(spec: GenSpec) -> dict:
    d = asdict(spec)
    d["length_range"] = list(spec.length_range)
    return d


# ---------------------------------------------------------------------------
# aspects
# ---------------------------------------------------------------------------

ASPECT_BLOCKS = (("task_type", 8), ("num_examples", 4), ("num_text_fields", 2),
                 ("domain_cluster", 8), ("text_length", 4))
ASPECT_DIM = sum(n for _, n in ASPECT_BLOCKS)


def quartile_bin(value: float, population, n_bins: int = 4) -> int:
    """1-based bin from nearest-rank quantile boundaries; ties go to the lower bin."""
    pop = np.sort(np.asarray(population, dtype=float))
    if pop.size == 0:
        raise ValueError("empty population")
    if pop.size < n_bins:
        raise ValueError(f"population needs at least {n_bins} values")
    bounds = [pop[math.ceil(k / n_bins * pop.size) - 1] for k in range(1, n_bins)]
    return 1 + sum(b < value for b in bounds)


def median_length(task: TaskSpec) -> float:
    return float(np.median([ex.length for ex in task.train]))


@dataclass
class AspectVector:
    values: np.ndarray
    blocks: dict[str, slice] = field(default_factory=dict)

    @classmethod
    def build(cls, type_index: int, size_bin: int, n_fields: int, domain: np.ndarray,
              length_bin: int, n_bins: int = 4) -> "AspectVector":
        domain = np.asarray(domain, dtype=float)
        parts = [np.eye(len(TASK_TYPES))[type_index], np.eye(n_bins)[size_bin - 1],
                 np.eye(2)[n_fields - 1], domain, np.eye(n_bins)[length_bin - 1]]
        blocks, start = {}, 0
        for (name, _), part in zip(ASPECT_BLOCKS, parts):
            blocks[name] = slice(start, start + len(part))
            start += len(part)
        return cls(np.concatenate(parts), blocks)

    def block(self, name: str) -> np.ndarray:
        return self.values[self.blocks[name]]

    def label(self, name: str) -> int:
        return int(np.argmax(self.block(name)))


def domain_representation(task: TaskSpec, encoder, max_examples: int = 256) -> np.ndarray:
    from .baselines import text_emb
    v = text_emb(task, encoder, max_examples)
    return v / np.linalg.norm(v)


def fit_domain_gmm(collection: TaskCollection, encoder, n_components: int = 8, seed: int = 0):
    from .analytics import gmm_fit
    points = np.stack([domain_representation(t, encoder) for t in collection])
    model, _ = gmm_fit(points, n_components=n_components, seed=seed)
    return model


def extract_aspects(task: TaskSpec, collection: TaskCollection, encoder, gmm_model,
                    n_bins: int = 4) -> AspectVector:
    """Aspect vector from input text, sizes and task type only (labels unused)."""
    if gmm_model is None or not getattr(gmm_model, "fitted", False):
        raise ValueError("domain GMM is not fitted")
    sizes = [len(t.train) for t in collection]
    lengths = [median_length(t) for t in collection]
    domain = gmm_model.predict_proba(domain_representation(task, encoder)[None, :])[0]
    return AspectVector.build(TASK_TYPES.index(task.task_type),
                              quartile_bin(len(task.train), sizes, n_bins),
                              task.num_fields, domain,
                              quartile_bin(median_length(task), lengths, n_bins), n_bins)
