import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taskembed import taskgen as G
from taskembed.encoder import EncoderConfig, mlm_pretrain
from taskembed.taskgen import (ASPECT_DIM, FAMILY_LABELS, GenSpec, fit_domain_gmm, extract_aspects,
                               generate_suite, generate_task, holdout_ids, quartile_bin, suite_specs)
from taskembed.tasks import TASK_TYPES, TaskCollection, read_task, write_task


@pytest.fixture(scope="module")
def suite():
    return generate_suite()


def spec(family, seed=1, n=64, length=(4, 6), labels=None, domain=0):
    return GenSpec(family, domain, n, length, labels or list(FAMILY_LABELS[family]), seed)


class TestGenerator:
    @pytest.mark.parametrize("family", TASK_TYPES)
    def test_deterministic(self, family):
        assert generate_task(spec(family)) == generate_task(spec(family))

    def test_seed_changes_content(self):
        a, b = generate_task(spec("NLI", 1)), generate_task(spec("NLI", 2))
        assert a.train != b.train

    @pytest.mark.parametrize("family", TASK_TYPES)
    def test_balanced_labels(self, family):
        t = generate_task(spec(family, n=97))
        exs = t.train + t.validation + t.test
        counts = np.bincount([e.label for e in exs])
        assert counts.max() - counts.min() <= 1
        assert len(exs) == 97

    def test_nli_rule(self):
        t = generate_task(spec("NLI", n=120))
        for ex in t.train:
            premise, hyp = ex.texts
            negated = any(tok in G.NEGATION for tok in hyp)
            subset = set(hyp) - set(G.NEGATION) <= set(premise)
            name = t.labels[ex.label]
            assert (name == "contradiction") == negated
            assert (name == "entailment") == (subset and not negated)

    def test_other_is_parity(self):
        t = generate_task(spec("Other", n=80, length=(3, 9)))
        for ex in t.train:
            assert len(ex.texts[0]) % 2 == ex.label

    def test_facticity_marker(self):
        t = generate_task(spec("Facticity", n=80))
        for ex in t.train:
            assert any(tok in G.HEDGE for tok in ex.texts[1]) == (ex.label == 1)

    def test_emotion_and_discourse_markers(self):
        for family, table in (("Emotion", G.AFFECT), ("Discourse", G.CONNECTIVES)):
            t = generate_task(spec(family, n=80, length=(6, 8)))
            for ex in t.train:
                markers = {tok for tok in ex.texts[0] if tok < G.LEXICON_START}
                assert markers and markers <= set(table[t.labels[ex.label]])

    def test_grammar_violations(self):
        t = generate_task(spec("Grammar", n=80, length=(6, 9)))
        lex = G.DomainLexicon.build(0)
        for ex in t.train:
            v = G._violations(ex.texts[0], lex)
            assert (v == 0) if ex.label == 0 else (v >= 2)

    def test_tokens_stay_in_domain(self):
        t = generate_task(spec("Paraphrase-detection", domain=3))
        lex = set(G.DomainLexicon.build(3).tokens)
        for ex in t.train:
            assert all(tok in lex for f in ex.texts for tok in f)

    def test_bad_labels(self):
        with pytest.raises(ValueError):
            generate_task(spec("Grammar", labels=["yes", "no"]))
        with pytest.raises(ValueError):
            generate_task(spec("Emotion", labels=["joy"]))

    def test_too_few_examples(self):
        with pytest.raises(ValueError):
            spec("NLI", n=10)

    @settings(max_examples=20, deadline=None)
    @given(st.sampled_from(TASK_TYPES), st.integers(0, 2**31), st.integers(1, 10))
    def test_lengths_fit_encoder(self, family, seed, lo):
        t = generate_task(spec(family, seed=seed, n=32, length=(lo, lo + 4)))
        assert max(len(e.sequence) for e in t.train) <= EncoderConfig().max_len


class TestSuite:
    def test_default_shape(self, suite):
        assert len(suite) == 32
        per_type = {ty: sum(t.task_type == ty for t in suite) for ty in TASK_TYPES}
        assert set(per_type.values()) == {4}
        pairs = sum(t.num_fields == 2 for t in suite)
        assert pairs == 4 * len(G.PAIR_FAMILIES)

    def test_all_bins_present(self, suite):
        sizes = [len(t.train) for t in suite]
        lengths = [G.median_length(t) for t in suite]
        assert {quartile_bin(s, sizes) for s in sizes} == {1, 2, 3, 4}
        assert {quartile_bin(v, lengths) for v in lengths} == {1, 2, 3, 4}
        assert len({t.domain for t in suite}) == 8

    def test_holdout_labels_seen(self, suite):
        held = holdout_ids(suite)
        assert len(held) == 8 and len({suite[h].task_type for h in held}) == 8
        seen = {l for t in suite.without(held) for l in t.labels}
        assert all(l in seen for h in held for l in suite[h].labels)

    def test_master_seed(self):
        a = suite_specs(master_seed=0)
        b = suite_specs(master_seed=1)
        assert [s.task_id for s in a] == [s.task_id for s in b]
        assert [s.seed for s in a] != [s.seed for s in b]

    def test_lexicons_must_fit(self):
        with pytest.raises(ValueError):
            G.lexicons(12)

    def test_jsonl_round_trip(self, suite, tmp_path):
        task = suite["nli_2"]
        write_task(task, tmp_path / "t.jsonl")
        assert read_task(tmp_path / "t.jsonl") == task


class TestQuartiles:
    def test_edges(self):
        pop = [10, 20, 30, 40]
        assert quartile_bin(10, pop) == 1
        assert quartile_bin(40, pop) == 4
        assert quartile_bin(20, pop) == 2

    @given(st.lists(st.integers(0, 1000), min_size=4, max_size=40))
    def test_monotone(self, pop):
        bins = [quartile_bin(v, pop) for v in sorted(pop)]
        assert bins == sorted(bins) and 1 <= bins[0] and bins[-1] <= 4


@pytest.fixture(scope="module")
def aspects_fixture(suite):
    small = TaskCollection([t for t in suite if t.id.endswith(("_0", "_1"))])
    corpus = [e.sequence for t in small for e in t.train]
    enc = mlm_pretrain(corpus, EncoderConfig(), steps=60, seed=0, batch_size=32)
    gmm = fit_domain_gmm(small, enc, n_components=8, seed=0)
    return small, {t.id: extract_aspects(t, small, enc, gmm) for t in small}


class TestAspects:
    def test_shape_and_blocks(self, aspects_fixture):
        small, aspects = aspects_fixture
        for tid, a in aspects.items():
            assert a.values.shape == (ASPECT_DIM,)
            assert a.block("domain_cluster").sum() == pytest.approx(1.0)
            assert a.label("task_type") == TASK_TYPES.index(small[tid].task_type)

    def test_pair_family_fields(self, aspects_fixture):
        small, aspects = aspects_fixture
        for tid, a in aspects.items():
            expected = [0, 1] if small[tid].num_fields == 2 else [1, 0]
            assert a.block("num_text_fields").tolist() == expected

    def test_smallest_task_bin_one(self, aspects_fixture):
        small, aspects = aspects_fixture
        smallest = min(small, key=lambda t: len(t.train))
        assert aspects[smallest.id].label("num_examples") == 0

    def test_domains_recovered(self, aspects_fixture):
        small, aspects = aspects_fixture
        # separated lexicons: each task commits to one cluster
        peaks = [aspects[t.id].block("domain_cluster").max() for t in small]
        assert np.mean(np.array(peaks) >= 0.9) >= 0.75

    def test_unfitted_gmm(self, suite):
        with pytest.raises(ValueError):
            extract_aspects(suite[0], suite, None, None)
