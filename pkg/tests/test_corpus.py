import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vqprompt.corpus import (
    Corpus,
    ParaphraseCluster,
    TransformationRule,
    default_corpus,
    generate_synthetic,
    load_clusters,
    load_fillers,
    load_rules,
    pretraining_lines,
    save_clusters,
    split,
)


def test_rule_example():
    rule = TransformationRule("r", "what is the reason of $x ?", "why does $x happen ?", "topic")
    assert rule.apply("rain") == ("what is the reason of rain ?", "why does rain happen ?")


def test_rule_needs_one_slot():
    with pytest.raises(ValueError):
        TransformationRule("bad", "what is $x and $x ?", "why $x ?", "topic")


def test_default_rules_are_well_formed():
    rules = load_rules()
    assert len(rules) == 16
    assert len({r.rule_id for r in rules}) == 16


def test_zero_per_rule_is_empty():
    assert len(generate_synthetic(load_rules(), load_fillers(), 0, seed=0)) == 0


def test_default_pack_size_and_distinct_pairs():
    corpus = default_corpus()
    assert len(corpus) == 16 * 150
    assert len({(c.rule_id, c.filler) for c in corpus}) == 2400
    assert all(c.input not in c.refs for c in corpus)


def test_not_enough_fillers_names_slot():
    with pytest.raises(ValueError, match="topic"):
        generate_synthetic(load_rules(), {"action": ["a"] * 300, "topic": ["x"]}, 5, seed=0)


def test_load_single_line(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text('{"input":"a","refs":["b"]}\n')
    corpus = load_clusters(p)
    assert len(corpus) == 1 and corpus.clusters[0].refs == ("b",)


def test_missing_refs_reports_line(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text('{"input":"a","refs":["b"]}\n{"input":"c"}\n')
    with pytest.raises(ValueError, match=":2:"):
        load_clusters(p)


def test_save_load_round_trip(tmp_path):
    corpus = default_corpus(n_per_rule=20, seed=3)
    save_clusters(corpus, tmp_path / "c.jsonl")
    assert load_clusters(tmp_path / "c.jsonl") == corpus


def test_split_sizes_small():
    corpus = Corpus([ParaphraseCluster(f"in {i}", (f"out {i}",)) for i in range(10)])
    assert tuple(len(p) for p in split(corpus, (0.8, 0.1, 0.1), seed=0)) == (8, 1, 1)


def test_split_is_deterministic_and_disjoint():
    corpus = default_corpus()
    a = split(corpus, seed=5)
    b = split(corpus, seed=5)
    assert a == b
    keys = [{(c.input, c.refs[0]) for c in part} for part in a]
    assert not (keys[0] & keys[1]) and not (keys[0] & keys[2]) and not (keys[1] & keys[2])
    assert sum(len(p) for p in a) == len(corpus)


def test_fillers_never_shared_between_train_and_test():
    train, _, test = split(default_corpus(), (0.8, 0.1, 0.1), seed=0)
    train_pairs = {(c.rule_id, c.filler) for c in train}
    assert not any((c.rule_id, c.filler) in train_pairs for c in test)
    assert not ({c.filler for c in train} & {c.filler for c in test})


def test_pretraining_lines_cover_every_filler():
    train, _, _ = split(default_corpus(), seed=0)
    fillers = load_fillers()
    words = {w for line in pretraining_lines(train, fillers, n_random=50, seed=0) for w in line.split()}
    assert all(w in words for group in fillers.values() for f in group for w in f.split())


@settings(max_examples=20, deadline=None)
@given(st.integers(3, 60), st.integers(0, 1000))
def test_split_partitions_any_size(n, seed):
    corpus = Corpus([ParaphraseCluster(f"q {i}", (f"r {i}",)) for i in range(n)])
    parts = split(corpus, (0.8, 0.1, 0.1), seed=seed)
    assert sorted(c.input for p in parts for c in p) == sorted(c.input for c in corpus)


def test_jsonl_extra_keys_preserved(tmp_path):
    corpus = default_corpus(n_per_rule=2)
    save_clusters(corpus, tmp_path / "c.jsonl")
    first = json.loads((tmp_path / "c.jsonl").read_text().splitlines()[0])
    assert {"input", "refs", "rule_id", "filler"} <= set(first)
