import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fpdg.data import (NORMAL, RESERVED, AttributeSchema, CorpusParseError, Sample, SchemaError, Vocab,
                       build_vocab, default_schema, entity_fraction, generate_corpus, label_tokens,
                       load_schema, read_corpus, save_schema, token_counts, write_corpus)
from fpdg.metrics import corpus_fidelity


def test_default_schema_shape(schema):
    assert len(schema.categories) == 8 and schema.categories[-1] == NORMAL
    assert all(12 <= len(v) <= 40 for v in schema.lexicons.values())
    assert len(schema.templates) == 20
    lens = [sum(len(c.split()) for c in t) for t in schema.templates]
    assert min(lens) >= 25 and max(lens) <= 70


def test_lexicons_disjoint_and_hyphen_joined(schema):
    seen = {}
    for cat, toks in schema.lexicons.items():
        for t in toks:
            assert " " not in t
            assert seen.setdefault(t, cat) == cat


def test_schema_validation_errors(schema):
    bad = schema.to_json()
    bad["lexicons"] = dict(bad["lexicons"], Color=bad["lexicons"]["Color"] + ["zara"])
    with pytest.raises(SchemaError):
        AttributeSchema.from_json(bad)
    bad = schema.to_json()
    bad["templates"] = [["this {Flavor} is odd ."]]
    with pytest.raises(SchemaError):
        AttributeSchema.from_json(bad)
    bad = schema.to_json()
    bad["categories"] = [c for c in bad["categories"] if c != NORMAL]
    with pytest.raises(SchemaError):
        AttributeSchema.from_json(bad)
    with pytest.raises(SchemaError):
        AttributeSchema.from_json({"categories": []})


def test_function_word_in_lexicon_rejected(schema):
    bad = schema.to_json()
    bad["lexicons"] = dict(bad["lexicons"], Style=bad["lexicons"]["Style"] + ["wardrobe"])
    with pytest.raises(SchemaError, match="function word"):
        AttributeSchema.from_json(bad)


def test_empty_lexicon_is_schema_error(schema):
    s = AttributeSchema(schema.categories, dict(schema.lexicons, Fit=[]), schema.templates)
    with pytest.raises(SchemaError, match="empty lexicon"):
        generate_corpus(s, 5, seed=0)


def test_schema_file_round_trip(schema, tmp_path):
    save_schema(schema, tmp_path / "s.json")
    again = load_schema(tmp_path / "s.json")
    assert again.to_json() == schema.to_json()
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(SchemaError):
        load_schema(tmp_path / "bad.json")


def test_zero_samples(schema):
    assert generate_corpus(schema, 0, seed=1) == []


def test_corpus_deterministic(schema, tmp_path):
    write_corpus(generate_corpus(schema, 50, seed=4), tmp_path / "a.jsonl")
    write_corpus(generate_corpus(schema, 50, seed=4), tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert generate_corpus(schema, 50, seed=5) != generate_corpus(schema, 50, seed=4)


def test_worker_count_does_not_change_output(schema):
    assert generate_corpus(schema, 2100, seed=2, workers=3) == generate_corpus(schema, 2100, seed=2)


def test_sample_invariants(schema, corpus):
    for s in corpus:
        assert len(s.keywords) == len(s.keyword_labels)
        assert len(s.description) == len(s.description_labels)
        assert sum(lab != NORMAL for lab in s.keyword_labels) >= 3
        for kw, lab in zip(s.keywords, s.keyword_labels):
            assert kw in schema.lexicons[lab]
            assert s.description.count(kw) == 1          # every drawn value, exactly once
        for tok, lab in zip(s.description, s.description_labels):
            if lab != NORMAL:
                assert tok in schema.lexicons[lab]
                assert tok in s.keywords


def test_entity_fraction_at_least_085(schema):
    assert entity_fraction(generate_corpus(schema, 2000, seed=11)) >= 0.85


def test_keyword_order_follows_schema(schema, corpus):
    for s in corpus:
        ranks = [schema.categories.index(c) for c in s.keyword_labels]
        assert ranks == sorted(ranks)


def test_references_score_full_fidelity(schema):
    c = generate_corpus(schema, 1000, seed=6)
    fid, viol = corpus_fidelity(c, [s.description for s in c], schema)
    assert fid == 1.0 and viol == []


def test_label_tokens_cases(schema):
    cat = schema.categories
    assert cat[label_tokens(["zara"], schema)[0]] == "Brand"
    assert cat[label_tokens(["the"], schema)[0]] == NORMAL
    assert cat[label_tokens(["premium"], schema)[0]] == NORMAL


def test_labeling_reproduces_stored_labels(schema, corpus):
    for s in corpus:
        assert [schema.categories[i] for i in label_tokens(s.description, schema)] == s.description_labels


@settings(max_examples=50, deadline=None)
@given(st.lists(st.text(alphabet="abcdefgz-", min_size=1, max_size=8), max_size=20))
def test_label_tokens_total_and_closed(tokens):
    schema = default_schema()
    ids = label_tokens(tokens, schema)
    assert len(ids) == len(tokens) and ids == label_tokens(tokens, schema)
    for tok, i in zip(tokens, ids):
        cat = schema.categories[i]
        assert cat == NORMAL or tok in schema.lexicons[cat]


def test_vocab_small_corpus():
    s = Sample(["a", "b"], [NORMAL, NORMAL], ["a", "c", "d", "e"], [NORMAL] * 4)
    v = build_vocab([s])
    assert len(v) == 5 + 4
    assert v.itos[:4] == list(RESERVED)
    assert v.decode(v.encode(["c", "zzz", "a"])) == ["c", "<unk>", "a"]


def test_vocab_requires_nonempty_corpus():
    with pytest.raises(ValueError):
        build_vocab([])


def test_vocab_round_trip_and_bijective(vocab, tmp_path):
    vocab.save(tmp_path / "v.tsv")
    again = Vocab.load(tmp_path / "v.tsv")
    assert again == vocab and again.stoi == vocab.stoi
    assert len(set(again.itos)) == len(again.itos)
    (tmp_path / "bad.tsv").write_text("<pad>\t0\nfoo\tbar\n")
    with pytest.raises(CorpusParseError, match=":2:"):
        Vocab.load(tmp_path / "bad.tsv")


def test_corpus_round_trip(corpus, tmp_path):
    write_corpus(corpus, tmp_path / "c.jsonl")
    assert read_corpus(tmp_path / "c.jsonl") == corpus
    line = json.loads((tmp_path / "c.jsonl").read_text().splitlines()[0])
    assert set(line) == {"keywords", "keyword_labels", "description", "description_labels"}
    assert all(isinstance(x, str) for x in line["keyword_labels"])


def test_read_counts_match_generator(corpus, tmp_path):
    write_corpus(corpus, tmp_path / "c.jsonl")
    direct = {}
    for s in corpus:
        for t in s.keywords + s.description:
            direct[t] = direct.get(t, 0) + 1
    assert dict(token_counts(read_corpus(tmp_path / "c.jsonl"))) == direct


def test_malformed_line_reports_line_number(corpus, tmp_path):
    path = tmp_path / "c.jsonl"
    write_corpus(corpus[:2], path)
    with open(path, "a") as fh:
        fh.write('{"keywords": ["x"]}\n')
    with pytest.raises(CorpusParseError, match=":3:"):
        read_corpus(path)
    path.write_text('{"keywords": ["a"], "keyword_labels": [], "description": [], "description_labels": []}\n')
    with pytest.raises(CorpusParseError, match=":1:"):
        read_corpus(path)
