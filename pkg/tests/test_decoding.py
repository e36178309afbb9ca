import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fpdg import tensor as T
from fpdg.data import BOS, EOS, Vocab
from fpdg.decoding import batch_generate, beam_search, generate, greedy
from fpdg.model import FPDG, ModelConfig

V, C = 12, 4


@pytest.fixture(scope="module")
def model():
    m = FPDG(ModelConfig(vocab_size=V, n_labels=C, d=8, seed=1, init_scale=0.5))
    # bias EOS up so unconstrained decoding would stop early; min_len must hold it back
    m.params["dec.out.vocab.b"].data[EOS] += 3.0
    return m


def _kw(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    return rng.integers(4, V, n).tolist(), rng.integers(0, C, n).tolist()


def test_unloaded_model():
    with pytest.raises(RuntimeError):
        generate(None, [4], [0])


def test_empty_keywords(model):
    with pytest.raises(ValueError):
        generate(model, [], [])


@pytest.mark.parametrize("seed", range(5))
def test_beam_one_equals_greedy(model, seed):
    kw, lab = _kw(seed)
    g = generate(model, kw, lab, "greedy", min_len=5, max_len=20, normal_id=C - 1)
    b = beam_search(model, kw, lab, 1, 5, 20, C - 1, include_greedy=False)[0].tokens
    assert b == g


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(0, 6), st.integers(0, 8))
def test_length_bounds(seed, width, lo, extra):
    m = FPDG(ModelConfig(vocab_size=V, n_labels=C, d=4, seed=seed % 3, init_scale=0.5))
    m.params["dec.out.vocab.b"].data[EOS] += 4.0
    kw, lab = _kw(seed)
    hi = lo + extra + 1
    for mode in ("greedy", "beam"):
        toks = generate(m, kw, lab, mode, width, lo, hi, C - 1)
        assert lo <= len(toks) <= hi
        assert EOS not in toks and BOS not in toks


def test_min_len_blocks_early_eos(model):
    kw, lab = _kw(0)
    assert len(generate(model, kw, lab, "greedy", min_len=0, max_len=30, normal_id=C - 1)) < 15
    assert len(generate(model, kw, lab, "greedy", min_len=15, max_len=30, normal_id=C - 1)) >= 15


def test_scores_monotone_and_beam_beats_greedy(model):
    for seed in range(8):
        kw, lab = _kw(seed)
        g = greedy(model, kw, lab, 3, 15, C - 1)
        best, finished = beam_search(model, kw, lab, 3, 3, 15, C - 1)
        assert g.score <= max(h.score for h in finished) + 1e-12
        for h in finished + [g]:
            assert all(b <= a + 1e-12 for a, b in zip(h.scores, h.scores[1:]))
        assert best.norm_score == max(h.norm_score for h in finished)


def test_beam_width_respected(model, monkeypatch):
    import fpdg.decoding as D

    seen = []
    real = D._select

    def spy(ctx, state, idx):
        seen.append(len(idx))
        return real(ctx, state, idx)

    monkeypatch.setattr(D, "_select", spy)
    beam_search(model, *_kw(2), width=3, min_len=4, max_len=12, normal_id=C - 1)
    assert seen and max(seen) <= 3


def test_trace_has_diagnostics(model):
    trace = []
    kw, lab = _kw(1)
    greedy(model, kw, lab, 2, 6, C - 1, trace)
    assert trace and {"step", "token", "attn_word", "memory_pi", "gate_gamma"} <= set(trace[0])
    assert abs(sum(trace[0]["memory_pi"]) - 1) < 1e-5


def _samples(schema, corpus, n):
    return corpus[:n]


@pytest.fixture(scope="module")
def real_model(vocab, schema):
    return FPDG(ModelConfig(vocab_size=len(vocab), n_labels=len(schema.categories), d=8, seed=0))


def test_batch_generate_matches_single_calls(real_model, corpus, vocab, schema, tmp_path):
    rows = batch_generate(real_model, corpus[:3], vocab, schema.categories, tmp_path / "g.jsonl",
                          beam=2, min_len=3, max_len=8)
    cat = {c: i for i, c in enumerate(schema.categories)}
    for row, s in zip(rows, corpus[:3]):
        ids = generate(real_model, vocab.encode(s.keywords), [cat[c] for c in s.keyword_labels], "beam", 2, 3, 8,
                       schema.normal_id)
        assert row["generated"] == vocab.decode(ids)
        assert row["keywords"] == s.keywords and row["reference"] == s.description
    lines = (tmp_path / "g.jsonl").read_text().splitlines()
    assert [json.loads(x) for x in lines] == rows


def test_batch_generate_rerun_byte_identical(real_model, corpus, vocab, schema, tmp_path):
    for name in ("a", "b"):
        batch_generate(real_model, corpus[:3], vocab, schema.categories, tmp_path / f"{name}.jsonl",
                       beam=2, min_len=3, max_len=8, trace_path=tmp_path / f"{name}.trace")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert (tmp_path / "a.trace").read_bytes() == (tmp_path / "b.trace").read_bytes()


def test_batch_generate_empty(real_model, vocab, schema, tmp_path):
    assert batch_generate(real_model, [], vocab, schema.categories, tmp_path / "e.jsonl") == []
    assert (tmp_path / "e.jsonl").read_text() == ""


def test_batch_generate_io_error_names_index(real_model, corpus, vocab, schema, tmp_path):
    with pytest.raises(OSError, match="sample 1"):
        batch_generate(real_model, corpus[:2], vocab, schema.categories, tmp_path / "missing" / "g.jsonl",
                       beam=1, min_len=1, max_len=3)
