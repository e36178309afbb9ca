"""Greedy and beam-search generation with minimum/maximum length constraints."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import BOS, EOS, NORMAL, Sample, Vocab
from .decoder import ELSTMState
from .encoder import EncodedKeywords, KeywordMemory
from .model import FPDG, Context


@dataclass
class Hypothesis:
    tokens: list
    labels: list
    score: float                      # cumulative log-prob
    scores: list = field(default_factory=list)

    @property
    def norm_score(self) -> float:
        return self.score / max(len(self.tokens), 1)


@dataclass
class Beam:
    hypotheses: list
    width: int


def _take(t, idx):
    return None if t is None else T.Tensor(t.data[idx])


def _select(ctx: Context, state: ELSTMState, idx: np.ndarray):
    """Gather batch rows ``idx`` of a context and state (inference only)."""
    enc = ctx.enc
    enc2 = EncodedKeywords(_take(enc.h, idx), _take(enc.m, idx), _take(enc.word_emb, idx),
                           _take(enc.label_emb, idx), enc.mask[idx])
    mem = ctx.memory
    mem2 = None if mem is None else KeywordMemory(mem.keys, _take(mem.values, idx),
                                                  _take(mem.word_values, idx), mem.counts[idx])
    cache = {k: _take(v, idx) for k, v in ctx.cache.items()}
    st = ELSTMState(_take(state.wh, idx), _take(state.lh, idx),
                    tuple(_take(c, idx) for c in state.cells), _take(state.cm_prev, idx))
    return Context(enc2, mem2, cache), st


def _encode_one(model: FPDG, kw_ids, kw_labels):
    if len(kw_ids) == 0:
        raise ValueError("keyword list is empty")
    ids = np.asarray(kw_ids, np.int64)[None]
    labs = np.asarray(kw_labels, np.int64)[None]
    return model.encode(ids, labs, np.ones_like(ids, bool))


def _log_probs(pv: np.ndarray, length: int, min_len: int) -> np.ndarray:
    with np.errstate(divide="ignore"):
        lp = np.log(pv.astype(np.float64))
    if length < min_len:
        lp[..., EOS] = -np.inf
    lp[..., BOS] = -np.inf
    return lp


def greedy(model: FPDG, kw_ids, kw_labels, min_len: int = 15, max_len: int = 70,
           normal_id: int = 0, trace: list | None = None) -> Hypothesis:
    with T.no_grad():
        ctx, state = _encode_one(model, kw_ids, kw_labels)
        y, m = BOS, normal_id
        hyp = Hypothesis([], [], 0.0)
        for t in range(max_len):
            out = model.step(ctx, state, [y], [m], mode="eval")
            lp = _log_probs(out.pv.data[0], t, min_len)
            y = int(np.argmax(lp))
            m = int(np.argmax(out.pe.data[0])) if out.pe is not None else normal_id
            if trace is not None:
                trace.append({"step": t, "token": y, **{k: v[0].tolist() for k, v in out.diagnostics.items()}})
            hyp.score += float(lp[y])
            hyp.scores.append(hyp.score)
            if y == EOS:
                break
            hyp.tokens.append(y)
            hyp.labels.append(m)
            state = out.state
        return hyp


def beam_search(model: FPDG, kw_ids, kw_labels, width: int = 4, min_len: int = 15, max_len: int = 70,
                normal_id: int = 0, include_greedy: bool = True) -> tuple[Hypothesis, list]:
    """Beam search; returns (best by length-normalized score, all finished hypotheses).

    Candidate order is (cumulative log-prob desc, token id asc), so ties go to the lower id.
    With ``include_greedy`` the greedy hypothesis joins the finished pool, which guarantees
    the best raw score is never below the greedy one.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    finished = []
    with T.no_grad():
        ctx, state = _encode_one(model, kw_ids, kw_labels)
        beam = Beam([Hypothesis([], [], 0.0)], width)
        prev_tok, prev_lab = [BOS], [normal_id]
        for t in range(max_len):
            out = model.step(ctx, state, prev_tok, prev_lab, mode="eval")
            lp = _log_probs(out.pv.data, t, min_len)
            if out.pe is not None:
                labels = out.pe.data.argmax(-1)
            else:
                labels = np.full(len(beam.hypotheses), normal_id)
            cands = []
            for b, hyp in enumerate(beam.hypotheses):
                row = lp[b]
                for tok in np.lexsort((np.arange(row.size), -row))[:width]:
                    if np.isfinite(row[tok]):
                        cands.append((hyp.score + float(row[tok]), int(tok), b))
            cands.sort(key=lambda c: (-c[0], c[1], c[2]))
            alive, parents = [], []
            for score, tok, b in cands[:width]:
                parent = beam.hypotheses[b]
                if tok == EOS:
                    finished.append(Hypothesis(parent.tokens, parent.labels, score, parent.scores + [score]))
                else:
                    alive.append(Hypothesis(parent.tokens + [tok], parent.labels + [int(labels[b])],
                                            score, parent.scores + [score]))
                    parents.append(b)
            beam = Beam(alive, width)
            if not alive or len(finished) >= width:
                break
            # every context row holds the same sample, so gathering by parent row is exact
            ctx, state = _select(ctx, out.state, np.asarray(parents))
            prev_tok = [h.tokens[-1] for h in alive]
            prev_lab = [h.labels[-1] for h in alive]
        else:
            finished.extend(beam.hypotheses)
    if include_greedy:
        finished.append(greedy(model, kw_ids, kw_labels, min_len, max_len, normal_id))
    best = max(finished, key=lambda h: (h.norm_score, h.score))
    return best, finished


def generate(model: FPDG | None, keywords, labels, mode: str = "greedy", beam: int = 4,
             min_len: int = 15, max_len: int = 70, normal_id: int = 0, trace: list | None = None) -> list[int]:
    """Token ids of one generated description (EOS excluded)."""
    if model is None:
        raise RuntimeError("no model loaded")
    if mode == "greedy":
        return greedy(model, keywords, labels, min_len, max_len, normal_id, trace).tokens
    if mode == "beam":
        return beam_search(model, keywords, labels, beam, min_len, max_len, normal_id)[0].tokens
    raise ValueError(f"unknown decoding mode {mode!r}")


def batch_generate(model: FPDG, samples: list[Sample], vocab: Vocab, categories: list[str], out_path=None,
                   mode: str = "beam", beam: int = 4, min_len: int = 15, max_len: int = 70,
                   trace_path=None) -> list[dict]:
    """Generate for each sample in order; optionally write JSON-lines rows
    ``{keywords, reference, generated}`` to ``out_path``."""
    cat = {c: i for i, c in enumerate(categories)}
    normal = cat[NORMAL]
    rows = []
    trace_fh = open(trace_path, "w") if trace_path else None
    try:
        for i, s in enumerate(samples):
            kw = vocab.encode(s.keywords)
            labs = [cat[c] for c in s.keyword_labels]
            ids = generate(model, kw, labs, mode, beam, min_len, max_len, normal)
            if trace_fh:
                # diagnostics follow the greedy path
                trace = []
                greedy(model, kw, labs, min_len, max_len, normal, trace)
                for row in trace:
                    trace_fh.write(json.dumps({"sample": i, **row}) + "\n")
            rows.append({"keywords": s.keywords, "reference": s.description, "generated": vocab.decode(ids)})
    finally:
        if trace_fh:
            trace_fh.close()
    if out_path is not None:
        try:
            with open(out_path, "w") as fh:
                for row in rows:
                    fh.write(json.dumps(row) + "\n")
        except OSError as e:
            raise OSError(f"writing generations to {out_path} after sample {len(rows) - 1}: {e}") from e
    return rows
