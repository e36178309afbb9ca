"""Reusable experiment drivers shared by ``scripts/`` and the acceptance suite."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import data as D
from .decoding import batch_generate, greedy
from .metrics import bleu_n, corpus_fidelity, label_recall
from .training import TrainConfig, evaluate_loss, train, with_variant

log = logging.getLogger(__name__)


@dataclass
class OverfitResult:
    steps: int
    train_accuracy: float
    teacher_forced_accuracy: float
    exact: int
    n: int
    seconds: float


def overfit(n: int = 32, d: int = 64, max_steps: int = 2000, seed: int = 0, data_seed: int = 0) -> OverfitResult:
    """Memorize ``n`` samples; stop once an epoch's training accuracy reaches 1.0.

    Each epoch is one batch, so epochs and Adam steps coincide.  Reported accuracy is
    re-measured teacher-forced in eval mode, and exact matches use greedy decoding.
    """
    start = time.perf_counter()
    schema = D.default_schema()
    corpus = D.generate_corpus(schema, n, data_seed)
    vocab = D.build_vocab(corpus)
    cfg = TrainConfig(d=d, batch_size=n, epochs=max_steps, max_steps=max_steps, val_fraction=0.0,
                      lambda_warmup=0, seed=seed)
    res = train(cfg, corpus, vocab, schema.categories, stop_at_accuracy=1.0)
    tf = evaluate_loss(res.model, corpus, vocab, schema.categories, cfg, cfg.lambda_final)
    cat = {c: i for i, c in enumerate(schema.categories)}
    exact = 0
    for s in corpus:
        hyp = greedy(res.model, vocab.encode(s.keywords), [cat[c] for c in s.keyword_labels],
                     cfg.min_len, cfg.max_len, schema.normal_id)
        exact += vocab.decode(hyp.tokens) == s.description
    return OverfitResult(res.steps, res.epochs[-1]["train_accuracy"], tf["accuracy"], exact, n,
                         time.perf_counter() - start)


@dataclass
class VariantResult:
    variant: str
    steps: int
    parameters: int
    fidelity: float
    violation_rate: float
    violations: int
    bleu1: float
    recall: dict = field(default_factory=dict)
    seconds: float = 0.0


def fidelity_ablation(n: int = 5000, held_out: int = 500, epochs: int = 3, d: int = 64, seed: int = 0,
                      data_seed: int = 0, variants=("full", "stripped"), beam: int = 4,
                      batch_size: int = 8, out_dir=None) -> dict:
    """Train each variant on the first ``n - held_out`` samples with identical seeds and budget,
    then beam-decode the held-out tail and score fidelity, BLEU-1 and (where defined) label recall."""
    schema = D.default_schema()
    corpus = D.generate_corpus(schema, n, data_seed)
    train_set, test_set = corpus[:n - held_out], corpus[n - held_out:]
    vocab = D.build_vocab(corpus)
    base = TrainConfig(d=d, epochs=epochs, seed=seed, beam=beam, batch_size=batch_size)
    out = {}
    for name in variants:
        t0 = time.perf_counter()
        cfg = with_variant(base, name)
        vdir = Path(out_dir) / name if out_dir else None
        res = train(cfg, train_set, vocab, schema.categories, out_dir=vdir)
        rows = batch_generate(res.model, test_set, vocab, schema.categories,
                              vdir / "generations.jsonl" if vdir else None,
                              mode="beam", beam=beam, min_len=cfg.min_len, max_len=cfg.max_len)
        gens = [r["generated"] for r in rows]
        fid, viol = corpus_fidelity(test_set, gens, schema)
        recall = {}
        if res.model.has_label_head:
            C = len(schema.categories)
            recall = label_recall(res.model, test_set, vocab, schema.categories, ks=tuple(range(1, C + 1)))
        out[name] = VariantResult(name, res.steps, res.model.params.census(), fid, 1.0 - fid, len(viol),
                                  bleu_n(gens, [s.description for s in test_set], 1), recall,
                                  time.perf_counter() - t0)
        log.info("%s", out[name])
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ablation.json").write_text(
            json.dumps({k: asdict(v) for k, v in out.items()}, indent=1))
    return out
