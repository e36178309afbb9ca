"""Corpus BLEU, ROUGE-L, the attribute fidelity checker and teacher-forced label recall."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import NORMAL, AttributeSchema, Sample, Vocab, label_tokens

BLEU_EPS = 1e-9
ROUGE_BETA = 1.2


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(candidates, references, max_n: int = 4):
    """Sufficient statistics: clipped matches and totals per order, candidate and reference lengths."""
    matches = [0] * max_n
    totals = [0] * max_n
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        c_len += len(cand)
        r_len += len(ref)
        for n in range(1, max_n + 1):
            cn, rn = _ngrams(cand, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, rn[g]) for g, c in cn.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)
    return matches, totals, c_len, r_len


def bleu_n(candidates, references, n: int, smooth: bool = True) -> float:
    """Corpus BLEU with uniform weights over orders 1..n and brevity penalty."""
    if len(candidates) != len(references):
        raise ValueError("candidates and references must pair up")
    if not candidates:
        raise ValueError("empty corpus")
    if not 1 <= n <= 4:
        raise ValueError("n must be in 1..4")
    matches, totals, c_len, r_len = bleu_stats(candidates, references, n)
    if c_len == 0 or matches[0] == 0:
        return 0.0
    logs = []
    for m, t in zip(matches, totals):
        p = m / t if t else 0.0
        if p == 0.0:
            if not smooth:
                return 0.0
            p = BLEU_EPS
        logs.append(math.log(p))
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return min(1.0, bp * math.exp(sum(logs) / n))


def lcs_length(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_pair(cand, ref, beta: float = ROUGE_BETA) -> float:
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def rouge_l(candidates, references, beta: float = ROUGE_BETA) -> float:
    if len(candidates) != len(references):
        raise ValueError("candidates and references must pair up")
    if not candidates:
        raise ValueError("empty corpus")
    return sum(rouge_l_pair(c, r, beta) for c, r in zip(candidates, references)) / len(candidates)


@dataclass
class Violation:
    sample: int
    category: str
    token: str


def fidelity(keywords, keyword_labels, generated, schema: AttributeSchema, sample_id: int = 0):
    """Sample-level check: 1.0 if no generated entity token contradicts the input, else 0.0.

    A token labeled with entity category k violates unless it equals an input keyword
    of category k.  Categories missing from the input are exempt only when open-class.
    """
    allowed: dict[str, set] = {}
    for kw, lab in zip(keywords, keyword_labels):
        allowed.setdefault(lab, set()).add(kw)
    violations = []
    cats = schema.categories
    for tok, cid in zip(generated, label_tokens(generated, schema)):
        cat = cats[cid]
        if cat == NORMAL:
            continue
        if cat not in allowed and cat in schema.open_class:
            continue
        if tok not in allowed.get(cat, ()):
            violations.append(Violation(sample_id, cat, tok))
    return (0.0 if violations else 1.0), violations


def corpus_fidelity(samples: list[Sample], generations, schema: AttributeSchema):
    """Fraction of violation-free samples, and every violation found."""
    if len(samples) != len(generations):
        raise ValueError("samples and generations must pair up")
    bad, allv = 0, []
    for i, (s, gen) in enumerate(zip(samples, generations)):
        _, v = fidelity(s.keywords, s.keyword_labels, gen, schema, i)
        bad += bool(v)
        allv.extend(v)
    return (1.0 - bad / len(samples) if samples else 1.0), allv


def label_recall(model, samples: list[Sample], vocab: Vocab, categories, ks=(1, 2, 3),
                 batch_size: int = 32) -> dict:
    """R_n@k with n = number of categories: teacher-forced, hit when the true next label is in top-k of P^e."""
    from .training import iter_batches

    if not model.has_label_head:
        raise ValueError("model variant has no entity-label head")
    hits = {k: 0 for k in ks}
    steps = 0
    with T.no_grad():
        for batch in iter_batches(samples, batch_size, vocab, categories):
            _, pe = model.teacher_forced(batch, mode="eval")
            for t, p in enumerate(pe):
                m = batch.tgt_mask[:, t]
                # rank of the true label: count of labels strictly more probable, ties to lower id
                probs = p.data
                true = batch.lab_out[:, t]
                tp = probs[np.arange(len(true)), true][:, None]
                ids = np.arange(probs.shape[1])[None, :]
                rank = np.sum((probs > tp) | ((probs == tp) & (ids < true[:, None])), axis=1)
                for k in ks:
                    hits[k] += int(np.sum((rank < k) & m))
                steps += int(m.sum())
    return {k: hits[k] / steps if steps else 0.0 for k in ks}


REPORT_SCHEMA = {
    "type": "object",
    "required": ["n_samples", "bleu", "rouge_l", "fidelity", "violations", "label_recall"],
    "properties": {
        "n_samples": {"type": "integer", "minimum": 0},
        "bleu": {
            "type": "object",
            "required": ["1", "2", "3", "4"],
            "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1},
        },
        "rouge_l": {"type": "number", "minimum": 0, "maximum": 1},
        "fidelity": {"type": "number", "minimum": 0, "maximum": 1},
        "violations": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["sample", "category", "token"],
                "properties": {"sample": {"type": "integer"}, "category": {"type": "string"},
                               "token": {"type": "string"}},
            },
        },
        "label_recall": {
            "type": "object",
            "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1},
        },
    },
}


@dataclass
class EvalReport:
    n_samples: int
    bleu: dict
    rouge_l: float
    fidelity: float
    violations: list = field(default_factory=list)
    label_recall: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d["bleu"] = {str(k): v for k, v in self.bleu.items()}
        d["label_recall"] = {str(k): v for k, v in self.label_recall.items()}
        return d

    def to_text(self) -> str:
        lines = [f"samples   {self.n_samples}"]
        lines += [f"BLEU-{n}    {self.bleu[n]:.4f}" for n in sorted(self.bleu)]
        lines.append(f"ROUGE-L   {self.rouge_l:.4f}")
        lines.append(f"fidelity  {self.fidelity:.4f}  ({len(self.violations)} violations)")
        for k, r in sorted(self.label_recall.items()):
            lines.append(f"R@{k}       {r:.4f}")
        return "\n".join(lines)

    def write_violations(self, path) -> None:
        with open(path, "w") as fh:
            for v in self.violations:
                fh.write(json.dumps(v) + "\n")


def evaluate(samples: list[Sample], generations, schema: AttributeSchema, recall: dict | None = None) -> EvalReport:
    refs = [s.description for s in samples]
    bleu = {n: bleu_n(generations, refs, n) for n in range(1, 5)}
    fid, viol = corpus_fidelity(samples, generations, schema)
    return EvalReport(len(samples), bleu, rouge_l(generations, refs), fid,
                      [asdict(v) for v in viol], dict(recall or {}))
