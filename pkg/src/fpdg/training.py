"""Joint NLL training with the entity-loss warmup, teacher forcing, Adam and checkpointing."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import BOS, EOS, NORMAL, PAD, Sample, Vocab
from .model import FPDG, ModelConfig, vocab_digest
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

PRESETS = {
    "desk": {},
    "paper": {"d": 256, "batch_size": 256, "epochs": 15, "lr": 1e-3, "lambda_final": 0.6,
              "lambda_warmup": 500, "beam": 4, "min_len": 15, "max_len": 70, "n_categories": 36},
}


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    d: int = 64
    batch_size: int = 32
    epochs: int = 3
    lr: float = 1e-3
    lambda_final: float = 0.6
    lambda_warmup: int = 500
    tau: float = 0.5
    seed: int = 0
    precision: str = "float32"
    no_kw_mem: bool = False
    no_elstm: bool = False
    max_keywords: int = 16
    max_decode_len: int = 70
    val_fraction: float = 0.1
    clip_norm: float = 5.0
    normalize_loss: bool = True
    max_steps: int | None = None
    init_scale: float = 0.08
    embed_std: float = 1.0
    beam: int = 4
    min_len: int = 15
    max_len: int = 70
    n_categories: int | None = None

    def __post_init__(self):
        if self.lambda_final < 0 or self.lambda_warmup < 0:
            raise ValueError("lambda schedule values must be non-negative")
        if self.d <= 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("dimensions and batch size must be positive")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        return cls(**{**PRESETS[name], **overrides})


@dataclass
class Batch:
    kw_ids: np.ndarray
    kw_labels: np.ndarray
    kw_mask: np.ndarray
    tgt_in: np.ndarray
    lab_in: np.ndarray
    tgt_out: np.ndarray
    lab_out: np.ndarray
    tgt_mask: np.ndarray

    @property
    def size(self) -> int:
        return self.kw_ids.shape[0]


def make_batch(samples: list[Sample], vocab: Vocab, categories: list[str], max_keywords: int | None = None,
               max_len: int | None = None) -> Batch:
    """Pad to the longest keyword list / description in the batch; pads use id 0.

    ``max_len`` caps the target length including EOS; longer descriptions are truncated.
    """
    cat = {c: i for i, c in enumerate(categories)}
    normal = cat[NORMAL]
    B = len(samples)
    kws = [s.keywords[:max_keywords] for s in samples]
    kls = [s.keyword_labels[:max_keywords] for s in samples]
    nk = max(len(k) for k in kws)
    cut = None if max_len is None else max_len - 1
    descs = [s.description[:cut] for s in samples]
    dlabs = [s.description_labels[:cut] for s in samples]
    ny = max(len(d) for d in descs) + 1
    kw_ids = np.zeros((B, nk), np.int64)
    kw_labels = np.zeros((B, nk), np.int64)
    kw_mask = np.zeros((B, nk), bool)
    tgt_in = np.full((B, ny), PAD, np.int64)
    lab_in = np.zeros((B, ny), np.int64)
    tgt_out = np.full((B, ny), PAD, np.int64)
    lab_out = np.zeros((B, ny), np.int64)
    tgt_mask = np.zeros((B, ny), bool)
    for b, s in enumerate(samples):
        k = len(kws[b])
        kw_ids[b, :k] = vocab.encode(kws[b])
        kw_labels[b, :k] = [cat[c] for c in kls[b]]
        kw_mask[b, :k] = True
        y = vocab.encode(descs[b])
        labs = [cat[c] for c in dlabs[b]]
        n = len(y) + 1
        tgt_in[b, :n] = [BOS] + y
        lab_in[b, :n] = [normal] + labs
        tgt_out[b, :n] = y + [EOS]
        lab_out[b, :n] = labs + [normal]
        tgt_mask[b, :n] = True
    return Batch(kw_ids, kw_labels, kw_mask, tgt_in, lab_in, tgt_out, lab_out, tgt_mask)


def iter_batches(samples, batch_size, vocab, categories, rng=None, max_keywords=None, max_len=None):
    order = np.arange(len(samples)) if rng is None else rng.permutation(len(samples))
    for i in range(0, len(order), batch_size):
        yield make_batch([samples[j] for j in order[i:i + batch_size]], vocab, categories, max_keywords, max_len)


def lambda_schedule(step: int, warmup: int = 500, final: float = 0.6) -> float:
    """Entity-loss weight: zero for the first ``warmup`` optimizer updates, then ``final``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return 0.0 if step < warmup else final


CLAMP = 1e-12


def _nll(steps, targets, mask, counter):
    total = None
    for t, p in enumerate(steps):
        m = mask[:, t]
        if not m.any():
            continue
        picked = T.pick(p, targets[:, t])
        counter[0] += int(np.sum((picked.data < CLAMP) & m))
        term = T.sum(T.log(T.clamp_min(picked, CLAMP)) * m.astype(picked.data.dtype))
        total = term if total is None else total + term
    return -total if total is not None else Tensor(0.0)


def joint_loss(pv_steps, pe_steps, targets, target_labels, lam: float, mask, normalize: bool = True):
    """``-(Σ log P^v(y_t) + λ Σ log P^e(m_t))`` over unmasked positions.

    Returns ``(loss, stats)``; stats holds per-token word/label NLL and the number of
    target probabilities clamped at 1e-12.
    """
    targets, target_labels, mask = np.asarray(targets), np.asarray(target_labels), np.asarray(mask, bool)
    if len(pv_steps) != targets.shape[1]:
        raise ValueError(f"{len(pv_steps)} steps for targets of length {targets.shape[1]}")
    clamped = [0]
    word = _nll(pv_steps, targets, mask, clamped)
    n_tok = max(int(mask.sum()), 1)
    scale = 1.0 / n_tok if normalize else 1.0
    if pe_steps and pe_steps[0] is not None:
        label = _nll(pe_steps, target_labels, mask, clamped)
        loss = (word + label * lam) * scale
        label_nll = float(label.data) / n_tok
    else:
        loss = word * scale
        label_nll = float("nan")
    return loss, {"word_nll": float(word.data) / n_tok, "label_nll": label_nll, "clamped": clamped[0]}


def token_accuracy(pv_steps, targets, mask) -> tuple[int, int]:
    hits = total = 0
    for t, p in enumerate(pv_steps):
        m = np.asarray(mask)[:, t]
        hits += int(np.sum((p.data.argmax(-1) == targets[:, t]) & m))
        total += int(m.sum())
    return hits, total


def model_config_for(cfg: TrainConfig, vocab: Vocab, categories) -> ModelConfig:
    return ModelConfig(vocab_size=len(vocab), n_labels=len(categories), d=cfg.d, tau=cfg.tau,
                       no_kw_mem=cfg.no_kw_mem, no_elstm=cfg.no_elstm, seed=cfg.seed,
                       init_scale=cfg.init_scale, embed_std=cfg.embed_std)


def split_corpus(corpus, fraction: float, seed: int):
    if fraction <= 0 or len(corpus) < 2:
        return list(corpus), []
    n_val = max(1, int(round(len(corpus) * fraction)))
    order = np.random.default_rng([seed, 17]).permutation(len(corpus))
    val = set(order[:n_val].tolist())
    return [s for i, s in enumerate(corpus) if i not in val], [s for i, s in enumerate(corpus) if i in val]


def evaluate_loss(model: FPDG, samples, vocab, categories, cfg: TrainConfig, lam: float) -> dict:
    """Teacher-forced validation loss and token accuracy in eval (noise-free) mode."""
    loss_sum = n_tok = hits = 0.0
    with T.no_grad():
        for batch in iter_batches(samples, cfg.batch_size, vocab, categories, max_keywords=cfg.max_keywords,
                                  max_len=cfg.max_decode_len):
            pv, pe = model.teacher_forced(batch, mode="eval")
            loss, _ = joint_loss(pv, pe, batch.tgt_out, batch.lab_out, lam, batch.tgt_mask, normalize=False)
            h, n = token_accuracy(pv, batch.tgt_out, batch.tgt_mask)
            loss_sum += float(loss.data)
            hits += h
            n_tok += n
    return {"loss": loss_sum / max(n_tok, 1), "accuracy": hits / max(n_tok, 1)}


@dataclass
class TrainResult:
    model: FPDG
    steps: int
    history: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    best_val: float | None = None
    clamped: int = 0


def train(cfg: TrainConfig, corpus: list[Sample], vocab: Vocab, categories: list[str],
          out_dir=None, val_corpus=None, stop_at_accuracy: float | None = None) -> TrainResult:
    """Train one model variant.

    With ``out_dir`` the best-validation checkpoint goes to ``model.ckpt`` and per-step
    metrics to ``metrics.jsonl``.  ``stop_at_accuracy`` ends training early once the
    epoch's teacher-forced training accuracy reaches it.
    """
    if not corpus:
        raise ValueError("training corpus is empty")
    with T.precision(np.float64 if cfg.precision == "float64" else np.float32):
        return _train(cfg, corpus, vocab, categories, out_dir, val_corpus, stop_at_accuracy)


def _train(cfg, corpus, vocab, categories, out_dir, val_corpus, stop_at_accuracy):
    if val_corpus is None:
        train_set, val_set = split_corpus(corpus, cfg.val_fraction, cfg.seed)
    else:
        train_set, val_set = list(corpus), list(val_corpus)
    model = FPDG(model_config_for(cfg, vocab, categories))
    opt = T.Adam(model.params, lr=cfg.lr)
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    noise_rng = np.random.default_rng([cfg.seed, 2])
    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    extra = {"vocab_digest": vocab_digest(vocab.itos), "categories": list(categories), "train": asdict(cfg)}
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out_dir / "metrics.jsonl", "w")
    result = TrainResult(model, 0)
    best_snap = None
    try:
        for epoch in range(cfg.epochs):
            hits = n_tok = 0
            for batch in iter_batches(train_set, cfg.batch_size, vocab, categories, shuffle_rng, cfg.max_keywords,
                                      cfg.max_decode_len):
                if cfg.max_steps is not None and result.steps >= cfg.max_steps:
                    break
                lam = lambda_schedule(result.steps, cfg.lambda_warmup, cfg.lambda_final)
                with Tape() as tape:
                    pv, pe = model.teacher_forced(batch, mode="train", rng=noise_rng)
                    loss, stats = joint_loss(pv, pe, batch.tgt_out, batch.lab_out, lam, batch.tgt_mask,
                                             cfg.normalize_loss)
                    value = float(loss.data)
                    if not math.isfinite(value):
                        raise TrainingAborted(f"non-finite loss {value} at step {result.steps}")
                    tape.backward(loss)
                h, n = token_accuracy(pv, batch.tgt_out, batch.tgt_mask)
                hits += h
                n_tok += n
                T.clip_grad_norm(model.params.values(), cfg.clip_norm)
                try:
                    opt.step()
                except T.NonFiniteGradient as e:
                    raise TrainingAborted(str(e)) from e
                model.params.zero_grad()
                result.steps += 1
                if stats["clamped"]:
                    log.warning("step %d: %d target probabilities clamped at %g", result.steps,
                                stats["clamped"], CLAMP)
                result.clamped += stats["clamped"]
                row = {"step": result.steps, "lambda": lam, "loss": value,
                       "word_nll": stats["word_nll"], "label_nll": stats["label_nll"]}
                result.history.append(row)
                if metrics_fh:
                    metrics_fh.write(json.dumps(row) + "\n")
            train_acc = hits / max(n_tok, 1)
            summary = {"epoch": epoch + 1, "steps": result.steps, "train_accuracy": train_acc}
            lam = lambda_schedule(result.steps, cfg.lambda_warmup, cfg.lambda_final)
            if val_set:
                val = evaluate_loss(model, val_set, vocab, categories, cfg, lam)
                summary.update(val_loss=val["loss"], val_accuracy=val["accuracy"])
                if result.best_val is None or val["loss"] < result.best_val:
                    result.best_val = val["loss"]
                    best_snap = model.snapshot()
                    if out_dir is not None:
                        model.save(out_dir / "model.ckpt", **extra)
            else:
                best_snap = model.snapshot()
                if out_dir is not None:
                    model.save(out_dir / "model.ckpt", **extra)
            result.epochs.append(summary)
            log.info("epoch %s", summary)
            if metrics_fh:
                metrics_fh.write(json.dumps(summary) + "\n")
                metrics_fh.flush()
            if stop_at_accuracy is not None and train_acc >= stop_at_accuracy:
                break
            if cfg.max_steps is not None and result.steps >= cfg.max_steps:
                break
    finally:
        if metrics_fh:
            metrics_fh.close()
    if best_snap is not None:
        model.restore(best_snap)
    return result


def with_variant(cfg: TrainConfig, variant: str) -> TrainConfig:
    flags = {"full": (False, False), "no_mem": (True, False), "no_elstm": (False, True),
             "no_elstm+no_mem": (True, True), "stripped": (True, True)}
    if variant not in flags:
        raise ValueError(f"unknown variant {variant!r}")
    no_mem, no_elstm = flags[variant]
    return replace(cfg, no_kw_mem=no_mem, no_elstm=no_elstm)
