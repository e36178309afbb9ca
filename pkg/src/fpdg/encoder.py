"""Keyword encoder: two self-attention modules, the keyword memory and the Bi-LSTM initializer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Linear, ParamStore, make_lstm, mask_bias
from .tensor import Tensor


class SAM:
    """Single-head, single-layer self-attention with residual and ReLU feed-forward.

    No positional information enters, so the block is permutation equivariant.
    """

    def __init__(self, store: ParamStore, name: str, d: int):
        self.q = Linear(store, f"{name}.q", d, d)
        self.k = Linear(store, f"{name}.k", d, d)
        self.v = Linear(store, f"{name}.v", d, d)
        self.ff1 = Linear(store, f"{name}.ff1", d, d)
        self.ff2 = Linear(store, f"{name}.ff2", d, d)

    def __call__(self, x: Tensor, allowed: np.ndarray):
        """x: (B, T, d); allowed: (B, T, T) bool, query row i may attend key column j."""
        scores = self.q(x) @ T.transpose(self.k(x)) + mask_bias(allowed)
        alpha = T.softmax(scores, axis=-1)
        h = x + alpha @ self.v(x)
        return self.ff2(T.relu(self.ff1(h))), alpha


def key_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("self-attention input has a sequence with every position masked")
    return np.broadcast_to(mask[:, None, :], mask.shape + (mask.shape[-1],))


def sam_encode(sam: SAM, inputs: Tensor, mask: np.ndarray):
    """Encode a padded batch (B, T, d) attending only to unmasked keys."""
    return sam(inputs, key_mask(mask))


@dataclass
class EncodedKeywords:
    h: Tensor                 # (B, T, d) word reps
    m: Tensor | None          # (B, T, d) label reps; None without ELSTM
    word_emb: Tensor
    label_emb: Tensor | None
    mask: np.ndarray          # (B, T) bool
    word_alpha: np.ndarray | None = None
    label_alpha: np.ndarray | None = None


@dataclass
class KeywordMemory:
    keys: Tensor              # (C, d) label embeddings
    values: Tensor            # (B, C, d) per-category sums of SAM word reps
    word_values: Tensor       # (B, T, d) per-category SAM reps before summing
    counts: np.ndarray        # (B, C)


@dataclass
class DecoderInit:
    wh: Tensor
    lh: Tensor | None
    cells: tuple


def category_onehot(labels: np.ndarray, mask: np.ndarray, n_categories: int) -> np.ndarray:
    """(B, C, T) indicator of keyword t belonging to category c."""
    cats = np.arange(n_categories)[None, :, None]
    return (labels[:, None, :] == cats) & np.asarray(mask, bool)[:, None, :]


def build_memory(word_sam: SAM, word_emb: Tensor, labels: np.ndarray, mask: np.ndarray,
                 label_table: Tensor) -> KeywordMemory:
    """Keys are the label embedding rows; each value is a SAM restricted to one category.

    Attention is blocked across categories, which equals running the SAM separately
    on each category's words since the residual and FFN act per position.
    """
    labels = np.asarray(labels)
    mask = np.asarray(mask, bool)
    same = (labels[:, :, None] == labels[:, None, :]) & mask[:, None, :]
    # padded query rows see nothing; give them themselves so softmax stays defined
    same |= np.eye(labels.shape[1], dtype=bool)[None] & ~mask[:, :, None]
    reps, _ = word_sam(word_emb, same)
    onehot = category_onehot(labels, mask, label_table.shape[0])
    values = Tensor(onehot) @ reps
    return KeywordMemory(label_table, values, reps, onehot.sum(-1))


class BiLSTMInit:
    def __init__(self, store: ParamStore, name: str, d: int, with_label: bool):
        self.fwd = make_lstm(store, f"{name}.fwd", d, d)
        self.bwd = make_lstm(store, f"{name}.bwd", d, d)
        self.to_w = Linear(store, f"{name}.to_w", 2 * d, d)
        self.to_l = Linear(store, f"{name}.to_l", 2 * d, d) if with_label else None
        self.d = d

    def _run(self, params, xs: Tensor, mask: np.ndarray, order):
        B = xs.shape[0]
        dt = T.get_default_dtype()
        h = Tensor(np.zeros((B, self.d), dt))
        c = Tensor(np.zeros((B, self.d), dt))
        for t in order:
            x = T.index(xs, (slice(None), t))
            h_new, c_new = T.lstm_step(params, h, c, x)
            keep = mask[:, t:t + 1].astype(dt)
            # padded positions carry the state through unchanged
            h = h_new * keep + h * (1 - keep)
            c = c_new * keep + c * (1 - keep)
        return h

    def __call__(self, word_emb: Tensor, mask: np.ndarray) -> DecoderInit:
        mask = np.asarray(mask, bool)
        if not mask.any(axis=-1).all():
            raise ValueError("decoder init needs at least one keyword per sample")
        n = word_emb.shape[1]
        hf = self._run(self.fwd, word_emb, mask, range(n))
        hb = self._run(self.bwd, word_emb, mask, range(n - 1, -1, -1))
        both = T.concat([hf, hb])
        wh = T.tanh(self.to_w(both))
        lh = T.tanh(self.to_l(both)) if self.to_l is not None else None
        B = word_emb.shape[0]
        dt = T.get_default_dtype()
        cells = tuple(Tensor(np.zeros((B, self.d), dt)) for _ in range(3 if lh is not None else 1))
        return DecoderInit(wh, lh, cells)


def init_decoder(bilstm: BiLSTMInit, word_emb: Tensor, mask) -> DecoderInit:
    return bilstm(word_emb, mask)


class Encoder:
    def __init__(self, store: ParamStore, vocab_size: int, n_labels: int, d: int,
                 use_labels: bool = True, use_memory: bool = True, embed_std: float = 1.0):
        self.word_table = store.new("enc.word_emb", (vocab_size, d), std=embed_std)
        needs_labels = use_labels or use_memory
        self.label_table = store.new("enc.label_emb", (n_labels, d), std=embed_std) if needs_labels else None
        self.word_sam = SAM(store, "enc.word_sam", d)
        self.label_sam = SAM(store, "enc.label_sam", d) if use_labels else None
        self.init = BiLSTMInit(store, "enc.birnn", d, with_label=use_labels)
        self.use_memory = use_memory

    def encode_labels(self, labels, mask):
        el = T.embedding(self.label_table, labels)
        m, alpha = sam_encode(self.label_sam, el, mask)
        return m, el, alpha

    def __call__(self, kw_ids: np.ndarray, kw_labels: np.ndarray, mask: np.ndarray):
        ew = T.embedding(self.word_table, kw_ids)
        h, wa = sam_encode(self.word_sam, ew, mask)
        m = el = la = None
        if self.label_sam is not None:
            m, el, la = self.encode_labels(kw_labels, mask)
        enc = EncodedKeywords(h, m, ew, el, np.asarray(mask, bool), wa.data, None if la is None else la.data)
        memory = None
        if self.use_memory:
            memory = build_memory(self.word_sam, ew, kw_labels, mask, self.label_table)
        return enc, memory, self.init(ew, mask)
