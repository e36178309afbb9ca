"""ELSTM decoder: the three-LSTM cell, dual attention, gumbel keyword-memory read, output heads."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoder import EncodedKeywords, KeywordMemory
from .layers import Linear, ParamStore, make_lstm, mask_bias
from .tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass
class ELSTMState:
    wh: Tensor
    lh: Tensor | None
    cells: tuple                 # Word-LSTM0, Entity-Label-LSTM, Word-LSTM1 cell states
    cm_prev: Tensor | None       # entity-label context from the previous step


@dataclass
class StepOutput:
    pv: Tensor
    pe: Tensor | None
    state: ELSTMState
    diagnostics: dict = field(default_factory=dict)


class ELSTMCell:
    def __init__(self, store: ParamStore, name: str, d: int):
        self.word0 = make_lstm(store, f"{name}.word0", d, d)
        self.label = make_lstm(store, f"{name}.label", d, d)
        self.polish = Linear(store, f"{name}.polish", 2 * d, d)
        self.word1 = make_lstm(store, f"{name}.word1", d, d)
        self.gate = Linear(store, f"{name}.gate", 2 * d, d)

    def __call__(self, state: ELSTMState, y_emb: Tensor, m_emb: Tensor, cm_prev: Tensor):
        c0, cl, c1 = state.cells
        w0, c0 = T.lstm_step(self.word0, state.wh, c0, y_emb)
        l_raw, cl = T.lstm_step(self.label, state.lh, cl, m_emb + w0)
        lh = T.tanh(self.polish(T.concat([l_raw, cm_prev])))
        w1, c1 = T.lstm_step(self.word1, state.wh, c1, y_emb + lh)
        gamma = T.sigmoid(self.gate(T.concat([w1, w0])))
        wh = gamma * w1 + (1.0 - gamma) * w0
        return {"wh": wh, "lh": lh, "l_raw": l_raw, "w0": w0, "w1": w1,
                "gate_gamma": gamma, "cells": (c0, cl, c1)}


def elstm_cell(cell: ELSTMCell, state: ELSTMState, y_emb: Tensor, m_emb: Tensor, cm_prev: Tensor):
    if y_emb.shape != m_emb.shape or y_emb.shape != cm_prev.shape or y_emb.shape != state.wh.shape:
        raise T.DimensionError(
            f"elstm_cell: y{y_emb.shape} m{m_emb.shape} cm{cm_prev.shape} wh{state.wh.shape}")
    return cell(state, y_emb, m_emb, cm_prev)


class Attention:
    """Additive attention: score_i = W_a tanh(W_b q + W_h item_i)."""

    def __init__(self, store: ParamStore, name: str, d: int):
        self.Wb = store.new(f"{name}.Wb", (d, d))
        self.Wh = store.new(f"{name}.Wh", (d, d))
        self.Wa = store.new(f"{name}.Wa", (d, 1))

    def project_items(self, items: Tensor) -> Tensor:
        return items @ self.Wh

    def __call__(self, query: Tensor, items: Tensor, mask: np.ndarray, items_proj: Tensor | None = None):
        mask = np.asarray(mask, bool)
        if not mask.any(axis=-1).all():
            raise ValueError("attention over an all-masked item set")
        if items_proj is None:
            items_proj = self.project_items(items)
        B, n, d = items.shape
        q = T.reshape(query @ self.Wb, (B, 1, d))
        scores = T.reshape(T.tanh(q + items_proj) @ self.Wa, (B, n)) + mask_bias(mask)
        weights = T.softmax(scores, axis=-1)
        return T.weighted_sum(weights, items), weights


def attend(attn: Attention, query: Tensor, items: Tensor, mask):
    return attn(query, items, mask)


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.uniform(size=shape)
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


def memory_read(query: Tensor, Wg: Tensor, memory: KeywordMemory, tau: float,
                mode: str = "eval", rng: np.random.Generator | None = None,
                noise: np.ndarray | None = None):
    """Bilinear key scores, gumbel-softmax over categories, weighted value-sum read.

    In train mode noise comes from ``noise`` when given, else is drawn from ``rng``.
    """
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    scores = (query @ Wg) @ T.transpose(memory.keys)
    if mode == "train":
        if noise is None:
            if rng is None:
                raise ConfigError("train-mode memory read needs a noise generator")
            noise = gumbel_noise(rng, scores.shape)
        scores = scores + noise.astype(scores.data.dtype)
    elif mode != "eval":
        raise ConfigError(f"unknown mode {mode!r}")
    pi = T.softmax(scores * (1.0 / tau), axis=-1)
    return T.weighted_sum(pi, memory.values), pi


class Projection:
    def __init__(self, store: ParamStore, name: str, d: int, vocab_size: int, n_labels: int,
                 use_memory: bool, use_labels: bool):
        self.fuse = Linear(store, f"{name}.fuse", 2 * d, d) if use_memory else None
        self.vocab = Linear(store, f"{name}.vocab", 2 * d, vocab_size)
        self.label = Linear(store, f"{name}.label", 2 * d, n_labels) if use_labels else None

    def __call__(self, o_mem, cw, wh, l_raw, cm_next):
        g = None
        if self.fuse is not None:
            g = T.sigmoid(self.fuse(T.concat([o_mem, cw])))
            o = g * o_mem + (1.0 - g) * cw
        else:
            o = cw
        pv = T.softmax(self.vocab(T.concat([o, wh])), axis=-1)
        pe = None
        if self.label is not None:
            pe = T.softmax(self.label(T.concat([l_raw, cm_next])), axis=-1)
        return pv, pe, g, o


def project(proj: Projection, o_mem, cw, wh, l_raw, cm_next):
    pv, pe, g, _ = proj(o_mem, cw, wh, l_raw, cm_next)
    return pv, pe, g


class Decoder:
    def __init__(self, store: ParamStore, vocab_size: int, n_labels: int, d: int,
                 use_elstm: bool = True, use_memory: bool = True):
        self.d = d
        self.use_elstm, self.use_memory = use_elstm, use_memory
        if use_elstm:
            self.cell = ELSTMCell(store, "dec.elstm", d)
            self.attn_m = Attention(store, "dec.attn_label", d)
        else:
            self.lstm = make_lstm(store, "dec.lstm", d, d)
        self.attn_w = Attention(store, "dec.attn_word", d)
        self.Wg = store.new("dec.mem.Wg", (d, d)) if use_memory else None
        self.proj = Projection(store, "dec.out", d, vocab_size, n_labels, use_memory, use_elstm)

    def initial_state(self, init) -> ELSTMState:
        cm = None
        if self.use_elstm:
            cm = Tensor(np.zeros(init.wh.shape, T.get_default_dtype()))
        return ELSTMState(init.wh, init.lh, init.cells, cm)

    def precompute(self, enc: EncodedKeywords) -> dict:
        """Item projections reused by every decoding step."""
        cache = {"h": self.attn_w.project_items(enc.h)}
        if self.use_elstm:
            cache["m"] = self.attn_m.project_items(enc.m)
        return cache

    def step(self, state: ELSTMState, y_prev, m_prev, word_table: Tensor, label_table: Tensor | None,
             enc: EncodedKeywords, memory: KeywordMemory | None, tau: float = 0.5, mode: str = "eval",
             rng=None, noise=None, cache: dict | None = None) -> StepOutput:
        cache = cache or {}
        y_emb = T.embedding(word_table, y_prev)
        diag = {}
        if self.use_elstm:
            m_emb = T.embedding(label_table, m_prev)
            out = self.cell(state, y_emb, m_emb, state.cm_prev)
            wh, lh, l_raw, cells = out["wh"], out["lh"], out["l_raw"], out["cells"]
            cm_next, attn_m = self.attn_m(lh, enc.m, enc.mask, cache.get("m"))
            diag["gate_gamma"] = out["gate_gamma"].data
            diag["attn_label"] = attn_m.data
            query = lh
        else:
            wh, c = T.lstm_step(self.lstm, state.wh, state.cells[0], y_emb)
            lh = l_raw = cm_next = None
            cells = (c,)
            query = wh
        cw, attn_w = self.attn_w(wh, enc.h, enc.mask, cache.get("h"))
        diag["attn_word"] = attn_w.data
        o_mem = None
        if self.use_memory:
            o_mem, pi = memory_read(query, self.Wg, memory, tau, mode, rng, noise)
            diag["memory_pi"] = pi.data
        pv, pe, g, _ = self.proj(o_mem, cw, wh, l_raw, cm_next)
        if g is not None:
            diag["fusion_g"] = g.data
        return StepOutput(pv, pe, ELSTMState(wh, lh, cells, cm_next), diag)
