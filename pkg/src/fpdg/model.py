"""FPDG model assembly: encoder + decoder over one parameter store, plus checkpoint IO."""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .decoder import Decoder, ELSTMState, StepOutput
from .encoder import Encoder, EncodedKeywords, KeywordMemory
from .layers import ParamStore


@dataclass
class ModelConfig:
    vocab_size: int
    n_labels: int
    d: int = 64
    tau: float = 0.5
    no_kw_mem: bool = False
    no_elstm: bool = False
    seed: int = 0
    init_scale: float = 0.08
    embed_std: float = 1.0       # embedding tables are N(0, embed_std^2)

    @property
    def variant(self) -> str:
        if self.no_kw_mem and self.no_elstm:
            return "no_elstm+no_mem"
        if self.no_kw_mem:
            return "no_mem"
        if self.no_elstm:
            return "no_elstm"
        return "full"


@dataclass
class Context:
    """Everything a decoding step needs besides the recurrent state."""
    enc: EncodedKeywords
    memory: KeywordMemory | None
    cache: dict


class FPDG:
    def __init__(self, config: ModelConfig):
        if config.d <= 0 or config.vocab_size <= 4 or config.n_labels < 2:
            raise ValueError(f"bad model dimensions: {config}")
        self.config = config
        self.params = ParamStore(seed=config.seed, scale=config.init_scale)
        use_elstm, use_mem = not config.no_elstm, not config.no_kw_mem
        self.encoder = Encoder(self.params, config.vocab_size, config.n_labels, config.d,
                               use_labels=use_elstm, use_memory=use_mem, embed_std=config.embed_std)
        self.decoder = Decoder(self.params, config.vocab_size, config.n_labels, config.d,
                               use_elstm=use_elstm, use_memory=use_mem)

    @property
    def has_label_head(self) -> bool:
        return not self.config.no_elstm

    def encode(self, kw_ids, kw_labels, kw_mask) -> tuple[Context, ELSTMState]:
        enc, memory, init = self.encoder(np.asarray(kw_ids), np.asarray(kw_labels), np.asarray(kw_mask, bool))
        return Context(enc, memory, self.decoder.precompute(enc)), self.decoder.initial_state(init)

    def step(self, ctx: Context, state: ELSTMState, y_prev, m_prev, mode: str = "eval",
             rng=None, noise=None, tau: float | None = None) -> StepOutput:
        return self.decoder.step(state, np.asarray(y_prev), np.asarray(m_prev), self.encoder.word_table,
                                 self.encoder.label_table, ctx.enc, ctx.memory,
                                 self.config.tau if tau is None else tau, mode, rng, noise, ctx.cache)

    def teacher_forced(self, batch, mode: str = "train", rng=None):
        """Run all steps feeding ground-truth previous tokens and labels.

        Returns the per-step P^v and P^e lists (P^e entries are None without ELSTM).
        """
        ctx, state = self.encode(batch.kw_ids, batch.kw_labels, batch.kw_mask)
        pv, pe = [], []
        for t in range(batch.tgt_in.shape[1]):
            out = self.step(ctx, state, batch.tgt_in[:, t], batch.lab_in[:, t], mode=mode, rng=rng)
            pv.append(out.pv)
            pe.append(out.pe)
            state = out.state
        return pv, pe

    # ---------------------------------------------------------------- checkpoint

    def metadata(self, **extra) -> dict:
        return {"config": asdict(self.config), "variant": self.config.variant, **extra}

    def save(self, path, **extra) -> None:
        """Atomic write: temp file in the target directory, then rename."""
        path = Path(path)
        meta = json.dumps(self.metadata(**extra), sort_keys=True).encode()
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".ckpt-")
        os.close(fd)
        try:
            T.save_params(tmp, self.params, meta)
            os.replace(tmp, path)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)

    @classmethod
    def load(cls, path) -> tuple["FPDG", dict]:
        meta_raw, _ = T.read_checkpoint(path)
        meta = json.loads(meta_raw.decode() or "{}")
        if "config" not in meta:
            raise ValueError(f"{path}: checkpoint carries no model config")
        model = cls(ModelConfig(**meta["config"]))
        T.load_params(path, model.params)
        return model, meta

    def snapshot(self) -> dict:
        return {k: p.data.copy() for k, p in self.params.items()}

    def restore(self, snap: dict) -> None:
        for k, arr in snap.items():
            self.params[k].data = arr.copy()


def vocab_digest(itos) -> str:
    return hashlib.sha256("\n".join(itos).encode()).hexdigest()[:16]
