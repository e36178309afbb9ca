"""Finite-difference verification of every differentiable component at 64-bit precision."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .decoder import Attention, ELSTMCell, ELSTMState, Projection, memory_read
from .encoder import SAM, BiLSTMInit, build_memory, sam_encode
from .layers import ParamStore, make_lstm
from .model import FPDG, ModelConfig
from .tensor import Tape, Tensor
from .training import joint_loss

TOLERANCE = 1e-4


def numeric_grad(f, x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every element of ``x``."""
    g = np.zeros_like(x.data)
    flat, gflat = x.data.reshape(-1), g.reshape(-1)
    with T.no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = float(f().data)
            flat[i] = old - h
            fm = float(f().data)
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference scaled by the larger of the two gradients' max magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check(f, tensors, h: float = 1e-5) -> float:
    """Relative error of tape gradients against finite differences, over all ``tensors`` jointly.

    The error is normalized by the largest gradient entry of the whole component rather than
    per tensor: a parameter whose gradient is ~1e-7 would otherwise be judged on round-off.
    """
    for t in tensors:
        t.zero_grad()
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    analytic = np.concatenate([t.grad.reshape(-1) for t in tensors])
    numeric = np.concatenate([numeric_grad(f, t, h).reshape(-1) for t in tensors])
    return relative_error(analytic, numeric)


class _Rig:
    def __init__(self, seed: int, d: int, vocab: int, n_kw: int, n_labels: int, batch: int = 2):
        self.rng = np.random.default_rng(seed)
        self.store = ParamStore(seed=seed, scale=0.5)
        self.d, self.vocab, self.n_kw, self.n_labels, self.batch = d, vocab, n_kw, n_labels, batch

    def leaf(self, *shape, scale=1.0):
        return Tensor(self.rng.normal(0, scale, shape), requires_grad=True)

    def probe(self, *shape):
        return Tensor(self.rng.normal(0, 1, shape))

    def mask(self):
        m = np.ones((self.batch, self.n_kw), bool)
        m[1:, -2:] = False
        return m

    def labels(self):
        return self.rng.integers(0, self.n_labels, (self.batch, self.n_kw))


def _dot(out: Tensor, probe: Tensor) -> Tensor:
    return T.sum(out * probe)


def check_tensor_ops(r: _Rig) -> float:
    a, b = r.leaf(3, 4), r.leaf(4, 5)
    c, v = r.leaf(5), r.leaf(2, 3, 4)
    table = r.leaf(6, 4)
    ids = np.array([[0, 2, 5], [1, 1, 3]])
    p1, p2, p3 = r.probe(3, 5), r.probe(2, 3, 4), r.probe(2, 3)

    def f():
        x = T.matmul(a, b) + c
        y = T.concat([T.tanh(x), T.sigmoid(x), T.relu(x)])
        z = T.softmax(T.slice_last(y, 2, 12), axis=-1)
        e = T.embedding(table, ids) * v
        w = T.weighted_sum(T.softmax(p3 * 1.0 + T.sum(e, axis=-1), axis=-1), T.transpose(T.reshape(e, (2, 4, 3))))
        q = T.log(T.clamp_min(T.pick(z, np.array([0, 3, 9])), 1e-12))
        s = T.stack([T.exp(T.index(y, (slice(None), 0)) * 0.1), q])
        return _dot(T.slice_last(z, 0, 5) - 0.5, p1) + _dot(e, p2) + T.sum(w * w) + T.sum(s) - T.sum(T.neg(a) * a)

    return check(f, [a, b, c, v, table])


def check_lstm(r: _Rig) -> float:
    params = make_lstm(r.store, "gc.lstm", r.d, r.d)
    h, c, x = r.leaf(r.batch, r.d), r.leaf(r.batch, r.d), r.leaf(r.batch, r.d)
    ph, pc = r.probe(r.batch, r.d), r.probe(r.batch, r.d)

    def f():
        h1, c1 = T.lstm_step(params, h, c, x)
        h2, c2 = T.lstm_step(params, h1, c1, x * 0.5)
        return _dot(h2, ph) + _dot(c2, pc)

    return check(f, [params.W, params.b, h, c, x])


def check_sam(r: _Rig) -> float:
    sam = SAM(r.store, "gc.sam", r.d)
    x = r.leaf(r.batch, r.n_kw, r.d)
    mask, probe = r.mask(), r.probe(r.batch, r.n_kw, r.d)

    def f():
        out, _ = sam_encode(sam, x, mask)
        return _dot(out * Tensor(mask[..., None]), probe)

    names = [k for k in r.store if k.startswith("gc.sam")]
    return check(f, [x] + [r.store[k] for k in names])


def check_bilstm_init(r: _Rig) -> float:
    init = BiLSTMInit(r.store, "gc.birnn", r.d, with_label=True)
    x = r.leaf(r.batch, r.n_kw, r.d)
    mask, pw, pl = r.mask(), r.probe(r.batch, r.d), r.probe(r.batch, r.d)

    def f():
        out = init(x, mask)
        return _dot(out.wh, pw) + _dot(out.lh, pl)

    return check(f, [x] + [v for k, v in r.store.items() if k.startswith("gc.birnn")])


def _state(r: _Rig):
    return ELSTMState(r.leaf(r.batch, r.d), r.leaf(r.batch, r.d),
                      tuple(r.leaf(r.batch, r.d) for _ in range(3)), r.leaf(r.batch, r.d))


def check_elstm_cell(r: _Rig) -> float:
    cell = ELSTMCell(r.store, "gc.elstm", r.d)
    st = _state(r)
    y, m = r.leaf(r.batch, r.d), r.leaf(r.batch, r.d)
    probes = [r.probe(r.batch, r.d) for _ in range(6)]

    def f():
        out = cell(st, y, m, st.cm_prev)
        outs = [out["wh"], out["lh"], out["l_raw"], *out["cells"]]
        return sum((_dot(o, p) for o, p in zip(outs[1:], probes[1:])), _dot(outs[0], probes[0]))

    leaves = [st.wh, st.lh, *st.cells, st.cm_prev, y, m]
    return check(f, leaves + [v for k, v in r.store.items() if k.startswith("gc.elstm")])


def _check_attention(r: _Rig, name: str) -> float:
    attn = Attention(r.store, name, r.d)
    q, items = r.leaf(r.batch, r.d), r.leaf(r.batch, r.n_kw, r.d)
    mask, probe = r.mask(), r.probe(r.batch, r.d)

    def f():
        ctx, w = attn(q, items, mask)
        return _dot(ctx, probe) + T.sum(w * w)

    return check(f, [q, items, attn.Wa, attn.Wb, attn.Wh])


def check_memory_read(r: _Rig) -> float:
    sam = SAM(r.store, "gc.memsam", r.d)
    word = r.leaf(r.batch, r.n_kw, r.d)
    keys = r.leaf(r.n_labels, r.d)
    Wg = r.leaf(r.d, r.d)
    q = r.leaf(r.batch, r.d)
    labels, mask = r.labels(), r.mask()
    noise = -np.log(-np.log(r.rng.uniform(0.05, 0.95, (r.batch, r.n_labels))))
    probe = r.probe(r.batch, r.d)

    def f():
        mem = build_memory(sam, word, labels, mask, keys)
        o, pi = memory_read(q, Wg, mem, 0.5, "train", noise=noise)
        return _dot(o, probe) + T.sum(pi * pi)

    return check(f, [q, Wg, keys, word] + [v for k, v in r.store.items() if k.startswith("gc.memsam")])


def _check_head(r: _Rig, which: str) -> float:
    proj = Projection(r.store, f"gc.proj_{which}", r.d, r.vocab, r.n_labels, True, True)
    o, cw, wh, lr, cm = (r.leaf(r.batch, r.d) for _ in range(5))
    pv_probe, pe_probe = r.probe(r.batch, r.vocab), r.probe(r.batch, r.n_labels)

    def f():
        pv, pe, g, _ = proj(o, cw, wh, lr, cm)
        return _dot(pv, pv_probe) if which == "vocab" else _dot(pe, pe_probe)

    if which == "vocab":
        leaves = [o, cw, wh, proj.fuse.W, proj.fuse.b, proj.vocab.W, proj.vocab.b]
    else:
        leaves = [lr, cm, proj.label.W, proj.label.b]
    return check(f, leaves)


def check_joint_loss(r: _Rig) -> float:
    steps = 3
    zv = [r.leaf(r.batch, r.vocab) for _ in range(steps)]
    ze = [r.leaf(r.batch, r.n_labels) for _ in range(steps)]
    targets = r.rng.integers(0, r.vocab, (r.batch, steps))
    labels = r.rng.integers(0, r.n_labels, (r.batch, steps))
    mask = np.ones((r.batch, steps), bool)
    mask[1, -1] = False

    def f():
        pv = [T.softmax(z) for z in zv]
        pe = [T.softmax(z) for z in ze]
        return joint_loss(pv, pe, targets, labels, 0.6, mask)[0]

    return check(f, zv + ze)


def check_decode_step(r: _Rig) -> float:
    """End to end: encoder, one teacher-forced ELSTM step, -log P^v(y) + 0.6 * -log P^e(m)."""
    model = FPDG(ModelConfig(vocab_size=r.vocab, n_labels=r.n_labels, d=r.d, seed=int(r.rng.integers(1 << 30)),
                             init_scale=0.5))
    kw = r.rng.integers(4, r.vocab, (r.batch, r.n_kw))
    labels, mask = r.labels(), r.mask()
    y_prev = r.rng.integers(4, r.vocab, r.batch)
    m_prev = r.rng.integers(0, r.n_labels, r.batch)
    y, m = r.rng.integers(0, r.vocab, r.batch), r.rng.integers(0, r.n_labels, r.batch)
    noise = -np.log(-np.log(r.rng.uniform(0.05, 0.95, (r.batch, r.n_labels))))

    def f():
        ctx, st = model.encode(kw, labels, mask)
        out = model.step(ctx, st, y_prev, m_prev, mode="train", noise=noise)
        out = model.step(ctx, out.state, y, m, mode="train", noise=noise)
        return -(T.sum(T.log(T.pick(out.pv, y))) + T.sum(T.log(T.pick(out.pe, m))) * 0.6)

    return check(f, list(model.params.values()))


COMPONENTS = {
    "tensor_ops": check_tensor_ops,
    "lstm": check_lstm,
    "sam": check_sam,
    "bilstm_init": check_bilstm_init,
    "elstm_cell": check_elstm_cell,
    "attention_label": lambda r: _check_attention(r, "gc.attn_label"),
    "attention_word": lambda r: _check_attention(r, "gc.attn_word"),
    "memory_read": check_memory_read,
    "projection_vocab": lambda r: _check_head(r, "vocab"),
    "projection_label": lambda r: _check_head(r, "label"),
    "joint_loss": check_joint_loss,
    "decode_step": check_decode_step,
}


@dataclass
class GradcheckResult:
    errors: dict
    seconds: float
    tolerance: float = TOLERANCE

    @property
    def failing(self) -> list:
        return [k for k, e in self.errors.items() if not e <= self.tolerance]

    @property
    def ok(self) -> bool:
        return not self.failing


def run_gradcheck(d: int = 4, vocab: int = 12, n_kw: int = 5, n_labels: int = 4, seed: int = 0,
                  components=None) -> GradcheckResult:
    start = time.perf_counter()
    errors = {}
    with T.precision(np.float64):
        for name in components or COMPONENTS:
            errors[name] = COMPONENTS[name](_Rig(seed, d, vocab, n_kw, n_labels))
    return GradcheckResult(errors, time.perf_counter() - start)
