"""Parameter registry and the small affine/LSTM building blocks."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import LSTMParams, Tensor


class ParamStore(OrderedDict):
    """Named trainable tensors, in creation order (the checkpoint order)."""

    def __init__(self, seed: int = 0, scale: float = 0.08):
        super().__init__()
        self.rng = np.random.default_rng(seed)
        self.scale = scale

    def new(self, name: str, shape: tuple, std: float | None = None) -> Tensor:
        """Uniform in [-scale, scale], or N(0, std^2) when ``std`` is given."""
        if name in self:
            raise KeyError(f"duplicate parameter {name!r}")
        if std is None:
            data = self.rng.uniform(-self.scale, self.scale, size=shape)
        else:
            data = self.rng.normal(0.0, std, size=shape)
        p = Tensor(data, requires_grad=True, name=name)
        self[name] = p
        return p

    def census(self) -> int:
        return int(sum(p.data.size for p in self.values()))

    def zero_grad(self) -> None:
        for p in self.values():
            p.zero_grad()


class Linear:
    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int, bias: bool = True):
        self.W = store.new(f"{name}.W", (n_in, n_out))
        self.b = store.new(f"{name}.b", (n_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.W
        return y + self.b if self.b is not None else y


def make_lstm(store: ParamStore, name: str, n_in: int, d: int) -> LSTMParams:
    W = store.new(f"{name}.W", (n_in + d, 4 * d))
    b = store.new(f"{name}.b", (4 * d,))
    b.data[d:2 * d] = 1.0
    return LSTMParams(W, b)


def mask_bias(mask: np.ndarray, dtype=None) -> np.ndarray:
    """Additive attention bias: 0 where allowed, a large negative where masked."""
    return np.where(mask, 0.0, -1e9).astype(dtype or T.get_default_dtype())
