"""Parameter containers and the small layers shared by generator and discriminator."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def derived(**kw):
    """Dataclass field rebuilt from config rather than stored in checkpoints."""
    return dataclasses.field(metadata={"derived": True}, **kw)


class Params:
    """Mixin for dataclasses holding tensors, nested containers and lists of either."""

    def named_tensors(self, prefix: str = "", include_derived: bool = False) -> Iterator[tuple[str, Tensor]]:
        for f in dataclasses.fields(self):
            if f.metadata.get("derived") and not include_derived:
                continue
            yield from _walk(getattr(self, f.name), prefix + f.name, include_derived)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self.named_tensors(prefix):
            if t.requires_grad:
                yield name, t

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_dict(self) -> dict[str, Tensor]:
        return dict(self.named_tensors())

    def load_state_dict(self, state: dict[str, Tensor], prefix: str = ""):
        own = dict(self.named_tensors(prefix))
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"checkpoint lacks tensors: {missing[:5]}")
        for name, t in own.items():
            src = state[name]
            if src.shape != t.shape:
                raise T.ShapeError(f"{name}: checkpoint shape {src.shape} != model shape {t.shape}")
            t.data = np.array(src.data, dtype=t.data.dtype)


def _walk(value, name, include_derived):
    if isinstance(value, Tensor):
        yield name, value
    elif isinstance(value, Params):
        yield from value.named_tensors(name + ".", include_derived)
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}", include_derived)


@dataclass
class Linear(Params):
    weight: Tensor
    bias: Tensor | None = None

    @classmethod
    def init(cls, rng, d_in: int, d_out: int, bias: bool = True) -> "Linear":
        w = uniform_init(rng, (d_in, d_out), d_in)
        b = uniform_init(rng, (d_out,), d_in) if bias else None
        return cls(w, b)

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


@dataclass
class LayerNorm(Params):
    gain: Tensor
    shift: Tensor

    @classmethod
    def init(cls, dim: int) -> "LayerNorm":
        return cls(Tensor(np.ones(dim), requires_grad=True), Tensor(np.zeros(dim), requires_grad=True))

    def __call__(self, x: Tensor, eps: float = 1e-5) -> Tensor:
        mu = T.mean(x, -1, keepdims=True)
        centered = x - mu
        var = T.mean(centered * centered, -1, keepdims=True)
        return centered / T.sqrt(var + eps) * self.gain + self.shift


@dataclass
class MultiHeadAttention(Params):
    """Scaled multi-head attention; queries and keys/values may come from different sequences."""

    q: Linear
    k: Linear
    v: Linear
    out: Linear
    heads: int = 1

    @classmethod
    def init(cls, rng, d_query: int, d_context: int, d_model: int, heads: int) -> "MultiHeadAttention":
        if d_model % heads:
            raise ValueError(f"model dim {d_model} not divisible by {heads} heads")
        return cls(
            Linear.init(rng, d_query, d_model, bias=False),
            Linear.init(rng, d_context, d_model, bias=False),
            Linear.init(rng, d_context, d_model, bias=False),
            Linear.init(rng, d_model, d_query),
            heads,
        )

    def _split(self, x: Tensor) -> Tensor:
        *lead, n, d = x.shape
        h = self.heads
        x = x.reshape(*lead, n, h, d // h)
        nd = x.ndim
        return T.swapaxes(x, nd - 3, nd - 2)

    def __call__(self, x: Tensor, context: Tensor | None = None) -> Tensor:
        context = x if context is None else context
        q, k, v = self._split(self.q(x)), self._split(self.k(context)), self._split(self.v(context))
        o = T.attention(q, k, v, scale=1.0 / np.sqrt(q.shape[-1]))
        nd = o.ndim
        o = T.swapaxes(o, nd - 3, nd - 2)
        o = o.reshape(*o.shape[:-2], o.shape[-2] * o.shape[-1])
        return self.out(o)


@dataclass
class FeedForward(Params):
    fc1: Linear
    fc2: Linear

    @classmethod
    def init(cls, rng, dim: int, hidden: int) -> "FeedForward":
        return cls(Linear.init(rng, dim, hidden), Linear.init(rng, hidden, dim))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def window_partition(x: Tensor, grid: int, window: int) -> Tensor:
    """``[B, grid*grid, C]`` tokens to ``[B*nw, window*window, C]`` local windows."""
    B, L, C = x.shape
    n = grid // window
    x = x.reshape(B, n, window, n, window, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B * n * n, window * window, C)


def window_merge(x: Tensor, batch: int, grid: int, window: int) -> Tensor:
    n = grid // window
    C = x.shape[-1]
    x = x.reshape(batch, n, n, window, window, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(batch, grid * grid, C)


@dataclass
class TransformerBlock(Params):
    """Pre-norm self-attention + feedforward over a square token grid.

    Grids larger than ``window`` attend inside non-overlapping windows.
    """

    ln1: LayerNorm
    attn: MultiHeadAttention
    ln2: LayerNorm
    ffn: FeedForward
    window: int = 16

    @classmethod
    def init(cls, rng, dim: int, heads: int, window: int = 16, mlp_ratio: int = 2) -> "TransformerBlock":
        return cls(
            LayerNorm.init(dim),
            MultiHeadAttention.init(rng, dim, dim, dim, heads),
            LayerNorm.init(dim),
            FeedForward.init(rng, dim, dim * mlp_ratio),
            window,
        )

    def __call__(self, x: Tensor, grid: int) -> Tensor:
        h = self.ln1(x)
        if grid > self.window:
            B = x.shape[0]
            a = window_merge(self.attn(window_partition(h, grid, self.window)), B, grid, self.window)
        else:
            a = self.attn(h)
        x = x + a
        return x + self.ffn(self.ln2(x))


def heads_for(dim: int) -> int:
    return max(1, dim // 16)
