"""Parameter containers and layers built from gradkernel ops."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import gradkernel as gk
from .gradkernel import Tensor


class Module:
    """Owns named parameters; children are discovered in attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"missing parameters: {missing[:5]}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise gk.ShapeError(f"{name}: expected {p.shape}, got {state[name].shape}")
            p.data = np.asarray(state[name], dtype=np.float32).copy()


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        bound = math.sqrt(6.0 / (d_in + d_out))
        self.weight = gk.parameter(rng.uniform(-bound, bound, (d_in, d_out)))
        self.bias = gk.parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x) -> Tensor:
        y = gk.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = gk.parameter(np.ones(d))
        self.bias = gk.parameter(np.zeros(d))

    def __call__(self, x) -> Tensor:
        return gk.layer_norm(x, self.gain, self.bias)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator, scale: float = 0.02):
        self.weight = gk.parameter(rng.normal(0.0, scale, (n, d)))

    def __call__(self, ids) -> Tensor:
        return gk.take(self.weight, ids, axis=0)


class MLP(Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def __call__(self, x) -> Tensor:
        return self.fc2(gk.gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ValueError(f"width {d} is not divisible by {heads} heads")
        self.heads = heads
        self.q_proj = Linear(d, d, rng)
        self.k_proj = Linear(d, d, rng)
        self.v_proj = Linear(d, d, rng)
        self.out_proj = Linear(d, d, rng)

    def _split(self, x: Tensor) -> Tensor:
        *lead, n, d = x.shape
        x = gk.reshape(x, (*lead, n, self.heads, d // self.heads))
        nd = x.ndim
        axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
        return gk.transpose(x, axes)

    def _merge(self, x: Tensor) -> Tensor:
        nd = x.ndim
        axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
        x = gk.transpose(x, axes)
        *lead, n, h, dh = x.shape
        return gk.reshape(x, (*lead, n, h * dh))

    def __call__(self, query, key, value, mask=None, query_pos=None, key_pos=None) -> Tensor:
        q = self.q_proj(query if query_pos is None else query + query_pos)
        k = self.k_proj(key if key_pos is None else key + key_pos)
        v = self.v_proj(value)
        if self.heads == 1:
            out = gk.attention(q, k, v, mask)
        else:
            if mask is not None:
                mask = np.expand_dims(mask, -3)
            out = self._merge(gk.attention(self._split(q), self._split(k), self._split(v), mask))
        return self.out_proj(out)


def sinusoidal_positions(height: int, width: int, d: int) -> np.ndarray:
    """Fixed 2-D sine/cosine positions, shape (height * width, d)."""
    quarter = d // 4
    freqs = 0.5 * np.arange(1, quarter + 1)
    ys = (np.arange(height) + 0.5) / height * 2 * math.pi
    xs = (np.arange(width) + 0.5) / width * 2 * math.pi
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    yy, xx = yy.reshape(-1, 1), xx.reshape(-1, 1)
    parts = [np.sin(yy * freqs), np.cos(yy * freqs), np.sin(xx * freqs), np.cos(xx * freqs)]
    pos = np.concatenate(parts, axis=1)
    if pos.shape[1] < d:
        pos = np.pad(pos, ((0, 0), (0, d - pos.shape[1])))
    return pos.astype(np.float32)
