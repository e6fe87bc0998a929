"""Transformer building blocks shared by the student LM and the forecaster.

Both models use the same pre-norm block: multi-head attention with a
residual connection, then a tanh feed-forward with a residual connection.
The student applies a causal mask and carries low-rank adapters on all four
attention projections; the forecaster runs full attention with every weight
trainable and no adapters.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

ADAPTER_INIT_BOUND = 0.01  # A ~ uniform(-bound, bound), B = 0
_MASK_CACHE: dict[int, np.ndarray] = {}


def causal_mask(n: int) -> np.ndarray:
    """Additive mask: 0 on/below the diagonal, -1e9 above (kept finite)."""
    m = _MASK_CACHE.get(n)
    if m is None:
        m = np.triu(np.full((n, n), -1e9), k=1)
        _MASK_CACHE[n] = m
    return m


def _init_matrix(rng: np.random.Generator, rows: int, cols: int, trainable: bool) -> Tensor:
    scale = 1.0 / np.sqrt(rows)
    return Tensor(rng.uniform(-scale, scale, size=(rows, cols)), requires_grad=trainable)


class LoraPair:
    """Rank-r factors added to one frozen projection: delta = (x @ a) @ b."""

    def __init__(self, rng: np.random.Generator, dim: int, rank: int):
        self.a = Tensor(rng.uniform(-ADAPTER_INIT_BOUND, ADAPTER_INIT_BOUND, size=(dim, rank)),
                        requires_grad=True)
        self.b = Tensor(np.zeros((rank, dim)), requires_grad=True)

    def tensors(self) -> dict[str, Tensor]:
        return {"a": self.a, "b": self.b}


class Attention:
    """Multi-head self-attention over row-sequences.

    ``adapters`` is either None (fully trainable projections, forecaster
    style) or a dict mapping 'q'/'k'/'v'/'o' to LoraPair (frozen base plus
    trainable low-rank deltas, student style).
    """

    def __init__(self, rng: np.random.Generator, dim: int, n_heads: int,
                 trainable_base: bool, lora_rank: int | None):
        if dim % n_heads != 0:
            raise ValueError(f"model dim {dim} not divisible by {n_heads} heads")
        self.dim = dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.w = {name: _init_matrix(rng, dim, dim, trainable_base) for name in "qkvo"}
        self.adapters: dict[str, LoraPair] | None = None
        if lora_rank is not None:
            self.adapters = {name: LoraPair(rng, dim, lora_rank) for name in "qkvo"}

    def _project(self, x: Tensor, name: str, use_adapters: bool) -> Tensor:
        out = T.matmul(x, self.w[name])
        if use_adapters and self.adapters is not None:
            pair = self.adapters[name]
            out = T.add(out, T.matmul(T.matmul(x, pair.a), pair.b))
        return out

    def forward(self, x: Tensor, causal: bool, use_adapters: bool = True) -> Tensor:
        n = x.shape[0]
        q = self._project(x, "q", use_adapters)
        k = self._project(x, "k", use_adapters)
        v = self._project(x, "v", use_adapters)
        mask = causal_mask(n) if causal else None
        scale = 1.0 / np.sqrt(self.head_dim)

        heads = []
        for h in range(self.n_heads):
            lo, hi = h * self.head_dim, (h + 1) * self.head_dim
            qh = T.slice_cols(q, lo, hi)
            kh = T.slice_cols(k, lo, hi)
            vh = T.slice_cols(v, lo, hi)
            scores = T.mul(T.matmul(qh, T.transpose(kh)), scale)
            if mask is not None:
                scores = T.add(scores, mask)
            heads.append(T.matmul(T.softmax_rows(scores), vh))
        merged = heads[0] if self.n_heads == 1 else T.concat_cols(heads)
        return self._project(merged, "o", use_adapters)

    def tensors(self) -> dict[str, Tensor]:
        out = {f"w{name}": w for name, w in self.w.items()}
        if self.adapters is not None:
            for name, pair in self.adapters.items():
                for suffix, t in pair.tensors().items():
                    out[f"w{name}_{suffix}"] = t
        return out

    def adapter_tensors(self) -> list[Tensor]:
        if self.adapters is None:
            return []
        return [t for name in "qkvo" for t in (self.adapters[name].a, self.adapters[name].b)]


class LayerNorm:
    def __init__(self, dim: int, trainable: bool):
        self.gain = Tensor(np.ones(dim), requires_grad=trainable)
        self.bias = Tensor(np.zeros(dim), requires_grad=trainable)

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm_rows(x, self.gain, self.bias)

    def tensors(self) -> dict[str, Tensor]:
        return {"gain": self.gain, "bias": self.bias}


class FeedForward:
    """Two-layer tanh MLP with hidden width 2x the model dim."""

    def __init__(self, rng: np.random.Generator, dim: int, trainable: bool):
        hidden = 2 * dim
        self.w1 = _init_matrix(rng, dim, hidden, trainable)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=trainable)
        self.w2 = _init_matrix(rng, hidden, dim, trainable)
        self.b2 = Tensor(np.zeros(dim), requires_grad=trainable)

    def forward(self, x: Tensor) -> Tensor:
        h = T.tanh(T.add(T.matmul(x, self.w1), self.b1))
        return T.add(T.matmul(h, self.w2), self.b2)

    def tensors(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


class Block:
    """Pre-norm transformer block: x + attn(ln1(x)), then x + ff(ln2(x))."""

    def __init__(self, rng: np.random.Generator, dim: int, n_heads: int,
                 trainable_base: bool, lora_rank: int | None):
        self.ln1 = LayerNorm(dim, trainable_base)
        self.attn = Attention(rng, dim, n_heads, trainable_base, lora_rank)
        self.ln2 = LayerNorm(dim, trainable_base)
        self.ff = FeedForward(rng, dim, trainable_base)

    def forward(self, x: Tensor, causal: bool, use_adapters: bool = True) -> Tensor:
        x = T.add(x, self.attn.forward(self.ln1.forward(x), causal, use_adapters))
        return T.add(x, self.ff.forward(self.ln2.forward(x)))

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for prefix, mod in (("ln1", self.ln1), ("attn", self.attn), ("ln2", self.ln2), ("ff", self.ff)):
            for name, t in mod.tensors().items():
                out[f"{prefix}.{name}"] = t
        return out
