"""Small module system: parameters, linear layers, attention, transformer blocks."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within ``bound`` std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > bound * std
    while np.any(bad):
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound * std
    return out


def Parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Module:
    """Attribute-registered parameters and submodules, in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name[:-1] if name.endswith('s') else name}{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict and set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for k, arr in state.items():
            if k not in own:
                continue
            if own[k].shape != np.shape(arr):
                raise ValueError(f"{k}: shape {np.shape(arr)} != {own[k].shape}")
            own[k].data = np.array(arr, dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, std: float = 0.02):
        self.weight = Parameter(trunc_normal(rng, (d_in, d_out), std))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.bias, self.eps)


class MultiHeadAttention(Module):
    """Multi-head scaled dot-product attention with separate q/k/v/o projections.

    Inputs are (B, S, d); ``key_padding_mask`` is (B, S_kv) with True at
    positions that must not be attended to.
    """

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, std: float = 0.02):
        if d % n_heads:
            raise ValueError(f"d={d} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.wq = Linear(d, d, rng, std=std)
        self.wk = Linear(d, d, rng, std=std)
        self.wv = Linear(d, d, rng, std=std)
        self.wo = Linear(d, d, rng, std=std)

    def _split(self, x: Tensor) -> Tensor:
        b, s, d = x.shape
        h = self.n_heads
        return ops.transpose(ops.reshape(x, (b, s, h, d // h)), (0, 2, 1, 3))

    def __call__(self, q_in: Tensor, kv_in: Tensor, key_padding_mask=None, causal: bool = False) -> Tensor:
        b, sq, d = q_in.shape
        sk = kv_in.shape[1]
        q, k, v = self._split(self.wq(q_in)), self._split(self.wk(kv_in)), self._split(self.wv(kv_in))
        mask = None
        if key_padding_mask is not None:
            mask = np.asarray(key_padding_mask, dtype=bool)[:, None, None, :]
        if causal:
            cm = ops.causal_mask(max(sq, sk))[:sq, :sk][None, None]
            mask = cm if mask is None else (mask | cm)
        ctx = ops.scaled_dot_product_attention(q, k, v, mask)
        ctx = ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (b, sq, d))
        return self.wo(ctx)


class MLP(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator, std: float = 0.02):
        self.fc = Linear(d, hidden, rng, std=std)
        self.proj = Linear(hidden, d, rng, std=std)

    def __call__(self, x: Tensor) -> Tensor:
        return self.proj(ops.quick_gelu(self.fc(x)))


class TransformerBlock(Module):
    """Pre-norm residual block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, mlp_ratio: int = 4, std: float = 0.02):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, n_heads, rng, std)
        self.ln2 = LayerNorm(d)
        self.mlp = MLP(d, mlp_ratio * d, rng, std)

    def __call__(self, x: Tensor, key_padding_mask=None, causal: bool = False) -> Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h, key_padding_mask, causal)
        return x + self.mlp(self.ln2(x))


class CrossAttentionBlock(Module):
    """Queries attend to a separate memory sequence, with a residual path."""

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, std: float = 0.02):
        self.ln_q = LayerNorm(d)
        self.ln_kv = LayerNorm(d)
        self.attn = MultiHeadAttention(d, n_heads, rng, std)

    def __call__(self, queries: Tensor, memory: Tensor, memory_padding_mask=None) -> Tensor:
        return queries + self.attn(self.ln_q(queries), self.ln_kv(memory), memory_padding_mask)
