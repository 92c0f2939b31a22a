"""Shared network building blocks on top of diffcore.

Thin parameter-holding wrappers around the primitive ops: linear layers,
convs, layer norm, an MLP, and multi-head attention. All initializers take
an explicit numpy Generator so model construction is deterministic.
"""

from __future__ import annotations

import numpy as np

from .diffcore import Module, Tensor, glorot, conv_init, param, zeros_param
from .diffcore import ops
from .errors import ContractError


class Linear(Module):
    def __init__(self, rng, d_in, d_out, bias=True, zero_init=False):
        if zero_init:
            self.w = zeros_param((d_in, d_out))
        else:
            self.w = glorot(rng, d_in, d_out)
        self.b = zeros_param((d_out,)) if bias else None

    def __call__(self, x):
        y = ops.matmul(x, self.w)
        return ops.add(y, self.b) if self.b is not None else y


class LayerNorm(Module):
    def __init__(self, d):
        self.gamma = param(np.ones(d))
        self.beta = zeros_param((d,))

    def __call__(self, x):
        return ops.layernorm(x, self.gamma, self.beta)


class Conv2d(Module):
    """3x3/1x1 conv layer; weight (C_out, C_in, k, k)."""

    def __init__(self, rng, c_in, c_out, k=3, stride=1, padding="same",
                 bias=True, zero_init=False):
        if zero_init:
            self.w = zeros_param((c_out, c_in, k, k))
        else:
            self.w = conv_init(rng, c_out, c_in, k)
        self.b = zeros_param((c_out,)) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return ops.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    """Stride-2 transposed conv layer; weight (C_in, C_out, k, k)."""

    def __init__(self, rng, c_in, c_out, k=3, stride=2, bias=True):
        std = np.sqrt(2.0 / (c_in * k * k))
        self.w = param(rng.normal(0.0, std, size=(c_in, c_out, k, k)))
        self.b = zeros_param((c_out,)) if bias else None
        self.stride = stride

    def __call__(self, x):
        return ops.conv2d_transpose(x, self.w, self.b, stride=self.stride)


class Mlp(Module):
    def __init__(self, rng, d, hidden, d_out=None):
        d_out = d if d_out is None else d_out
        self.fc1 = Linear(rng, d, hidden)
        self.fc2 = Linear(rng, hidden, d_out)

    def __call__(self, x):
        return self.fc2(ops.gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    """Scaled dot-product attention over token matrices (T, d).

    ``__call__(q_tokens, kv_tokens, key_mask=None)``: key_mask is an
    optional boolean array (T_k,); masked-out keys get score -1e9, which
    underflows to exactly zero attention weight after softmax.
    """

    def __init__(self, rng, d, n_heads):
        if d % n_heads:
            raise ContractError(f"model width {d} not divisible by {n_heads} heads")
        self.wq = Linear(rng, d, d)
        self.wk = Linear(rng, d, d)
        self.wv = Linear(rng, d, d)
        self.wo = Linear(rng, d, d)
        self.n_heads = n_heads
        self.d_head = d // n_heads

    def __call__(self, q_tokens, kv_tokens, key_mask=None):
        tq = q_tokens.shape[0]
        tk = kv_tokens.shape[0]
        h, dh = self.n_heads, self.d_head

        def split_heads(t, n):
            t = ops.reshape(t, (n, h, dh))
            return ops.transpose(t, (1, 0, 2))  # (h, T, dh)

        q = split_heads(self.wq(q_tokens), tq)
        k = split_heads(self.wk(kv_tokens), tk)
        v = split_heads(self.wv(kv_tokens), tk)
        scores = ops.matmul(q, ops.transpose(k, (0, 2, 1)))
        scores = ops.mul(scores, 1.0 / np.sqrt(dh))
        if key_mask is not None:
            key_mask = np.asarray(key_mask, dtype=bool)
            if key_mask.shape != (tk,):
                raise ContractError(
                    f"key_mask shape {key_mask.shape} does not match {tk} keys")
            bias = np.where(key_mask, 0.0, -1e9)[None, None, :]
            scores = ops.add(scores, Tensor(bias))
        attn = ops.softmax(scores, axis=-1)
        out = ops.matmul(attn, v)  # (h, Tq, dh)
        out = ops.reshape(ops.transpose(out, (1, 0, 2)), (tq, h * dh))
        return self.wo(out)


class TransformerBlock(Module):
    """Pre-norm self-attention block: x + MHA(LN(x)), x + MLP(LN(x))."""

    def __init__(self, rng, d, n_heads, mlp_ratio=4):
        self.norm1 = LayerNorm(d)
        self.attn = MultiHeadAttention(rng, d, n_heads)
        self.norm2 = LayerNorm(d)
        self.mlp = Mlp(rng, d, mlp_ratio * d)

    def __call__(self, x):
        h = self.norm1(x)
        x = ops.add(x, self.attn(h, h))
        return ops.add(x, self.mlp(self.norm2(x)))
