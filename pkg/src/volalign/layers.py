"""Attention building blocks shared by the 3D encoder and the query transformer."""

from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F


class MultiHeadAttention(nn.Module):
    """Pre-norm multi-head scaled dot-product attention with a residual.

    ``forward(x)`` is self-attention; ``forward(x, context)`` cross-attends
    from ``x`` to ``context``.  The last attention distribution is kept in
    ``self.last_weights`` (batch, heads, N, M) when ``keep_weights`` is set.
    """

    def __init__(self, dim: int, heads: int, cross: bool = False, context_dim: Optional[int] = None):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} is not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.cross = cross
        ctx = context_dim or dim
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(ctx) if cross else None
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(ctx, dim)
        self.v = nn.Linear(ctx, dim)
        self.out = nn.Linear(dim, dim)
        self.keep_weights = False
        self.last_weights: Optional[torch.Tensor] = None

    def forward(self, x: torch.Tensor, context: Optional[torch.Tensor] = None) -> torch.Tensor:
        if not torch.isfinite(x).all() or (context is not None and not torch.isfinite(context).all()):
            raise ValueError("attention inputs must be finite")
        squeeze = x.dim() == 2
        if squeeze:
            x = x[None]
            context = None if context is None else context[None]
        h = self.norm_q(x)
        if self.cross:
            if context is None:
                raise ValueError("cross-attention needs a context")
            kv = self.norm_kv(context)
        else:
            kv = h
        b, n, _ = h.shape
        m = kv.shape[1]
        hd = self.dim // self.heads
        q = self.q(h).view(b, n, self.heads, hd).transpose(1, 2)
        k = self.k(kv).view(b, m, self.heads, hd).transpose(1, 2)
        v = self.v(kv).view(b, m, self.heads, hd).transpose(1, 2)
        weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(hd), dim=-1)
        if self.keep_weights:
            self.last_weights = weights.detach()
        y = (weights @ v).transpose(1, 2).reshape(b, n, self.dim)
        y = x + self.out(y)
        return y[0] if squeeze else y


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int, out_dim: Optional[int] = None):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim or dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm encoder block: self-attention then feed-forward, both residual."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads)
        self.norm = nn.LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio * dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.attn(x)
        return x + self.mlp(self.norm(x))
