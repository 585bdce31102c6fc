"""Plane-slice-aware query transformer.

Maps a volume's token sequence to one unit vector in the frozen embedders'
space, conditioned on which (plane, slice) the paired 2D sample came from.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import MLP, MultiHeadAttention

NUM_PLANES = 3


@dataclass(frozen=True)
class PsatConfig:
    num_queries: int = 300
    dim: int = 512
    depth: int = 1
    heads: int = 8
    mlp_ratio: int = 4
    use_query_transformer: bool = True
    use_pspe: bool = True

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if min(self.num_queries, self.dim, self.depth, self.heads, self.mlp_ratio) <= 0:
            raise ValueError("PSAT sizes must be positive")

    @property
    def ablation(self) -> str:
        """Name of the matching ablation row: Ex1 (neither), Ex2 (queries only), Ex3 (both)."""
        if self.use_query_transformer and self.use_pspe:
            return "Ex3"
        if self.use_query_transformer:
            return "Ex2"
        if not self.use_pspe:
            return "Ex1"
        return "pspe-only"

    def to_dict(self) -> dict:
        return asdict(self)


class QueryBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, heads)
        self.cross_attn = MultiHeadAttention(dim, heads, cross=True)

    def forward(self, queries: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        return self.cross_attn(self.self_attn(queries), tokens)


class PSAT(nn.Module):
    """Learnable queries + zero-initialized plane-slice position table + MLP head.

    ``pspe`` has shape (C, 3, J): one C-dim vector per (plane, slice index).
    """

    def __init__(self, config: PsatConfig, token_dim: int, num_slices: int):
        super().__init__()
        self.config = config
        self.token_dim = token_dim
        self.num_slices = num_slices
        d = config.dim
        self.queries = nn.Parameter(torch.randn(config.num_queries, d) * 0.02)
        self.pspe = nn.Parameter(torch.zeros(token_dim, NUM_PLANES, num_slices))
        self.token_proj = nn.Linear(token_dim, d)
        self.blocks = nn.ModuleList(QueryBlock(d, config.heads) for _ in range(config.depth))
        self.head_norm = nn.LayerNorm(d)
        self.mlp = MLP(d, config.mlp_ratio * d)

    def head(self, x: torch.Tensor) -> torch.Tensor:
        return self.mlp(self.head_norm(x))

    def forward(self, tokens: torch.Tensor, plane, index) -> torch.Tensor:
        return psat_forward(self, tokens, plane, index)


def lookup_pspe(psat: PSAT, plane, index) -> torch.Tensor:
    """Column(s) ``V_p[:, plane, index]``; scalar inputs give (C,), tensors give (B, C)."""
    plane_t = torch.as_tensor(plane, dtype=torch.long)
    index_t = torch.as_tensor(index, dtype=torch.long)
    if ((plane_t < 0) | (plane_t >= NUM_PLANES)).any():
        raise ValueError(f"plane out of range [0, {NUM_PLANES}): {plane_t.tolist()}")
    if ((index_t < 0) | (index_t >= psat.num_slices)).any():
        raise ValueError(f"slice index out of range [0, {psat.num_slices}): {index_t.tolist()}")
    return psat.pspe[:, plane_t, index_t].T if plane_t.dim() else psat.pspe[:, plane_t, index_t]


def inject_pspe(tokens: torch.Tensor, queries: torch.Tensor, pspe_vec: torch.Tensor,
                token_proj: nn.Linear) -> tuple[torch.Tensor, torch.Tensor]:
    """Add the position vector to every token (before projection) and to every query.

    Shapes: tokens (B,T,C) or (T,C); queries (Q,d); pspe_vec (B,C) or (C,).
    The query offset uses the projection weight only, so a zero vector leaves
    the queries untouched.
    """
    c = tokens.shape[-1]
    if pspe_vec.shape[-1] != c:
        raise ValueError(f"position vector dim {pspe_vec.shape[-1]} != token dim {c}")
    if token_proj.in_features != c:
        raise ValueError(f"token_proj expects dim {token_proj.in_features}, tokens have {c}")
    if queries.shape[-1] != token_proj.out_features:
        raise ValueError(f"query dim {queries.shape[-1]} != projection dim {token_proj.out_features}")
    cond_tokens = token_proj(tokens + pspe_vec.unsqueeze(-2))
    cond_queries = queries + F.linear(pspe_vec, token_proj.weight).unsqueeze(-2)
    return cond_tokens, cond_queries


def psat_forward(psat: PSAT, tokens: torch.Tensor, plane, index) -> torch.Tensor:
    """Volume tokens (B,T,C) or (T,C) -> unit-norm volume embedding (B,d) or (d,)."""
    cfg = psat.config
    single = tokens.dim() == 2
    if single:
        tokens = tokens[None]
    b = tokens.shape[0]
    if cfg.use_pspe:
        vec = lookup_pspe(psat, plane, index)
        if vec.dim() == 1:
            vec = vec.expand(b, -1)
        tok, queries = inject_pspe(tokens, psat.queries, vec, psat.token_proj)
    else:
        tok = psat.token_proj(tokens)
        queries = psat.queries.expand(b, -1, -1)
    if cfg.use_query_transformer:
        for blk in psat.blocks:
            queries = blk(queries, tok)
        vectors = psat.head(queries)
    else:
        # no query transformer: the projected tokens go straight to the head
        vectors = psat.head(tok)
    emb = F.normalize(vectors.mean(dim=-2), dim=-1)
    return emb[0] if single else emb
