"""Trainable 3D volume encoder: reference patch-embedding transformer plus an adapter."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .layers import TransformerBlock
from .volume_io import VolumeRecord


@dataclass(frozen=True)
class EncoderConfig:
    channels: int = 128
    depth: int = 4
    heads: int = 4
    patch_size: int = 8
    side: int = 32

    def __post_init__(self):
        for name in ("channels", "depth", "heads", "patch_size", "side"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.channels % self.heads:
            raise ValueError(f"channels {self.channels} not divisible by heads {self.heads}")
        check_divisible(self.side, self.patch_size)

    @property
    def grid(self) -> tuple[int, int, int]:
        g = self.side // self.patch_size
        return (g, g, g)

    @property
    def num_tokens(self) -> int:
        return (self.side // self.patch_size) ** 3

    def to_dict(self) -> dict:
        return asdict(self)


def check_divisible(side: int, patch_size: int) -> None:
    if side % patch_size:
        raise ValueError(f"volume side {side} is not divisible by patch_size {patch_size}")


@dataclass
class VolumeTokens:
    tokens: torch.Tensor  # (T, C) or (B, T, C)
    grid: tuple[int, int, int]
    patch_size: int


def as_batch(volumes) -> torch.Tensor:
    """VolumeRecord(s) / arrays / tensors -> float tensor of shape (B, 1, S, S, S)."""
    if isinstance(volumes, VolumeRecord):
        volumes = [volumes]
    if isinstance(volumes, (list, tuple)):
        arrs = [v.voxels if isinstance(v, VolumeRecord) else np.asarray(v) for v in volumes]
        x = torch.as_tensor(np.stack(arrs), dtype=torch.get_default_dtype())
    else:
        x = torch.as_tensor(volumes)
    if x.dim() == 3:
        x = x[None]
    if x.dim() == 4:
        x = x[:, None]
    return x


class VolumeEncoder(nn.Module):
    """Contract for 3D encoders: volumes (B,1,S,S,S) -> tokens (B,T,C).

    Subclasses also expose ``multi_scale_features`` returning grids of shape
    (B, C, gx, gy, gz), last one equal to the reshaped token output.
    """

    config: EncoderConfig

    def multi_scale_features(self, x: torch.Tensor) -> list[torch.Tensor]:
        raise NotImplementedError


class ReferenceEncoder3D(VolumeEncoder):
    """Non-overlapping patch embedding, learned 3D position table, pre-norm blocks."""

    def __init__(self, config: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.config = config
        c = config.channels
        self.patch_embed = nn.Conv3d(1, c, kernel_size=config.patch_size, stride=config.patch_size)
        self.pos_embed = nn.Parameter(torch.randn(config.num_tokens, c) * 0.02)
        self.blocks = nn.ModuleList(TransformerBlock(c, config.heads) for _ in range(config.depth))
        self.norm = nn.LayerNorm(c)

    def _embed(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 4:
            x = x[:, None]
        side = x.shape[-1]
        if side != self.config.side or x.shape[-3:] != (side,) * 3:
            raise ValueError(f"expected volumes of side {self.config.side}, got {tuple(x.shape[-3:])}")
        return self.patch_embed(x).flatten(2).transpose(1, 2) + self.pos_embed

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self._embed(x)
        for blk in self.blocks:
            h = blk(h)
        return self.norm(h)

    def multi_scale_features(self, x: torch.Tensor, taps: Optional[Sequence[int]] = None) -> list[torch.Tensor]:
        """Block outputs at the 1-based indices ``taps`` as (B, C, gx, gy, gz) grids.

        Every tap of a plain transformer shares the token grid; the decoder is
        responsible for building the resolution pyramid.  The deepest tap has
        the final norm applied, so it matches :meth:`forward`.
        """
        depth = self.config.depth
        taps = sorted(taps) if taps is not None else list(range(1, depth + 1))
        if any(t < 1 or t > depth for t in taps):
            raise ValueError(f"taps must lie in [1, {depth}], got {taps}")
        g = self.config.grid
        h = self._embed(x)
        out = []
        for i, blk in enumerate(self.blocks, 1):
            h = blk(h)
            if i in taps:
                f = self.norm(h) if i == depth else h
                out.append(f.transpose(1, 2).reshape(h.shape[0], -1, *g))
        return out


class BackboneAdapter(VolumeEncoder):
    """Wraps an external backbone that maps (B,1,S,S,S) to a list of feature maps.

    ``features_fn(x)`` must return (B, C_i, ...) grids, deepest last;
    the deepest one is flattened into the token sequence.
    """

    def __init__(self, backbone: nn.Module, config: EncoderConfig,
                 features_fn: Optional[Callable[[torch.Tensor], list[torch.Tensor]]] = None):
        super().__init__()
        self.backbone = backbone
        self.config = config
        self.features_fn = features_fn

    def multi_scale_features(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.dim() == 4:
            x = x[:, None]
        feats = self.features_fn(x) if self.features_fn else self.backbone(x)
        if isinstance(feats, torch.Tensor):
            feats = [feats]
        if feats[-1].shape[1] != self.config.channels:
            raise ValueError(f"backbone emits {feats[-1].shape[1]} channels, config says {self.config.channels}")
        return list(feats)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.multi_scale_features(x)[-1].flatten(2).transpose(1, 2)


def encode_volume(v, encoder: VolumeEncoder) -> VolumeTokens:
    """Encode one volume (or a batch) into a token sequence."""
    x = as_batch(v)
    check_divisible(x.shape[-1], encoder.config.patch_size)
    x = x.to(next(encoder.parameters()).dtype)
    tokens = encoder(x)
    if isinstance(v, VolumeRecord) or (hasattr(v, "ndim") and v.ndim == 3):
        tokens = tokens[0]
    return VolumeTokens(tokens, encoder.config.grid, encoder.config.patch_size)


def multi_scale_features(v, encoder: VolumeEncoder) -> list[torch.Tensor]:
    x = as_batch(v).to(next(encoder.parameters()).dtype)
    check_divisible(x.shape[-1], encoder.config.patch_size)
    return encoder.multi_scale_features(x)
