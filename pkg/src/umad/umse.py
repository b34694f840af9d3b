"""Fusion of estimated motion with structural priors into one conditioning map."""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class StructuralPriors:
    frame_index: int
    sequence_length: int
    window_scale: float = 1.0
    quality_q: float = 1.0

    def __post_init__(self):
        if self.sequence_length <= 0:
            raise ValueError("sequence_length must be positive")
        if not 0 <= self.frame_index < self.sequence_length:
            raise ValueError(f"frame_index {self.frame_index} outside [0, {self.sequence_length})")
        if not 0 < self.window_scale <= 1:
            raise ValueError(f"window_scale must lie in (0, 1], got {self.window_scale}")
        if not 0 < self.quality_q <= 1:
            raise ValueError(f"quality_q must lie in (0, 1], got {self.quality_q}")

    def normalized(self):
        return np.array([self.frame_index / self.sequence_length, self.window_scale, self.quality_q])


def priors_tensor(priors, dtype=torch.float32):
    """Stack normalized priors into a (B, 3) tensor."""
    if isinstance(priors, StructuralPriors):
        priors = [priors]
    return torch.as_tensor(np.stack([p.normalized() for p in priors]), dtype=dtype)


class StructuralEmbedder(nn.Module):
    """One 1->hidden->out MLP per prior factor; outputs concatenated."""

    def __init__(self, n_factors=3, hidden=8, out=8):
        super().__init__()
        self.mlps = nn.ModuleList(
            nn.Sequential(nn.Linear(1, hidden), nn.SiLU(), nn.Linear(hidden, out)) for _ in range(n_factors)
        )

    @property
    def out_channels(self):
        return sum(m[-1].out_features for m in self.mlps)

    def forward(self, p):
        return torch.cat([mlp(p[:, i:i + 1]) for i, mlp in enumerate(self.mlps)], dim=1)


def embed_structural(priors, embedder):
    if isinstance(priors, (StructuralPriors, list)):
        priors = priors_tensor(priors, dtype=next(embedder.parameters()).dtype)
    return embedder(priors)


def broadcast_spatial(vec, H, W):
    """(C,) or (B, C) -> (B, C, H, W) with the vector repeated at every position."""
    if H < 1 or W < 1:
        raise ValueError("H and W must be >= 1")
    if vec.ndim == 1:
        vec = vec[None]
    return vec[:, :, None, None].expand(-1, -1, H, W)


def fuse(flow, struct_map, proj):
    """Concatenate flow (B, 2, h, w) with the prior map and project pointwise."""
    size = struct_map.shape[-2:]
    if flow.shape[-2:] != size:
        flow = F.interpolate(flow, size=size, mode="bilinear", align_corners=False)
    if flow.shape[-2:] != size or flow.shape[0] != struct_map.shape[0]:
        raise RuntimeError("flow and structural map disagree after resizing")
    return proj(torch.cat([flow, struct_map], dim=1))


class UMSE(nn.Module):
    def __init__(self, embed_channels=48, n_factors=3, hidden=8, factor_out=8):
        super().__init__()
        self.embedder = StructuralEmbedder(n_factors, hidden, factor_out)
        self.proj = nn.Conv2d(2 + self.embedder.out_channels, embed_channels, 1)
        self.embed_channels = embed_channels

    def forward(self, flow, priors, use_flow=True, use_priors=True):
        """``flow`` (B, 2, H, W) full resolution, ``priors`` (B, 3) normalized."""
        B, _, H, W = flow.shape
        vec = self.embedder(priors)
        if not use_priors:
            vec = torch.zeros_like(vec)
        if not use_flow:
            flow = torch.zeros_like(flow)
        return fuse(flow, broadcast_spatial(vec, H, W), self.proj)
