"""Temporal-spatial convolution blocks and the global / post-temporal context encoders.

Tensors are channel-first ``(B, C, D, H, W)`` internally; :func:`tsc_block`
accepts the ``(B, H, W, C, D)`` layout directly.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F


def glu(x, dim=1):
    a, b = x.chunk(2, dim=dim)
    return a * torch.sigmoid(b)


def downsample_tensor(x, factor):
    """Antialiased bicubic downsampling of (N, C, H, W); reflect-pads to a multiple of ``factor``."""
    if factor == 1:
        return x
    H, W = x.shape[-2:]
    ph, pw = (-H) % factor, (-W) % factor
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="reflect")
    return F.interpolate(x, scale_factor=1.0 / factor, mode="bicubic", antialias=True, align_corners=False)


class TSCBlock(nn.Module):
    """Temporal conv + GLU + pointwise, then depthwise-separable spatial conv."""

    def __init__(self, in_channels, out_channels=None, temporal_kernel=3, spatial_kernel=3):
        super().__init__()
        out_channels = out_channels or in_channels
        self.temporal = nn.Conv1d(in_channels, 2 * in_channels, temporal_kernel,
                                  padding=temporal_kernel // 2, padding_mode="replicate")
        self.temporal_point = nn.Conv1d(in_channels, in_channels, 1)
        self.depthwise = nn.Conv2d(in_channels, in_channels, spatial_kernel, padding=spatial_kernel // 2,
                                   groups=in_channels, padding_mode="replicate")
        self.pointwise = nn.Conv2d(in_channels, out_channels, 1)

    def forward(self, x):
        B, C, D, H, W = x.shape
        y = x.permute(0, 3, 4, 1, 2).reshape(B * H * W, C, D)
        y = self.temporal_point(glu(self.temporal(y)))
        y = y.reshape(B, H, W, C, D).permute(0, 4, 3, 1, 2).reshape(B * D, C, H, W)
        y = self.pointwise(self.depthwise(y))
        return y.reshape(B, D, -1, H, W).transpose(1, 2)


def tsc_block(x, block):
    """Apply ``block`` to a (B, H, W, C, D) tensor, returning (B, H, W, C', D)."""
    y = block(x.permute(0, 3, 4, 1, 2))
    return y.permute(0, 3, 4, 1, 2)


class GlobalContext(nn.Module):
    """Downsampled full frame -> two TSC blocks at temporal depth 1."""

    def __init__(self, in_channels=3, channels=8, factor=4):
        super().__init__()
        self.factor = factor
        self.blocks = nn.Sequential(TSCBlock(in_channels, channels), TSCBlock(channels, channels))
        self.channels = channels

    def forward(self, full_frame):
        x = downsample_tensor(full_frame, self.factor)
        return self.blocks(x[:, :, None])[:, :, 0]


class PostTemporalContext(nn.Module):
    """Frames strictly after the target, stacked on D, downsampled, two TSC blocks, mean over D."""

    def __init__(self, in_channels=3, channels=8, factor=4):
        super().__init__()
        self.factor = factor
        self.blocks = nn.Sequential(TSCBlock(in_channels, channels), TSCBlock(channels, channels))
        self.channels = channels

    def forward(self, post_frames):
        """post_frames: (B, C, K, H, W)."""
        B, C, K, H, W = post_frames.shape
        if K == 0:
            raise ValueError("PTCM needs at least one post-target frame")
        x = downsample_tensor(post_frames.transpose(1, 2).reshape(B * K, C, H, W), self.factor)
        x = x.reshape(B, K, C, *x.shape[-2:]).transpose(1, 2)
        return self.blocks(x).mean(dim=2)


def gcm(full_frame, module):
    return module(full_frame)


def ptcm(post_frames, module):
    """``post_frames`` as a list of (B, C, H, W) tensors or a stacked (B, C, K, H, W) tensor."""
    if isinstance(post_frames, (list, tuple)):
        if not post_frames:
            raise ValueError("PTCM needs at least one post-target frame")
        post_frames = torch.stack(post_frames, dim=2)
    return module(post_frames)
