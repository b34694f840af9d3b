"""Correlation-volume flow estimation with iterative residual refinement.

Flows follow the package convention (see :mod:`umad.data_synth`): the field
is defined on the grid of the later frame and points into the earlier one.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import _kernels
from .data_synth import FlowField
from .errors import FlowStateError


class FeatureEncoder(nn.Module):
    """Small strided conv stack mapping (B, 3, H, W) to (B, C_f, H/scale, W/scale)."""

    def __init__(self, in_channels=3, feat_channels=32, scale=4):
        super().__init__()
        n_down = int(round(np.log2(scale)))
        if 2 ** n_down != scale:
            raise ValueError("scale must be a power of two")
        self.scale = scale
        widths = [in_channels] + [max(8, feat_channels // 2 ** (n_down - i)) for i in range(n_down)]
        layers = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            layers += [nn.Conv2d(cin, cout, 3, stride=2, padding=1, padding_mode="replicate"), nn.SiLU()]
        layers.append(nn.Conv2d(widths[-1], feat_channels, 3, padding=1, padding_mode="replicate"))
        self.net = nn.Sequential(*layers)
        # unit-variance features keep correlations O(1) under the C^-1/2 scaling
        self.norm = nn.InstanceNorm2d(feat_channels)

    def forward(self, x):
        H, W = x.shape[-2:]
        ph, pw = (-H) % self.scale, (-W) % self.scale
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="reflect")
        f = self.norm(self.net(x))
        return f[..., : -(-H // self.scale), : -(-W // self.scale)]


def correlation_volume(fa, fb):
    """All-pairs dot products: ``out[b, i, j] = <fa[b, :, i], fb[b, :, j]>``.

    Inputs (B, C, H, W); output (B, H, W, H, W) with frame-A pixel first.
    """
    if fa.shape != fb.shape:
        raise ValueError(f"feature maps differ in shape: {tuple(fa.shape)} vs {tuple(fb.shape)}")
    return torch.einsum("bchw,bcij->bhwij", fa, fb)


def _lookup(volume, flow, radius):
    """Sample a (2r+1)^2 window of frame-A correlations around p + flow(p) for every frame-B pixel p."""
    B, H1, W1, H2, W2 = volume.shape
    vol = volume.permute(0, 3, 4, 1, 2).reshape(B * H2 * W2, 1, H1, W1)
    ys, xs = torch.meshgrid(torch.arange(H2, dtype=flow.dtype, device=flow.device),
                            torch.arange(W2, dtype=flow.dtype, device=flow.device), indexing="ij")
    d = torch.arange(-radius, radius + 1, dtype=flow.dtype, device=flow.device)
    dy, dx = torch.meshgrid(d, d, indexing="ij")
    cx = (xs[None] + flow[:, 0]).reshape(-1, 1, 1) + dx
    cy = (ys[None] + flow[:, 1]).reshape(-1, 1, 1) + dy
    gx = 2 * cx / max(W1 - 1, 1) - 1
    gy = 2 * cy / max(H1 - 1, 1) - 1
    grid = torch.stack([gx, gy], dim=-1)
    out = F.grid_sample(vol, grid, mode="bilinear", padding_mode="zeros", align_corners=True)
    k = (2 * radius + 1) ** 2
    return out.reshape(B, H2, W2, k).permute(0, 3, 1, 2)


class FlowUpdater(nn.Module):
    """Recurrent residual predictor reading the local correlation window around the current flow.

    A ConvGRU carries a hidden state across iterations, so the updater can tell
    a settled estimate from one still moving and stop adding corrections.
    """

    def __init__(self, radius=3, feat_channels=32, hidden=48):
        super().__init__()
        self.radius = radius
        self.corr_scale = feat_channels ** -0.5
        self.hidden_channels = hidden // 2
        k = (2 * radius + 1) ** 2
        m, h = hidden // 2, self.hidden_channels
        self.motion = nn.Sequential(
            nn.Conv2d(k, hidden, 3, padding=1, padding_mode="replicate"), nn.SiLU(),
            nn.Conv2d(hidden, m, 3, padding=1, padding_mode="replicate"), nn.SiLU(),
        )
        self.gates = nn.Conv2d(h + m, 2 * h, 3, padding=1, padding_mode="replicate")
        self.cand = nn.Conv2d(h + m, h, 3, padding=1, padding_mode="replicate")
        self.head = nn.Conv2d(h, 2, 3, padding=1, padding_mode="replicate")
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, volume, flow, hidden=None):
        """Returns (flow residual, new hidden state)."""
        # as in RAFT, no gradient through the lookup coordinates
        corr = _lookup(volume, flow.detach(), self.radius) * self.corr_scale
        x = self.motion(corr)
        if hidden is None:
            hidden = x.new_zeros(x.shape[0], self.hidden_channels, *x.shape[-2:])
        z, r = torch.sigmoid(self.gates(torch.cat([hidden, x], dim=1))).chunk(2, dim=1)
        q = torch.tanh(self.cand(torch.cat([r * hidden, x], dim=1)))
        hidden = (1 - z) * hidden + z * q
        return self.head(hidden), hidden


@dataclass
class FlowIterState:
    flow: torch.Tensor  # (B, 2, h, w) at feature scale
    iteration: int = 0
    hidden: torch.Tensor = None  # updater recurrent state, None before the first step


def flow_update(volume, state, updater, num_refinements):
    if state.iteration >= num_refinements:
        raise FlowStateError(f"refinement budget of {num_refinements} iterations exhausted")
    delta, hidden = updater(volume, state.flow, state.hidden)
    return FlowIterState(state.flow + delta, state.iteration + 1, hidden)


class FlowEstimator(nn.Module):
    def __init__(self, feat_channels=32, scale=4, num_refinements=4, radius=3):
        super().__init__()
        self.encoder = FeatureEncoder(3, feat_channels, scale)
        self.updater = FlowUpdater(radius, feat_channels)
        self.context = nn.Conv2d(feat_channels, self.updater.hidden_channels, 1)
        self.scale = scale
        self.num_refinements = num_refinements

    def upsample(self, flow, size):
        up = F.interpolate(flow, scale_factor=self.scale, mode="bilinear", align_corners=False) * self.scale
        return up[..., : size[0], : size[1]]

    def forward(self, f_prev, f_next, return_all=False):
        """Flow on the grid of ``f_next`` pointing into ``f_prev``, full resolution.

        With ``return_all`` a list with the upsampled flow after each refinement
        is returned instead (length ``num_refinements``, or one zero field).
        """
        if f_prev.shape != f_next.shape:
            raise ValueError("frames differ in shape")
        size = f_prev.shape[-2:]
        fa = self.encoder(f_prev)
        fb = self.encoder(f_next)
        volume = correlation_volume(fa, fb)
        B, _, h, w = fa.shape
        state = FlowIterState(fa.new_zeros(B, 2, h, w), hidden=torch.tanh(self.context(fb)))
        history = []
        while state.iteration < self.num_refinements:
            state = flow_update(volume, state, self.updater, self.num_refinements)
            if return_all:
                history.append(self.upsample(state.flow, size))
        if return_all:
            return history or [self.upsample(state.flow, size)]
        return self.upsample(state.flow, size)


def encode_features(frame, encoder):
    return encoder(frame)


def estimate_flow(f_prev, f_next, estimator):
    return estimator(f_prev, f_next)


def warp(frame, flow):
    """Bilinearly sample ``frame`` at ``p + flow(p)`` with clamp-to-edge borders.

    frame (B, C, H, W), flow (B, 2, H, W) with (u, v) = (dx, dy) in pixels.
    """
    B, C, H, W = frame.shape
    ys, xs = torch.meshgrid(torch.arange(H, dtype=flow.dtype, device=flow.device),
                            torch.arange(W, dtype=flow.dtype, device=flow.device), indexing="ij")
    x = (xs + flow[:, 0]).clamp(0, W - 1)
    y = (ys + flow[:, 1]).clamp(0, H - 1)
    # non-finite coordinates index pixel 0; the NaN weights still carry into the output
    x0 = x.detach().nan_to_num(0.0).floor().clamp(max=max(W - 2, 0))
    y0 = y.detach().nan_to_num(0.0).floor().clamp(max=max(H - 2, 0))
    wx = (x - x0).unsqueeze(1)
    wy = (y - y0).unsqueeze(1)
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=W - 1)
    y1 = (y0 + 1).clamp(max=H - 1)
    flat = frame.reshape(B, C, H * W)

    def gather(yi, xi):
        idx = (yi * W + xi).reshape(B, 1, H * W).expand(B, C, H * W)
        return flat.gather(2, idx).reshape(B, C, H, W)

    top = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bottom = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    return top * (1 - wy) + bottom * wy


def block_match_oracle(f_prev, f_next, radius=4, block=8):
    """Exhaustive integer SAD search per block; returns a dense FlowField.

    Inputs are (H, W) or (H, W, C) arrays. Ties prefer the smallest |u|+|v|,
    then lexicographic (u, v).
    """
    a = np.asarray(f_prev, dtype=np.float64)
    b = np.asarray(f_next, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("frames differ in shape")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    H, W, _ = b.shape
    blocks = _kernels.block_match(a, b, radius, block)
    dense = np.repeat(np.repeat(blocks, block, axis=0), block, axis=1)[:H, :W].astype(np.float64)
    return FlowField(dense[..., 0], dense[..., 1])


def interior_block_mask(H, W, radius, block):
    """Pixels of blocks whose full search window lies inside the frame."""
    mask = np.zeros((H, W), dtype=bool)
    for y0 in range(0, H, block):
        for x0 in range(0, W, block):
            y1, x1 = min(y0 + block, H), min(x0 + block, W)
            if y0 - radius >= 0 and x0 - radius >= 0 and y1 + radius <= H and x1 + radius <= W:
                mask[y0:y1, x0:x1] = True
    return mask


def to_tensor_image(arr, dtype=torch.float32):
    """(H, W, C) or (T, H, W, C) array -> (1, C, H, W) / (T, C, H, W) tensor."""
    t = torch.as_tensor(np.asarray(arr), dtype=dtype)
    if t.ndim == 3:
        return t.permute(2, 0, 1)[None].contiguous()
    return t.permute(0, 3, 1, 2).contiguous()


def flow_to_tensor(flow, dtype=torch.float32):
    return torch.as_tensor(np.stack([flow.u, flow.v]), dtype=dtype)[None]


def tensor_to_flow(t):
    arr = t.detach().cpu().double().numpy()
    if arr.ndim == 4:
        arr = arr[0]
    return FlowField(arr[0], arr[1])
