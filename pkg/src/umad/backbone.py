"""U-shaped denoiser built from two-branch selective state-space blocks.

Feature tensors are ``(B, C, D, H, W)``: D is the temporal axis the state-space
scan runs along, spatial positions are folded into the batch for the scan.
"""

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import _kernels

INJECTION_MODES = ("none", "late", "early")


def ssm_scan(x, delta, A, B, C, D=None, fused=True):
    """Selective scan ``h_k = exp(delta_k A) h_{k-1} + delta_k B_k x_k``, ``y_k = C_k h_k + D x_k``.

    x, delta: (N, L, E); A: (E, S); B, C: (N, L, S); D: (E,). Linear in L.
    ``fused`` runs the loop kernel with its hand-derived backward; otherwise the
    recurrence is unrolled in torch ops and differentiated by autograd.
    """
    if D is None:
        D = x.new_zeros(x.shape[-1])
    if fused:
        decay = torch.exp(delta.unsqueeze(-1) * A)
        return SelectiveScan.apply(decay, delta * x, B, C) + D * x
    h = x.new_zeros(x.shape[0], x.shape[2], A.shape[1])
    ys = []
    for k in range(x.shape[1]):
        dk = delta[:, k, :, None]
        h = torch.exp(dk * A) * h + dk * B[:, k, None, :] * x[:, k, :, None]
        ys.append((h * C[:, k, None, :]).sum(-1) + D * x[:, k])
    return torch.stack(ys, dim=1)


def _np(t):
    return t.detach().contiguous().numpy()


class SelectiveScan(torch.autograd.Function):
    """Recurrence core ``h_k = a_k h_{k-1} + u_k B_k``, ``y_k = C_k . h_k`` on the loop kernels."""

    @staticmethod
    def forward(ctx, decay, u, B, C):
        y, h = _kernels.selective_scan_forward(*(_np(t) for t in (decay, u, B, C)))
        ctx.save_for_backward(decay, u, B, C, torch.from_numpy(h))
        return torch.from_numpy(y)

    @staticmethod
    def backward(ctx, gy):
        *inputs, h = ctx.saved_tensors
        grads = _kernels.selective_scan_backward(*(_np(t) for t in inputs), h.numpy(), _np(gy))
        return tuple(torch.from_numpy(g) for g in grads)


class SelectiveSSM(nn.Module):
    def __init__(self, channels, state_dim=8, dt_min=1e-3, dt_max=1e-1):
        super().__init__()
        self.delta_proj = nn.Linear(channels, channels)
        self.B_proj = nn.Linear(channels, state_dim, bias=False)
        self.C_proj = nn.Linear(channels, state_dim, bias=False)
        A = torch.arange(1, state_dim + 1, dtype=torch.float32).repeat(channels, 1)
        self.A_log = nn.Parameter(torch.log(A))
        self.D = nn.Parameter(torch.ones(channels))
        # softplus^-1 of log-uniform step sizes
        dt = torch.exp(torch.rand(channels) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min))
        with torch.no_grad():
            self.delta_proj.bias.copy_(dt + torch.log(-torch.expm1(-dt)))
            self.delta_proj.weight.mul_(0.1)

    def params(self, x):
        delta = F.softplus(self.delta_proj(x))
        return delta, -torch.exp(self.A_log), self.B_proj(x), self.C_proj(x)

    def forward(self, x):
        delta, A, B, C = self.params(x)
        return ssm_scan(x, delta, A, B, C, self.D)


class GLAM(nn.Module):
    """Channel gate from pooled statistics, then a spatial gate from a reduced conv."""

    def __init__(self, channels, reduction=4):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.channel_mlp = nn.Sequential(nn.Linear(channels, hidden), nn.SiLU(), nn.Linear(hidden, channels))
        self.spatial = nn.Sequential(
            nn.Conv2d(channels, hidden, 3, padding=1, padding_mode="replicate"), nn.SiLU(),
            nn.Conv2d(hidden, 1, 3, padding=1, padding_mode="replicate"),
        )

    def forward(self, x):
        g = torch.sigmoid(self.channel_mlp(x.mean(dim=(2, 3))))
        x = x * g[:, :, None, None]
        return x * torch.sigmoid(self.spatial(x))


def glam(x, module):
    return module(x)


class MambaBlock(nn.Module):
    """``x + Linear(X1 * X2)`` with

    X1 = scan(SiLU(Linear(LN(x))))
    X2 = GLAM(SiLU(DWConv(Linear([LN(x), cond]))))
    """

    def __init__(self, channels, cond_channels=0, expand=2, state_dim=8, use_scan=True, use_glam=True):
        super().__init__()
        inner = expand * channels
        self.cond_channels = cond_channels
        self.norm = nn.LayerNorm(channels)
        self.in1 = nn.Linear(channels, inner)
        self.in2 = nn.Linear(channels + cond_channels, inner)
        self.conv = nn.Conv2d(inner, inner, 3, padding=1, groups=inner, padding_mode="replicate")
        self.ssm = SelectiveSSM(inner, state_dim) if use_scan else None
        self.glam = GLAM(inner) if use_glam else nn.Identity()
        self.out = nn.Linear(inner, channels)
        # conditioning starts switched off; the block behaves as unconditioned until training opens it
        with torch.no_grad():
            self.in2.weight[:, channels:].zero_()

    def forward(self, x, cond=None):
        B, C, D, H, W = x.shape
        n = self.norm(x.permute(0, 2, 3, 4, 1))  # B, D, H, W, C
        x1 = F.silu(self.in1(n))
        if self.ssm is not None:
            E = x1.shape[-1]
            seq = x1.permute(0, 2, 3, 1, 4).reshape(B * H * W, D, E)
            x1 = self.ssm(seq).reshape(B, H, W, D, E).permute(0, 3, 1, 2, 4)
        if self.cond_channels:
            if cond is None:
                raise ValueError("block was built for conditioning but no cond was given")
            n = torch.cat([n, cond.permute(0, 2, 3, 4, 1).expand(B, D, H, W, -1)], dim=-1)
        x2 = self.in2(n)
        E = x2.shape[-1]
        x2 = x2.reshape(B * D, H, W, E).permute(0, 3, 1, 2)
        x2 = self.glam(F.silu(self.conv(x2)))
        x2 = x2.permute(0, 2, 3, 1).reshape(B, D, H, W, E)
        out = self.out(x1 * x2)
        return x + out.permute(0, 4, 1, 2, 3)


def mamba_block(x, block, cond=None):
    """Apply ``block`` to a (B, H, W, C, D) tensor."""
    y = block(x.permute(0, 3, 4, 1, 2), cond)
    return y.permute(0, 3, 4, 1, 2)


class LateGate(nn.Module):
    """Adds conditioning through a sigmoid attention gate: ``x + sigmoid(Wg[x, c]) * Wc c``."""

    def __init__(self, channels, cond_channels):
        super().__init__()
        self.gate = nn.Conv3d(channels + cond_channels, channels, 1)
        self.value = nn.Conv3d(cond_channels, channels, 1)
        nn.init.zeros_(self.value.weight)
        nn.init.zeros_(self.value.bias)

    def forward(self, x, cond):
        cond = cond.expand(-1, -1, x.shape[2], -1, -1)
        return x + torch.sigmoid(self.gate(torch.cat([x, cond], dim=1))) * self.value(cond)


def sinusoidal_embedding(t, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


def _spatial_conv(cin, cout, stride=1):
    return nn.Conv3d(cin, cout, (1, 3, 3), stride=(1, stride, stride), padding=(0, 1, 1), padding_mode="replicate")


@dataclass
class DenoiserConfig:
    in_channels: int = 3  # channels of x_t (and of the degraded frames concatenated to it)
    base_channels: int = 8
    channel_mults: tuple = (1, 2, 4, 8)
    blocks_per_stage: int = 1
    injection_mode: str = "early"
    cond_channels: int = 48
    context_channels: int = 16  # GCM + PTCM channels together
    context_stage: int = 2
    timestep_embed_dim: int = 32
    state_dim: int = 8
    expand: int = 2

    def __post_init__(self):
        self.channel_mults = tuple(self.channel_mults)
        if self.injection_mode not in INJECTION_MODES:
            raise ValueError(f"injection_mode must be one of {INJECTION_MODES}")
        if len(self.channel_mults) != 4:
            raise ValueError("the U has exactly 4 downsampling and 4 upsampling stages")

    def to_dict(self):
        d = asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        return d


class Stage(nn.Module):
    def __init__(self, cin, cout, temb_dim, cfg, decoder, extra_channels=0):
        super().__init__()
        early = cfg.injection_mode == "early"
        self.proj = nn.Conv3d(cin + extra_channels, cout, 1)
        self.temb = nn.Linear(temb_dim, cout)
        self.blocks = nn.ModuleList(
            MambaBlock(cout, cfg.cond_channels if early else 0, cfg.expand, cfg.state_dim)
            for _ in range(cfg.blocks_per_stage)
        )
        self.late = LateGate(cout, cfg.cond_channels) if decoder and cfg.injection_mode == "late" else None
        self.early = early

    def forward(self, x, temb, cond, extra=None):
        if extra is not None:
            x = torch.cat([x, extra.expand(-1, -1, x.shape[2], -1, -1)], dim=1)
        x = self.proj(x) + self.temb(temb)[:, :, None, None, None]
        for block in self.blocks:
            x = block(x, cond if self.early else None)
        if self.late is not None:
            x = self.late(x, cond)
        return x


def _pool_to(x, size):
    """Area-average a (B, C, H, W) map to ``size`` and add a singleton D axis."""
    if x.shape[-2:] != tuple(size):
        x = F.adaptive_avg_pool2d(x, size)
    return x[:, :, None]


class UMambaDenoiser(nn.Module):
    """Noise predictor: (x_t, t, degraded window, conditioning) -> eps_hat, same shape as x_t."""

    def __init__(self, config=None):
        super().__init__()
        cfg = config or DenoiserConfig()
        self.config = cfg
        self.use_skips = True
        chans = [cfg.base_channels * m for m in cfg.channel_mults]
        temb = 4 * cfg.timestep_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(cfg.timestep_embed_dim, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.inp = nn.Conv3d(2 * cfg.in_channels, chans[0], 1)
        ctx = cfg.context_channels
        self.down_stages = nn.ModuleList()
        self.downs = nn.ModuleList()
        for i, c in enumerate(chans):
            self.down_stages.append(Stage(c, c, temb, cfg, False, ctx if i == cfg.context_stage else 0))
            self.downs.append(_spatial_conv(c, chans[min(i + 1, 3)], stride=2))
        self.mid = Stage(chans[3], chans[3], temb, cfg, False)
        self.ups = nn.ModuleList()
        self.up_stages = nn.ModuleList()
        prev = chans[3]
        for i in reversed(range(4)):
            c = chans[i]
            self.ups.append(_spatial_conv(prev, c))
            self.up_stages.append(Stage(2 * c, c, temb, cfg, True, ctx if i == cfg.context_stage else 0))
            prev = c
        self.out = nn.Conv3d(chans[0], cfg.in_channels, 1)

    def forward(self, x_t, t, degraded, cond=None, context=None):
        """x_t, degraded: (B, C, D, H, W); t: (B,) steps; cond: (B, C', H, W) or None;
        context: (B, C_ctx, h, w) GCM and PTCM features concatenated, or None."""
        cfg = self.config
        B, C, D, H, W = x_t.shape
        ph, pw = (-H) % 16, (-W) % 16
        if ph or pw:
            pad = (0, pw, 0, ph, 0, 0)
            x_t = F.pad(x_t, pad, mode="replicate")
            degraded = F.pad(degraded, pad, mode="replicate")
        if cfg.injection_mode == "none" or cond is None:
            use_cond = False
        else:
            use_cond = True
        if use_cond and (ph or pw):
            cond = F.pad(cond, (0, pw, 0, ph), mode="replicate")
        Hp, Wp = x_t.shape[-2:]
        if context is None:
            context = x_t.new_zeros(B, cfg.context_channels, Hp // 4, Wp // 4)

        temb = self.time_mlp(sinusoidal_embedding(t, cfg.timestep_embed_dim).to(x_t.dtype))
        h = self.inp(torch.cat([x_t, degraded], dim=1))
        skips = []
        for i, (stage, down) in enumerate(zip(self.down_stages, self.downs)):
            size = h.shape[-2:]
            c = _pool_to(cond, size) if use_cond else self._zero_cond(h)
            extra = _pool_to(context, size) if i == cfg.context_stage else None
            h = stage(h, temb, c, extra)
            skips.append(h)
            h = down(h)
        c = _pool_to(cond, h.shape[-2:]) if use_cond else self._zero_cond(h)
        h = self.mid(h, temb, c)
        for j, (up, stage) in enumerate(zip(self.ups, self.up_stages)):
            i = 3 - j
            skip = skips[i]
            h = up(F.interpolate(h, size=(h.shape[2],) + tuple(skip.shape[-2:]), mode="nearest"))
            size = h.shape[-2:]
            c = _pool_to(cond, size) if use_cond else self._zero_cond(h)
            extra = _pool_to(context, size) if i == cfg.context_stage else None
            h = stage(torch.cat([h, skip if self.use_skips else torch.zeros_like(skip)], dim=1), temb, c, extra)
        out = self.out(h)
        return out[..., :H, :W]

    def _zero_cond(self, h):
        if self.config.injection_mode == "none":
            return None
        return h.new_zeros(h.shape[0], self.config.cond_channels, 1, *h.shape[-2:])


def denoiser_forward(x_t, t, cond, model):
    """``cond`` is a dict with keys ``degraded`` and optional ``e_umse``, ``gcm``, ``ptcm``."""
    context = None
    if cond.get("gcm") is not None or cond.get("ptcm") is not None:
        parts = [cond.get("gcm"), cond.get("ptcm")]
        ref = next(p for p in parts if p is not None)
        parts = [p if p is not None else torch.zeros_like(ref) for p in parts]
        context = torch.cat(parts, dim=1)
    if not torch.is_tensor(t):
        t = torch.full((x_t.shape[0],), int(t))
    return model(x_t, t, cond["degraded"], cond.get("e_umse"), context)


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())
