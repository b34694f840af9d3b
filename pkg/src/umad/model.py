"""The full restoration model: flow + UMSE conditioning, context encoders and the U-Mamba denoiser."""

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import DenoiserConfig, UMambaDenoiser
from .context import GlobalContext, PostTemporalContext
from .data_synth import FrameSequence, crop_patches
from .diffusion import cosine_schedule, p_sample_step, predict_x0, q_sample, window_generator
from .flow import FlowEstimator, warp
from .losses import LossWeights, noise_loss, total_loss
from .umse import UMSE, StructuralPriors

ABLATIONS = ("full", "no_umse", "no_context", "flow_only", "no_conditioning")
FLOW_PAIRINGS = ("previous", "adjacent")
CHARBONNIER_EPS = 1e-3


@dataclass
class ModelConfig:
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    window: int = 7
    post_frames: int = 2
    global_factor: int = 4
    context_channels: int = 8  # per context module; the denoiser sees twice this
    flow_channels: int = 32
    flow_scale: int = 4
    flow_refinements: int = 4
    flow_radius: int = 3
    # "previous": flow between frames t-2 and t-1; "adjacent": between t-1 and t
    flow_pairing: str = "previous"
    residual_scale: float = 0.25
    diffusion_steps: int = 25
    # eps_hat = c(t) x_t + network, c(t) the best linear eps estimate for residuals of this std; 0 disables
    eps_skip_sigma: float = 0.5

    def __post_init__(self):
        if isinstance(self.denoiser, dict):
            self.denoiser = DenoiserConfig(**self.denoiser)
        if self.denoiser.context_channels != 2 * self.context_channels:
            self.denoiser.context_channels = 2 * self.context_channels
        if self.flow_pairing not in FLOW_PAIRINGS:
            raise ValueError(f"flow_pairing must be one of {FLOW_PAIRINGS}")
        if self.window < 3:
            raise ValueError("window must hold at least 3 frames")
        if self.post_frames < 1:
            raise ValueError("post_frames must be >= 1")
        if self.residual_scale <= 0:
            raise ValueError("residual_scale must be > 0")
        if self.eps_skip_sigma < 0:
            raise ValueError("eps_skip_sigma must be >= 0")

    def to_dict(self):
        d = asdict(self)
        d["denoiser"] = self.denoiser.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["denoiser"] = DenoiserConfig(**d.get("denoiser", {}))
        return cls(**d)


@dataclass
class WindowBatch:
    """Tensors for B windows; frame stacks are (B, n, C, H, W)."""

    degraded: torch.Tensor  # L input frames ending at the target
    post: torch.Tensor  # K frames after the target (zeros past the sequence end)
    global_frame: torch.Tensor  # (B, C, h, w) frame for the global context
    priors: torch.Tensor  # (B, 3) normalized structural priors
    clean: torch.Tensor = None  # L clean frames, same indices as ``degraded``
    ref_flows: torch.Tensor = None  # (B, L-1, 2, H, W) reference flow between consecutive frames

    def __len__(self):
        return self.degraded.shape[0]

    def to(self, dtype):
        kw = {k: (v.to(dtype) if torch.is_tensor(v) else v) for k, v in self.__dict__.items()}
        return WindowBatch(**kw)


def _frames_tensor(frames, dtype):
    """(n, H, W, C) array -> (n, C, H, W) tensor."""
    return torch.as_tensor(np.ascontiguousarray(frames), dtype=dtype).permute(0, 3, 1, 2)


def build_window(degraded, t, L, K, quality_q=1.0, window_scale=1.0, clean=None, ref_flows=None,
                 global_frame=None, dtype=torch.float32):
    """Window ending at target ``t`` of (T, H, W, C) arrays; post frames past the end are zero-filled.

    ``ref_flows`` (T-1, H, W, 2) are the flows between consecutive frames of the
    whole sequence; ``global_frame`` overrides the global-context input.
    """
    T = len(degraded)
    if t - L + 1 < 0 or t > T - 1:
        raise IndexError(f"target {t} needs frames {t - L + 1}..{t}, sequence has 0..{T - 1}")
    H, W, C = degraded.shape[1:]
    post = np.zeros((K, H, W, C))
    avail = degraded[t + 1:t + K + 1]
    post[:len(avail)] = avail
    priors = StructuralPriors(t, T, window_scale, quality_q).normalized()
    g = degraded[t] if global_frame is None else global_frame
    out = WindowBatch(
        degraded=_frames_tensor(degraded[t - L + 1:t + 1], dtype)[None],
        post=_frames_tensor(post, dtype)[None],
        global_frame=_frames_tensor(np.asarray(g)[None], dtype),
        priors=torch.as_tensor(priors, dtype=dtype)[None],
    )
    if clean is not None:
        out.clean = _frames_tensor(clean[t - L + 1:t + 1], dtype)[None]
    if ref_flows is not None:
        out.ref_flows = _frames_tensor(ref_flows[t - L + 1:t], dtype)[None]
    return out


def collate(windows):
    def cat(name):
        vals = [getattr(w, name) for w in windows]
        if any(v is None for v in vals):
            return None
        return torch.cat(vals, dim=0)

    return WindowBatch(**{k: cat(k) for k in WindowBatch.__dataclass_fields__})


class UMAD(nn.Module):
    def __init__(self, config=None):
        super().__init__()
        cfg = config or ModelConfig()
        self.config = cfg
        self.flow = FlowEstimator(cfg.flow_channels, cfg.flow_scale, cfg.flow_refinements, cfg.flow_radius)
        self.umse = UMSE(cfg.denoiser.cond_channels)
        self.gcm = GlobalContext(cfg.denoiser.in_channels, cfg.context_channels, cfg.global_factor)
        self.ptcm = PostTemporalContext(cfg.denoiser.in_channels, cfg.context_channels, cfg.global_factor)
        self.denoiser = UMambaDenoiser(cfg.denoiser)
        self.schedule = cosine_schedule(cfg.diffusion_steps)

    # conditioning -----------------------------------------------------------

    def conditioning_flow(self, degraded):
        """Flow between the two degraded frames chosen by ``flow_pairing``, (B, 2, H, W)."""
        L = degraded.shape[1]
        i = L - 3 if self.config.flow_pairing == "previous" else L - 2
        return self.flow(degraded[:, i], degraded[:, i + 1])

    def global_features(self, frame, size):
        """GCM on a full-size frame, or on an already downsampled one resized to the feature grid."""
        if tuple(frame.shape[-2:]) == tuple(size):
            return self.gcm(frame)
        f = self.config.global_factor
        grid = (math.ceil(size[0] / f), math.ceil(size[1] / f))
        if tuple(frame.shape[-2:]) != grid:
            frame = F.interpolate(frame, size=grid, mode="bicubic", align_corners=False)
        return self.gcm.blocks(frame[:, :, None])[:, :, 0]

    def condition(self, batch, ablation="full"):
        """Returns (e_umse or None, context or None) for ``batch`` under ``ablation``."""
        if ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        size = batch.degraded.shape[-2:]
        e = None
        if ablation not in ("no_umse", "no_conditioning"):
            # the estimator is trained by its curriculum and the flow term; the embedding reads it as an input
            flow = self.conditioning_flow(batch.degraded).detach()
            e = self.umse(flow, batch.priors, use_flow=True, use_priors=ablation != "flow_only")
        context = None
        if ablation not in ("no_context", "no_conditioning"):
            g = self.global_features(batch.global_frame, size)
            p = self.ptcm(batch.post.transpose(1, 2))
            context = torch.cat([g, p], dim=1)
        return e, context

    def eps(self, x_t, t, degraded, e, context, schedule=None):
        """x_t, degraded: (B, L, C, H, W) -> predicted noise of the same shape."""
        if not torch.is_tensor(t):
            t = torch.full((x_t.shape[0],), int(t))
        out = self.denoiser(x_t.transpose(1, 2), t, degraded.transpose(1, 2), e, context).transpose(1, 2)
        if self.config.eps_skip_sigma > 0:
            ab = torch.as_tensor((schedule or self.schedule).alpha_bar, dtype=x_t.dtype)[t]
            c = (1 - ab).sqrt() / (ab * self.config.eps_skip_sigma ** 2 + 1 - ab)
            out = out + c.view(-1, *([1] * (x_t.dim() - 1))) * x_t
        return out

    # training ---------------------------------------------------------------

    def to_residual(self, clean, degraded):
        return ((clean - degraded) / self.config.residual_scale).clamp(-1, 1)

    def from_residual(self, x0, degraded):
        return degraded + self.config.residual_scale * x0

    def training_losses(self, batch, generator, ablation="full", weights=None, temporal_pairs=None,
                        flow_stop_grad=False, image_weighting="uniform", return_terms=False):
        """One noisy draw per window; returns (total tensor, LossReport[, term tensors]).

        Image-space terms (rec, temp, flow) act on frames rebuilt from the
        predicted clean residual. With ``image_weighting`` "uniform" the
        reconstruction term weights every recoverable step by 1, with "snr" by
        min(1, SNR_t). The temporal and flow terms always use min(1, SNR_t):
        they only carry signal once the rebuilt frames are close to clean. The
        temporal term warps with detached flows, and the flow term sees detached
        frames, so the estimator and the denoiser do not steer each other.
        """
        weights = weights or LossWeights()
        sched = self.schedule
        dtype = batch.degraded.dtype
        B, L = batch.degraded.shape[:2]
        x0 = self.to_residual(batch.clean, batch.degraded)
        t = torch.randint(1, sched.T + 1, (B,), generator=generator)
        noise = torch.randn(x0.shape, generator=generator, dtype=dtype)
        x_t = q_sample(x0, t, noise, sched)
        e, context = self.condition(batch, ablation)
        eps_hat = self.eps(x_t, t, batch.degraded, e, context)
        l_eps = noise_loss(eps_hat, noise)

        ab = torch.as_tensor(sched.alpha_bar, dtype=dtype)[t]
        w_snr = (ab / (1 - ab)).clamp(max=1.0)
        if image_weighting == "snr":
            w = w_snr
        elif image_weighting == "uniform":
            # x0 cannot be recovered where abar underflows (t = T); those draws carry no image-space signal
            w = (ab > 1e-12).to(dtype)
        else:
            raise ValueError(f"unknown image_weighting {image_weighting!r}")
        restored = self.from_residual(predict_x0(x_t, t, eps_hat, sched), batch.degraded)
        per = torch.sqrt((restored - batch.clean) ** 2 + CHARBONNIER_EPS ** 2).flatten(1).mean(1)
        l_rec = (w * per).mean()

        pairs = list(range(L - 1))
        if temporal_pairs is not None and temporal_pairs < len(pairs):
            perm = torch.randperm(len(pairs), generator=generator)[:temporal_pairs]
            pairs = sorted(int(i) for i in perm)
        # at large t the implied x0 is huge (abar_T ~ 0); keep flow inputs in the image range
        img = restored.clamp(0, 1)
        prev = img[:, pairs].flatten(0, 1)
        nxt = img[:, [i + 1 for i in pairs]].flatten(0, 1)
        # the flow term supervises the estimator only; it must not steer the denoiser through its input
        fprev, fnxt = prev.detach(), nxt.detach()
        frozen = flow_stop_grad or ablation in ("no_umse", "no_conditioning")
        with torch.set_grad_enabled(torch.is_grad_enabled() and not frozen):
            flows = self.flow(fprev, fnxt)
        if frozen:
            flows = flows.detach()
        wp = w_snr.repeat_interleave(len(pairs))
        res = (nxt - warp(prev, flows.detach())).abs().flatten(1).mean(1)
        l_temp = (wp * res).mean()
        if batch.ref_flows is not None:
            ref = batch.ref_flows[:, pairs].flatten(0, 1)
            per_flow = (flows - ref).abs().sum(1).flatten(1).mean(1)
            l_flow = (wp * per_flow).mean()
        else:
            l_flow = torch.zeros((), dtype=dtype)
        terms = {"rec": l_rec, "temp": l_temp, "flow": l_flow, "eps": l_eps}
        loss, report = total_loss(terms, weights)
        return (loss, report, terms) if return_terms else (loss, report)

    # sampling ---------------------------------------------------------------

    @torch.no_grad()
    def sample_windows(self, batch, generators, ablation="full", clip_denoised=True, steps=None):
        """Full reverse loop for each window with its own random stream; returns restored frames."""
        sched = self.schedule if steps in (None, self.schedule.T) else cosine_schedule(steps)
        e, context = self.condition(batch, ablation)
        shape = batch.degraded.shape[1:]
        dtype = batch.degraded.dtype

        def draw():
            return torch.stack([torch.randn(shape, generator=g, dtype=dtype) for g in generators])

        x = draw()
        for t in range(sched.T, 0, -1):
            z = draw() if t > 1 else None
            x = p_sample_step(x, t, lambda xt, tt: self.eps(xt, tt, batch.degraded, e, context, sched), sched,
                              clip_denoised=clip_denoised, noise=z)
        return self.from_residual(x, batch.degraded)


def _restore_frames(model, deg, seed, ablation, quality_q, window_scale, global_frames, clip_denoised, steps,
                    window_batch, offset=0):
    cfg = model.config
    T = len(deg)
    L, K = cfg.window, cfg.post_frames
    if T < L:
        raise ValueError(f"sequence of {T} frames is shorter than the {L}-frame window")
    dtype = next(model.parameters()).dtype
    acc = torch.zeros((T, deg.shape[3], deg.shape[1], deg.shape[2]), dtype=torch.float64)
    count = torch.zeros(T, dtype=torch.float64)
    targets = list(range(L - 1, T))
    for start in range(0, len(targets), window_batch):
        chunk = targets[start:start + window_batch]
        windows = [build_window(deg, t, L, K, quality_q, window_scale, dtype=dtype,
                                global_frame=None if global_frames is None else global_frames[t]) for t in chunk]
        gens = [window_generator(seed, offset + t) for t in chunk]
        out = model.sample_windows(collate(windows), gens, ablation, clip_denoised, steps)
        for t, frames in zip(chunk, out):
            acc[t - L + 1:t + 1] += frames.double()
            count[t - L + 1:t + 1] += 1
    restored = acc / count[:, None, None, None]
    return restored.clamp(0, 1).permute(0, 2, 3, 1).numpy()


def restore_sequence(model, f_deg, sampler, f_raw_downsampled=None, quality_q=1.0, ablation="full",
                     patch_size=None, window_batch=4, steps=None):
    frames = f_deg.frames if isinstance(f_deg, FrameSequence) else np.asarray(f_deg)
    T, H, W, _ = frames.shape
    glob = None
    if f_raw_downsampled is not None:
        glob = np.asarray(f_raw_downsampled)
        if glob.ndim == 3:
            glob = np.repeat(glob[None], T, axis=0)
        if len(glob) != T:
            raise ValueError("f_raw_downsampled needs one frame, or one frame per input frame")
    steps = steps or sampler.T
    model.eval()
    if patch_size is None or patch_size >= min(H, W):
        out = _restore_frames(model, frames, sampler.seed, ablation, quality_q, 1.0, glob, sampler.clip_denoised,
                              steps, window_batch)
        return FrameSequence(out, getattr(f_deg, "frame_rate", 120.0))
    acc = np.zeros(frames.shape)
    cnt = np.zeros((H, W, 1))
    scale = patch_size / min(H, W)
    for i, (patch, win) in enumerate(crop_patches(FrameSequence(frames), patch_size, patch_size // 2)):
        y0, x0, s = win["y0"], win["x0"], win["size"]
        acc[:, y0:y0 + s, x0:x0 + s] += _restore_frames(model, patch.frames, sampler.seed, ablation, quality_q, scale,
                                                        None, sampler.clip_denoised, steps, window_batch,
                                                        offset=(i + 1) * 100_000)
        cnt[y0:y0 + s, x0:x0 + s] += 1
    return FrameSequence(acc / cnt, getattr(f_deg, "frame_rate", 120.0))
