"""PSNR, SSIM, temporal flow consistency and mean flow magnitude.

Learned perceptual metrics are not bundled; pass them to :func:`evaluate_sequence`
as ``extra_metrics={"lpips": fn}`` where ``fn(a, b) -> float`` takes two
(H, W, C) arrays in [0, 1].
"""

import json
import math
from dataclasses import asdict, dataclass, field
from functools import partial

import numpy as np
from scipy import signal

from . import _kernels
from .flow import block_match_oracle

LUMA = np.array([0.299, 0.587, 0.114])


def psnr(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10 * np.log10(1.0 / mse))


def to_gray(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[-1] == 3:
            return img @ LUMA
        if img.shape[-1] == 1:
            return img[..., 0]
    if img.ndim != 2:
        raise ValueError(f"expected (H, W) or (H, W, C) image, got {img.shape}")
    return img


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_inputs(a, b, win_size):
    a, b = to_gray(a), to_gray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < win_size:
        raise ValueError(f"image {a.shape} smaller than the {win_size}x{win_size} SSIM window")
    return a, b


def ssim(a, b, win_size=11, sigma=1.5, K1=0.01, K2=0.03, data_range=1.0):
    """Mean SSIM of the luminance channel over all fully-contained Gaussian windows."""
    a, b = _ssim_inputs(a, b, win_size)
    w = gaussian_window(win_size, sigma)
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2

    def filt(x):
        return signal.correlate2d(x, w, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim_reference(a, b, win_size=11, sigma=1.5, K1=0.01, K2=0.03, data_range=1.0):
    """SSIM by explicit per-window weighted means, variances and covariance."""
    a, b = _ssim_inputs(a, b, win_size)
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    return float(np.mean(_kernels.ssim_map(a, b, gaussian_window(win_size, sigma), c1, c2)))


default_flow_fn = partial(block_match_oracle, radius=4, block=8)


def _flows(frames, flow_fn):
    return [flow_fn(frames[t], frames[t + 1]).as_array() for t in range(len(frames) - 1)]


def _frames(seq):
    return seq.frames if hasattr(seq, "frames") else np.asarray(seq)


def tof_per_pair(restored, reference=None, flow_fn=None, mode="reference"):
    """Per-pair flow discrepancy (|du| + |dv| averaged over pixels).

    ``mode="reference"`` compares flows of restored pairs against flows of the
    matching reference pairs. ``mode="self"`` compares each restored flow with
    the next one (successive-flow consistency; reference unused).
    """
    flow_fn = flow_fn or default_flow_fn
    r = _frames(restored)
    if len(r) < 2:
        raise ValueError("tOF needs at least two frames")
    fr = _flows(r, flow_fn)
    if mode == "self":
        if len(fr) < 2:
            return [0.0]
        return [float(np.abs(fr[t + 1] - fr[t]).sum(-1).mean()) for t in range(len(fr) - 1)]
    if mode != "reference":
        raise ValueError(f"unknown tOF mode {mode!r}")
    g = _frames(reference)
    if g.shape != r.shape:
        raise ValueError("restored and reference sequences differ in shape")
    fg = _flows(g, flow_fn)
    return [float(np.abs(a - b).sum(-1).mean()) for a, b in zip(fr, fg)]


def tof(restored, reference=None, flow_fn=None, mode="reference"):
    return float(np.mean(tof_per_pair(restored, reference, flow_fn, mode)))


def flow_magnitude_per_pair(seq, flow_fn=None):
    flow_fn = flow_fn or default_flow_fn
    f = _frames(seq)
    if len(f) < 2:
        raise ValueError("flow magnitude needs at least two frames")
    return [float(np.sqrt((fl ** 2).sum(-1)).mean()) for fl in _flows(f, flow_fn)]


def mean_flow_magnitude(seq, flow_fn=None):
    return float(np.mean(flow_magnitude_per_pair(seq, flow_fn)))


@dataclass
class MetricsReport:
    psnr_db: float
    ssim: float
    tof: float
    mean_flow_mag: float
    per_frame: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, float) and math.isinf(v):
                d[k] = "inf"
        d["per_frame"] = {k: ["inf" if isinstance(x, float) and math.isinf(x) else x for x in v]
                          for k, v in d["per_frame"].items()}
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate_sequence(restored, reference, flow_fn=None, tof_mode="reference", extra_metrics=None):
    r, g = _frames(restored), _frames(reference)
    if r.shape != g.shape:
        raise ValueError("restored and reference sequences differ in shape")
    psnrs = [psnr(a, b) for a, b in zip(r, g)]
    ssims = [ssim(a, b) for a, b in zip(r, g)]
    tofs = tof_per_pair(r, g, flow_fn, tof_mode)
    mags = flow_magnitude_per_pair(r, flow_fn)
    extra = {name: float(np.mean([fn(a, b) for a, b in zip(r, g)])) for name, fn in (extra_metrics or {}).items()}
    return MetricsReport(
        psnr_db=float(np.mean(psnrs)), ssim=float(np.mean(ssims)), tof=float(np.mean(tofs)),
        mean_flow_mag=float(np.mean(mags)),
        per_frame={"psnr_db": psnrs, "ssim": ssims, "tof": tofs, "mean_flow_mag": mags},
        extra=extra,
    )


def aggregate(reports):
    """Mean of per-sequence values, accumulated in sequence order."""
    keys = ("psnr_db", "ssim", "tof", "mean_flow_mag")
    agg = {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}
    extra_keys = sorted(set().union(*(r.extra for r in reports))) if reports else []
    extra = {k: float(np.mean([r.extra[k] for r in reports if k in r.extra])) for k in extra_keys}
    return MetricsReport(**agg, extra=extra)
