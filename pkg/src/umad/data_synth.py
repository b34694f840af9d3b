"""Synthetic sequences with exact flow, degradations, windowing and file IO.

Flow convention used throughout the package: ``flow[t]`` lives on the pixel
grid of frame ``t+1`` and tells where to sample frame ``t`` so that
``frame[t+1](p) == frame[t](p + flow[t](p))``. This is the field consumed by
:func:`umad.flow.warp`, so ``warp(frame[t], flow[t]) ~= frame[t+1]``.
"""

import json
import math
import os
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import FormatError

FLOW_MAGIC = 202021.25
FRAME_PATTERN = "frame_{:06d}.png"
FLOW_PATTERN = "flow_{:06d}.flo"


@dataclass
class FrameSequence:
    frames: np.ndarray  # (T, H, W, C), float64 in [0, 1]
    frame_rate: float = 120.0

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim == 3:
            frames = frames[..., None]
        if frames.ndim != 4 or frames.shape[0] < 1:
            raise ValueError(f"frames must have shape (T, H, W, C) with T >= 1, got {frames.shape}")
        self.frames = np.clip(frames, 0.0, 1.0)

    def __len__(self):
        return self.frames.shape[0]

    @property
    def shape(self):
        return self.frames.shape


@dataclass
class FlowField:
    u: np.ndarray  # horizontal displacement, pixels
    v: np.ndarray  # vertical displacement, pixels

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ValueError("u and v must be 2-D arrays of equal shape")

    @property
    def shape(self):
        return self.u.shape

    def as_array(self):
        """(H, W, 2) array with u in channel 0."""
        return np.stack([self.u, self.v], axis=-1)

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr)
        if arr.ndim == 3 and arr.shape[0] == 2 and arr.shape[-1] != 2:
            return cls(arr[0], arr[1])
        return cls(arr[..., 0], arr[..., 1])

    @classmethod
    def zeros(cls, H, W):
        return cls(np.zeros((H, W)), np.zeros((H, W)))


@dataclass
class DegradationSpec:
    noise_sigma: float = 0.0
    blur_sigma: float = 0.0
    quality_q: float = 1.0
    flicker_amp: float = 0.0

    _KEYS = {"noise": "noise_sigma", "blur": "blur_sigma", "q": "quality_q", "quality": "quality_q",
             "flicker": "flicker_amp"}

    def __post_init__(self):
        for name in ("noise_sigma", "blur_sigma", "flicker_amp"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be a finite value >= 0, got {value}")
        if not (0.0 < self.quality_q <= 1.0):
            raise ValueError(f"quality_q must lie in (0, 1], got {self.quality_q}")

    @property
    def is_identity(self):
        return self.noise_sigma == 0 and self.blur_sigma == 0 and self.quality_q == 1 and self.flicker_amp == 0

    @classmethod
    def parse(cls, text):
        """Parse ``"noise=0.05,blur=0.5,q=0.5,flicker=0.02"``; empty text is the identity."""
        kwargs = {}
        for item in filter(None, (s.strip() for s in (text or "").split(","))):
            key, sep, raw = item.partition("=")
            key = key.strip()
            if not sep or key not in cls._KEYS:
                raise ValueError(f"degradation field {key!r}: expected one of noise, blur, q, flicker as key=value")
            try:
                value = float(raw)
            except ValueError:
                raise ValueError(f"degradation field {key!r}: {raw.strip()!r} is not a number") from None
            try:
                cls(**{cls._KEYS[key]: value})
            except ValueError as exc:
                raise ValueError(f"degradation field {key!r}: {exc}") from None
            kwargs[cls._KEYS[key]] = value
        return cls(**kwargs)

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# textures: analytic functions of continuous (x, y) so sub-pixel motion is exact
# ---------------------------------------------------------------------------

def checker_texture(rng, cell=8.0, channels=3):
    lo = rng.uniform(0.1, 0.3, channels)
    hi = rng.uniform(0.7, 0.9, channels)

    def tex(x, y):
        parity = (np.floor(x / cell) + np.floor(y / cell)) % 2
        return lo + (hi - lo) * parity[..., None]

    return tex


def noise_texture(rng, channels=3, n_waves=8, fmin=0.015, fmax=0.06, amplitude=0.35):
    freq = rng.uniform(fmin, fmax, (channels, n_waves))
    angle = rng.uniform(0, 2 * np.pi, (channels, n_waves))
    phase = rng.uniform(0, 2 * np.pi, (channels, n_waves))
    weight = rng.uniform(0.5, 1.0, (channels, n_waves))
    weight /= weight.sum(axis=1, keepdims=True)
    kx = 2 * np.pi * freq * np.cos(angle)
    ky = 2 * np.pi * freq * np.sin(angle)

    def tex(x, y):
        out = np.empty(x.shape + (channels,))
        for c in range(channels):
            arg = x[..., None] * kx[c] + y[..., None] * ky[c] + phase[c]
            out[..., c] = 0.5 + amplitude * (np.sin(arg) * weight[c]).sum(-1)
        return out

    return tex


def sprite_texture(rng, extent, channels=3, n_sprites=10):
    """Gaussian blobs over a faint wave background; ``extent`` = (xmin, xmax, ymin, ymax)."""
    background = noise_texture(rng, channels, n_waves=4, amplitude=0.12)
    xmin, xmax, ymin, ymax = extent
    cx = rng.uniform(xmin, xmax, n_sprites)
    cy = rng.uniform(ymin, ymax, n_sprites)
    sigma = rng.uniform(2.5, 6.0, n_sprites)
    color = rng.uniform(-0.35, 0.35, (n_sprites, channels))

    def tex(x, y):
        out = background(x, y)
        for k in range(n_sprites):
            g = np.exp(-((x - cx[k]) ** 2 + (y - cy[k]) ** 2) / (2 * sigma[k] ** 2))
            out += g[..., None] * color[k]
        return np.clip(out, 0.0, 1.0)

    return tex


def _rotation(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def render_sequence(tex, T, H, W, shift=(0.0, 0.0), rotation=0.0):
    """Render ``T`` frames of ``tex`` under constant per-frame motion.

    Frame ``t`` samples ``tex(c + R(t*theta)(q - c) + t*d)`` at pixel centre
    ``q``; returns frames (T, H, W, C) and the exact flows (T-1 fields).
    """
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    c = np.array([(W - 1) / 2.0, (H - 1) / 2.0])
    d = np.asarray(shift, dtype=np.float64)
    theta = math.radians(rotation)
    rel = np.stack([xs - c[0], ys - c[1]], axis=-1)

    frames = []
    for t in range(T):
        pos = rel @ _rotation(t * theta).T + c + t * d
        frames.append(tex(pos[..., 0], pos[..., 1]))

    flows = []
    step = rel @ _rotation(theta).T - rel
    for t in range(T - 1):
        u = step + _rotation(-t * theta) @ d
        flows.append(FlowField(u[..., 0], u[..., 1]))
    return np.stack(frames), flows


def generate_synthetic_sequence(seed, T, H, W, shift=(0.0, 0.0), rotation=0.0, texture="noise",
                                frame_rate=120.0):
    """Textured sequence under global translation and/or rotation with exact flow.

    ``texture`` is one of ``"checker"``, ``"noise"`` (alias ``"noise-texture"``)
    or ``"sprites"``.
    """
    if T < 2 or H < 1 or W < 1:
        raise ValueError(f"need T >= 2 and positive H, W; got T={T}, H={H}, W={W}")
    dx, dy = shift
    limit = min(H, W) / 4
    if abs(dx) >= limit or abs(dy) >= limit:
        raise ValueError(f"|shift| components must be < min(H, W)/4 = {limit}")
    rng = np.random.default_rng(seed)
    if texture == "checker":
        tex = checker_texture(rng)
    elif texture in ("noise", "noise-texture"):
        tex = noise_texture(rng)
    elif texture == "sprites":
        pad = 8 + T * max(abs(dx), abs(dy))
        r = 0.75 * math.hypot(H, W)
        extent = (min(-pad, W / 2 - r), max(W + pad, W / 2 + r), min(-pad, H / 2 - r), max(H + pad, H / 2 + r))
        tex = sprite_texture(rng, extent, n_sprites=max(6, int(12 * (extent[1] - extent[0]) * (extent[3] - extent[2]) / 4096)))
    else:
        raise ValueError(f"unknown texture {texture!r}")
    frames, flows = render_sequence(tex, T, H, W, shift, rotation)
    return FrameSequence(frames, frame_rate), flows


# ---------------------------------------------------------------------------
# degradation
# ---------------------------------------------------------------------------

def quantization_levels(q):
    return int(math.floor(2 + 62 * q + 0.5))


def _quantize(x, levels, lo, hi):
    step = (hi - lo) / (levels - 1)
    return lo + np.round((x - lo) / step) * step


def block_quantize(frames, q, block=8):
    """Quantise each ``block``x``block`` tile: mean on ``levels`` steps over [0, 1],
    residual about the mean on ``levels`` steps over [-1, 1]."""
    if q >= 1:
        return frames.copy()
    levels = quantization_levels(q)
    T, H, W, C = frames.shape
    out = np.empty_like(frames)
    for y0 in range(0, H, block):
        for x0 in range(0, W, block):
            tile = frames[:, y0:y0 + block, x0:x0 + block, :]
            mean = tile.mean(axis=(1, 2), keepdims=True)
            mq = _quantize(mean, levels, 0.0, 1.0)
            rq = _quantize(tile - mean, levels, -1.0, 1.0)
            out[:, y0:y0 + block, x0:x0 + block, :] = mq + rq
    return out


def degrade(clean, spec, seed):
    """Blur, block quantisation, additive noise, then per-frame brightness flicker."""
    if spec.is_identity:
        return FrameSequence(clean.frames.copy(), clean.frame_rate)
    rng = np.random.default_rng(seed)
    x = clean.frames.copy()
    if spec.blur_sigma > 0:
        x = ndimage.gaussian_filter(x, sigma=(0, spec.blur_sigma, spec.blur_sigma, 0), mode="nearest")
    if spec.quality_q < 1:
        x = block_quantize(x, spec.quality_q)
    if spec.noise_sigma > 0:
        x = x + rng.normal(0.0, spec.noise_sigma, x.shape)
    if spec.flicker_amp > 0:
        x = x + rng.uniform(-spec.flicker_amp, spec.flicker_amp, (x.shape[0], 1, 1, 1))
    return FrameSequence(np.clip(x, 0.0, 1.0), clean.frame_rate)


# ---------------------------------------------------------------------------
# spatial helpers
# ---------------------------------------------------------------------------

def _starts(n, size, stride):
    # a stride beyond the patch size would leave gaps; cap it so windows always cover
    starts = list(range(0, n - size + 1, min(stride, size)))
    if starts[-1] + size < n:
        starts.append(n - size)
    return starts


def crop_patches(seq, size, stride):
    """Cover every frame with ``size``x``size`` windows; returns [(patch, window), ...].

    The last window along each axis is pulled back to end at the border, and
    strides larger than ``size`` are reduced to ``size``.
    """
    _, H, W, _ = seq.shape
    if size > min(H, W) or size < 1:
        raise ValueError(f"patch size {size} does not fit a {H}x{W} frame")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    out = []
    for y0 in _starts(H, size, stride):
        for x0 in _starts(W, size, stride):
            patch = FrameSequence(seq.frames[:, y0:y0 + size, x0:x0 + size], seq.frame_rate)
            out.append((patch, {"x0": x0, "y0": y0, "size": size}))
    return out


def downsample(frame, factor):
    """Antialiased bicubic downsampling of an (H, W[, C]) image by an integer factor.

    Sizes not divisible by ``factor`` are reflect-padded first.
    """
    import torch
    import torch.nn.functional as F

    if int(factor) != factor or factor < 1:
        raise ValueError(f"factor must be an integer >= 1, got {factor}")
    factor = int(factor)
    img = np.asarray(frame, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    if factor == 1:
        return img[..., 0].copy() if squeeze else img.copy()
    H, W, _ = img.shape
    ph, pw = (-H) % factor, (-W) % factor
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="reflect")
    x = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None]
    y = F.interpolate(x, scale_factor=1.0 / factor, mode="bicubic", antialias=True, align_corners=False)
    out = y[0].numpy().transpose(1, 2, 0)
    return out[..., 0].copy() if squeeze else out.copy()


# ---------------------------------------------------------------------------
# training windows
# ---------------------------------------------------------------------------

@dataclass
class TrainingWindow:
    input_frames: np.ndarray  # (L, H, W, C) degraded, indices t-L+1..t
    target_frame: np.ndarray  # (H, W, C) clean frame t
    post_frames: np.ndarray  # (K, H, W, C) degraded, indices t+1..t+K
    global_frame: np.ndarray  # degraded frame t, downsampled
    priors: "object"
    clean_frames: np.ndarray = field(default=None, repr=False)  # (L, H, W, C) clean, same indices as input


def sample_training_window(seq_pair, t, L=7, K=2, quality_q=1.0, window_scale=1.0, global_factor=4):
    """Cut the window ending at target ``t`` from a (degraded, clean) pair."""
    from .umse import StructuralPriors

    degraded, clean = seq_pair
    T = len(degraded)
    if len(clean) != T:
        raise ValueError("degraded and clean sequences differ in length")
    if K < 1 or L < 1:
        raise ValueError("L and K must be >= 1")
    if t - L + 1 < 0 or t + K > T - 1:
        raise IndexError(f"target {t} needs frames {t - L + 1}..{t + K}, sequence has 0..{T - 1}")
    return TrainingWindow(
        input_frames=degraded.frames[t - L + 1:t + 1].copy(),
        target_frame=clean.frames[t].copy(),
        post_frames=degraded.frames[t + 1:t + K + 1].copy(),
        global_frame=downsample(degraded.frames[t], global_factor),
        priors=StructuralPriors(frame_index=t, sequence_length=T, window_scale=window_scale, quality_q=quality_q),
        clean_frames=clean.frames[t - L + 1:t + 1].copy(),
    )


def valid_targets(T, L=7, K=2):
    return [t for t in range(T) if t - L + 1 >= 0 and t + K <= T - 1]


# ---------------------------------------------------------------------------
# flow files
# ---------------------------------------------------------------------------

def write_flow_file(path, flow):
    H, W = flow.shape
    with open(path, "wb") as fh:
        fh.write(np.array([FLOW_MAGIC], dtype="<f4").tobytes())
        fh.write(np.array([W, H], dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(np.stack([flow.u, flow.v], axis=-1), dtype="<f4").tobytes())


def read_flow_file(path):
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FormatError(f"{path}: truncated header ({len(data)} bytes)")
    magic = np.frombuffer(data[:4], dtype="<f4")[0]
    if magic != np.float32(FLOW_MAGIC):
        raise FormatError(f"{path}: bad magic {magic!r}")
    W, H = (int(v) for v in np.frombuffer(data[4:12], dtype="<i4"))
    if W < 0 or H < 0 or len(data) != 12 + 8 * W * H:
        raise FormatError(f"{path}: payload of {len(data) - 12} bytes does not match {W}x{H}")
    arr = np.frombuffer(data[12:], dtype="<f4").reshape(H, W, 2)
    return FlowField(arr[..., 0], arr[..., 1])


# ---------------------------------------------------------------------------
# frame directories and manifests
# ---------------------------------------------------------------------------

def write_frames(directory, seq):
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, frame in enumerate(seq.frames):
        img = np.round(np.clip(frame, 0, 1) * 255).astype(np.uint8)
        if img.shape[-1] == 1:
            img = img[..., 0]
        path = directory / FRAME_PATTERN.format(t)
        Image.fromarray(img).save(path, format="PNG")
        paths.append(path)
    return paths


def list_frames(directory):
    directory = Path(directory)
    return sorted(p for p in directory.iterdir() if re.fullmatch(r"frame_\d{6}\.png", p.name))


def read_frames(directory, frame_rate=120.0):
    from PIL import Image

    paths = list_frames(directory)
    if not paths:
        raise FileNotFoundError(f"no frame_XXXXXX.png files in {directory}")
    frames = []
    for p in paths:
        with Image.open(p) as im:
            arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im, dtype=np.float64) / 255.0
        frames.append(arr)
    return FrameSequence(np.stack(frames), frame_rate)


def write_flows(directory, flows):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, flow in enumerate(flows):
        path = directory / FLOW_PATTERN.format(t)
        write_flow_file(path, flow)
        paths.append(path)
    return paths


def read_flows(directory):
    directory = Path(directory)
    paths = sorted(p for p in directory.iterdir() if re.fullmatch(r"flow_\d{6}\.flo", p.name))
    return [read_flow_file(p) for p in paths]


@dataclass
class ManifestEntry:
    clean_dir: str
    degraded_dir: str
    T: int
    H: int
    W: int
    degradation: DegradationSpec = field(default_factory=DegradationSpec)
    flow_dir: str = None


@dataclass
class DatasetManifest:
    entries: list
    root: Path = None  # directory the relative paths resolve against

    def resolve(self, rel):
        p = Path(rel)
        return p if p.is_absolute() or self.root is None else self.root / p

    def validate(self):
        for i, e in enumerate(self.entries):
            for name in ("clean_dir", "degraded_dir") + (("flow_dir",) if e.flow_dir else ()):
                d = self.resolve(getattr(e, name))
                if not d.is_dir():
                    raise FileNotFoundError(f"entry {i}: {name} {d} does not exist")
            for name in ("clean_dir", "degraded_dir"):
                n = len(list_frames(self.resolve(getattr(e, name))))
                if n != e.T:
                    raise FormatError(f"entry {i}: {name} holds {n} frames, manifest says {e.T}")
            if e.flow_dir:
                n = len(list(self.resolve(e.flow_dir).glob("flow_*.flo")))
                if n != e.T - 1:
                    raise FormatError(f"entry {i}: flow_dir holds {n} flow files, expected {e.T - 1}")

    def to_json(self):
        entries = []
        for e in self.entries:
            d = asdict(e)
            if d["flow_dir"] is None:
                del d["flow_dir"]
            entries.append(d)
        return json.dumps({"entries": entries}, indent=2, sort_keys=True) + "\n"


def save_manifest(path, manifest):
    Path(path).write_text(manifest.to_json())


def load_manifest(path, validate=True):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("entries"), list):
        raise FormatError(f"{path}: expected an object with an 'entries' list")
    entries = []
    for i, raw in enumerate(doc["entries"]):
        try:
            raw = dict(raw)
            raw["degradation"] = DegradationSpec(**raw.get("degradation", {}))
            entries.append(ManifestEntry(**raw))
        except TypeError as exc:
            raise FormatError(f"{path}: entry {i}: {exc}") from None
    manifest = DatasetManifest(entries, root=path.parent)
    if validate:
        manifest.validate()
    return manifest


@dataclass
class LoadedSequence:
    clean: FrameSequence
    degraded: FrameSequence
    flows: list  # FlowField per consecutive pair, or None
    degradation: DegradationSpec
    name: str = ""


def load_sequences(manifest):
    out = []
    for e in manifest.entries:
        flows = read_flows(manifest.resolve(e.flow_dir)) if e.flow_dir else None
        out.append(LoadedSequence(
            clean=read_frames(manifest.resolve(e.clean_dir)),
            degraded=read_frames(manifest.resolve(e.degraded_dir)),
            flows=flows,
            degradation=e.degradation,
            name=os.path.basename(os.path.normpath(str(manifest.resolve(e.clean_dir).parent))),
        ))
    return out
