"""Training loop, optimisation policy, checkpoint archive and evaluation runs."""

import copy
import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .backbone import DenoiserConfig
from .data_synth import FrameSequence, generate_synthetic_sequence
from .diffusion import SamplerConfig
from .errors import FormatError, TopologyError, TrainingError
from .flow import block_match_oracle
from .losses import LossWeights
from .metrics import aggregate, evaluate_sequence
from .model import ABLATIONS, UMAD, ModelConfig, build_window, collate, restore_sequence

log = logging.getLogger(__name__)

PRECISIONS = ("single_for_training", "double_for_tests")
CKPT_MAGIC = b"UMADCKP1"


@dataclass
class TrainConfig:
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    epochs: int = 30
    batch: int = 4
    clip_norm: float = 1.0
    seed: int = 0
    precision: str = "single_for_training"
    ablation: str = "full"
    injection_mode: str = "early"
    base_channels: int = 8
    state_dim: int = 8
    patch_size: int = 64
    window: int = 7
    post_frames: int = 2
    diffusion_steps: int = 25
    residual_scale: float = 0.25
    flow_pairing: str = "previous"
    lambda1: float = 1.0
    lambda2: float = 0.5
    lambda3: float = 0.1
    lambda_eps: float = 1.0
    max_steps: int = None  # cap on optimisation steps (None: epochs x steps per epoch)
    temporal_pairs: int = None  # consecutive pairs per window in the flow-based terms (None: all)
    flow_stop_grad: bool = False
    image_weighting: str = "uniform"  # "uniform" or "snr" weighting of the image-space terms
    flow_pretrain_steps: int = 0
    flow_pretrain_lr: float = 1e-3
    flow_pretrain_unroll: int = 6  # refinement iterations unrolled during the curriculum
    checkpoint_every: int = 0  # 0: only the final checkpoint
    grad_diagnostics_every: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be > 0")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {PRECISIONS}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        if self.image_weighting not in ("uniform", "snr"):
            raise ValueError("image_weighting must be 'uniform' or 'snr'")
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be >= 1")

    @classmethod
    def full_scale(cls, **kw):
        return cls(**{"epochs": 200, "batch": 8, "patch_size": 512, **kw})

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config fields: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self):
        return asdict(self)

    def loss_weights(self):
        return LossWeights(self.lambda1, self.lambda2, self.lambda3, self.lambda_eps)

    def model_config(self):
        return ModelConfig(
            denoiser=DenoiserConfig(base_channels=self.base_channels, injection_mode=self.injection_mode,
                                    state_dim=self.state_dim),
            window=self.window, post_frames=self.post_frames, flow_pairing=self.flow_pairing,
            residual_scale=self.residual_scale, diffusion_steps=self.diffusion_steps,
        )

    @property
    def dtype(self):
        return torch.float64 if self.precision == "double_for_tests" else torch.float32


def fingerprint(config):
    d = config.to_dict() if hasattr(config, "to_dict") else config
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def cosine_lr(lr0, epoch, epochs):
    """Cosine annealing from ``lr0`` at epoch 0 to 0 at ``epochs`` (fractional epochs allowed)."""
    return 0.5 * lr0 * (1 + math.cos(math.pi * min(epoch, epochs) / epochs))


def clip_gradients(parameters, max_norm):
    """Rescale gradients to global norm <= ``max_norm``; returns the norm before clipping."""
    return float(torch.nn.utils.clip_grad_norm_(list(parameters), max_norm))


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class SequenceData:
    name: str
    degraded: np.ndarray  # (T, H, W, C)
    clean: np.ndarray
    ref_flows: np.ndarray  # (T-1, H, W, 2)
    quality_q: float = 1.0


def reference_flows(clean):
    return np.stack([block_match_oracle(clean[t], clean[t + 1]).as_array() for t in range(len(clean) - 1)])


def sequences_from_manifest(manifest):
    from .data_synth import load_sequences

    if not manifest.entries:
        raise ValueError("manifest has no entries")
    out = []
    for i, s in enumerate(load_sequences(manifest)):
        flows = (np.stack([f.as_array() for f in s.flows]) if s.flows is not None
                 else reference_flows(s.clean.frames))
        out.append(SequenceData(s.name or f"seq{i:03d}", s.degraded.frames, s.clean.frames, flows,
                                s.degradation.quality_q))
    return out


class WindowSampler:
    """All targets t in [L-1, T-1] of every sequence, shuffled per epoch, randomly cropped to ``patch``."""

    def __init__(self, sequences, L, K, patch, rng, dtype):
        self.sequences = sequences
        self.L, self.K, self.patch, self.rng, self.dtype = L, K, patch, rng, dtype
        self.items = [(i, t) for i, s in enumerate(sequences) for t in range(L - 1, len(s.degraded))]
        if not self.items:
            raise ValueError(f"no sequence has the {L} frames a window needs")

    def __len__(self):
        return len(self.items)

    def window(self, i, t):
        s = self.sequences[i]
        H, W = s.degraded.shape[1:3]
        p = min(self.patch, H, W)
        y0 = int(self.rng.integers(0, H - p + 1))
        x0 = int(self.rng.integers(0, W - p + 1))

        def crop(a):
            return a[:, y0:y0 + p, x0:x0 + p]

        return build_window(crop(s.degraded), t, self.L, self.K, s.quality_q, p / min(H, W),
                            clean=crop(s.clean), ref_flows=crop(s.ref_flows), dtype=self.dtype)

    def epoch(self, batch):
        order = self.rng.permutation(len(self.items))
        for k in range(0, len(order), batch):
            yield collate([self.window(*self.items[j]) for j in order[k:k + batch]])


# ---------------------------------------------------------------------------
# flow curriculum
# ---------------------------------------------------------------------------

def shift_pair_batch(rng, n, size=64, max_shift=3, textures=("noise", "checker", "sprites")):
    """Random textured pairs moved by integer shifts; returns (prev, next, flow) tensors in float64."""
    prev, nxt, flows = [], [], []
    for _ in range(n):
        d = rng.integers(-max_shift, max_shift + 1, size=2)
        tex = textures[int(rng.integers(len(textures)))]
        seq, gt = generate_synthetic_sequence(int(rng.integers(2 ** 31)), 2, size, size,
                                              shift=(float(d[0]), float(d[1])), texture=tex)
        prev.append(seq.frames[0])
        nxt.append(seq.frames[1])
        flows.append(gt[0].as_array())

    def tens(a):
        return torch.as_tensor(np.stack(a)).permute(0, 3, 1, 2)

    return tens(prev), tens(nxt), tens(flows)


def pretrain_flow(estimator, steps, seed=0, lr=1e-3, batch=4, size=64, max_shift=3, gamma=0.8, unroll=None,
                  log_fn=None):
    """Supervised curriculum on synthetic integer shifts; loss is the per-iteration flow L1, later iterations weighted more.

    ``unroll`` refinement iterations are trained (default: the estimator's own
    count). Unrolling past the inference count teaches the updater to hold a
    converged estimate still.
    """
    rng = np.random.default_rng(seed)
    n_inf = estimator.num_refinements
    if unroll is not None:
        estimator.num_refinements = unroll
    try:
        dtype = next(estimator.parameters()).dtype
        opt = torch.optim.Adam(estimator.parameters(), lr=lr)
        history = []
        for step in range(steps):
            prev, nxt, gt = (x.to(dtype) for x in shift_pair_batch(rng, batch, size, max_shift))
            preds = estimator(prev, nxt, return_all=True)
            n = len(preds)
            loss = sum(gamma ** (n - 1 - i) * (p - gt).abs().sum(1).mean() for i, p in enumerate(preds))
            opt.zero_grad()
            loss.backward()
            clip_gradients(estimator.parameters(), 1.0)
            opt.step()
            for g in opt.param_groups:
                g["lr"] = cosine_lr(lr, step + 1, steps)
            history.append(loss.item())
            if log_fn:
                log_fn({"flow_step": step + 1, "flow_loss": history[-1]})
    finally:
        estimator.num_refinements = n_inf
    return history


def endpoint_errors(estimator, prev, nxt, gt, margin=8):
    """Interior mean EPE after each refinement iteration."""
    with torch.no_grad():
        preds = estimator(prev, nxt, return_all=True)
    sl = (slice(None), slice(margin, -margin), slice(margin, -margin))
    return [float(torch.sqrt(((p - gt) ** 2).sum(1))[sl].mean()) for p in preds]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: UMAD
    records: list
    checkpoint: Path = None
    steps: int = 0


def _term_grad_norms(model, report_terms):
    params = [p for p in model.parameters() if p.requires_grad]
    out = {}
    for name, term in report_terms.items():
        if not torch.is_tensor(term) or not term.requires_grad:
            out[name] = 0.0
            continue
        grads = torch.autograd.grad(term, params, retain_graph=True, allow_unused=True)
        out[name] = float(torch.sqrt(sum((g ** 2).sum() for g in grads if g is not None)))
    return out


def _snapshot(model, opt):
    return copy.deepcopy(model.state_dict()), copy.deepcopy(opt.state_dict())


def train(config, manifest=None, out_dir=None, sequences=None, model=None, log_fn=None):
    """Train on ``manifest`` (or preloaded ``sequences``); returns a :class:`TrainResult`.

    A non-finite loss or gradient raises :class:`TrainingError` after writing the
    last good state to ``out_dir/last_good.ckpt``.
    """
    cfg = config
    if sequences is None:
        if manifest is None:
            raise ValueError("either a manifest or sequences must be given")
        sequences = sequences_from_manifest(manifest)
    if not sequences:
        raise ValueError("no training sequences")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(cfg.seed)
    model = model or UMAD(cfg.model_config())
    model.to(cfg.dtype)
    model.train()
    if cfg.flow_pretrain_steps:
        pretrain_flow(model.flow, cfg.flow_pretrain_steps, seed=cfg.seed, lr=cfg.flow_pretrain_lr,
                      unroll=cfg.flow_pretrain_unroll, log_fn=log_fn)

    gen = torch.Generator().manual_seed(cfg.seed)
    sampler = WindowSampler(sequences, cfg.window, cfg.post_frames, cfg.patch_size,
                            np.random.default_rng(cfg.seed), cfg.dtype)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2))
    per_epoch = math.ceil(len(sampler) / cfg.batch)
    total = cfg.epochs * per_epoch if cfg.max_steps is None else min(cfg.max_steps, cfg.epochs * per_epoch)
    weights = cfg.loss_weights()
    log_file = open(out_dir / "train_log.jsonl", "w") if out_dir is not None else None
    records = []
    good = _snapshot(model, opt)
    step = 0
    ckpt = None
    try:
        for epoch in range(cfg.epochs):
            for batch in sampler.epoch(cfg.batch):
                if step >= total:
                    break
                lr = cosine_lr(cfg.lr, step / per_epoch, cfg.epochs)
                for g in opt.param_groups:
                    g["lr"] = lr
                try:
                    loss, report, terms = model.training_losses(batch, gen, cfg.ablation, weights,
                                                                cfg.temporal_pairs, cfg.flow_stop_grad,
                                                                cfg.image_weighting, return_terms=True)
                except TrainingError as err:
                    raise _abort(err, model, opt, good, cfg, epoch, step, out_dir)
                if cfg.grad_diagnostics_every and step % cfg.grad_diagnostics_every == 0:
                    report.grad_norms = _term_grad_norms(model, terms)
                opt.zero_grad()
                loss.backward()
                # the flow estimator is clipped on its own so its loss cannot throttle the denoiser
                flow_ids = {id(p) for p in model.flow.parameters()}
                norm = math.hypot(clip_gradients([p for p in model.parameters() if id(p) not in flow_ids],
                                                 cfg.clip_norm),
                                  clip_gradients(model.flow.parameters(), cfg.clip_norm))
                if not math.isfinite(norm):
                    raise _abort(TrainingError(f"gradient norm is not finite ({norm})", term="grad"),
                                 model, opt, good, cfg, epoch, step, out_dir)
                opt.step()
                step += 1
                if not all(torch.isfinite(p).all() for p in model.parameters()):
                    raise _abort(TrainingError("parameters became non-finite", term="params"),
                                 model, opt, good, cfg, epoch, step, out_dir)
                good = _snapshot(model, opt)
                rec = {"step": step, "epoch": epoch, "lr": lr, "losses": report.to_dict(), "grad_norm": norm}
                records.append(rec)
                if log_file:
                    log_file.write(json.dumps(rec) + "\n")
                    log_file.flush()
                if log_fn:
                    log_fn(rec)
                if out_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    save_checkpoint(out_dir / f"step_{step:06d}.ckpt", model, opt, cfg, epoch, step)
            if step >= total:
                break
    finally:
        if log_file:
            log_file.close()
    if out_dir is not None:
        ckpt = out_dir / "final.ckpt"
        last = records[-1]["losses"] if records else {}
        save_checkpoint(ckpt, model, opt, cfg, epoch, step, metrics={"final_losses": last})
    return TrainResult(model, records, ckpt, step)


def _abort(err, model, opt, good, cfg, epoch, step, out_dir):
    model.load_state_dict(good[0])
    opt.load_state_dict(good[1])
    path = None
    if out_dir is not None:
        path = out_dir / "last_good.ckpt"
        save_checkpoint(path, model, opt, cfg, epoch, step, metrics={"aborted": str(err)})
    return TrainingError(f"{err} at step {step + 1}", term=getattr(err, "term", None), checkpoint=path)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: dict  # name -> numpy array
    model_config: dict
    fingerprint: str
    train_config: dict = None
    optimizer: dict = None
    epoch: int = 0
    step: int = 0
    metrics: dict = field(default_factory=dict)

    def build_model(self):
        model = UMAD(ModelConfig.from_dict(self.model_config))
        apply_checkpoint(model, self)
        return model


def _tensor_entries(arrays):
    index, chunks, offset = [], [], 0
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        raw = arr.astype(dt, copy=False).tobytes()
        index.append({"name": name, "shape": list(arr.shape), "dtype": dt.str, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return index, chunks


def save_checkpoint(path, model, optimizer=None, train_config=None, epoch=0, step=0, metrics=None):
    """Write magic, u64 index length, JSON index, then the raw little-endian buffers."""
    arrays = [(k, v.detach().cpu().numpy()) for k, v in model.state_dict().items()]
    opt_meta = None
    if optimizer is not None:
        sd = optimizer.state_dict()
        opt_meta = {"param_groups": sd["param_groups"], "state": {}}
        for pid, st in sd["state"].items():
            meta = {}
            for key, val in st.items():
                if torch.is_tensor(val) and val.ndim > 0:
                    arrays.append((f"__optim__/{pid}/{key}", val.detach().cpu().numpy()))
                    meta[key] = "buffer"
                else:
                    meta[key] = float(val)
            opt_meta["state"][str(pid)] = meta
    index, chunks = _tensor_entries(arrays)
    mcfg = model.config.to_dict()
    doc = {
        "format": 1, "tensors": index, "model_config": mcfg, "fingerprint": fingerprint(mcfg),
        "train_config": train_config.to_dict() if hasattr(train_config, "to_dict") else train_config,
        "train_fingerprint": fingerprint(train_config) if train_config is not None else None,
        "optimizer": opt_meta, "epoch": int(epoch), "step": int(step), "metrics": metrics or {},
    }
    head = json.dumps(doc, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for c in chunks:
            f.write(c)
    return path


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", data[8:16])
    if 16 + n > len(data):
        raise FormatError(f"{path}: index runs past the end of the file")
    try:
        doc = json.loads(data[16:16 + n])
    except ValueError as err:
        raise FormatError(f"{path}: unreadable index ({err})") from None
    body = data[16 + n:]
    expected = sum(e["nbytes"] for e in doc["tensors"])
    if len(body) != expected:
        raise FormatError(f"{path}: buffer section holds {len(body)} bytes, index describes {expected}")
    arrays = {}
    for e in doc["tensors"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        if count * dt.itemsize != e["nbytes"] or e["offset"] + e["nbytes"] > len(body):
            raise FormatError(f"{path}: tensor {e['name']!r} has an inconsistent length")
        arrays[e["name"]] = np.frombuffer(body, dtype=dt, count=count, offset=e["offset"]).reshape(e["shape"])
    params = {k: v for k, v in arrays.items() if not k.startswith("__optim__/")}
    opt = doc.get("optimizer")
    if opt is not None:
        opt = {"param_groups": opt["param_groups"], "state": {
            int(pid): {k: (torch.from_numpy(arrays[f"__optim__/{pid}/{k}"].copy()) if v == "buffer"
                           else torch.tensor(v)) for k, v in st.items()}
            for pid, st in opt["state"].items()}}
    return Checkpoint(params, doc["model_config"], doc["fingerprint"], doc.get("train_config"), opt,
                      doc.get("epoch", 0), doc.get("step", 0), doc.get("metrics", {}))


def apply_checkpoint(model, ckpt, optimizer=None):
    """Load parameters into ``model``; raises :class:`TopologyError` when the topology differs."""
    own = model.state_dict()
    mismatch = None
    for name, arr in ckpt.params.items():
        if name not in own:
            mismatch = f"{name} (absent from the model)"
        elif tuple(own[name].shape) != tuple(arr.shape):
            mismatch = f"{name} (checkpoint {tuple(arr.shape)} vs model {tuple(own[name].shape)})"
        if mismatch:
            break
    if mismatch is None:
        missing = [k for k in own if k not in ckpt.params]
        if missing:
            mismatch = f"{missing[0]} (absent from the checkpoint)"
    if mismatch is not None:
        raise TopologyError(f"checkpoint topology differs from the model; first mismatched parameter: {mismatch}")
    if fingerprint(model.config.to_dict()) != ckpt.fingerprint:
        raise TopologyError("checkpoint configuration fingerprint differs from the model configuration")
    model.load_state_dict({k: torch.from_numpy(v.copy()).to(own[k].dtype) for k, v in ckpt.params.items()})
    if optimizer is not None and ckpt.optimizer is not None:
        optimizer.load_state_dict(ckpt.optimizer)
    return model


def load_model(path, config=None):
    """Model from a checkpoint; with ``config`` the model is built from it and must match."""
    ckpt = load_checkpoint(path)
    if config is None:
        return ckpt.build_model()
    model = UMAD(config)
    return apply_checkpoint(model, ckpt)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    per_sequence: list  # MetricsReport per sequence, restored vs clean
    aggregate: object
    degraded: list = None  # MetricsReport per sequence, degraded vs clean
    degraded_aggregate: object = None
    restored: list = None  # FrameSequence per sequence


def model_restorer(model, seed=0, ablation="full", steps=None):
    sampler = SamplerConfig(T=steps or model.config.diffusion_steps, seed=seed)

    def run(deg, quality_q=1.0):
        return restore_sequence(model, deg, sampler, quality_q=quality_q, ablation=ablation)

    return run


def passthrough_restorer(deg, quality_q=1.0):
    return FrameSequence(deg.frames.copy(), deg.frame_rate)


def evaluate(checkpoint, manifest=None, metrics_config=None, seed=0, sequences=None, restorer=None, ablation=None):
    """Restore every manifest sequence and score it against its clean frames.

    ``checkpoint`` is a path, a :class:`Checkpoint`, a model, or None with an
    explicit ``restorer(degraded FrameSequence, quality_q) -> FrameSequence``.
    ``metrics_config`` keys: ``flow_fn``, ``tof_mode``, ``extra_metrics``.
    """
    mc = metrics_config or {}
    if sequences is None:
        sequences = sequences_from_manifest(manifest)
    if restorer is None:
        if isinstance(checkpoint, (str, Path)):
            checkpoint = load_checkpoint(checkpoint)
        model = checkpoint.build_model() if isinstance(checkpoint, Checkpoint) else checkpoint
        if ablation is None:
            ablation = (getattr(checkpoint, "train_config", None) or {}).get("ablation", "full") \
                if isinstance(checkpoint, Checkpoint) else "full"
        restorer = model_restorer(model, seed, ablation)
    kw = {"flow_fn": mc.get("flow_fn"), "tof_mode": mc.get("tof_mode", "reference"),
          "extra_metrics": mc.get("extra_metrics")}
    reports, base, outs = [], [], []
    for s in sequences:
        deg = FrameSequence(s.degraded)
        restored = restorer(deg, s.quality_q)
        outs.append(restored)
        reports.append(evaluate_sequence(restored, FrameSequence(s.clean), **kw))
        base.append(evaluate_sequence(deg, FrameSequence(s.clean), **kw))
    return EvalResult(reports, aggregate(reports), base, aggregate(base), outs)
