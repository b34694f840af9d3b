"""Composite restoration objective: reconstruction, temporal warping, flow and noise terms."""

import math
from dataclasses import asdict, dataclass, field

import torch

from .errors import TrainingError
from .flow import warp


@dataclass
class LossWeights:
    lambda1: float = 1.0  # reconstruction
    lambda2: float = 0.5  # temporal consistency
    lambda3: float = 0.1  # flow consistency
    lambda_eps: float = 1.0  # noise prediction

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{k} must be >= 0")


@dataclass
class LossReport:
    total: float
    rec: float
    temp: float
    flow: float
    eps: float
    grad_norms: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def charbonnier(pred, target, eps=1e-3):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return torch.sqrt((pred - target) ** 2 + eps * eps).mean()


def temporal_consistency_loss(restored, flows):
    """Mean absolute residual between frame t+1 and frame t warped by flow t, averaged over pairs.

    restored: (T, C, H, W) or (B, T, C, H, W); flows: (T-1, 2, H, W) or (B, T-1, 2, H, W),
    each flow taking frame t to frame t+1.
    """
    if restored.ndim == 4:
        restored, flows = restored[None], flows[None]
    B, T, C, H, W = restored.shape
    if T < 2:
        raise ValueError("temporal consistency needs at least two frames")
    if flows.shape[1] != T - 1:
        raise ValueError(f"expected {T - 1} flows, got {flows.shape[1]}")
    prev = restored[:, :-1].reshape(B * (T - 1), C, H, W)
    nxt = restored[:, 1:].reshape(B * (T - 1), C, H, W)
    return (nxt - warp(prev, flows.reshape(B * (T - 1), 2, H, W))).abs().mean()


def flow_consistency_loss(estimated, reference):
    """Per-pixel L1 of the (u, v) difference summed over both components, averaged over pixels and pairs."""
    if len(estimated) != len(reference):
        raise ValueError(f"{len(estimated)} estimated flows vs {len(reference)} reference flows")
    if torch.is_tensor(estimated) and torch.is_tensor(reference):
        if estimated.shape != reference.shape:
            raise ValueError("flow shapes differ")
        chan = -3
        return (estimated - reference).abs().sum(dim=chan).mean()
    terms = []
    for e, r in zip(estimated, reference):
        if e.shape != r.shape:
            raise ValueError("flow shapes differ")
        terms.append((e - r).abs().sum(dim=-3).mean())
    return torch.stack(terms).mean()


def noise_loss(eps_hat, eps):
    return ((eps_hat - eps) ** 2).mean()


def total_loss(terms, weights=None):
    """Weighted sum of ``terms`` (keys rec, temp, flow, eps); returns (tensor, LossReport)."""
    weights = weights or LossWeights()
    values = {}
    for name in ("rec", "temp", "flow", "eps"):
        v = terms.get(name, 0.0)
        fv = float(v.detach()) if torch.is_tensor(v) else float(v)
        if not math.isfinite(fv):
            raise TrainingError(f"loss term {name!r} is not finite ({fv})", term=name)
        values[name] = v
    total = (weights.lambda1 * values["rec"] + weights.lambda2 * values["temp"]
             + weights.lambda3 * values["flow"] + weights.lambda_eps * values["eps"])
    as_float = {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in values.items()}
    report = LossReport(total=float(total.detach()) if torch.is_tensor(total) else float(total), **as_float)
    return total, report
