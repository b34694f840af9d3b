import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_grad_check
from umad.data_synth import DegradationSpec, degrade, generate_synthetic_sequence
from umad.errors import TrainingError
from umad.losses import (LossWeights, charbonnier, flow_consistency_loss, noise_loss, temporal_consistency_loss,
                         total_loss)


def test_weights_defaults_and_validation():
    w = LossWeights()
    assert (w.lambda1, w.lambda2, w.lambda3, w.lambda_eps) == (1.0, 0.5, 0.1, 1.0)
    with pytest.raises(ValueError):
        LossWeights(lambda2=-0.1)


def test_charbonnier_closed_forms():
    x = torch.rand(2, 3, 4, 4, dtype=torch.float64)
    assert charbonnier(x, x).item() == pytest.approx(1e-3, abs=1e-15)
    assert charbonnier(x + 1, x).item() == pytest.approx(math.sqrt(1 + 1e-6), abs=1e-12)
    with pytest.raises(ValueError):
        charbonnier(x, x[:1])


def test_charbonnier_pointwise_gradients():
    eps = 1e-3
    for val, expected in ((0.0, 0.0), (eps, 1 / math.sqrt(2))):
        p = torch.tensor([val], dtype=torch.float64, requires_grad=True)
        (g,) = torch.autograd.grad(charbonnier(p, torch.zeros(1, dtype=torch.float64)), p)
        assert g.item() == pytest.approx(expected, abs=1e-12)
        # same value through central differences
        h = 1e-9
        fd = (charbonnier(p.detach() + h, torch.zeros(1, dtype=torch.float64))
              - charbonnier(p.detach() - h, torch.zeros(1, dtype=torch.float64))) / (2 * h)
        assert fd.item() == pytest.approx(expected, abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_charbonnier_lower_bound(seed):
    g = torch.Generator().manual_seed(seed)
    a = torch.rand(3, 4, generator=g, dtype=torch.float64)
    b = torch.rand(3, 4, generator=g, dtype=torch.float64)
    assert charbonnier(a, b).item() > 1e-3


def test_temporal_zero_cases():
    x = torch.rand(1, 3, 6, 6, dtype=torch.float64).expand(4, 3, 6, 6)
    assert temporal_consistency_loss(x, torch.zeros(3, 2, 6, 6, dtype=torch.float64)).item() == 0
    from umad.flow import warp
    base = torch.rand(1, 3, 6, 6, dtype=torch.float64)
    flow = 0.3 * torch.randn(1, 2, 6, 6, dtype=torch.float64)
    seq = torch.cat([base, warp(base, flow)])
    assert temporal_consistency_loss(seq, flow).item() < 1e-6
    with pytest.raises(ValueError):
        temporal_consistency_loss(base, torch.zeros(0, 2, 6, 6))
    with pytest.raises(ValueError):
        temporal_consistency_loss(seq, torch.zeros(2, 2, 6, 6, dtype=torch.float64))


def test_temporal_hand_case():
    # 2x2 single-channel, flow (1, 0): frame 2 at (y, x) is compared to frame 1 at (y, min(x + 1, 1))
    f1 = torch.tensor([[1.0, 2.0], [3.0, 4.0]], dtype=torch.float64)
    f2 = torch.tensor([[2.0, 0.0], [4.0, 5.0]], dtype=torch.float64)
    seq = torch.stack([f1, f2])[:, None]
    flow = torch.zeros(1, 2, 2, 2, dtype=torch.float64)
    flow[:, 0] = 1.0
    warped = [[2.0, 2.0], [4.0, 4.0]]
    manual = (abs(2 - warped[0][0]) + abs(0 - warped[0][1]) + abs(4 - warped[1][0]) + abs(5 - warped[1][1])) / 4
    assert temporal_consistency_loss(seq, flow).item() == pytest.approx(manual, abs=1e-15)
    assert manual == 0.75


def test_flow_consistency_values():
    ref = torch.zeros(3, 2, 5, 5, dtype=torch.float64)
    assert flow_consistency_loss(ref, ref).item() == 0
    est = ref.clone()
    est[:, 0] = 1.0
    assert flow_consistency_loss(est, ref).item() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        flow_consistency_loss(est, ref[:2])
    # independent elementwise summation
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 2, 3, 4)), rng.normal(size=(2, 2, 3, 4))
    total = 0.0
    for t in range(2):
        s = 0.0
        for y in range(3):
            for x in range(4):
                s += abs(a[t, 0, y, x] - b[t, 0, y, x]) + abs(a[t, 1, y, x] - b[t, 1, y, x])
        total += s / 12
    got = flow_consistency_loss(torch.from_numpy(a), torch.from_numpy(b)).item()
    assert got == pytest.approx(total / 2, abs=1e-12)
    as_list = flow_consistency_loss(list(torch.from_numpy(a)), list(torch.from_numpy(b))).item()
    assert as_list == pytest.approx(got, abs=1e-12)


def test_total_loss_arithmetic_and_errors():
    t, rep = total_loss({"rec": 0.2, "temp": 0.1, "flow": 0.05, "eps": 0.0})
    assert t == pytest.approx(0.255, abs=1e-12) and rep.total == pytest.approx(0.255, abs=1e-12)
    zero, _ = total_loss({"rec": 3.0, "temp": 2.0, "flow": 1.0, "eps": 4.0}, LossWeights(0, 0, 0, 0))
    assert zero == 0
    with pytest.raises(TrainingError) as info:
        total_loss({"rec": 0.1, "temp": torch.tensor(float("nan")), "flow": 0.0, "eps": 0.0})
    assert info.value.term == "temp" and "temp" in str(info.value)


@settings(max_examples=50, deadline=None)
@given(terms=st.lists(st.floats(0, 10), min_size=4, max_size=4),
       w1=st.lists(st.floats(0, 5), min_size=4, max_size=4),
       w2=st.lists(st.floats(0, 5), min_size=4, max_size=4))
def test_total_loss_report_and_linearity(terms, w1, w2):
    names = ("rec", "temp", "flow", "eps")
    d = dict(zip(names, terms))
    t1, r1 = total_loss(d, LossWeights(*w1))
    t2, _ = total_loss(d, LossWeights(*w2))
    t12, _ = total_loss(d, LossWeights(*(a + b for a, b in zip(w1, w2))))
    assert abs(r1.total - (w1[0] * r1.rec + w1[1] * r1.temp + w1[2] * r1.flow + w1[3] * r1.eps)) < 1e-6
    assert t12 == pytest.approx(t1 + t2, rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_loss_gradients(seed):
    g = torch.Generator().manual_seed(seed)
    a = torch.rand(3, 3, 4, 4, generator=g, dtype=torch.float64)
    b = torch.rand(3, 3, 4, 4, generator=g, dtype=torch.float64)
    flows = 0.2 + 0.5 * torch.rand(2, 2, 4, 4, generator=g, dtype=torch.float64)
    ref = torch.rand(2, 2, 4, 4, generator=g, dtype=torch.float64)
    assert fd_grad_check(charbonnier, [a, b], seed=seed) < 1e-4
    assert fd_grad_check(temporal_consistency_loss, [a, flows], seed=seed) < 1e-4
    assert fd_grad_check(flow_consistency_loss, [flows, ref], seed=seed) < 1e-4
    assert fd_grad_check(noise_loss, [a, b], seed=seed) < 1e-4


def test_temporal_loss_tracks_flicker_level():
    seq, _ = generate_synthetic_sequence(5, 6, 32, 32)
    zeros = torch.zeros(5, 2, 32, 32, dtype=torch.float64)
    values = []
    for amp in (0.2, 0.15, 0.1, 0.05, 0.0):
        spec = DegradationSpec(noise_sigma=0.0, blur_sigma=0.0, quality_q=1.0, flicker_amp=amp)
        frames = degrade(seq, spec, seed=1).frames
        x = torch.from_numpy(frames).permute(0, 3, 1, 2)
        values.append(temporal_consistency_loss(x, zeros).item())
    assert all(b < a for a, b in zip(values, values[1:]))
    assert values[-1] == 0
