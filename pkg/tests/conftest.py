import numpy as np
import pytest
import torch


def fd_grad_check(fn, inputs, eps=1e-6, max_coords=40, seed=0):
    """Relative error between autograd and central differences of scalar ``fn(*inputs)``.

    Compares on up to ``max_coords`` randomly chosen coordinates per input;
    the error is ||g_auto - g_fd|| / max(||g_fd||, 1e-12) over all compared
    coordinates.
    """
    inputs = [x.detach().clone().double().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    auto = torch.autograd.grad(out, inputs, allow_unused=True)
    rng = np.random.default_rng(seed)
    a_all, n_all = [], []
    for x, g in zip(inputs, auto):
        g = torch.zeros_like(x) if g is None else g
        flat = x.detach().view(-1)
        idx = rng.choice(flat.numel(), size=min(max_coords, flat.numel()), replace=False)
        for i in idx:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                hi = fn(*inputs).item()
                flat[i] = orig - eps
                lo = fn(*inputs).item()
                flat[i] = orig
            n_all.append((hi - lo) / (2 * eps))
            a_all.append(g.reshape(-1)[i].item())
    a, n = np.array(a_all), np.array(n_all)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(n), 1e-12))


def fd_param_check(module, fn, eps=1e-6, max_coords=40, seed=0):
    """Same check over the parameters of ``module`` for a scalar ``fn()``."""
    params = [p for p in module.parameters() if p.requires_grad]
    out = fn()
    auto = torch.autograd.grad(out, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for p in params])
    picks = rng.choice(sizes.sum(), size=min(max_coords, sizes.sum()), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    a_all, n_all = [], []
    for k in picks:
        j = int(np.searchsorted(offsets, k, side="right") - 1)
        i = int(k - offsets[j])
        p, g = params[j], auto[j]
        flat = p.data.view(-1)
        orig = flat[i].item()
        with torch.no_grad():
            flat[i] = orig + eps
            hi = fn().item()
            flat[i] = orig - eps
            lo = fn().item()
            flat[i] = orig
        n_all.append((hi - lo) / (2 * eps))
        a_all.append(0.0 if g is None else g.reshape(-1)[i].item())
    a, n = np.array(a_all), np.array(n_all)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(n), 1e-12))


@pytest.fixture
def double_precision():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training runs")


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
