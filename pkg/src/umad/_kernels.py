"""Loop-heavy numeric kernels.

Each kernel has a numba ``@njit`` implementation and a pure-numpy fallback
with the same signature. The numba path is used when numba imports and the
environment variable ``UMAD_DISABLE_NUMBA`` is unset (or ``0``). Call
:func:`set_backend` to switch at runtime, e.g. to compare both paths.
"""

import os

import numpy as np

_ENV_DISABLED = os.environ.get("UMAD_DISABLE_NUMBA", "0").strip().lower() in ("1", "true", "yes", "on")

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

_use_numba = HAVE_NUMBA and not _ENV_DISABLED


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"``; returns the previous backend name."""
    global _use_numba
    prev = backend()
    if name == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba is not available")
        _use_numba = True
    elif name == "numpy":
        _use_numba = False
    else:
        raise ValueError(f"unknown backend {name!r}")
    return prev


def backend():
    return "numba" if _use_numba else "numpy"


def candidate_offsets(radius):
    """Integer (u, v) offsets in tie-break order: |u|+|v|, then u, then v."""
    r = int(radius)
    cands = [(u, v) for u in range(-r, r + 1) for v in range(-r, r + 1)]
    cands.sort(key=lambda c: (abs(c[0]) + abs(c[1]), c[0], c[1]))
    return np.asarray(cands, dtype=np.int64)


# ---------------------------------------------------------------------------
# block matching (sum of absolute differences, clamp-to-edge sampling)
# ---------------------------------------------------------------------------

def _block_match_numpy(prev, nxt, offsets, block):
    H, W, _ = nxt.shape
    ys = np.arange(H)
    xs = np.arange(W)
    row_starts = np.arange(0, H, block)
    col_starts = np.arange(0, W, block)
    best = None
    best_idx = None
    for k in range(offsets.shape[0]):
        u, v = offsets[k]
        yy = np.clip(ys + v, 0, H - 1)
        xx = np.clip(xs + u, 0, W - 1)
        diff = np.abs(nxt - prev[yy][:, xx]).sum(axis=2)
        sad = np.add.reduceat(np.add.reduceat(diff, row_starts, axis=0), col_starts, axis=1)
        if best is None:
            best = sad
            best_idx = np.zeros(sad.shape, dtype=np.int64)
        else:
            better = sad < best
            best = np.where(better, sad, best)
            best_idx = np.where(better, k, best_idx)
    return offsets[best_idx]


def _block_match_loops(prev, nxt, offsets, block):
    H, W, C = nxt.shape
    nby = (H + block - 1) // block
    nbx = (W + block - 1) // block
    out = np.zeros((nby, nbx, 2), dtype=np.int64)
    for by in range(nby):
        y0 = by * block
        y1 = min(y0 + block, H)
        for bx in range(nbx):
            x0 = bx * block
            x1 = min(x0 + block, W)
            best = np.inf
            best_k = 0
            for k in range(offsets.shape[0]):
                u = offsets[k, 0]
                v = offsets[k, 1]
                sad = 0.0
                for y in range(y0, y1):
                    ys = min(max(y + v, 0), H - 1)
                    for x in range(x0, x1):
                        xs = min(max(x + u, 0), W - 1)
                        for c in range(C):
                            sad += abs(nxt[y, x, c] - prev[ys, xs, c])
                if sad < best:
                    best = sad
                    best_k = k
            out[by, bx, 0] = offsets[best_k, 0]
            out[by, bx, 1] = offsets[best_k, 1]
    return out


# ---------------------------------------------------------------------------
# selective state-space recurrence, explicit per-step loop
# ---------------------------------------------------------------------------

def _ssm_recurrence_loops(x, delta, A, B, C, D):
    nb, L, E = x.shape
    N = A.shape[1]
    y = np.zeros((nb, L, E))
    for b in range(nb):
        for e in range(E):
            h = np.zeros(N)
            for k in range(L):
                acc = 0.0
                for n in range(N):
                    h[n] = np.exp(delta[b, k, e] * A[e, n]) * h[n] + delta[b, k, e] * B[b, k, n] * x[b, k, e]
                    acc += C[b, k, n] * h[n]
                y[b, k, e] = acc + D[e] * x[b, k, e]
    return y


def _ssm_recurrence_numpy(x, delta, A, B, C, D):
    nb, L, E = x.shape
    h = np.zeros((nb, E, A.shape[1]))
    y = np.empty((nb, L, E))
    for k in range(L):
        dA = np.exp(delta[:, k, :, None] * A[None])
        h = dA * h + delta[:, k, :, None] * B[:, k, None, :] * x[:, k, :, None]
        y[:, k] = (h * C[:, k, None, :]).sum(-1) + D[None] * x[:, k]
    return y


# ---------------------------------------------------------------------------
# SSIM by direct per-window weighted sums
# ---------------------------------------------------------------------------

def _ssim_map_loops(a, b, w, c1, c2):
    H, W = a.shape
    k = w.shape[0]
    oh = H - k + 1
    ow = W - k + 1
    out = np.zeros((oh, ow))
    for i in range(oh):
        for j in range(ow):
            ma = 0.0
            mb = 0.0
            for p in range(k):
                for q in range(k):
                    ma += w[p, q] * a[i + p, j + q]
                    mb += w[p, q] * b[i + p, j + q]
            va = 0.0
            vb = 0.0
            cov = 0.0
            for p in range(k):
                for q in range(k):
                    da = a[i + p, j + q] - ma
                    db = b[i + p, j + q] - mb
                    va += w[p, q] * da * da
                    vb += w[p, q] * db * db
                    cov += w[p, q] * da * db
            out[i, j] = ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
    return out


def _ssim_map_numpy(a, b, w, c1, c2):
    k = w.shape[0]
    wa = np.lib.stride_tricks.sliding_window_view(a, (k, k))
    wb = np.lib.stride_tricks.sliding_window_view(b, (k, k))
    ma = np.einsum("ijpq,pq->ij", wa, w)
    mb = np.einsum("ijpq,pq->ij", wb, w)
    da = wa - ma[..., None, None]
    db = wb - mb[..., None, None]
    va = np.einsum("ijpq,pq->ij", da * da, w)
    vb = np.einsum("ijpq,pq->ij", db * db, w)
    cov = np.einsum("ijpq,pq->ij", da * db, w)
    return ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))


# ---------------------------------------------------------------------------
# selective scan core: h_k = a_k * h_{k-1} + u_k * B_k, y_k = sum_s C_k h_k
# ---------------------------------------------------------------------------

def _scan_fwd_loops(a, u, B, C, y, h):
    N, L, E, S = a.shape
    for n in range(N):
        for e in range(E):
            acc = y[n, 0, e]
            for s in range(S):
                cur = u[n, 0, e] * B[n, 0, s]
                h[n, 0, e, s] = cur
                acc += C[n, 0, s] * cur
            y[n, 0, e] = acc
            for k in range(1, L):
                uk = u[n, k, e]
                acc = y[n, k, e]
                for s in range(S):
                    cur = a[n, k, e, s] * h[n, k - 1, e, s] + uk * B[n, k, s]
                    h[n, k, e, s] = cur
                    acc += C[n, k, s] * cur
                y[n, k, e] = acc


def _scan_bwd_loops(a, u, B, C, h, gy, ga, gu, gB, gC):
    N, L, E, S = a.shape
    g = np.zeros(S, dtype=h.dtype)
    for n in range(N):
        for e in range(E):
            g[:] = 0
            for k in range(L - 1, -1, -1):
                gyk = gy[n, k, e]
                uk = u[n, k, e]
                gu_acc = gu[n, k, e]
                for s in range(S):
                    gC[n, k, s] += gyk * h[n, k, e, s]
                    gs = g[s] + gyk * C[n, k, s]
                    gu_acc += gs * B[n, k, s]
                    gB[n, k, s] += gs * uk
                    g[s] = gs
                gu[n, k, e] = gu_acc
                if k > 0:
                    for s in range(S):
                        ga[n, k, e, s] = g[s] * h[n, k - 1, e, s]
                        g[s] *= a[n, k, e, s]


def _scan_fwd_numpy(a, u, B, C, y, h):
    h[:, 0] = u[:, 0, :, None] * B[:, 0, None, :]
    for k in range(1, a.shape[1]):
        h[:, k] = a[:, k] * h[:, k - 1] + u[:, k, :, None] * B[:, k, None, :]
    y += np.einsum("nles,nls->nle", h, C)


def _scan_bwd_numpy(a, u, B, C, h, gy, ga, gu, gB, gC):
    L = a.shape[1]
    gC += np.einsum("nle,nles->nls", gy, h)
    g = np.empty_like(h)
    g[:, L - 1] = gy[:, L - 1, :, None] * C[:, L - 1, None, :]
    for k in range(L - 2, -1, -1):
        g[:, k] = gy[:, k, :, None] * C[:, k, None, :] + a[:, k + 1] * g[:, k + 1]
    gu += np.einsum("nles,nls->nle", g, B)
    gB += np.einsum("nles,nle->nls", g, u)
    ga[:, 1:] = g[:, 1:] * h[:, :-1]


if HAVE_NUMBA:
    _block_match_jit = njit(cache=True)(_block_match_loops)
    _ssm_recurrence_jit = njit(cache=True)(_ssm_recurrence_loops)
    _ssim_map_jit = njit(cache=True)(_ssim_map_loops)
    _scan_fwd_jit = njit(cache=True, fastmath=True)(_scan_fwd_loops)
    _scan_bwd_jit = njit(cache=True, fastmath=True)(_scan_bwd_loops)


def block_match(prev, nxt, radius, block):
    """Per-block integer offset (u, v) minimising SAD of ``nxt`` vs ``prev`` shifted.

    Returns an int64 array of shape (ceil(H/block), ceil(W/block), 2).
    """
    prev = np.ascontiguousarray(prev, dtype=np.float64)
    nxt = np.ascontiguousarray(nxt, dtype=np.float64)
    offsets = candidate_offsets(radius)
    if _use_numba:
        return _block_match_jit(prev, nxt, offsets, int(block))
    return _block_match_numpy(prev, nxt, offsets, int(block))


def ssm_recurrence(x, delta, A, B, C, D):
    args = [np.ascontiguousarray(a, dtype=np.float64) for a in (x, delta, A, B, C, D)]
    if _use_numba:
        return _ssm_recurrence_jit(*args)
    return _ssm_recurrence_numpy(*args)


def ssim_map(a, b, window, c1, c2):
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    window = np.ascontiguousarray(window, dtype=np.float64)
    if _use_numba:
        return _ssim_map_jit(a, b, window, float(c1), float(c2))
    return _ssim_map_numpy(a, b, window, float(c1), float(c2))


def selective_scan_forward(a, u, B, C):
    """Returns (y, states) for decay ``a`` (N, L, E, S), drive ``u`` (N, L, E), B, C (N, L, S)."""
    N, L, E, S = a.shape
    y = np.zeros((N, L, E), dtype=a.dtype)
    h = np.empty((N, L, E, S), dtype=a.dtype)
    (_scan_fwd_jit if _use_numba else _scan_fwd_numpy)(a, u, B, C, y, h)
    return y, h


def selective_scan_backward(a, u, B, C, h, gy):
    """Gradients (ga, gu, gB, gC) of sum(gy * y)."""
    grads = [np.empty_like(a)] + [np.zeros_like(t) for t in (u, B, C)]
    grads[0][:, 0] = 0  # the first step has no predecessor state
    (_scan_bwd_jit if _use_numba else _scan_bwd_numpy)(a, u, B, C, h, gy, *grads)
    return tuple(grads)
