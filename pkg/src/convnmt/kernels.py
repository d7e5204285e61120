"""Hot inner-loop kernels with a numba JIT path and a pure-numpy fallback.

Backend selection: the CONVNMT_BACKEND environment variable picks "numba"
(default when numba imports), "numpy" (vectorized fallback), or "auto".
Tests and benchmarks can switch at runtime with `use_backend(...)`.

Only loops that BLAS cannot cover live here: fused LSTM gate pointwise math,
masked row softmax, embedding scatter-add, and row cross-entropy. Matrix
multiplies and convolutions ride numpy/BLAS in both backends.

All kernels use fixed sequential summation order so results are
deterministic for a given backend and shape.
"""

from __future__ import annotations

import os
from contextlib import contextmanager

import numpy as np

_ENV_FLAG = "CONVNMT_BACKEND"

try:
    from numba import njit

    _HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAS_NUMBA = False

    def njit(*args, **kwargs):
        def deco(f):
            return f

        return deco if not args or kwargs else deco(args[0])


# -----------------------------------------------------------------------------
# numpy fallback implementations (vectorized)
# -----------------------------------------------------------------------------


def _softmax_rows_fwd_np(x: np.ndarray) -> np.ndarray:
    """Row softmax with -inf masking. x (m, n) -> y (m, n); -inf maps to exact 0."""
    finite = np.isfinite(x)
    m = np.max(np.where(finite, x, -np.inf), axis=1, keepdims=True)
    # exp(-inf) == 0.0 exactly, so masked entries drop out without overflow
    y = np.exp(np.where(finite, x - m, -np.inf))
    y /= y.sum(axis=1, keepdims=True)
    return y


def _softmax_rows_bwd_np(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """gx = y * (gy - sum_row(y * gy)). Masked entries have y == 0 so gx == 0."""
    dot = (y * gy).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def _lstm_pointwise_fwd_np(gates: np.ndarray, c_prev: np.ndarray):
    """Gate blocks ordered (input, forget, candidate, output).

    gates (4h,), c_prev (h,) -> (h_new, c_new, i, f, g, o, tc) with
    c_new = f*c_prev + i*g, h_new = o*tanh(c_new), tc = tanh(c_new).
    """
    h = c_prev.shape[0]
    i = 1.0 / (1.0 + np.exp(-gates[:h]))
    f = 1.0 / (1.0 + np.exp(-gates[h : 2 * h]))
    g = np.tanh(gates[2 * h : 3 * h])
    o = 1.0 / (1.0 + np.exp(-gates[3 * h :]))
    c_new = f * c_prev + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    return h_new, c_new, i, f, g, o, tc


def _lstm_pointwise_bwd_np(gh, gc, c_prev, i, f, g, o, tc):
    """Backward of the fused gate math.

    gh/gc are grads on h_new/c_new. Returns (ggates (4h,), gc_prev (h,)).
    """
    go = gh * tc
    gc_total = gc + gh * o * (1.0 - tc * tc)
    gi = gc_total * g
    gf = gc_total * c_prev
    gg = gc_total * i
    gc_prev = gc_total * f
    ggates = np.concatenate(
        [gi * i * (1.0 - i), gf * f * (1.0 - f), gg * (1.0 - g * g), go * o * (1.0 - o)]
    )
    return ggates, gc_prev


def _scatter_add_rows_np(table_grad: np.ndarray, ids: np.ndarray, grows: np.ndarray) -> None:
    """table_grad[ids[t]] += grows[t], repeated ids accumulate. In place."""
    np.add.at(table_grad, ids, grows)


def _cross_entropy_fwd_np(logits: np.ndarray, targets: np.ndarray):
    """Summed NLL over rows: sum_t (logsumexp(logits[t]) - logits[t, targets[t]]).

    Returns (nll_total, probs) with probs stashed for the backward pass.
    """
    m = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - m)
    z = ex.sum(axis=1, keepdims=True)
    probs = ex / z
    lse = m[:, 0] + np.log(z[:, 0])
    picked = logits[np.arange(logits.shape[0]), targets]
    return float((lse - picked).sum()), probs


def _cross_entropy_bwd_np(probs: np.ndarray, targets: np.ndarray, gscale: float) -> np.ndarray:
    """glogits = gscale * (probs - onehot(targets))."""
    g = probs * gscale
    g[np.arange(probs.shape[0]), targets] -= gscale
    return g


# -----------------------------------------------------------------------------
# numba implementations (explicit loops, sequential reduction order)
# -----------------------------------------------------------------------------


@njit(cache=True)
def _softmax_rows_fwd_nb(x):
    rows, cols = x.shape
    y = np.empty((rows, cols))
    for r in range(rows):
        m = -np.inf
        for c in range(cols):
            if x[r, c] > m:
                m = x[r, c]
        s = 0.0
        for c in range(cols):
            if x[r, c] == -np.inf:
                y[r, c] = 0.0
            else:
                y[r, c] = np.exp(x[r, c] - m)
            s += y[r, c]
        for c in range(cols):
            y[r, c] /= s
    return y


@njit(cache=True)
def _softmax_rows_bwd_nb(y, gy):
    rows, cols = y.shape
    gx = np.empty((rows, cols))
    for r in range(rows):
        dot = 0.0
        for c in range(cols):
            dot += y[r, c] * gy[r, c]
        for c in range(cols):
            gx[r, c] = y[r, c] * (gy[r, c] - dot)
    return gx


@njit(cache=True)
def _lstm_pointwise_fwd_nb(gates, c_prev):
    h = c_prev.shape[0]
    i = np.empty(h)
    f = np.empty(h)
    g = np.empty(h)
    o = np.empty(h)
    c_new = np.empty(h)
    tc = np.empty(h)
    h_new = np.empty(h)
    for j in range(h):
        i[j] = 1.0 / (1.0 + np.exp(-gates[j]))
        f[j] = 1.0 / (1.0 + np.exp(-gates[h + j]))
        g[j] = np.tanh(gates[2 * h + j])
        o[j] = 1.0 / (1.0 + np.exp(-gates[3 * h + j]))
        c_new[j] = f[j] * c_prev[j] + i[j] * g[j]
        tc[j] = np.tanh(c_new[j])
        h_new[j] = o[j] * tc[j]
    return h_new, c_new, i, f, g, o, tc


@njit(cache=True)
def _lstm_pointwise_bwd_nb(gh, gc, c_prev, i, f, g, o, tc):
    h = c_prev.shape[0]
    ggates = np.empty(4 * h)
    gc_prev = np.empty(h)
    for j in range(h):
        go = gh[j] * tc[j]
        gct = gc[j] + gh[j] * o[j] * (1.0 - tc[j] * tc[j])
        gi = gct * g[j]
        gf = gct * c_prev[j]
        gg = gct * i[j]
        gc_prev[j] = gct * f[j]
        ggates[j] = gi * i[j] * (1.0 - i[j])
        ggates[h + j] = gf * f[j] * (1.0 - f[j])
        ggates[2 * h + j] = gg * (1.0 - g[j] * g[j])
        ggates[3 * h + j] = go * o[j] * (1.0 - o[j])
    return ggates, gc_prev


@njit(cache=True)
def _scatter_add_rows_nb(table_grad, ids, grows):
    n, d = grows.shape
    for t in range(n):
        row = ids[t]
        for j in range(d):
            table_grad[row, j] += grows[t, j]


@njit(cache=True)
def _cross_entropy_fwd_nb(logits, targets):
    rows, cols = logits.shape
    probs = np.empty((rows, cols))
    nll = 0.0
    for r in range(rows):
        m = logits[r, 0]
        for c in range(1, cols):
            if logits[r, c] > m:
                m = logits[r, c]
        s = 0.0
        for c in range(cols):
            probs[r, c] = np.exp(logits[r, c] - m)
            s += probs[r, c]
        for c in range(cols):
            probs[r, c] /= s
        nll += m + np.log(s) - logits[r, targets[r]]
    return nll, probs


@njit(cache=True)
def _cross_entropy_bwd_nb(probs, targets, gscale):
    rows, cols = probs.shape
    g = np.empty((rows, cols))
    for r in range(rows):
        for c in range(cols):
            g[r, c] = probs[r, c] * gscale
        g[r, targets[r]] -= gscale
    return g


# -----------------------------------------------------------------------------
# Backend dispatch
# -----------------------------------------------------------------------------

_TABLES = {
    "numpy": {
        "softmax_rows_fwd": _softmax_rows_fwd_np,
        "softmax_rows_bwd": _softmax_rows_bwd_np,
        "lstm_pointwise_fwd": _lstm_pointwise_fwd_np,
        "lstm_pointwise_bwd": _lstm_pointwise_bwd_np,
        "scatter_add_rows": _scatter_add_rows_np,
        "cross_entropy_fwd": _cross_entropy_fwd_np,
        "cross_entropy_bwd": _cross_entropy_bwd_np,
    }
}

if _HAS_NUMBA:
    _TABLES["numba"] = {
        "softmax_rows_fwd": _softmax_rows_fwd_nb,
        "softmax_rows_bwd": _softmax_rows_bwd_nb,
        "lstm_pointwise_fwd": _lstm_pointwise_fwd_nb,
        "lstm_pointwise_bwd": _lstm_pointwise_bwd_nb,
        "scatter_add_rows": _scatter_add_rows_nb,
        "cross_entropy_fwd": _cross_entropy_fwd_nb,
        "cross_entropy_bwd": _cross_entropy_bwd_nb,
    }


def _resolve_backend(name: str) -> str:
    if name == "auto":
        return "numba" if _HAS_NUMBA else "numpy"
    if name == "numba" and not _HAS_NUMBA:
        raise RuntimeError("CONVNMT_BACKEND=numba but numba is not importable")
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r} (use numba, numpy or auto)")
    return name


_ACTIVE_NAME = _resolve_backend(os.environ.get(_ENV_FLAG, "auto"))
_ACTIVE = _TABLES[_ACTIVE_NAME]


def active_backend() -> str:
    """Name of the kernel backend currently in use."""
    return _ACTIVE_NAME


def available_backends() -> list:
    return sorted(_TABLES)


def set_backend(name: str) -> None:
    """Switch the kernel backend globally ("numba", "numpy" or "auto")."""
    global _ACTIVE_NAME, _ACTIVE
    _ACTIVE_NAME = _resolve_backend(name)
    _ACTIVE = _TABLES[_ACTIVE_NAME]


@contextmanager
def use_backend(name: str):
    """Temporarily switch backends, e.g. for parity tests or benchmarks."""
    prev = _ACTIVE_NAME
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


def warmup() -> None:
    """Trigger JIT compilation of every kernel so timings exclude compile cost."""
    if _ACTIVE_NAME != "numba":
        return
    x = np.array([[0.1, -0.2, -np.inf]])
    y = softmax_rows_fwd(x)
    softmax_rows_bwd(y, y)
    gates = np.linspace(-1.0, 1.0, 8)
    c = np.array([0.3, -0.4])
    out = lstm_pointwise_fwd(gates, c)
    lstm_pointwise_bwd(c, c, c, *out[2:])
    tg = np.zeros((3, 2))
    scatter_add_rows(tg, np.array([0, 2]), np.ones((2, 2)))
    _, probs = cross_entropy_fwd(np.array([[0.0, 1.0]]), np.array([1]))
    cross_entropy_bwd(probs, np.array([1]), 1.0)


def softmax_rows_fwd(x):
    return _ACTIVE["softmax_rows_fwd"](x)


def softmax_rows_bwd(y, gy):
    return _ACTIVE["softmax_rows_bwd"](y, gy)


def lstm_pointwise_fwd(gates, c_prev):
    return _ACTIVE["lstm_pointwise_fwd"](gates, c_prev)


def lstm_pointwise_bwd(gh, gc, c_prev, i, f, g, o, tc):
    return _ACTIVE["lstm_pointwise_bwd"](gh, gc, c_prev, i, f, g, o, tc)


def scatter_add_rows(table_grad, ids, grows):
    return _ACTIVE["scatter_add_rows"](table_grad, ids, grows)


def cross_entropy_fwd(logits, targets):
    return _ACTIVE["cross_entropy_fwd"](logits, targets)


def cross_entropy_bwd(probs, targets, gscale):
    return _ACTIVE["cross_entropy_bwd"](probs, targets, gscale)
