"""Dense float64 tensors with a replayable reverse-mode gradient tape.

A Tensor wraps a row-major numpy float64 array plus an optional grad buffer.
Operations record a backward rule onto the active Tape (when one is open and
an input requires grad); `Tape.backward(loss)` replays the rules in reverse
execution order. The graph is rebuilt every step, which keeps variable
sequence lengths trivial.

Shape conventions follow the model code: sequences are (T, d) row matrices,
single positions / states are 1-D vectors, losses are 0-d scalars.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, ShapeError


class Tensor:
    """float64 array with an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        """Add g into the grad buffer, creating it on first use."""
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def detach(self) -> "Tensor":
        """Copy of the values as a fresh non-grad leaf (used at chunk borders)."""
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad)


# -----------------------------------------------------------------------------
# Tape
# -----------------------------------------------------------------------------

_STATE = threading.local()


def _active_tape():
    return getattr(_STATE, "tape", None)


def active_tape():
    """The tape currently recording on this thread, or None."""
    return _active_tape()


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Entering the tape as a context manager makes it the recording target for
    the current thread. Nodes are appended in execution order, so inputs of
    every node precede it; `backward` replays them once each, in reverse.
    Calling `backward` repeatedly without clearing grads accumulates.
    """

    def __init__(self):
        self._nodes: list[tuple[Callable[[], None], tuple[Tensor, ...]]] = []

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RuntimeError("a tape is already recording on this thread")
        _STATE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.tape = None
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, backward_fn: Callable[[], None], *outputs: Tensor) -> None:
        self._nodes.append((backward_fn, outputs))

    def backward(self, loss: Tensor) -> None:
        """Populate grads of every requires-grad leaf reachable from loss.

        Grads of tensors produced on the tape are transient per pass; leaf
        grads accumulate across repeated backward calls.
        """
        if loss.data.ndim != 0:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        for _, outs in self._nodes:
            for t in outs:
                t.grad = None
        loss.accumulate_grad(np.ones_like(loss.data))
        for fn, _ in reversed(self._nodes):
            fn()


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _record(out: Tensor, backward_fn: Callable[[], None]) -> None:
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.record(backward_fn, out)


def _needs_grad(*ts: Tensor) -> bool:
    return any(t.requires_grad for t in ts)


def _grad_of(t: Tensor) -> np.ndarray:
    """Upstream grad of an output tensor; zeros when nothing flowed into it."""
    return t.grad if t.grad is not None else np.zeros_like(t.data)


# -----------------------------------------------------------------------------
# Primitives
# -----------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supports (m,k)@(k,n), (k,)@(k,n) and (m,k)@(k,).

    The contraction always runs over a's last and b's first axis.
    """
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ShapeError(f"matmul needs 1-D or 2-D operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, _needs_grad(a, b))

    def bwd():
        g = _grad_of(out)
        g2 = np.atleast_2d(g)
        a2 = a.data if a.data.ndim == 2 else a.data[None, :]
        b2 = b.data if b.data.ndim == 2 else b.data[:, None]
        if a.data.ndim == 1 and b.data.ndim == 1:
            g2 = g.reshape(1, 1)
        elif a.data.ndim == 1:
            g2 = g.reshape(1, -1)
        elif b.data.ndim == 1:
            g2 = g.reshape(-1, 1)
        if a.requires_grad:
            ga = g2 @ b2.T
            a.accumulate_grad(ga.reshape(a.data.shape))
        if b.requires_grad:
            gb = a2.T @ g2
            b.accumulate_grad(gb.reshape(b.data.shape))

    _record(out, bwd)
    return out


def conv1d_same(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Length-preserving 1-D convolution over rows.

    x (T, d_in), w (k, d_in, d_out) with odd k, b (d_out,) -> (T, d_out).
    The input is zero-padded with (k-1)/2 rows on each side, so
    out[t] = b + sum_u w[u].T @ x_pad[t + u]. Computed as k shifted GEMMs.
    """
    if w.data.ndim != 3:
        raise ShapeError(f"conv kernel must be (k, d_in, d_out), got {w.shape}")
    k, d_in, d_out = w.data.shape
    if k % 2 == 0:
        raise ConfigError(f"conv kernel width must be odd, got {k}")
    if x.data.ndim != 2 or x.data.shape[1] != d_in:
        raise ShapeError(f"conv input {x.shape} incompatible with kernel {w.shape}")
    T = x.data.shape[0]
    pad = (k - 1) // 2
    xp = np.zeros((T + 2 * pad, d_in))
    xp[pad : pad + T] = x.data
    y = np.tile(b.data, (T, 1))
    for u in range(k):
        y += xp[u : u + T] @ w.data[u]
    out = Tensor(y, _needs_grad(x, w, b))

    def bwd():
        g = _grad_of(out)
        if b.requires_grad:
            b.accumulate_grad(g.sum(axis=0))
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for u in range(k):
                gw[u] = xp[u : u + T].T @ g
            w.accumulate_grad(gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for u in range(k):
                gxp[u : u + T] += g @ w.data[u].T
            x.accumulate_grad(gxp[pad : pad + T])

    _record(out, bwd)
    return out


def window_mean_rows(x: Tensor, k: int) -> Tensor:
    """Average of k consecutive rows centred at each position, zero-padded.

    Equivalent to conv1d_same with a (1/k)-scaled identity kernel, without
    the parameter cost; used by the pooling encoder.
    """
    if k % 2 == 0:
        raise ConfigError(f"window width must be odd, got {k}")
    T, d = x.data.shape
    pad = k // 2
    xp = np.zeros((T + 2 * pad, d))
    xp[pad : pad + T] = x.data
    y = np.zeros((T, d))
    for u in range(k):
        y += xp[u : u + T]
    y /= k
    out = Tensor(y, x.requires_grad)

    def bwd():
        g = _grad_of(out)
        gxp = np.zeros_like(xp)
        for u in range(k):
            gxp[u : u + T] += g
        x.accumulate_grad(gxp[pad : pad + T] / k)

    _record(out, bwd)
    return out


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction; -inf entries map to exact 0.

    Accepts (m, n) or a single row (n,). Raises on rows with no finite entry.
    """
    x2 = x.data if x.data.ndim == 2 else x.data[None, :]
    if not np.isfinite(x2).all():
        bad = ~np.isfinite(x2)
        if (x2[bad] != -np.inf).any():
            raise ValueError("softmax input must be finite or -inf")
        if (~np.isfinite(x2)).all(axis=1).any():
            raise ValueError("empty attention support: a row is fully masked")
    y2 = kernels.softmax_rows_fwd(x2)
    out = Tensor(y2.reshape(x.data.shape), x.requires_grad)

    def bwd():
        g = _grad_of(out)
        gx = kernels.softmax_rows_bwd(y2, g.reshape(y2.shape))
        x.accumulate_grad(gx.reshape(x.data.shape))

    _record(out, bwd)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add shapes incompatible: {a.shape} + {b.shape}") from None
    out = Tensor(data, _needs_grad(a, b))

    def bwd():
        g = _grad_of(out)
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    _record(out, bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product with numpy broadcasting."""
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul shapes incompatible: {a.shape} * {b.shape}") from None
    out = Tensor(data, _needs_grad(a, b))

    def bwd():
        g = _grad_of(out)
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    _record(out, bwd)
    return out


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y, x.requires_grad)

    def bwd():
        x.accumulate_grad(_grad_of(out) * (1.0 - y * y))

    _record(out, bwd)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(y, x.requires_grad)

    def bwd():
        x.accumulate_grad(_grad_of(out) * y * (1.0 - y))

    _record(out, bwd)
    return out


def scale(x: Tensor, alpha: float) -> Tensor:
    out = Tensor(x.data * alpha, x.requires_grad)

    def bwd():
        x.accumulate_grad(_grad_of(out) * alpha)

    _record(out, bwd)
    return out


def concat_last_dim(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last axis; leading axes must match."""
    if a.data.shape[:-1] != b.data.shape[:-1]:
        raise ShapeError(f"concat leading dims differ: {a.shape} vs {b.shape}")
    na = a.data.shape[-1]
    out = Tensor(np.concatenate([a.data, b.data], axis=-1), _needs_grad(a, b))

    def bwd():
        g = _grad_of(out)
        if a.requires_grad:
            a.accumulate_grad(g[..., :na])
        if b.requires_grad:
            b.accumulate_grad(g[..., na:])

    _record(out, bwd)
    return out


def reverse_rows(x: Tensor) -> Tensor:
    """Reverse along the time axis (axis 0) only."""
    out = Tensor(x.data[::-1].copy(), x.requires_grad)

    def bwd():
        x.accumulate_grad(_grad_of(out)[::-1])

    _record(out, bwd)
    return out


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows by integer index; backward scatter-adds into touched rows.

    ids may be a scalar (returns one row) or a 1-D index array.
    """
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor(table.data[ids], table.requires_grad)
    flat_ids = np.atleast_1d(ids)

    def bwd():
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        g = _grad_of(out).reshape(flat_ids.size, -1)
        kernels.scatter_add_rows(table.grad, flat_ids, g)

    _record(out, bwd)
    return out


def stack_rows(xs: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors of equal length into a (len(xs), n) matrix."""
    out = Tensor(np.stack([t.data for t in xs]), _needs_grad(*xs))

    def bwd():
        g = _grad_of(out)
        for i, t in enumerate(xs):
            if t.requires_grad:
                t.accumulate_grad(g[i])

    _record(out, bwd)
    return out


def sum_all(x: Tensor) -> Tensor:
    """Sum of all entries as a 0-d scalar."""
    out = Tensor(np.asarray(x.data.sum()), x.requires_grad)

    def bwd():
        x.accumulate_grad(np.broadcast_to(_grad_of(out), x.data.shape).copy())

    _record(out, bwd)
    return out


def lstm_gates(gates: Tensor, c_prev: Tensor) -> tuple:
    """Fused LSTM pointwise math: (gates (4h,), c (h,)) -> (h', c').

    Gate blocks are ordered (input, forget, candidate, output):
    c' = sigmoid(f)*c + sigmoid(i)*tanh(g), h' = sigmoid(o)*tanh(c').
    """
    h = c_prev.data.shape[0]
    if gates.data.shape != (4 * h,):
        raise ShapeError(f"gates shape {gates.shape} does not match state ({h},)")
    h_new, c_new, i, f, g, o, tc = kernels.lstm_pointwise_fwd(gates.data, c_prev.data)
    req = _needs_grad(gates, c_prev)
    out_h = Tensor(h_new, req)
    out_c = Tensor(c_new, req)

    def bwd():
        ggates, gc_prev = kernels.lstm_pointwise_bwd(
            _grad_of(out_h), _grad_of(out_c), c_prev.data, i, f, g, o, tc
        )
        if gates.requires_grad:
            gates.accumulate_grad(ggates)
        if c_prev.requires_grad:
            c_prev.accumulate_grad(gc_prev)

    if req:
        tape = _active_tape()
        if tape is not None:
            tape.record(bwd, out_h, out_c)
    return out_h, out_c


def cross_entropy_rows(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Summed negative log-likelihood of targets under row softmaxes.

    logits (n, V), targets (n,) int -> 0-d scalar. Backward is the standard
    softmax-minus-onehot rule scaled by the upstream grad.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.shape != (logits.data.shape[0],):
        raise ShapeError(f"cross entropy needs (n,V) logits and (n,) targets, got {logits.shape}")
    nll, probs = kernels.cross_entropy_fwd(logits.data, targets)
    out = Tensor(np.asarray(nll), logits.requires_grad)

    def bwd():
        g = float(_grad_of(out))
        logits.accumulate_grad(kernels.cross_entropy_bwd(probs, targets, g))

    _record(out, bwd)
    return out


# -----------------------------------------------------------------------------
# Gradient checking
# -----------------------------------------------------------------------------


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    f must map a Tensor deterministically to a scalar Tensor. Returns
    max over coordinates of |analytic - numeric| / max(1e-8, |numeric|).
    """
    if eps <= 0:
        raise ConfigError("finite difference step must be positive")
    probe = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        loss = f(probe)
        tape.backward(loss)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)
    if not np.isfinite(analytic).all():
        raise ValueError("non-finite analytic gradient")

    flat = x.data.copy().ravel()
    numeric = np.zeros_like(flat)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + eps
        hi = float(f(Tensor(flat.reshape(x.data.shape))).data)
        flat[idx] = orig - eps
        lo = float(f(Tensor(flat.reshape(x.data.shape))).data)
        flat[idx] = orig
        numeric[idx] = (hi - lo) / (2.0 * eps)
    if not np.isfinite(numeric).all():
        raise ValueError("non-finite value in central differences")
    denom = np.maximum(1e-8, np.abs(numeric))
    return float(np.max(np.abs(analytic.ravel() - numeric) / denom))
