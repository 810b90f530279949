"""Small differentiable-operator set on top of numpy.

Every forward op has a matching ``*_backward`` that returns exact gradients.
Parameters are kept in flat ``dict[str, np.ndarray]`` collections so that
optimizers and checkpoints can treat them uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Params = dict[str, np.ndarray]


class ShapeError(ValueError):
    pass


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------- dense layers


def linear(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """y = x W^T + b for a batch ``x`` of shape (B, d_in); ``W`` is (d_out, d_in)."""
    if x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeError(f"linear: x {x.shape}, W {W.shape}, b {b.shape}")
    return x @ W.T + b


def linear_backward(dy: np.ndarray, x: np.ndarray, W: np.ndarray):
    """Return (dx, dW, db)."""
    return dy @ W, dy.T @ x, dy.sum(axis=0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    return dy * (1.0 - y * y)


def sigmoid_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    return dy * y * (1.0 - y)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - np.max(logits, axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row loss and d(loss)/d(logits) for 0-based integer ``labels``."""
    logp = log_softmax(logits)
    rows = np.arange(len(labels))
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return -logp[rows, labels], grad


def dropout(x: np.ndarray, p: float, train: bool, rng: np.random.Generator | None):
    """Inverted dropout. Returns (y, mask); mask is None when the op is the identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x, None
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask, mask


# ---------------------------------------------------------------- LSTM


def lstm_init(rng: np.random.Generator, d_in: int, d_h: int, prefix: str = "lstm") -> Params:
    """Gate order along the first axis is (input, forget, output, candidate)."""
    W = uniform_init(rng, (4 * d_h, d_in + d_h), d_in + d_h)
    b = np.zeros(4 * d_h)
    b[d_h:2 * d_h] = 1.0
    return {f"{prefix}.W": W, f"{prefix}.b": b}


def lstm_step(W: np.ndarray, b: np.ndarray, x: np.ndarray, h: np.ndarray, c: np.ndarray):
    """One batched LSTM step. Returns (h_new, c_new, cache)."""
    d_h = h.shape[-1]
    if W.shape != (4 * d_h, x.shape[-1] + d_h) or b.shape != (4 * d_h,):
        raise ShapeError(f"lstm_step: W {W.shape}, b {b.shape}, x {x.shape}, h {h.shape}")
    xh = np.concatenate([x, h], axis=-1)
    z = xh @ W.T + b
    i = sigmoid(z[:, :d_h])
    f = sigmoid(z[:, d_h:2 * d_h])
    o = sigmoid(z[:, 2 * d_h:3 * d_h])
    g = np.tanh(z[:, 3 * d_h:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    return h_new, c_new, (xh, c, i, f, o, g, tc)


def lstm_step_backward(W: np.ndarray, dh: np.ndarray, dc: np.ndarray, cache):
    """Backward of ``lstm_step``.

    ``dh``/``dc`` are gradients w.r.t. the step's outputs (including whatever
    flowed back from later steps). Returns (dx, dh_prev, dc_prev, dW, db).
    """
    xh, c_prev, i, f, o, g, tc = cache
    d_h = i.shape[-1]
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    di = dc * g
    dg = dc * i
    df = dc * c_prev
    dc_prev = dc * f
    dz = np.concatenate(
        [di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g * g)], axis=-1
    )
    dxh = dz @ W
    dW = dz.T @ xh
    db = dz.sum(axis=0)
    d_in = xh.shape[-1] - d_h
    return dxh[:, :d_in], dxh[:, d_in:], dc_prev, dW, db


# ---------------------------------------------------------------- N-d convolution


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _windows(xp: np.ndarray, ksize: tuple[int, ...], stride: int, out: tuple[int, ...]):
    nd = len(ksize)
    axes = tuple(range(2, 2 + nd))
    win = sliding_window_view(xp, ksize, axis=axes)
    sl = (slice(None), slice(None)) + tuple(slice(0, o * stride, stride) for o in out)
    return win[sl]  # (B, Cin, *out, *k)


def conv_nd(x: np.ndarray, W: np.ndarray, b: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlation of ``x`` (B, Cin, *S) with ``W`` (Cout, Cin, *K), zero padding."""
    nd = W.ndim - 2
    if x.ndim != nd + 2 or x.shape[1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeError(f"conv_nd: x {x.shape}, W {W.shape}, b {b.shape}")
    ksize = W.shape[2:]
    out = tuple(conv_output_size(n, k, stride, pad) for n, k in zip(x.shape[2:], ksize))
    if min(out) < 1:
        raise ShapeError(f"conv_nd: degenerate output size {out}")
    xp = np.pad(x, [(0, 0), (0, 0)] + [(pad, pad)] * nd) if pad else x
    win = _windows(xp, ksize, stride, out)
    # contract Cin and kernel axes
    red_win = (1,) + tuple(range(2 + nd, 2 + 2 * nd))
    red_w = tuple(range(1, 2 + nd))
    y = np.tensordot(win, W, axes=(red_win, red_w))  # (B, *out, Cout)
    y = np.moveaxis(y, -1, 1)
    return y + b.reshape((1, -1) + (1,) * nd)


def conv_nd_input_grad(dy: np.ndarray, W: np.ndarray, in_spatial: tuple[int, ...], stride: int, pad: int) -> np.ndarray:
    """Adjoint of ``conv_nd`` w.r.t. its input (also used as a transposed convolution)."""
    ksize = W.shape[2:]
    out = dy.shape[2:]
    B = dy.shape[0]
    padded = tuple(n + 2 * pad for n in in_spatial)
    dxp = np.zeros((B, W.shape[1]) + padded)
    for off in np.ndindex(*ksize):
        # (B, Cout, *out) x (Cout, Cin) -> (B, Cin, *out)
        contrib = np.tensordot(dy, W[(slice(None), slice(None)) + off], axes=([1], [0]))
        contrib = np.moveaxis(contrib, -1, 1)
        sl = (slice(None), slice(None)) + tuple(
            slice(o, o + n * stride, stride) for o, n in zip(off, out)
        )
        dxp[sl] += contrib
    if pad:
        crop = (slice(None), slice(None)) + tuple(slice(pad, pad + n) for n in in_spatial)
        return dxp[crop]
    return dxp


def conv_nd_weight_grad(dy: np.ndarray, x: np.ndarray, ksize: tuple[int, ...], stride: int, pad: int) -> np.ndarray:
    nd = len(ksize)
    xp = np.pad(x, [(0, 0), (0, 0)] + [(pad, pad)] * nd) if pad else x
    win = _windows(xp, ksize, stride, dy.shape[2:])
    # sum over batch and output positions
    red = (0,) + tuple(range(2, 2 + nd))
    dW = np.tensordot(dy, win, axes=(red, red))  # (Cout, Cin, *K)
    return dW


def conv_nd_backward(dy: np.ndarray, x: np.ndarray, W: np.ndarray, stride: int = 1, pad: int = 0):
    """Return (dx, dW, db)."""
    nd = W.ndim - 2
    dx = conv_nd_input_grad(dy, W, x.shape[2:], stride, pad)
    dW = conv_nd_weight_grad(dy, x, W.shape[2:], stride, pad)
    db = dy.sum(axis=(0,) + tuple(range(2, 2 + nd)))
    return dx, dW, db


def conv_transpose_nd(x: np.ndarray, W: np.ndarray, b: np.ndarray, out_spatial: tuple[int, ...], stride: int = 1, pad: int = 0) -> np.ndarray:
    """Transposed convolution: the adjoint of ``conv_nd(., W)`` mapping ``out_spatial`` to ``x``'s size.

    ``W`` keeps the forward-conv layout (C_small, C_big, *K), so ``x`` has
    C_small channels and the output has C_big channels.
    """
    nd = W.ndim - 2
    if x.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"conv_transpose_nd: x {x.shape}, W {W.shape}, b {b.shape}")
    expect = tuple(conv_output_size(n, k, stride, pad) for n, k in zip(out_spatial, W.shape[2:]))
    if expect != x.shape[2:]:
        raise ShapeError(f"conv_transpose_nd: {out_spatial} does not map onto {x.shape[2:]}")
    y = conv_nd_input_grad(x, W, out_spatial, stride, pad)
    return y + b.reshape((1, -1) + (1,) * nd)


def conv_transpose_nd_backward(dy: np.ndarray, x: np.ndarray, W: np.ndarray, stride: int = 1, pad: int = 0):
    """Return (dx, dW, db) for ``conv_transpose_nd``."""
    nd = W.ndim - 2
    zero_b = np.zeros(W.shape[0])
    dx = conv_nd(dy, W, zero_b, stride, pad)
    dW = conv_nd_weight_grad(x, dy, W.shape[2:], stride, pad)
    db = dy.sum(axis=(0,) + tuple(range(2, 2 + nd)))
    return dx, dW, db


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimState:
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: Params, grads: Params, opt: OptimState, frozen: tuple[str, ...] = ()) -> Params:
    """Momentum SGD with L2 weight decay, updating ``params`` in place.

    v <- momentum * v - lr * (g + weight_decay * theta);  theta <- theta + v
    Names starting with any prefix in ``frozen`` are skipped.
    """
    for name, theta in params.items():
        if name not in grads or (frozen and name.startswith(frozen)):
            continue
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeError(f"sgd_step: grad {name} {g.shape} vs param {theta.shape}")
        v = opt.velocity.get(name)
        if v is None:
            v = opt.velocity[name] = np.zeros_like(theta)
        v *= opt.momentum
        v -= opt.lr * (g + opt.weight_decay * theta)
        theta += v
    return params


def global_norm(grads: Params) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads: Params, max_norm: float) -> float:
    """Rescale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the norm before clipping."""
    norm = global_norm(grads)
    if norm > max_norm > 0:
        for g in grads.values():
            g *= max_norm / norm
    return norm


# ---------------------------------------------------------------- gradient checking


def numeric_grad(f: Callable[[], float], theta: np.ndarray, eps: float = 1e-5, entries: np.ndarray | None = None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``theta`` (perturbed in place, then restored).

    With ``entries`` only those flat indices are probed; the rest stay zero.
    """
    grad = np.zeros_like(theta)
    flat = theta.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size) if entries is None else entries:
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor) over elements."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def grad_check(
    f: Callable[[], float],
    params: Params,
    analytic: Params,
    eps: float = 1e-5,
    floor: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative error between ``analytic`` gradients and central differences of ``f``.

    ``f`` must read the arrays in ``params`` (they are perturbed in place).
    Arrays larger than ``max_entries`` are checked on a random subset of
    that many entries drawn from ``rng``.
    """
    worst = 0.0
    for name, theta in params.items():
        idx = None
        if max_entries is not None and theta.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(theta.size, max_entries, replace=False)
        num = numeric_grad(f, theta, eps, idx)
        a = np.asarray(analytic[name]).reshape(-1)
        n = num.reshape(-1)
        if idx is not None:
            a, n = a[idx], n[idx]
        worst = max(worst, relative_error(a, n, floor))
    return worst
