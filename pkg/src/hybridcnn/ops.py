"""Layer primitives with forward math and taped backward rules.

Every op takes and returns :class:`~hybridcnn.tensor.Tensor` values in NHWC
layout, validates its geometry up front (raising ConfigurationError that
names the offending layer), checks outputs for NaN/Inf, and records its
backward rule on the active GradTape when one is live.

Convolution is lowered to im2col + GEMM internally; the test suite holds a
naive six-loop convolution as the correctness referee.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError
from .tensor import Tensor, active_tape, ensure_finite

__all__ = [
    "conv2d", "maxpool2d", "batchnorm", "dense", "relu", "softmax",
    "dropout", "flatten", "global_avg_pool", "bilinear_resize",
    "add", "mul", "tensor_sum",
    "conv_out_size", "pool_out_size", "bilinear_resize_array",
]


# ---------------------------------------------------------------------------
# shape algebra, shared with the symbolic shape pass in graphs.py

def _pad_amounts(size: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Return (pad_before, pad_after, out_size) for one spatial axis."""
    if stride < 1:
        raise ConfigurationError(f"stride must be positive, got {stride}")
    if padding == "valid":
        if k > size:
            raise ConfigurationError(f"window {k} exceeds spatial extent {size}")
        return 0, 0, (size - k) // stride + 1
    if padding == "same":
        out = -(-size // stride)  # ceil
        total = max((out - 1) * stride + k - size, 0)
        return total // 2, total - total // 2, out
    raise ConfigurationError(f"unknown padding mode {padding!r}")


def conv_out_size(size: int, k: int, stride: int, padding: str) -> int:
    return _pad_amounts(size, k, stride, padding)[2]


def pool_out_size(size: int, pool: int, stride: int, padding: str = "valid") -> int:
    return _pad_amounts(size, pool, stride, padding)[2]


def _record(out: Tensor, inputs, rule, op_name: str) -> Tensor:
    tape = active_tape()
    if tape is not None:
        tape.record(out, inputs, rule, op_name)
    return out


# ---------------------------------------------------------------------------
# convolution

def _im2col(xp: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    # (N, Hp, Wp, C) -> (N*out_h*out_w, k*k*C) with (ki, kj, c) inner order,
    # matching weights of shape (k, k, Cin, Cout) flattened to (k*k*Cin, Cout).
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride][:, :out_h, :out_w]
    n = xp.shape[0]
    c = xp.shape[3]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * out_h * out_w, k * k * c)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, *, stride: int = 1,
           padding: str = "valid", name: str = "conv2d") -> Tensor:
    """2-D convolution over NHWC input with (k, k, Cin, Cout) weights.

    `padding="valid"` gives out = floor((H - k) / stride) + 1 per axis,
    `padding="same"` gives out = ceil(H / stride). Bias is optional; residual
    backbones run their convs bias-free since batch norm follows.
    """
    if x.ndim != 4:
        raise ConfigurationError(f"{name}: expected 4-D NHWC input, got shape {x.shape}")
    if w.ndim != 4 or w.shape[0] != w.shape[1]:
        raise ConfigurationError(f"{name}: expected square (k,k,Cin,Cout) weights, got {w.shape}")
    n, h, wd, cin = x.shape
    k, _, w_cin, cout = w.shape
    if w_cin != cin:
        raise ConfigurationError(f"{name}: input has {cin} channels but weights expect {w_cin}")
    if b is not None and b.shape != (cout,):
        raise ConfigurationError(f"{name}: bias shape {b.shape} does not match {cout} filters")
    if stride < 1:
        raise ConfigurationError(f"{name}: stride must be positive, got {stride}")

    try:
        ph0, ph1, out_h = _pad_amounts(h, k, stride, padding)
        pw0, pw1, out_w = _pad_amounts(wd, k, stride, padding)
    except ConfigurationError as e:
        raise ConfigurationError(f"{name}: {e}") from None

    xp = np.pad(x.data, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0))) if (ph0 or ph1 or pw0 or pw1) else x.data
    cols = _im2col(xp, k, stride, out_h, out_w)
    w2 = w.data.reshape(k * k * cin, cout)
    out_data = cols @ w2
    if b is not None:
        out_data = out_data + b.data
    out_data = out_data.reshape(n, out_h, out_w, cout)
    out = Tensor(ensure_finite(out_data, name), dtype=out_data.dtype)

    def rule(g: np.ndarray):
        g2 = g.reshape(n * out_h * out_w, cout)
        dw = (cols.T @ g2).reshape(k, k, cin, cout)
        db = g2.sum(axis=0) if b is not None else None
        dcols = (g2 @ w2.T).reshape(n, out_h, out_w, k, k, cin)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + stride * out_h:stride, j:j + stride * out_w:stride, :] += dcols[:, :, :, i, j, :]
        dx = dxp[:, ph0:ph0 + h, pw0:pw0 + wd, :] if (ph0 or ph1 or pw0 or pw1) else dxp
        grads = [dx, dw] + ([db] if b is not None else [])
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, inputs, rule, name)


# ---------------------------------------------------------------------------
# pooling

def maxpool2d(x: Tensor, *, pool: int, stride: int, padding: str = "valid",
              name: str = "max_pooling2d") -> Tensor:
    """Max pooling; backward routes gradient to the argmax of each window
    (first position in row-major order on ties)."""
    if x.ndim != 4:
        raise ConfigurationError(f"{name}: expected 4-D NHWC input, got shape {x.shape}")
    if pool < 1 or stride < 1:
        raise ConfigurationError(f"{name}: pool and stride must be positive")
    n, h, w, c = x.shape
    try:
        ph0, ph1, out_h = _pad_amounts(h, pool, stride, padding)
        pw0, pw1, out_w = _pad_amounts(w, pool, stride, padding)
    except ConfigurationError as e:
        raise ConfigurationError(f"{name}: {e}") from None

    padded = bool(ph0 or ph1 or pw0 or pw1)
    if padded:
        # -inf fill: padded cells never win the argmax, so no gradient can
        # ever route into padding.
        xp = np.pad(x.data, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)),
                    constant_values=-np.inf)
    else:
        xp = x.data
    win = sliding_window_view(xp, (pool, pool), axis=(1, 2))
    win = win[:, ::stride, ::stride][:, :out_h, :out_w]          # (N,Ho,Wo,C,p,p)
    flat = win.reshape(n, out_h, out_w, c, pool * pool)
    arg = flat.argmax(axis=-1)
    out_data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out = Tensor(ensure_finite(out_data, name), dtype=out_data.dtype)

    def rule(g: np.ndarray):
        pi, pj = arg // pool, arg % pool
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, None, None, :]
        ri = np.arange(out_h)[None, :, None, None] * stride + pi - ph0
        cj = np.arange(out_w)[None, None, :, None] * stride + pj - pw0
        dx = np.zeros_like(x.data)
        np.add.at(dx, (ni, ri, cj, ci), g)
        return [dx]

    return _record(out, (x,), rule, name)


# ---------------------------------------------------------------------------
# batch normalization

def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, moving_mean: Tensor,
              moving_var: Tensor, *, mode: str, momentum: float = 0.99,
              eps: float = 1e-3, name: str = "batch_normalization") -> Tensor:
    """Per-channel batch normalization over the (N, H, W) axes.

    Train mode normalizes with biased batch statistics and updates the moving
    stats in place as moving <- momentum * moving + (1 - momentum) * batch.
    Infer mode normalizes with the moving stats. Per layer this accounts for
    2C trainable (gamma, beta) plus 2C non-trainable (moving stats) scalars.
    """
    if x.ndim != 4:
        raise ConfigurationError(f"{name}: expected 4-D NHWC input, got shape {x.shape}")
    c = x.shape[3]
    for t, label in ((gamma, "gamma"), (beta, "beta"), (moving_mean, "moving_mean"),
                     (moving_var, "moving_var")):
        if t.shape != (c,):
            raise ConfigurationError(f"{name}: {label} shape {t.shape} does not match {c} channels")
    if eps <= 0:
        raise ConfigurationError(f"{name}: eps must be > 0")
    if mode not in ("train", "infer"):
        raise ConfigurationError(f"{name}: mode must be 'train' or 'infer'")

    axes = (0, 1, 2)
    if mode == "train":
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        moving_mean.data[...] = momentum * moving_mean.data + (1.0 - momentum) * mu
        moving_var.data[...] = momentum * moving_var.data + (1.0 - momentum) * var
    else:
        mu = moving_mean.data
        var = moving_var.data
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = gamma.data * xhat + beta.data
    out = Tensor(ensure_finite(out_data, name), dtype=out_data.dtype)

    m = x.data.shape[0] * x.data.shape[1] * x.data.shape[2]

    def rule(g: np.ndarray):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        if mode == "train":
            # full gradient through the batch statistics
            dx = (gamma.data * inv / m) * (m * g - dbeta - xhat * dgamma)
        else:
            dx = g * gamma.data * inv
        return [dx, dgamma, dbeta, None, None]

    return _record(out, (x, gamma, beta, moving_mean, moving_var), rule, name)


# ---------------------------------------------------------------------------
# dense / activations / regularization

def dense(x: Tensor, w: Tensor, b: Tensor, *, name: str = "dense") -> Tensor:
    """Affine map (N, D) @ (D, U) + (U,)."""
    if x.ndim != 2:
        raise ConfigurationError(f"{name}: expected 2-D input, got shape {x.shape}")
    if w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ConfigurationError(
            f"{name}: inner dimensions mismatch, input {x.shape} vs weights {w.shape}")
    if b.shape != (w.shape[1],):
        raise ConfigurationError(f"{name}: bias shape {b.shape} does not match {w.shape[1]} units")
    out_data = x.data @ w.data + b.data
    out = Tensor(ensure_finite(out_data, name), dtype=out_data.dtype)

    def rule(g: np.ndarray):
        return [g @ w.data.T, x.data.T @ g, g.sum(axis=0)]

    return _record(out, (x, w, b), rule, name)


def relu(x: Tensor, *, name: str = "relu") -> Tensor:
    out = Tensor(np.maximum(x.data, 0), dtype=x.dtype)
    mask = x.data > 0

    def rule(g: np.ndarray):
        return [g * mask]

    return _record(out, (x,), rule, name)


def softmax(x: Tensor, *, name: str = "softmax") -> Tensor:
    """Row-wise softmax with max-subtraction for stability; rows sum to 1.

    Marks its output with the source logits so cross-entropy can emit the
    fused (probs - onehot) / N gradient straight onto them.
    """
    if x.ndim != 2 or x.shape[1] < 2:
        raise ConfigurationError(f"{name}: expected (N, K) logits with K >= 2, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    out = Tensor(ensure_finite(p, name), dtype=p.dtype)
    out.softmax_src = x

    def rule(g: np.ndarray):
        return [p * (g - (g * p).sum(axis=1, keepdims=True))]

    return _record(out, (x,), rule, name)


def dropout(x: Tensor, rate: float, *, mode: str, rng: np.random.Generator | None = None,
            seed: int = 0, name: str = "dropout") -> Tensor:
    """Inverted dropout: train mode zeroes with probability `rate` and scales
    survivors by 1/(1-rate); infer mode is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"{name}: rate must be in [0, 1), got {rate}")
    if mode not in ("train", "infer"):
        raise ConfigurationError(f"{name}: mode must be 'train' or 'infer'")
    if mode == "infer" or rate == 0.0:
        return x
    if rng is None:
        rng = np.random.default_rng(seed)
    keep = (rng.random(x.shape) >= rate)
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    factor = keep * scale
    out = Tensor(x.data * factor, dtype=x.dtype)

    def rule(g: np.ndarray):
        return [g * factor]

    return _record(out, (x,), rule, name)


def flatten(x: Tensor, *, name: str = "flatten") -> Tensor:
    """Collapse all non-batch axes, preserving row-major element order."""
    if x.ndim < 2:
        raise ConfigurationError(f"{name}: expected at least 2-D input, got shape {x.shape}")
    n = x.shape[0]
    out = Tensor(x.data.reshape(n, -1), dtype=x.dtype)

    def rule(g: np.ndarray):
        return [g.reshape(x.shape)]

    return _record(out, (x,), rule, name)


def global_avg_pool(x: Tensor, *, name: str = "global_average_pooling2d") -> Tensor:
    if x.ndim != 4:
        raise ConfigurationError(f"{name}: expected 4-D NHWC input, got shape {x.shape}")
    n, h, w, c = x.shape
    out = Tensor(x.data.mean(axis=(1, 2)), dtype=x.dtype)

    def rule(g: np.ndarray):
        return [np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).astype(x.dtype, copy=False)]

    return _record(out, (x,), rule, name)


# ---------------------------------------------------------------------------
# bilinear resize (used by the fusion projection; data pipeline shares the
# same matrices so there is exactly one bilinear definition in the package)

def _resize_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    """Row-stochastic (n_out, n_in) interpolation matrix, half-pixel centers,
    edge clamp. Identity when n_out == n_in."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def bilinear_resize_array(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain-array bilinear resize of (H, W, C) or (N, H, W, C) data."""
    squeeze = arr.ndim == 3
    x = arr[None] if squeeze else arr
    rh = _resize_matrix(out_h, x.shape[1], x.dtype)
    rw = _resize_matrix(out_w, x.shape[2], x.dtype)
    y = np.einsum("ah,nhwc->nawc", rh, x)
    y = np.einsum("bw,nawc->nabc", rw, y)
    return y[0] if squeeze else y


def bilinear_resize(x: Tensor, out_h: int, out_w: int, *, name: str = "bilinear_resize") -> Tensor:
    if x.ndim != 4:
        raise ConfigurationError(f"{name}: expected 4-D NHWC input, got shape {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ConfigurationError(f"{name}: target size must be positive")
    rh = _resize_matrix(out_h, x.shape[1], x.dtype)
    rw = _resize_matrix(out_w, x.shape[2], x.dtype)
    y = np.einsum("bw,nawc->nabc", rw, np.einsum("ah,nhwc->nawc", rh, x.data))
    out = Tensor(ensure_finite(y, name), dtype=y.dtype)

    def rule(g: np.ndarray):
        dx = np.einsum("ah,nabc->nhbc", rh, g)
        dx = np.einsum("bw,nhbc->nhwc", rw, dx)
        return [dx]

    return _record(out, (x,), rule, name)


# ---------------------------------------------------------------------------
# elementwise helpers (residual shortcut adds and hand-built test losses)

def add(a: Tensor, b: Tensor, *, name: str = "add") -> Tensor:
    if a.shape != b.shape:
        raise ConfigurationError(f"{name}: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data, dtype=np.result_type(a.dtype, b.dtype))

    def rule(g: np.ndarray):
        return [g, g]

    return _record(out, (a, b), rule, name)


def mul(a: Tensor, b: Tensor, *, name: str = "mul") -> Tensor:
    if a.shape != b.shape:
        raise ConfigurationError(f"{name}: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data, dtype=np.result_type(a.dtype, b.dtype))

    def rule(g: np.ndarray):
        return [g * b.data, g * a.data]

    return _record(out, (a, b), rule, name)


def tensor_sum(x: Tensor, *, name: str = "sum") -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))

    def rule(g: np.ndarray):
        return [np.broadcast_to(g, x.shape).astype(x.dtype, copy=False)]

    return _record(out, (x,), rule, name)
