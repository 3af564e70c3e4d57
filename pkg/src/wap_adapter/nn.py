"""Hand-differentiated numpy layers, Adam and a finite-difference checker.

Every forward function returns ``(output, cache)`` and the matching
``*_backward`` consumes the upstream gradient plus that cache. All math is
done in float64 so the same code path serves training and gradient checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import erf

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass
class Param:
    """A trainable tensor with its gradient accumulator and Adam moments."""

    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)
    step: int = 0

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.m is None:
            self.m = np.zeros_like(self.value)
        if self.v is None:
            self.v = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def copy(self) -> "Param":
        return Param(self.value.copy(), self.grad.copy(), self.m.copy(), self.v.copy(), self.step)


# ---------------------------------------------------------------------------
# affine
# ---------------------------------------------------------------------------


def affine_forward(x, W, b):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ValueError(
            f"shape mismatch: x {x.shape}, W {W.shape}, b {np.shape(b)}"
        )
    return x @ W + b, (x, W)


def affine_backward(dy, cache):
    x, W = cache
    return dy @ W.T, x.T @ dy, dy.sum(axis=0)


# ---------------------------------------------------------------------------
# layer norm
# ---------------------------------------------------------------------------


def layer_norm_forward(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def layer_norm_backward(dy, cache):
    xhat, inv, gain = cache
    d = xhat.shape[-1]
    dxhat = dy * gain
    dx = (inv / d) * (
        d * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------


def softmax_rows(x):
    """Softmax over the last axis with max subtraction."""
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(dy, y):
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# GELU (exact erf form)
# ---------------------------------------------------------------------------


def gelu_forward(x):
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    return x * cdf, (x, cdf)


def gelu_backward(dy, cache):
    x, cdf = cache
    return dy * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x))


# ---------------------------------------------------------------------------
# multi-head self-attention
# ---------------------------------------------------------------------------

ATTENTION_KEYS = ("Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo")


def multi_head_attention(x, p, n_heads):
    """Scaled dot-product self-attention over the rows of ``x`` (T x D).

    ``p`` maps the names in ``ATTENTION_KEYS`` to arrays.
    """
    T, D = x.shape
    if D % n_heads:
        raise ValueError(f"model width {D} not divisible by {n_heads} heads")
    dh = D // n_heads
    scale = 1.0 / math.sqrt(dh)

    q, cq = affine_forward(x, p["Wq"], p["bq"])
    k, ck = affine_forward(x, p["Wk"], p["bk"])
    v, cv = affine_forward(x, p["Wv"], p["bv"])
    # (H, T, dh)
    qh = q.reshape(T, n_heads, dh).transpose(1, 0, 2)
    kh = k.reshape(T, n_heads, dh).transpose(1, 0, 2)
    vh = v.reshape(T, n_heads, dh).transpose(1, 0, 2)

    probs = softmax_rows(qh @ kh.transpose(0, 2, 1) * scale)
    ctx = (probs @ vh).transpose(1, 0, 2).reshape(T, D)
    out, co = affine_forward(ctx, p["Wo"], p["bo"])
    cache = (cq, ck, cv, co, qh, kh, vh, probs, scale, n_heads)
    return out, cache


def multi_head_attention_backward(dout, cache):
    cq, ck, cv, co, qh, kh, vh, probs, scale, n_heads = cache
    T = dout.shape[0]
    dctx, dWo, dbo = affine_backward(dout, co)
    dh = dctx.shape[1] // n_heads
    dctx_h = dctx.reshape(T, n_heads, dh).transpose(1, 0, 2)

    dprobs = dctx_h @ vh.transpose(0, 2, 1)
    dvh = probs.transpose(0, 2, 1) @ dctx_h
    dscores = softmax_rows_backward(dprobs, probs) * scale
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 2, 1) @ qh

    def merge(a):
        return a.transpose(1, 0, 2).reshape(T, n_heads * dh)

    dxq, dWq, dbq = affine_backward(merge(dqh), cq)
    dxk, dWk, dbk = affine_backward(merge(dkh), ck)
    dxv, dWv, dbv = affine_backward(merge(dvh), cv)
    grads = {
        "Wq": dWq, "bq": dbq, "Wk": dWk, "bk": dbk,
        "Wv": dWv, "bv": dbv, "Wo": dWo, "bo": dbo,
    }
    return dxq + dxk + dxv, grads


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


def adam_step(param: Param, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update in place; clears the gradient."""
    g = param.grad
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient")
    param.step += 1
    param.m *= beta1
    param.m += (1.0 - beta1) * g
    param.v *= beta2
    param.v += (1.0 - beta2) * g * g
    m_hat = param.m / (1.0 - beta1 ** param.step)
    v_hat = param.v / (1.0 - beta2 ** param.step)
    param.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    param.zero_grad()


def clip_grad_norm(params, max_norm):
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the norm measured before clipping.
    """
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= scale
    return total


@dataclass(frozen=True)
class LrSchedule:
    initial_lr: float = 1e-4
    total_epochs: int = 100
    min_lr: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.min_lr <= self.initial_lr:
            raise ValueError("need 0 <= min_lr <= initial_lr")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")


def cosine_lr(schedule: LrSchedule, epoch) -> float:
    if not 0 <= epoch <= schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.total_epochs}]")
    span = schedule.initial_lr - schedule.min_lr
    return schedule.min_lr + 0.5 * span * (1.0 + math.cos(math.pi * epoch / schedule.total_epochs))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def relative_error(analytic, numeric, floor=1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), floor)


def grad_check(
    loss_fn: Callable[[], float],
    tensors: dict,
    analytic: dict,
    step=1e-3,
    max_coords=200,
    seed=0,
    floor=1e-6,
):
    """Largest relative error between analytic and central-difference gradients.

    ``loss_fn`` takes no arguments and reads the arrays in ``tensors``, which
    are perturbed in place and restored. Tensors larger than ``max_coords``
    are checked on a random subsample of ``max_coords`` coordinates.

    ``floor`` bounds the denominator so coordinates whose true gradient is
    exactly zero (e.g. attention key biases) do not report round-off as error.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, arr in tensors.items():
        if not arr.flags.c_contiguous:
            raise ValueError(f"tensor {name!r} must be C-contiguous")
        grad = np.asarray(analytic[name])
        flat = arr.reshape(-1)
        if flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        gflat = grad.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            plus = loss_fn()
            flat[i] = orig - step
            minus = loss_fn()
            flat[i] = orig
            numeric = (plus - minus) / (2.0 * step)
            worst = max(worst, float(relative_error(gflat[i], numeric, floor)))
    return worst
