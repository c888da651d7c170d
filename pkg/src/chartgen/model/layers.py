"""Differentiable building blocks with explicit backward passes.

Every ``*_forward`` returns ``(output, cache)`` and the matching
``*_backward`` consumes the cache. Shapes follow ``(batch, time, features)``
unless stated otherwise; attention works on head-split arrays
``(batch, heads, time, head_dim)``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NEG_INF = -np.inf


# ---------------------------------------------------------------------------
# RMSNorm
# ---------------------------------------------------------------------------


def rms_norm_forward(x, gain, eps=1e-6):
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    normed = x * inv
    return normed * gain, (normed, inv, gain)


def rms_norm_backward(dy, cache):
    normed, inv, gain = cache
    dgain = np.sum(dy * normed, axis=tuple(range(dy.ndim - 1)))
    dn = dy * gain
    dx = inv * (dn - normed * np.mean(dn * normed, axis=-1, keepdims=True))
    return dx, dgain


def rms_norm(x, gain, eps=1e-6):
    """``gain * x / sqrt(mean(x**2) + eps)`` over the last axis."""
    return rms_norm_forward(np.asarray(x), np.asarray(gain), eps)[0]


# ---------------------------------------------------------------------------
# SwiGLU feed-forward
# ---------------------------------------------------------------------------


def sigmoid(z):
    # tanh form never overflows
    out = np.tanh(z * np.asarray(0.5, dtype=z.dtype))
    out += 1.0
    out *= 0.5
    return out


def silu(z):
    return z * sigmoid(z)


def swiglu_forward(x, w_gate, w_up, w_down):
    gate = x @ w_gate
    up = x @ w_up
    sig = sigmoid(gate)
    act = gate * sig
    hidden = act * up
    return hidden @ w_down, (x, gate, up, sig, act, hidden, w_gate, w_up, w_down)


def swiglu_backward(dy, cache):
    x, gate, up, sig, act, hidden, w_gate, w_up, w_down = cache
    d = x.shape[-1]
    dw_down = hidden.reshape(-1, hidden.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    dhidden = dy @ w_down.T
    dup = dhidden * act
    dgate = dhidden * up * (sig * (1.0 + gate * (1.0 - sig)))
    x2 = x.reshape(-1, d)
    dw_gate = x2.T @ dgate.reshape(-1, dgate.shape[-1])
    dw_up = x2.T @ dup.reshape(-1, dup.shape[-1])
    dx = dgate @ w_gate.T + dup @ w_up.T
    return dx, dw_gate, dw_up, dw_down


def swiglu_ffn(x, w_gate, w_up, w_down):
    """``w_down . (silu(w_gate x) * w_up x)`` for row vectors ``x``."""
    return swiglu_forward(np.asarray(x), w_gate, w_up, w_down)[0]


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def softmax(x, axis=-1):
    e = x - np.max(x, axis=axis, keepdims=True)
    np.exp(e, out=e)
    e /= np.sum(e, axis=axis, keepdims=True)
    return e


def causal_mask(t: int, dtype=np.float32) -> np.ndarray:
    """Additive ``(t, t)`` mask: 0 on and below the diagonal, -inf above."""
    return np.triu(np.full((t, t), NEG_INF, dtype=dtype), k=1)


def key_padding_mask(lengths, t: int, dtype=np.float32) -> np.ndarray:
    """Additive ``(B, 1, 1, t)`` mask hiding keys at or past each length."""
    valid = np.arange(t)[None, :] < np.asarray(lengths)[:, None]
    return np.where(valid, 0.0, NEG_INF).astype(dtype)[:, None, None, :]


def attention_forward(q, k, v, mask=None):
    """Scaled dot-product attention on ``(B, H, T, hd)`` arrays."""
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = q @ np.swapaxes(k, -1, -2)
    scores *= np.asarray(scale, dtype=scores.dtype)
    if mask is not None:
        scores += mask
    # softmax in place on the score buffer
    scores -= np.max(scores, axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= np.sum(scores, axis=-1, keepdims=True)
    probs = scores
    out = probs @ v
    return out, (q, k, v, probs, scale, out)


def attention_backward(dout, cache):
    q, k, v, probs, scale, out = cache
    dv = np.swapaxes(probs, -1, -2) @ dout
    dscores = dout @ np.swapaxes(v, -1, -2)
    # row-wise <dprobs, probs> equals <dout, out> since out = probs @ v
    row = np.sum(dout * out, axis=-1, keepdims=True)
    dscores -= row
    dscores *= probs
    dscores *= np.asarray(scale, dtype=dscores.dtype)
    dq = dscores @ k
    dk = np.swapaxes(dscores, -1, -2) @ q
    return dq, dk, dv


def attention(q, k, v, mask=None):
    """``softmax(q k^T / sqrt(hd) + mask) v``; inputs are ``(..., T, hd)``."""
    return attention_forward(np.asarray(q), np.asarray(k), np.asarray(v), mask)[0]


def split_heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def merge_heads(x):
    b, h, t, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * hd)


# ---------------------------------------------------------------------------
# strided 1-D convolution over time
# ---------------------------------------------------------------------------


def conv_output_length(n_frames: int, stride: int) -> int:
    return -(-n_frames // stride)


def conv1d_forward(x, weight, bias, stride):
    """Strided convolution over axis 1.

    ``weight`` has shape ``(kernel, d_in, d_out)``. Output ``j`` reads input
    frames ``j * stride - (kernel - 1) // 2`` onward; out-of-range frames are
    zero. The output length is ``ceil(T / stride)``.
    """
    b, t, d_in = x.shape
    kernel = weight.shape[0]
    t_out = conv_output_length(t, stride)
    left = (kernel - 1) // 2
    right = max(0, (t_out - 1) * stride + kernel - left - t)
    padded = np.zeros((b, left + t + right, d_in), dtype=x.dtype)
    padded[:, left:left + t] = x
    windows = sliding_window_view(padded, kernel, axis=1)[:, ::stride][:, :t_out]  # (B, T_out, d_in, K)
    patches = np.ascontiguousarray(windows.transpose(0, 1, 3, 2)).reshape(b, t_out, kernel * d_in)
    out = patches @ weight.reshape(kernel * d_in, -1) + bias
    return out, (patches, weight, stride, left, t, padded.shape[1])


def conv1d_backward(dout, cache):
    patches, weight, stride, left, t, padded_len = cache
    kernel, d_in, d_out = weight.shape
    b, t_out, _ = dout.shape
    dweight = (patches.reshape(-1, kernel * d_in).T @ dout.reshape(-1, d_out)).reshape(weight.shape)
    dbias = dout.reshape(-1, d_out).sum(axis=0)
    dpatches = (dout @ weight.reshape(kernel * d_in, d_out).T).reshape(b, t_out, kernel, d_in)
    dpadded = np.zeros((b, padded_len, d_in), dtype=dout.dtype)
    for k in range(kernel):
        dpadded[:, k:k + stride * t_out:stride] += dpatches[:, :, k]
    return dpadded[:, left:left + t], dweight, dbias


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------


def dropout_forward(x, p, rng, train):
    if not train or p <= 0.0:
        return x, None
    keep = (rng.random(x.shape) >= p).astype(x.dtype) * np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    return x * keep, keep


def dropout_backward(dy, keep):
    return dy if keep is None else dy * keep
