"""Numerical building blocks with hand-written backward passes.

Every forward returns (output, cache) and the matching backward consumes the
upstream gradient plus that cache. Parameters are plain numpy arrays and all
layers are bias-free; normalization rescales by the root mean square with a
learned gain (no mean subtraction, no bias).
"""

from __future__ import annotations

import math

import numpy as np

# Additive mask value. exp(-1e9) underflows to exactly 0.0 after the row-max
# shift, so masked positions contribute nothing and causality is exact.
NEG_INF = -1e9
NORM_EPS = 1e-6


def sinusoidal_positions(max_len: int, d_model: int) -> np.ndarray:
    """Fixed sine/cosine position table, shape (max_len, d_model)."""
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    idx = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, idx / d_model)
    table = np.zeros((max_len, d_model))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : d_model // 2])
    return table


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    return (dy - (dy * y).sum(axis=-1, keepdims=True)) * y


def rms_norm_forward(x, gain):
    inv = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + NORM_EPS)
    normed = x * inv
    return normed * gain, (x, gain, inv, normed)


def rms_norm_backward(dy, cache):
    x, gain, inv, normed = cache
    dgain = (dy * normed).sum(axis=tuple(range(x.ndim - 1)))
    dn = dy * gain
    proj = (dn * x).sum(axis=-1, keepdims=True) / x.shape[-1]
    dx = inv * dn - (inv**3) * proj * x
    return dx, dgain


def linear_forward(x, w):
    return x @ w, (x, w)


def linear_backward(dy, cache):
    x, w = cache
    d_in, d_out = w.shape
    dw = x.reshape(-1, d_in).T @ dy.reshape(-1, d_out)
    return dy @ w.T, dw


def ffn_forward(x, w1, w2):
    hidden, lin1 = linear_forward(x, w1)
    act = np.maximum(hidden, 0.0)
    out, lin2 = linear_forward(act, w2)
    return out, (lin1, hidden, lin2)


def ffn_backward(dy, cache):
    lin1, hidden, lin2 = cache
    dact, dw2 = linear_backward(dy, lin2)
    dhidden = dact * (hidden > 0)
    dx, dw1 = linear_backward(dhidden, lin1)
    return dx, dw1, dw2


def dropout_forward(x, rate, rng):
    """Inverted dropout; identity when the rate is zero or rng is None."""
    if rate <= 0.0 or rng is None:
        return x, None
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(dy, mask):
    return dy if mask is None else dy * mask


def split_heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def merge_heads(x):
    b, h, t, d_k = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * d_k)


def attention_forward(x_q, x_kv, wq, wk, wv, wo, n_heads, mask=None):
    """Multi-head scaled dot-product attention: softmax(Q K^T / sqrt(d_k)) V.

    x_q is (B, Tq, d) and x_kv is (B, Tk, d); the additive mask broadcasts to
    (B, n_heads, Tq, Tk). Returns (output, attention weights, cache).
    """
    d_k = x_q.shape[-1] // n_heads
    q = split_heads(x_q @ wq, n_heads)
    k = split_heads(x_kv @ wk, n_heads)
    v = split_heads(x_kv @ wv, n_heads)
    scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(d_k)
    if mask is not None:
        scores = scores + mask
    attn = softmax(scores)
    ctx = merge_heads(attn @ v)
    out = ctx @ wo
    return out, attn, (x_q, x_kv, q, k, v, attn, ctx, wq, wk, wv, wo, n_heads)


def attention_backward(dout, cache):
    """Returns (dx_q, dx_kv, dwq, dwk, dwv, dwo); the mask carries no grad."""
    x_q, x_kv, q, k, v, attn, ctx, wq, wk, wv, wo, n_heads = cache
    d = x_q.shape[-1]
    d_k = d // n_heads
    dwo = ctx.reshape(-1, d).T @ dout.reshape(-1, d)
    dctx = split_heads(dout @ wo.T, n_heads)
    dattn = dctx @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ dctx
    dscores = softmax_backward(dattn, attn) / math.sqrt(d_k)
    dq = dscores @ k
    dk = dscores.transpose(0, 1, 3, 2) @ q
    dq_m, dk_m, dv_m = merge_heads(dq), merge_heads(dk), merge_heads(dv)
    dwq = x_q.reshape(-1, d).T @ dq_m.reshape(-1, d)
    dwk = x_kv.reshape(-1, d).T @ dk_m.reshape(-1, d)
    dwv = x_kv.reshape(-1, d).T @ dv_m.reshape(-1, d)
    dx_q = dq_m @ wq.T
    dx_kv = dk_m @ wk.T + dv_m @ wv.T
    return dx_q, dx_kv, dwq, dwk, dwv, dwo


def cross_entropy(logits, targets, pad_id):
    """Mean token-level cross entropy, ignoring pad positions.

    Returns (loss, n_tokens, dlogits). With every target padded the loss is
    zero and so is its gradient.
    """
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    mask = targets != pad_id
    n_tokens = int(mask.sum())
    if n_tokens == 0:
        return 0.0, 0, np.zeros_like(logits)
    idx = targets[..., None]
    picked = np.take_along_axis(logp, idx, axis=-1)[..., 0]
    loss = float(-(picked * mask).sum() / n_tokens)
    dlogits = np.exp(logp)
    np.put_along_axis(dlogits, idx, np.take_along_axis(dlogits, idx, axis=-1) - 1.0, axis=-1)
    dlogits *= mask[..., None].astype(logits.dtype) / n_tokens
    return loss, n_tokens, dlogits
