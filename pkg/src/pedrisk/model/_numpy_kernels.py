"""Pure-numpy reference implementations of the hot kernels.

Selected at runtime when PEDRISK_BACKEND=numpy or when numba is unavailable;
also the ground truth the numba kernels are checked against.
"""
from __future__ import annotations

import numpy as np


def embed_sum(ids, t_idx, b_idx, embed, n_bins, batch):
    """Per-bin input vector: sum of embeddings of the active ids in each bin."""
    x = np.zeros((n_bins, batch, embed.shape[1]), dtype=embed.dtype)
    if ids.size:
        np.add.at(x, (t_idx, b_idx), embed[ids])
    return x


def embed_backward(dx, ids, t_idx, b_idx, vocab_size):
    d_embed = np.zeros((vocab_size, dx.shape[2]), dtype=dx.dtype)
    if ids.size:
        np.add.at(d_embed, ids, dx[t_idx, b_idx])
    return d_embed


def _sigmoid(a):
    return 1.0 / (1.0 + np.exp(-a))


def lstm_forward(x, w, r, b):
    """One LSTM layer over all time steps.

    x: (T, B, Din); w: (Din, 4H); r: (H, 4H); b: (4H,).
    Gate order along the 4H axis is input, forget, cell, output.
    Returns hidden states h (T, B, H), cell states c (T, B, H) and the
    post-activation gates (T, B, 4H) cached for the backward pass.
    """
    n_bins, batch, _ = x.shape
    hidden = r.shape[0]
    pre = x.reshape(n_bins * batch, -1) @ w
    pre = pre.reshape(n_bins, batch, 4 * hidden)
    h = np.zeros((n_bins, batch, hidden), dtype=x.dtype)
    c = np.zeros_like(h)
    gates = np.zeros((n_bins, batch, 4 * hidden), dtype=x.dtype)
    h_prev = np.zeros((batch, hidden), dtype=x.dtype)
    c_prev = np.zeros((batch, hidden), dtype=x.dtype)
    for t in range(n_bins):
        a = pre[t] + h_prev @ r + b
        i = _sigmoid(a[:, :hidden])
        f = _sigmoid(a[:, hidden:2 * hidden])
        g = np.tanh(a[:, 2 * hidden:3 * hidden])
        o = _sigmoid(a[:, 3 * hidden:])
        c_t = f * c_prev + i * g
        h_t = o * np.tanh(c_t)
        gates[t, :, :hidden] = i
        gates[t, :, hidden:2 * hidden] = f
        gates[t, :, 2 * hidden:3 * hidden] = g
        gates[t, :, 3 * hidden:] = o
        h[t] = h_t
        c[t] = c_t
        h_prev, c_prev = h_t, c_t
    return h, c, gates


def lstm_backward(dh_out, x, h, c, gates, w, r):
    """Backpropagation through time for one layer.

    dh_out is the gradient arriving at every hidden state from above.
    Returns (dx, dw, dr, db).
    """
    n_bins, batch, _ = x.shape
    hidden = r.shape[0]
    da = np.zeros((n_bins, batch, 4 * hidden), dtype=x.dtype)
    dh_next = np.zeros((batch, hidden), dtype=x.dtype)
    dc_next = np.zeros((batch, hidden), dtype=x.dtype)
    for t in range(n_bins - 1, -1, -1):
        i = gates[t, :, :hidden]
        f = gates[t, :, hidden:2 * hidden]
        g = gates[t, :, 2 * hidden:3 * hidden]
        o = gates[t, :, 3 * hidden:]
        dh = dh_out[t] + dh_next
        tc = np.tanh(c[t])
        do = dh * tc
        dc = dc_next + dh * o * (1.0 - tc * tc)
        c_prev = c[t - 1] if t > 0 else np.zeros_like(dc)
        da[t, :, :hidden] = dc * g * i * (1.0 - i)
        da[t, :, hidden:2 * hidden] = dc * c_prev * f * (1.0 - f)
        da[t, :, 2 * hidden:3 * hidden] = dc * i * (1.0 - g * g)
        da[t, :, 3 * hidden:] = do * o * (1.0 - o)
        dh_next = da[t] @ r.T
        dc_next = dc * f
    h_prev = np.zeros_like(h)
    h_prev[1:] = h[:-1]
    da_flat = da.reshape(n_bins * batch, 4 * hidden)
    dx = (da_flat @ w.T).reshape(x.shape)
    dw = x.reshape(n_bins * batch, -1).T @ da_flat
    dr = h_prev.reshape(n_bins * batch, hidden).T @ da_flat
    db = da_flat.sum(axis=0)
    return dx, dw, dr, db
