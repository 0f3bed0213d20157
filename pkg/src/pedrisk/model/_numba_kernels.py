"""Numba-compiled versions of the hot kernels.

Math mirrors _numpy_kernels step for step; the win is fusing the per-step
gate arithmetic and the embedding scatter loops. Compiled lazily per dtype,
cached on disk.
"""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def embed_sum(ids, t_idx, b_idx, embed, n_bins, batch):
    dim = embed.shape[1]
    x = np.zeros((n_bins, batch, dim), dtype=embed.dtype)
    for n in range(ids.shape[0]):
        t = t_idx[n]
        b = b_idx[n]
        row = ids[n]
        for j in range(dim):
            x[t, b, j] += embed[row, j]
    return x


@njit(cache=True)
def embed_backward(dx, ids, t_idx, b_idx, vocab_size):
    dim = dx.shape[2]
    d_embed = np.zeros((vocab_size, dim), dtype=dx.dtype)
    for n in range(ids.shape[0]):
        t = t_idx[n]
        b = b_idx[n]
        row = ids[n]
        for j in range(dim):
            d_embed[row, j] += dx[t, b, j]
    return d_embed


@njit(cache=True)
def lstm_forward(x, w, r, b):
    n_bins, batch, din = x.shape
    hidden = r.shape[0]
    pre = np.dot(x.reshape(n_bins * batch, din), w).reshape(n_bins, batch, 4 * hidden)
    h = np.zeros((n_bins, batch, hidden), dtype=x.dtype)
    c = np.zeros((n_bins, batch, hidden), dtype=x.dtype)
    gates = np.zeros((n_bins, batch, 4 * hidden), dtype=x.dtype)
    h_prev = np.zeros((batch, hidden), dtype=x.dtype)
    c_prev = np.zeros((batch, hidden), dtype=x.dtype)
    for t in range(n_bins):
        a = pre[t] + np.dot(h_prev, r)
        for bi in range(batch):
            for j in range(hidden):
                i_g = 1.0 / (1.0 + np.exp(-(a[bi, j] + b[j])))
                f_g = 1.0 / (1.0 + np.exp(-(a[bi, hidden + j] + b[hidden + j])))
                g_g = np.tanh(a[bi, 2 * hidden + j] + b[2 * hidden + j])
                o_g = 1.0 / (1.0 + np.exp(-(a[bi, 3 * hidden + j] + b[3 * hidden + j])))
                c_t = f_g * c_prev[bi, j] + i_g * g_g
                gates[t, bi, j] = i_g
                gates[t, bi, hidden + j] = f_g
                gates[t, bi, 2 * hidden + j] = g_g
                gates[t, bi, 3 * hidden + j] = o_g
                c[t, bi, j] = c_t
                h[t, bi, j] = o_g * np.tanh(c_t)
        h_prev = h[t]
        c_prev = c[t]
    return h, c, gates


@njit(cache=True)
def lstm_backward(dh_out, x, h, c, gates, w, r):
    n_bins, batch, din = x.shape
    hidden = r.shape[0]
    da = np.zeros((n_bins, batch, 4 * hidden), dtype=x.dtype)
    dh_next = np.zeros((batch, hidden), dtype=x.dtype)
    dc_next = np.zeros((batch, hidden), dtype=x.dtype)
    rt = np.ascontiguousarray(r.T)
    for t in range(n_bins - 1, -1, -1):
        for bi in range(batch):
            for j in range(hidden):
                i_g = gates[t, bi, j]
                f_g = gates[t, bi, hidden + j]
                g_g = gates[t, bi, 2 * hidden + j]
                o_g = gates[t, bi, 3 * hidden + j]
                dh = dh_out[t, bi, j] + dh_next[bi, j]
                tc = np.tanh(c[t, bi, j])
                do = dh * tc
                dc = dc_next[bi, j] + dh * o_g * (1.0 - tc * tc)
                c_prev = c[t - 1, bi, j] if t > 0 else 0.0
                da[t, bi, j] = dc * g_g * i_g * (1.0 - i_g)
                da[t, bi, hidden + j] = dc * c_prev * f_g * (1.0 - f_g)
                da[t, bi, 2 * hidden + j] = dc * i_g * (1.0 - g_g * g_g)
                da[t, bi, 3 * hidden + j] = do * o_g * (1.0 - o_g)
                dc_next[bi, j] = dc * f_g
        dh_next = np.dot(da[t], rt)
    h_prev = np.zeros((n_bins, batch, hidden), dtype=x.dtype)
    for t in range(1, n_bins):
        h_prev[t] = h[t - 1]
    da_flat = da.reshape(n_bins * batch, 4 * hidden)
    dx = np.dot(da_flat, np.ascontiguousarray(w.T)).reshape(n_bins, batch, din)
    dw = np.dot(np.ascontiguousarray(x.reshape(n_bins * batch, din).T), da_flat)
    dr = np.dot(np.ascontiguousarray(h_prev.reshape(n_bins * batch, hidden).T), da_flat)
    db = np.zeros(4 * hidden, dtype=x.dtype)
    for n in range(n_bins * batch):
        for j in range(4 * hidden):
            db[j] += da_flat[n, j]
    return dx, dw, dr, db
