"""Runtime selection between the batched-numpy kernels and the numba kernels.

PEDRISK_BACKEND=numba opts into the jit kernels; numpy is the default. On
stock builds numpy's SIMD exp/tanh outruns numba's scalar libm calls for the
gate math (see benchmarks/bench_backends.py), so the jit path only pays off
where a vector math library (SVML) is available to numba. Selection is
resolved once, lazily; tests and benchmarks can override with set_backend().
"""
from __future__ import annotations

import os

from . import _numpy_kernels

_active_name: str | None = None
_active_module = None


def _resolve(name: str):
    global _active_name, _active_module
    if name == "numba":
        from . import _numba_kernels

        _active_name, _active_module = "numba", _numba_kernels
        return
    _active_name, _active_module = "numpy", _numpy_kernels


def set_backend(name: str) -> None:
    if name not in ("numpy", "numba"):
        raise ValueError(f"backend must be numpy or numba, got {name!r}")
    _resolve(name)


def active_backend() -> str:
    if _active_name is None:
        _resolve(os.environ.get("PEDRISK_BACKEND", "auto"))
    return _active_name


def _impl():
    active_backend()
    return _active_module


def embed_sum(ids, t_idx, b_idx, embed, n_bins, batch):
    return _impl().embed_sum(ids, t_idx, b_idx, embed, n_bins, batch)


def embed_backward(dx, ids, t_idx, b_idx, vocab_size):
    return _impl().embed_backward(dx, ids, t_idx, b_idx, vocab_size)


def lstm_forward(x, w, r, b):
    return _impl().lstm_forward(x, w, r, b)


def lstm_backward(dh_out, x, h, c, gates, w, r):
    return _impl().lstm_backward(dh_out, x, h, c, gates, w, r)
