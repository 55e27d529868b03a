"""Selective state-space kernel: input-dependent parameter selection,
zero-order-hold discretization, the linear-time sequential scan, and its
analytic backward.

Per channel d and state index n the recurrence is

    z       = delta_t * a[d,n]                 (a < 0, delta > 0)
    h_t     = exp(z) * h_{t-1} + phi(z) * delta_t * B_t[n] * x_t[d]
    y_t[d]  = sum_n C_t[n] * h_t[d,n] + d_skip[d] * x_t[d]

with phi(z) = (e^z - 1)/z, the diagonal form of the ZOH input map. B_t,
C_t and delta_t are projections of the current input; delta is one scalar
per timestep broadcast across all D channels.

A compiled kernel is used when available; a numpy fallback is selected at
import time (see scan_backend_name()).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import _scan_numpy
from . import numerics
from .errors import ShapeError, SpeechSsmError

if os.environ.get("SPEECHSSM_FORCE_NUMPY_SCAN"):
    _scan_compiled = None
else:
    try:
        from . import _scan as _scan_compiled
    except ImportError:
        _scan_compiled = None

HAS_COMPILED_SCAN = _scan_compiled is not None

_TAYLOR_CUT = 1e-6


def scan_backend_name():
    return "compiled" if HAS_COMPILED_SCAN else "numpy"


def _backend(name=None):
    if name in (None, "auto"):
        return _scan_compiled if HAS_COMPILED_SCAN else _scan_numpy
    if name == "compiled":
        if _scan_compiled is None:
            raise SpeechSsmError("compiled scan kernel not available")
        return _scan_compiled
    if name == "numpy":
        return _scan_numpy
    raise SpeechSsmError(f"unknown scan backend {name!r}")


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class SSMParams:
    """Continuous-time SSM parameters plus the selection projections.

    The state matrix is diagonal per channel and kept strictly negative by
    storing log magnitudes: a = -exp(log_a). d_skip is the per-channel
    direct feedthrough of the standard block (learnable, init 1).
    """

    log_a: np.ndarray      # (D, N)
    w_b: np.ndarray        # (D, N) input selection
    w_c: np.ndarray        # (D, N) output selection
    w_delta: np.ndarray    # (D,) step-size selection, one scalar per step
    delta_bias: float
    d_skip: np.ndarray     # (D,)

    @property
    def a(self):
        return -np.exp(self.log_a)

    @property
    def d_inner(self):
        return self.log_a.shape[0]

    @property
    def d_state(self):
        return self.log_a.shape[1]

    def astype(self, dtype):
        return SSMParams(
            self.log_a.astype(dtype), self.w_b.astype(dtype),
            self.w_c.astype(dtype), self.w_delta.astype(dtype),
            float(self.delta_bias), self.d_skip.astype(dtype),
        )


@dataclass
class SelectedParams:
    """Per-step parameters produced from the input sequence."""

    b: np.ndarray       # (L, N)
    c: np.ndarray       # (L, N)
    delta: np.ndarray   # (L, D), strictly positive


def init_ssm_params(d_inner, d_state, rng, dtype=np.float64):
    """Standard init: a[d,n] = -(n+1), skip gain 1, small projections."""
    log_a = np.tile(np.log(np.arange(1, d_state + 1, dtype=dtype)), (d_inner, 1))
    scale = 1.0 / np.sqrt(d_inner)
    return SSMParams(
        log_a=log_a.astype(dtype),
        w_b=(rng.standard_normal((d_inner, d_state)) * scale).astype(dtype),
        w_c=(rng.standard_normal((d_inner, d_state)) * scale).astype(dtype),
        w_delta=(rng.standard_normal(d_inner) * scale).astype(dtype),
        delta_bias=0.0,
        d_skip=np.ones(d_inner, dtype=dtype),
    )


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def select_params(x, params: SSMParams) -> SelectedParams:
    """Project the input sequence onto per-step B, C and delta.

    delta_t = softplus(x_t . w_delta + bias), one value per step,
    replicated across the D channels.
    """
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != params.d_inner:
        raise ShapeError(f"select_params: x {x.shape} vs D={params.d_inner}")
    b = numerics.matmul(x, params.w_b)
    c = numerics.matmul(x, params.w_c)
    u = x @ params.w_delta + params.delta_bias
    numerics.count_macs_event(x.shape[0] * params.d_inner)
    delta = np.repeat(numerics.softplus(u)[:, None], params.d_inner, axis=1)
    return SelectedParams(b=b, c=c, delta=np.ascontiguousarray(delta))


def discretize_zoh(a_diag, b, delta):
    """Zero-order-hold discretization of the diagonal system.

    a_diag: (D, N) negative entries; b: (N,); delta: (D,) or scalar, > 0.
    Returns (abar, bbar), each (D, N):
        abar = exp(delta * a)
        bbar = (exp(delta * a) - 1) / (delta * a) * delta * b
    with the 3-term Taylor branch of (e^z - 1)/z below |z| = 1e-6.
    """
    a_diag = np.asarray(a_diag, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta <= 0):
        raise SpeechSsmError("discretize_zoh: delta must be strictly positive")
    if delta.ndim == 0:
        delta = np.full(a_diag.shape[0], float(delta))
    z = delta[:, None] * a_diag
    abar = np.exp(z)
    bbar = _scan_numpy._phi(z) * delta[:, None] * np.asarray(b)[None, :]
    return abar, bbar


def _prep(x, params: SSMParams):
    x = np.ascontiguousarray(x)
    dtype = x.dtype
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        x = x.astype(np.float64)
        dtype = x.dtype
    p = params if params.log_a.dtype == dtype else params.astype(dtype)
    sel = select_params(x, p)
    a = np.ascontiguousarray(p.a)
    return x, p, sel, a


def selective_scan(x, params: SSMParams, backend=None):
    """Run the recurrence over an (L, D) sequence; returns (L, D)."""
    x, p, sel, a = _prep(x, params)
    numerics.count_macs_event(scan_macs(x.shape[0], p.d_inner, p.d_state))
    y, _ = _backend(backend).scan_forward(
        sel.delta, a, sel.b, sel.c, np.ascontiguousarray(p.d_skip), x, False)
    return y


def selective_scan_with_cache(x, params: SSMParams, backend=None):
    """Forward pass that also keeps what the backward sweep needs."""
    x, p, sel, a = _prep(x, params)
    numerics.count_macs_event(scan_macs(x.shape[0], p.d_inner, p.d_state))
    y, hist = _backend(backend).scan_forward(
        sel.delta, a, sel.b, sel.c, np.ascontiguousarray(p.d_skip), x, True)
    cache = (x, p, sel, a, hist, backend)
    return y, cache


def selective_scan_backward(x, params: SSMParams, upstream, cache=None):
    """Analytic reverse sweep.

    Returns a dict of gradients keyed like SSMParams fields (log_a, w_b,
    w_c, w_delta, delta_bias, d_skip) plus "x". If no cache from
    selective_scan_with_cache is given, the forward is recomputed.
    """
    if cache is None:
        _, cache = selective_scan_with_cache(x, params)
    x, p, sel, a, hist, backend = cache
    upstream = np.ascontiguousarray(upstream, dtype=x.dtype)
    ddelta, da, db, dc, dd_skip, dx = _backend(backend).scan_backward(
        sel.delta, a, sel.b, sel.c, np.ascontiguousarray(p.d_skip), x, hist, upstream)

    # chain through the selection projections
    u = x @ p.w_delta + p.delta_bias
    du = ddelta.sum(axis=1) * numerics.sigmoid(u)
    dw_delta = x.T @ du
    dbias = float(du.sum())
    dw_b = numerics.matmul(x.T, db)
    dw_c = numerics.matmul(x.T, dc)
    dx = dx + numerics.matmul(db, p.w_b.T) + numerics.matmul(dc, p.w_c.T) \
        + du[:, None] * p.w_delta[None, :]
    # a = -exp(log_a), so d/dlog_a = a itself
    dlog_a = da * a
    return {
        "x": dx, "log_a": dlog_a, "w_b": dw_b, "w_c": dw_c,
        "w_delta": dw_delta, "delta_bias": dbias, "d_skip": dd_skip,
    }


def scan_macs(L, D, N):
    """Closed-form MAC count of one scan call.

    Convention: 6 MACs per (t, d, n) for discretization, state update and
    readout, plus 1 per (t, d) for the skip term.
    """
    return L * D * (6 * N + 1)
