"""Pure-numpy selective scan, the fallback when the compiled kernel is absent.

Discretization is vectorized in time chunks; the recurrence itself is a
per-step loop (it is inherently sequential). Matches the compiled kernel
step for step; only reduction rounding may differ in the last ulp.
"""

import numpy as np

from .errors import NumericError

_CHUNK = 256
_TAYLOR_CUT = 1e-6


def _phi(z):
    """(e^z - 1)/z with a 3-term Taylor branch near zero.

    expm1 keeps the exact branch cancellation-free right down to the
    switch point."""
    small = np.abs(z) < _TAYLOR_CUT
    safe = np.where(small, 1.0, z)
    out = np.expm1(safe) / safe
    return np.where(small, 1.0 + z / 2.0 + z * z / 6.0, out)


def _phi_prime(z):
    """d/dz of (e^z - 1)/z, same branch point as _phi."""
    small = np.abs(z) < _TAYLOR_CUT
    safe = np.where(small, 1.0, z)
    out = (safe * np.exp(safe) - np.expm1(safe)) / (safe * safe)
    return np.where(small, 0.5 + z / 3.0 + z * z / 8.0, out)


def scan_forward(delta, a, B, C, d_skip, x, want_hist=False):
    """Run the selective recurrence.

    delta: (L,D) >0, a: (D,N) <0, B/C: (L,N), d_skip: (D,), x: (L,D).
    Returns (y, hist) where hist is the (L,D,N) state history when
    want_hist else None.
    """
    L, D = x.shape
    N = a.shape[1]
    dtype = x.dtype
    y = np.empty((L, D), dtype=dtype)
    hist = np.empty((L, D, N), dtype=dtype) if want_hist else None
    h = np.zeros((D, N), dtype=dtype)
    for t0 in range(0, L, _CHUNK):
        t1 = min(t0 + _CHUNK, L)
        z = delta[t0:t1, :, None] * a[None, :, :]
        abar = np.exp(z)
        bbar = _phi(z) * delta[t0:t1, :, None] * B[t0:t1, None, :]
        h_enter = h.copy()
        for i in range(t1 - t0):
            t = t0 + i
            h = abar[i] * h + bbar[i] * x[t][:, None]
            y[t] = (h * C[t][None, :]).sum(axis=1) + d_skip * x[t]
            if want_hist:
                hist[t] = h
        # finiteness is checked per chunk; replay pinpoints the first bad step
        if not (np.isfinite(y[t0:t1]).all() and np.isfinite(h).all()):
            hh = h_enter
            for i in range(t1 - t0):
                hh = abar[i] * hh + bbar[i] * x[t0 + i][:, None]
                if not (np.isfinite(hh).all() and np.isfinite(y[t0 + i]).all()):
                    raise NumericError(f"non-finite scan state first at step {t0 + i}")
            raise NumericError(f"non-finite scan state in steps [{t0},{t1})")
    return y, hist


def scan_backward(delta, a, B, C, d_skip, x, hist, gy):
    """Reverse sweep of scan_forward.

    Returns (ddelta, da, dB, dC, dd_skip, dx); hist is the forward state
    history (required).
    """
    L, D = x.shape
    N = a.shape[1]
    dtype = x.dtype
    ddelta = np.zeros((L, D), dtype=dtype)
    da = np.zeros((D, N), dtype=dtype)
    dB = np.zeros((L, N), dtype=dtype)
    dC = np.zeros((L, N), dtype=dtype)
    dd_skip = np.zeros(D, dtype=dtype)
    dx = np.zeros((L, D), dtype=dtype)

    lam_after = np.zeros((D, N), dtype=dtype)
    abar_after = np.zeros((D, N), dtype=dtype)
    t1 = L
    while t1 > 0:
        t0 = max(0, t1 - _CHUNK)
        z = delta[t0:t1, :, None] * a[None, :, :]
        abar = np.exp(z)
        phi = _phi(z)
        phip = _phi_prime(z)
        bbar = phi * delta[t0:t1, :, None] * B[t0:t1, None, :]
        for t in range(t1 - 1, t0 - 1, -1):
            i = t - t0
            lam = gy[t][:, None] * C[t][None, :] + lam_after * abar_after
            h_prev = hist[t - 1] if t > 0 else 0.0
            dabar = lam * h_prev
            dbbar = lam * x[t][:, None]
            dz = dabar * abar[i] + dbbar * phip[i] * delta[t][:, None] * B[t][None, :]
            dC[t] = (gy[t][:, None] * hist[t]).sum(axis=0)
            dB[t] = (dbbar * phi[i] * delta[t][:, None]).sum(axis=0)
            ddelta[t] = (dz * a).sum(axis=1) + (dbbar * phi[i] * B[t][None, :]).sum(axis=1)
            da += dz * delta[t][:, None]
            dx[t] = gy[t] * d_skip + (lam * bbar[i]).sum(axis=1)
            dd_skip += gy[t] * x[t]
            lam_after = lam
            abar_after = abar[i]
        t1 = t0
    return ddelta, da, dB, dC, dd_skip, dx
