# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled selective-scan kernels (forward and reverse sweeps).

Same math as _scan_numpy, fused into one loop nest so the sequential
recurrence runs at C speed. float64 and float32 via a fused type.
"""

import numpy as np

cimport cython
from libc.math cimport exp, expm1, isfinite

ctypedef fused floating:
    double
    float

DEF TAYLOR_CUT = 1e-6


cdef inline floating _phi(floating z) noexcept nogil:
    # expm1 keeps the exact branch cancellation-free at the switch point
    if z < TAYLOR_CUT and z > -TAYLOR_CUT:
        return 1.0 + z / 2.0 + z * z / 6.0
    return expm1(z) / z


cdef inline floating _phi_prime(floating z) noexcept nogil:
    if z < TAYLOR_CUT and z > -TAYLOR_CUT:
        return 0.5 + z / 3.0 + z * z / 8.0
    return (z * exp(z) - expm1(z)) / (z * z)


def scan_forward(floating[:, ::1] delta, floating[:, ::1] a,
                 floating[:, ::1] B, floating[:, ::1] C,
                 floating[::1] d_skip, floating[:, ::1] x,
                 bint want_hist=False):
    """Returns (y, hist or None); raises on the first non-finite step."""
    cdef Py_ssize_t L = x.shape[0]
    cdef Py_ssize_t D = x.shape[1]
    cdef Py_ssize_t N = a.shape[1]
    cdef Py_ssize_t t, d, n
    cdef floating dt, xv, z, abar, hv, acc
    cdef Py_ssize_t bad_step = -1

    if floating is double:
        npdtype = np.float64
    else:
        npdtype = np.float32
    y_arr = np.empty((L, D), dtype=npdtype)
    h_arr = np.zeros((D, N), dtype=npdtype)
    hist_arr = np.empty((L, D, N), dtype=npdtype) if want_hist else None

    cdef floating[:, ::1] y = y_arr
    cdef floating[:, ::1] h = h_arr
    cdef floating[:, :, ::1] hist = hist_arr if want_hist else None

    with nogil:
        for t in range(L):
            for d in range(D):
                dt = delta[t, d]
                xv = x[t, d]
                acc = 0.0
                for n in range(N):
                    z = dt * a[d, n]
                    abar = exp(z)
                    hv = abar * h[d, n] + _phi(z) * dt * B[t, n] * xv
                    h[d, n] = hv
                    acc += C[t, n] * hv
                    if want_hist:
                        hist[t, d, n] = hv
                acc += d_skip[d] * xv
                y[t, d] = acc
                if not isfinite(acc):
                    bad_step = t
                    break
            if bad_step >= 0:
                break

    if bad_step >= 0:
        from .errors import NumericError
        raise NumericError(f"non-finite scan state first at step {bad_step}")
    return y_arr, hist_arr


def scan_backward(floating[:, ::1] delta, floating[:, ::1] a,
                  floating[:, ::1] B, floating[:, ::1] C,
                  floating[::1] d_skip, floating[:, ::1] x,
                  floating[:, :, ::1] hist, floating[:, ::1] gy):
    """Reverse sweep; returns (ddelta, da, dB, dC, dd_skip, dx)."""
    cdef Py_ssize_t L = x.shape[0]
    cdef Py_ssize_t D = x.shape[1]
    cdef Py_ssize_t N = a.shape[1]
    cdef Py_ssize_t t, d, n
    cdef floating dt, xv, g, z, abar, phi, phip, bbar
    cdef floating lam_v, h_prev, dabar, dbbar, dz, acc_dx, acc_ddt

    if floating is double:
        npdtype = np.float64
    else:
        npdtype = np.float32
    ddelta_arr = np.zeros((L, D), dtype=npdtype)
    da_arr = np.zeros((D, N), dtype=npdtype)
    dB_arr = np.zeros((L, N), dtype=npdtype)
    dC_arr = np.zeros((L, N), dtype=npdtype)
    dd_skip_arr = np.zeros(D, dtype=npdtype)
    dx_arr = np.zeros((L, D), dtype=npdtype)
    lam_arr = np.zeros((D, N), dtype=npdtype)
    abar_after_arr = np.zeros((D, N), dtype=npdtype)

    cdef floating[:, ::1] ddelta = ddelta_arr
    cdef floating[:, ::1] da = da_arr
    cdef floating[:, ::1] dB = dB_arr
    cdef floating[:, ::1] dC = dC_arr
    cdef floating[::1] dd_skip = dd_skip_arr
    cdef floating[:, ::1] dx = dx_arr
    cdef floating[:, ::1] lam = lam_arr
    cdef floating[:, ::1] abar_after = abar_after_arr

    with nogil:
        for t in range(L - 1, -1, -1):
            for d in range(D):
                dt = delta[t, d]
                xv = x[t, d]
                g = gy[t, d]
                acc_dx = g * d_skip[d]
                acc_ddt = 0.0
                for n in range(N):
                    z = dt * a[d, n]
                    abar = exp(z)
                    phi = _phi(z)
                    phip = _phi_prime(z)
                    bbar = phi * dt * B[t, n]
                    lam_v = g * C[t, n] + lam[d, n] * abar_after[d, n]
                    h_prev = hist[t - 1, d, n] if t > 0 else 0.0
                    dabar = lam_v * h_prev
                    dbbar = lam_v * xv
                    dz = dabar * abar + dbbar * phip * dt * B[t, n]
                    dC[t, n] += g * hist[t, d, n]
                    dB[t, n] += dbbar * phi * dt
                    acc_ddt += dz * a[d, n] + dbbar * phi * B[t, n]
                    da[d, n] += dz * dt
                    acc_dx += lam_v * bbar
                    lam[d, n] = lam_v
                    abar_after[d, n] = abar
                ddelta[t, d] = acc_ddt
                dx[t, d] = acc_dx
                dd_skip[d] += g * xv
    return ddelta_arr, da_arr, dB_arr, dC_arr, dd_skip_arr, dx_arr
