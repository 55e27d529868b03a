"""Dense-tensor primitives every other module builds on.

Arrays are plain numpy ndarrays: row-major, float64 for training and
correctness checks, float32 only as a benchmark timing mode. All
operations are pure functions; nothing here mutates its inputs.

Backward helpers live next to the forwards they differentiate. None of
them build a graph: callers keep whatever cache the backward needs. The
universal gradient oracle is finite_diff_grad at the bottom.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import InvalidLengthError, NumericError, ShapeError

# ---------------------------------------------------------------------------
# MAC counting
#
# Convention (pinned by the cost-model invariants): one MAC is one
# multiply-accumulate. A matmul (m,k)@(k,n) costs m*k*n; a conv costs
# L_out*C_out*(C_in/groups)*K. Activations, norms, softmax, plain adds and
# pure elementwise multiplies cost 0. The counter is process-global and not
# thread safe; timing runs are single-threaded anyway.
# ---------------------------------------------------------------------------


class MacCounter:
    """Accumulates multiply-accumulate counts while active."""

    def __init__(self):
        self.total = 0

    def add(self, n):
        self.total += int(n)


_ACTIVE_COUNTER: MacCounter | None = None


class mac_counting:
    """Context manager that installs a fresh MacCounter.

    >>> with mac_counting() as c:
    ...     matmul(a, b)
    >>> c.total
    """

    def __enter__(self):
        global _ACTIVE_COUNTER
        self._prev = _ACTIVE_COUNTER
        self.counter = MacCounter()
        _ACTIVE_COUNTER = self.counter
        return self.counter

    def __exit__(self, *exc):
        global _ACTIVE_COUNTER
        _ACTIVE_COUNTER = self._prev
        return False


def count_macs_event(n):
    """Record n MACs on the active counter, if any."""
    if _ACTIVE_COUNTER is not None:
        _ACTIVE_COUNTER.add(n)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with shape checking and MAC accounting.

    Results are deterministic run to run (fixed BLAS schedule), which is
    what the bitwise causality and determinism tests rely on.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    count_macs_event(a.shape[0] * a.shape[1] * b.shape[1])
    return a @ b


def linear(x, weight, bias=None):
    """x @ weight (+ bias). x: (L, d_in), weight: (d_in, d_out)."""
    y = matmul(x, weight)
    if bias is not None:
        y = y + bias
    return y


def linear_backward(dout, x, weight):
    """Gradients of linear(): returns (dx, dweight, dbias)."""
    dx = matmul(dout, weight.T)
    dw = matmul(x.T, dout)
    db = dout.sum(axis=0)
    return dx, dw, db


# ---------------------------------------------------------------------------
# 1-D convolution
#
# Layout: x is (C_in, L), kernels are (C_out, C_in // groups, K), output is
# (C_out, L'). padding is an int (zeros both sides) or "causal" (K-1 zeros
# on the left only, so output frame t depends only on inputs <= t).
# ---------------------------------------------------------------------------


def _conv_out_len(length, kernel, stride, pad_left, pad_right):
    return (length + pad_left + pad_right - kernel) // stride + 1


def conv1d(x, kernels, bias=None, stride=1, padding=0, groups=1):
    """Grouped 1-D convolution (cross-correlation, the NN convention)."""
    x = np.asarray(x)
    kernels = np.asarray(kernels)
    if x.ndim != 2 or kernels.ndim != 3:
        raise ShapeError(f"conv1d expects (C,L) and (C_out,C_in/g,K), got {x.shape}, {kernels.shape}")
    c_in, length = x.shape
    c_out, c_in_pg, k = kernels.shape
    if c_in != c_in_pg * groups or c_out % groups:
        raise ShapeError(f"group mismatch: x={x.shape} kernels={kernels.shape} groups={groups}")
    if padding == "causal":
        if stride != 1:
            raise ShapeError("causal padding requires stride 1")
        pad_l, pad_r = k - 1, 0
    else:
        pad_l = pad_r = int(padding)
    out_len = _conv_out_len(length, k, stride, pad_l, pad_r)
    if out_len < 1:
        raise InvalidLengthError(
            f"conv1d output empty: L={length} K={k} stride={stride} pad=({pad_l},{pad_r})"
        )
    xp = np.pad(x, ((0, 0), (pad_l, pad_r))) if (pad_l or pad_r) else x
    count_macs_event(out_len * c_out * c_in_pg * k)

    out = np.zeros((c_out, out_len), dtype=x.dtype)
    c_out_pg = c_out // groups
    for g in range(groups):
        xg = xp[g * c_in_pg:(g + 1) * c_in_pg]
        wg = kernels[g * c_out_pg:(g + 1) * c_out_pg]
        og = out[g * c_out_pg:(g + 1) * c_out_pg]
        # accumulate one kernel tap at a time: keeps memory at O(C*L'),
        # no im2col buffer
        for kk in range(k):
            og += wg[:, :, kk] @ xg[:, kk:kk + stride * out_len:stride]
    if bias is not None:
        out = out + np.asarray(bias)[:, None]
    return out


def conv1d_backward(dout, x, kernels, stride=1, padding=0, groups=1):
    """Gradients of conv1d(): returns (dx, dkernels, dbias)."""
    x = np.asarray(x)
    kernels = np.asarray(kernels)
    c_in, length = x.shape
    c_out, c_in_pg, k = kernels.shape
    if padding == "causal":
        pad_l, pad_r = k - 1, 0
    else:
        pad_l = pad_r = int(padding)
    out_len = dout.shape[1]
    xp = np.pad(x, ((0, 0), (pad_l, pad_r))) if (pad_l or pad_r) else x

    dxp = np.zeros_like(xp)
    dk = np.zeros_like(kernels)
    c_out_pg = c_out // groups
    for g in range(groups):
        xg = xp[g * c_in_pg:(g + 1) * c_in_pg]
        wg = kernels[g * c_out_pg:(g + 1) * c_out_pg]
        dog = dout[g * c_out_pg:(g + 1) * c_out_pg]
        dxg = dxp[g * c_in_pg:(g + 1) * c_in_pg]
        for kk in range(k):
            sl = slice(kk, kk + stride * out_len, stride)
            dk[g * c_out_pg:(g + 1) * c_out_pg, :, kk] = dog @ xg[:, sl].T
            dxg[:, sl] += wg[:, :, kk].T @ dog
    dx = dxp[:, pad_l:pad_l + length] if (pad_l or pad_r) else dxp
    db = dout.sum(axis=1)
    return dx, dk, db


# ---------------------------------------------------------------------------
# Activations and normalization
# ---------------------------------------------------------------------------

_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)
_GELU_C = 0.044715


def sigmoid(x):
    # tanh form never overflows and equals 1/(1+e^-x) exactly
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def silu(x):
    return x * sigmoid(x)


def silu_backward(dout, x):
    s = sigmoid(x)
    return dout * (s + x * s * (1.0 - s))


def softplus(x):
    # log(1+e^x) = max(x,0) + log1p(e^{-|x|}); finite for any x and
    # strictly positive down to the f64 underflow edge (x > -745)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus_backward(dout, x):
    return dout * sigmoid(x)


def gelu(x):
    """tanh-form GELU; its analytic derivative is exact for this form."""
    inner = _SQRT_2_OVER_PI * (x + _GELU_C * x ** 3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_backward(dout, x):
    inner = _SQRT_2_OVER_PI * (x + _GELU_C * x ** 3)
    t = np.tanh(inner)
    dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x ** 2)
    return dout * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner)


def softmax(x, axis=-1):
    x = np.asarray(x)
    if not (-x.ndim <= axis < x.ndim):
        raise ShapeError(f"softmax axis {axis} out of range for rank {x.ndim}")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def activation(x, kind, axis=-1):
    """Dispatch by name: silu | softplus | gelu | exp | softmax_over_axis."""
    if kind == "silu":
        return silu(x)
    if kind == "softplus":
        return softplus(x)
    if kind == "gelu":
        return gelu(x)
    if kind == "exp":
        return np.exp(x)
    if kind == "softmax_over_axis":
        return softmax(x, axis=axis)
    raise ShapeError(f"unknown activation kind: {kind!r}")


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to mean 0 / variance 1, then affine."""
    x = np.asarray(x)
    if x.shape[-1] < 1:
        raise ShapeError("layer_norm needs a non-empty last axis")
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    xhat = (x - mean) / np.sqrt(var + eps)
    return xhat * gain + bias


def layer_norm_backward(dout, x, gain, eps=1e-5):
    """Gradients of layer_norm(): returns (dx, dgain, dbias)."""
    d = x.shape[-1]
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv
    dgain = (dout * xhat).reshape(-1, d).sum(axis=0)
    dbias = dout.reshape(-1, d).sum(axis=0)
    dxhat = dout * gain
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dbias


# ---------------------------------------------------------------------------
# Finite-difference gradient oracle
# ---------------------------------------------------------------------------


def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of a scalar function of an array.

    This is the reference every handwritten backward in the repo is
    checked against; keep it dumb and independent of the code it checks.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite evaluation at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_grad_error(analytic, numeric):
    """max_i |a_i - n_i| / max(1e-12, ||a||_inf, ||n||_inf)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(1e-12, np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


# ---------------------------------------------------------------------------
# Binary tensor file: magic "SSLT", u8 dtype (0=f64, 1=f32), u8 rank,
# u32 little-endian extents, then the raw row-major payload.
# ---------------------------------------------------------------------------

_MAGIC = b"SSLT"
_DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODE_FOR = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


def save_tensor(path, array):
    """Write one array in the SSLT container format."""
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(array))


def load_tensor(path):
    with open(path, "rb") as fh:
        data = fh.read()
    arr, rest = tensor_from_bytes(data)
    if rest:
        raise ShapeError(f"{path}: {len(rest)} trailing bytes after tensor payload")
    return arr


def tensor_to_bytes(array):
    # note: ascontiguousarray would promote 0-d arrays to 1-d; tobytes()
    # emits row-major order on its own
    array = np.asarray(array)
    if np.dtype(array.dtype) not in _CODE_FOR:
        raise ShapeError(f"unsupported dtype {array.dtype}; use float64 or float32")
    code = _CODE_FOR[np.dtype(array.dtype)]
    head = _MAGIC + struct.pack("<BB", code, array.ndim)
    head += struct.pack(f"<{array.ndim}I", *array.shape)
    payload = array.astype(_DTYPE_CODES[code], copy=False).tobytes()
    return head + payload


def tensor_from_bytes(data):
    """Parse one tensor from a byte string; returns (array, remainder)."""
    if data[:4] != _MAGIC:
        raise ShapeError("bad tensor magic; not an SSLT payload")
    code, rank = struct.unpack_from("<BB", data, 4)
    if code not in _DTYPE_CODES:
        raise ShapeError(f"unknown dtype code {code}")
    shape = struct.unpack_from(f"<{rank}I", data, 6)
    dtype = _DTYPE_CODES[code]
    off = 6 + 4 * rank
    n = int(np.prod(shape)) if rank else 1
    nbytes = n * dtype.itemsize
    arr = np.frombuffer(data[off:off + nbytes], dtype=dtype).reshape(shape).copy()
    return arr, data[off + nbytes:]
