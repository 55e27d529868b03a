"""Primitive-operation oracles: matmul, conv1d, activations, layer norm,
the finite-difference checker itself, MAC counting, and the tensor file
format."""

import numpy as np
import pytest

from speechssm import numerics as nm
from speechssm.errors import InvalidLengthError, NumericError, ShapeError


def naive_matmul(a, b):
    """Triple-loop oracle, ascending-k accumulation."""
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for kk in range(k):
                s += a[i, kk] * b[kk, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(0)
        b = rng.standard_normal((3, 4))
        assert np.array_equal(nm.matmul(np.eye(3), b), b)

    def test_zeros(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((2, 3))
        assert np.array_equal(nm.matmul(a, np.zeros((3, 4))), np.zeros((2, 4)))

    def test_against_triple_loop_oracle(self):
        # BLAS blocking/FMA may differ from strict ascending-k rounding in
        # the final ulps; values agree to ~1e-15 relative
        rng = np.random.default_rng(2)
        for _ in range(20):
            a = rng.standard_normal((2, 3))
            b = rng.standard_normal((3, 4))
            np.testing.assert_allclose(nm.matmul(a, b), naive_matmul(a, b),
                                       rtol=1e-13, atol=1e-15)

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            nm.matmul(np.zeros((2, 3)), np.zeros((4, 2)))
        with pytest.raises(ShapeError):
            nm.matmul(np.zeros(3), np.zeros((3, 2)))

    def test_identity_associativity_and_scaling(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((4, 4))
        b = rng.standard_normal((4, 4))
        eye = np.eye(4)
        assert np.array_equal(nm.matmul(nm.matmul(a, eye), b),
                              nm.matmul(a, nm.matmul(eye, b)))
        s = 1.7
        np.testing.assert_allclose(nm.matmul(s * a, b), s * nm.matmul(a, b),
                                   rtol=1e-12)


class TestConv1d:
    def test_kernel_one_identity(self):
        x = np.arange(6.0).reshape(1, 6)
        k = np.ones((1, 1, 1))
        assert np.array_equal(nm.conv1d(x, k), x)

    def test_sum_kernel(self):
        out = nm.conv1d(np.array([[1.0, 2.0, 3.0]]), np.ones((1, 1, 3)))
        assert np.array_equal(out, np.array([[6.0]]))

    @pytest.mark.parametrize("stride,padding,groups,c_out", [
        (1, 0, 1, 6), (2, 1, 1, 6), (1, 2, 2, 6), (3, 0, 1, 6),
        (1, "causal", 1, 6), (1, "causal", 4, 4),
    ])
    def test_against_sliding_window_oracle(self, stride, padding, groups, c_out):
        rng = np.random.default_rng(5)
        c_in, k, length = 4, 3, 11
        x = rng.standard_normal((c_in, length))
        w = rng.standard_normal((c_out, c_in // groups, k))
        b = rng.standard_normal(c_out)
        got = nm.conv1d(x, w, b, stride=stride, padding=padding, groups=groups)

        pad_l, pad_r = (k - 1, 0) if padding == "causal" else (padding, padding)
        xp = np.pad(x, ((0, 0), (pad_l, pad_r)))
        out_len = (xp.shape[1] - k) // stride + 1
        want = np.zeros((c_out, out_len))
        cipg, copg = c_in // groups, c_out // groups
        for o in range(c_out):
            g = o // copg
            for t in range(out_len):
                window = xp[g * cipg:(g + 1) * cipg, t * stride:t * stride + k]
                want[o, t] = np.dot(window.ravel(), w[o].ravel()) + b[o]
        np.testing.assert_allclose(got, want, rtol=1e-13, atol=1e-14)

    def test_causal_prefix_bitwise_invariant(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((3, 20))
        w = rng.standard_normal((3, 3, 4))
        y1 = nm.conv1d(x, w, padding="causal")
        x2 = x.copy()
        x2[:, 11:] += 100.0
        y2 = nm.conv1d(x2, w, padding="causal")
        assert np.array_equal(y1[:, :11], y2[:, :11])
        assert not np.array_equal(y1[:, 11:], y2[:, 11:])

    def test_empty_output_errors(self):
        with pytest.raises(InvalidLengthError):
            nm.conv1d(np.zeros((1, 2)), np.ones((1, 1, 5)))

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 9))
        w = rng.standard_normal((4, 1, 3))
        b = rng.standard_normal(4)
        lossw = rng.standard_normal((4, 5))  # L' = (9 + 2 - 3)//2 + 1

        def loss(xx=x, ww=w, bb=b):
            return float((nm.conv1d(xx, ww, bb, stride=2, padding=1, groups=2) * lossw).sum())

        dout = lossw
        dx, dw, db = nm.conv1d_backward(dout, x, w, stride=2, padding=1, groups=2)
        fd_x = nm.finite_diff_grad(lambda v: loss(xx=v), x.copy())
        fd_w = nm.finite_diff_grad(lambda v: loss(ww=v), w.copy())
        fd_b = nm.finite_diff_grad(lambda v: loss(bb=v), b.copy())
        assert nm.relative_grad_error(dx, fd_x) < 1e-8
        assert nm.relative_grad_error(dw, fd_w) < 1e-8
        assert nm.relative_grad_error(db, fd_b) < 1e-8


class TestActivations:
    def test_trivial_values(self):
        assert nm.softplus(np.array(0.0)) == np.log(2.0)
        assert nm.silu(np.array(0.0)) == 0.0
        assert nm.gelu(np.array(0.0)) == 0.0
        np.testing.assert_array_equal(nm.softmax(np.array([0.0, 0.0])), [0.5, 0.5])

    def test_dispatcher(self):
        x = np.linspace(-2, 2, 7)
        assert np.array_equal(nm.activation(x, "silu"), nm.silu(x))
        assert np.array_equal(nm.activation(x, "softplus"), nm.softplus(x))
        assert np.array_equal(nm.activation(x, "gelu"), nm.gelu(x))
        assert np.array_equal(nm.activation(x, "exp"), np.exp(x))
        sm = nm.activation(np.arange(6.0).reshape(2, 3), "softmax_over_axis", axis=1)
        np.testing.assert_allclose(sm.sum(axis=1), 1.0, rtol=1e-15)
        with pytest.raises(ShapeError):
            nm.activation(x, "relu6")
        with pytest.raises(ShapeError):
            nm.activation(x, "softmax_over_axis", axis=3)

    def test_saturation_stays_finite(self):
        x = np.array([-1e4, -50.0, 0.0, 50.0, 1e4])
        for kind in ("silu", "softplus", "gelu"):
            assert np.isfinite(nm.activation(x, kind)).all()
        # softplus stays strictly positive down to the f64 underflow edge
        assert (nm.softplus(np.array([-700.0, -50.0, 0.0, 50.0, 1e4])) > 0).all()

    @pytest.mark.parametrize("fwd,bwd", [
        (nm.silu, nm.silu_backward),
        (nm.softplus, nm.softplus_backward),
        (nm.gelu, nm.gelu_backward),
    ])
    def test_backwards_match_finite_differences(self, fwd, bwd):
        rng = np.random.default_rng(8)
        x = rng.standard_normal(12)
        lossw = rng.standard_normal(12)
        g = bwd(lossw, x)
        fd = nm.finite_diff_grad(lambda v: float((fwd(v) * lossw).sum()), x.copy())
        assert nm.relative_grad_error(g, fd) < 1e-9


class TestLayerNorm:
    def test_constant_vector_maps_to_bias(self):
        x = np.full(5, 3.7)
        out = nm.layer_norm(x, np.ones(5), np.zeros(5))
        np.testing.assert_array_equal(out, np.zeros(5))

    def test_already_normalized(self):
        x = np.array([-1.0, 1.0])
        out = nm.layer_norm(x, np.ones(2), np.zeros(2), eps=1e-5)
        np.testing.assert_allclose(out, x, rtol=1e-5)

    def test_statistics(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((4, 32)) * 3 + 1
        eps = 1e-5
        out = nm.layer_norm(x, np.ones(32), np.zeros(32), eps=eps)
        assert np.abs(out.mean(axis=-1)).max() < 1e-12
        assert np.abs(out.var(axis=-1) - 1.0).max() < 2 * eps

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((3, 7))
        gain = rng.standard_normal(7)
        bias = rng.standard_normal(7)
        lossw = rng.standard_normal((3, 7))
        dx, dg, db = nm.layer_norm_backward(lossw, x, gain)
        fd_x = nm.finite_diff_grad(
            lambda v: float((nm.layer_norm(v, gain, bias) * lossw).sum()), x.copy())
        fd_g = nm.finite_diff_grad(
            lambda v: float((nm.layer_norm(x, v, bias) * lossw).sum()), gain.copy())
        fd_b = nm.finite_diff_grad(
            lambda v: float((nm.layer_norm(x, gain, v) * lossw).sum()), bias.copy())
        assert nm.relative_grad_error(dx, fd_x) < 1e-8
        assert nm.relative_grad_error(dg, fd_g) < 1e-8
        assert nm.relative_grad_error(db, fd_b) < 1e-8


class TestFiniteDiff:
    def test_sum_gives_ones(self):
        g = nm.finite_diff_grad(lambda v: float(v.sum()), np.array([1.0, -2.0, 3.0]))
        np.testing.assert_allclose(g, np.ones(3), atol=1e-10)

    def test_quadratic_is_exact(self):
        g = nm.finite_diff_grad(lambda v: 0.5 * float((v * v).sum()), np.array([1.0, 2.0]))
        np.testing.assert_allclose(g, [1.0, 2.0], atol=1e-8)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_propagates(self):
        with pytest.raises(NumericError):
            nm.finite_diff_grad(lambda v: float(np.log(v).sum()), np.array([1e-7]))


class TestMacCounter:
    def test_matmul_count(self):
        with nm.mac_counting() as c:
            nm.matmul(np.zeros((2, 3)), np.zeros((3, 4)))
        assert c.total == 24

    def test_conv_count(self):
        with nm.mac_counting() as c:
            nm.conv1d(np.zeros((4, 10)), np.zeros((6, 2, 3)), stride=1, groups=2)
        assert c.total == 8 * 6 * 2 * 3

    def test_nesting_restores_outer(self):
        with nm.mac_counting() as outer:
            nm.matmul(np.zeros((1, 1)), np.zeros((1, 1)))
            with nm.mac_counting() as inner:
                nm.matmul(np.zeros((2, 2)), np.zeros((2, 2)))
            nm.matmul(np.zeros((1, 1)), np.zeros((1, 1)))
        assert inner.total == 8
        assert outer.total == 2


class TestTensorFile:
    @pytest.mark.parametrize("dtype", [np.float64, np.float32])
    def test_roundtrip(self, tmp_path, dtype):
        rng = np.random.default_rng(11)
        arr = rng.standard_normal((2, 3, 4)).astype(dtype)
        path = tmp_path / "t.sslt"
        nm.save_tensor(path, arr)
        back = nm.load_tensor(path)
        assert back.dtype == arr.dtype
        assert np.array_equal(back, arr)

    def test_golden_bytes(self):
        # magic, dtype code 1 (f32), rank 2, extents 1 and 2 LE, payload
        arr = np.array([[1.0, -2.0]], dtype=np.float32)
        blob = nm.tensor_to_bytes(arr)
        assert blob[:4] == b"SSLT"
        assert blob[4] == 1 and blob[5] == 2
        assert blob[6:14] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
        assert blob[14:] == arr.tobytes()

    def test_bad_magic_and_trailing(self, tmp_path):
        path = tmp_path / "bad.sslt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ShapeError):
            nm.load_tensor(path)
        good = nm.tensor_to_bytes(np.zeros(2))
        path.write_bytes(good + b"junk")
        with pytest.raises(ShapeError):
            nm.load_tensor(path)

    def test_unsupported_dtype(self, tmp_path):
        with pytest.raises(ShapeError):
            nm.save_tensor(tmp_path / "x.sslt", np.zeros(3, dtype=np.int32))
