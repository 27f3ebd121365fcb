import numpy as np
import pytest

from dabseg import autodiff as ad
from dabseg.autodiff import ShapeError, Tensor
from dabseg.gradcheck import check_op, run_op_suite


def conv3d_reference(x, w, b=None, stride=1, pad=0):
    """Direct-summation cross-correlation oracle (naive loops)."""
    bs, cin, d, h, wd = x.shape
    cout, _, k, _, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    do = (d + 2 * pad - k) // stride + 1
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    y = np.zeros((bs, cout, do, ho, wo))
    for n in range(bs):
        for o in range(cout):
            for zi in range(do):
                for yi in range(ho):
                    for xi in range(wo):
                        acc = 0.0
                        for c in range(cin):
                            for a in range(k):
                                for bb in range(k):
                                    for cc in range(k):
                                        acc += (
                                            xp[n, c, zi * stride + a, yi * stride + bb, xi * stride + cc]
                                            * w[o, c, a, bb, cc]
                                        )
                        y[n, o, zi, yi, xi] = acc + (b[o] if b is not None else 0.0)
    return y


class TestConv3d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(1, 3, 4, 4, 4))
        w = np.zeros((3, 3, 1, 1, 1))
        for c in range(3):
            w[c, c, 0, 0, 0] = 1.0
        y = ad.conv3d(Tensor(x), Tensor(w), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(y.data, x)

    def test_ones_kernel_neighborhood_counts(self):
        # constant-1 input, all-ones 3^3 kernel on a 5^3 grid: interior voxels
        # see all 27 neighbors; face-center voxels see 18
        x = np.ones((1, 1, 5, 5, 5))
        w = np.ones((1, 1, 3, 3, 3))
        y = ad.conv3d(Tensor(x), Tensor(w), stride=1, pad=1).data[0, 0]
        ref = conv3d_reference(x, w, stride=1, pad=1)[0, 0]
        np.testing.assert_allclose(y, ref)
        assert y[2, 2, 2] == 27
        assert y[0, 2, 2] == 18
        assert y[2, 0, 2] == 18

    def test_output_shape(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 4, 8, 8, 8))
        w = rng.normal(size=(16, 4, 3, 3, 3))
        y = ad.conv3d(Tensor(x), Tensor(w), stride=1, pad=1)
        assert y.shape == (1, 16, 8, 8, 8)

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_direct_summation(self, seed):
        rng = np.random.default_rng(seed)
        cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        d, h, wd = (int(v) for v in rng.integers(3, 7, size=3))
        k = 3 if min(d, h, wd) >= 3 else 1
        stride = 1
        pad = int(rng.integers(0, 2))
        x = rng.normal(size=(1, cin, d, h, wd))
        w = rng.normal(size=(cout, cin, k, k, k))
        b = rng.normal(size=cout)
        y = ad.conv3d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad)
        ref = conv3d_reference(x, w, b, stride=stride, pad=pad)
        np.testing.assert_allclose(y.data, ref, rtol=1e-10, atol=1e-10)

    def test_strided_matches_direct_summation(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(1, 2, 7, 7, 7))
        w = rng.normal(size=(3, 2, 3, 3, 3))
        y = ad.conv3d(Tensor(x), Tensor(w), stride=2, pad=0)
        np.testing.assert_allclose(y.data, conv3d_reference(x, w, stride=2, pad=0), rtol=1e-10)

    def test_non_integral_output_is_shape_error(self):
        x = Tensor(np.zeros((1, 1, 4, 4, 4)))
        w = Tensor(np.zeros((1, 1, 3, 3, 3)))
        with pytest.raises(ShapeError):
            ad.conv3d(x, w, stride=2, pad=1)

    def test_channel_mismatch_is_shape_error(self):
        with pytest.raises(ShapeError):
            ad.conv3d(Tensor(np.zeros((1, 2, 4, 4, 4))), Tensor(np.zeros((1, 3, 3, 3, 3))), pad=1)

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            ad.conv3d(Tensor(np.zeros((1, 1, 4, 4, 4))), Tensor(np.zeros((1, 1, 2, 2, 2))))


class TestInstanceNorm:
    def test_constant_channel_returns_beta(self):
        x = np.full((1, 2, 3, 3, 3), 4.2)
        y = ad.instance_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.full(2, 0.7)))
        np.testing.assert_allclose(y.data, 0.7, atol=1e-6)

    def test_standardizes(self):
        rng = np.random.default_rng(2)
        x = rng.normal(3.0, 2.5, size=(1, 3, 4, 4, 4))
        y = ad.instance_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=1e-12).data
        for c in range(3):
            assert abs(y[0, c].mean()) < 1e-10
            assert abs(y[0, c].var() - 1.0) < 1e-5

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 4, 4, 4))
        gamma = 1.0 + 0.1 * rng.normal(size=3)
        beta = 0.1 * rng.normal(size=3)
        err = check_op(
            lambda xx, gg, bb: (ad.instance_norm(xx, gg, bb, eps=1e-5) * 0.3).sum(),
            [x, gamma, beta],
            h=1e-5,
        )
        assert err < 1e-4

    def test_nonpositive_eps_rejected(self):
        with pytest.raises(ValueError):
            ad.instance_norm(Tensor(np.zeros((1, 1, 2, 2, 2))), Tensor(np.ones(1)), Tensor(np.zeros(1)), eps=0.0)


class TestSoftmaxSigmoid:
    def test_softmax_rows_normalized(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            x = rng.normal(size=(16, 8)) * rng.uniform(0.1, 50)
            y = ad.softmax(Tensor(x), axis=-1).data
            assert (y >= 0).all()
            np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)

    def test_softmax_extreme_values_stable(self):
        x = np.array([[1e4, -1e4, 0.0], [700.0, 710.0, 690.0]])
        y = ad.softmax(Tensor(x), axis=-1).data
        assert np.isfinite(y).all()
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)

    def test_sigmoid_range_and_midpoint(self):
        x = np.array([-800.0, -2.0, 0.0, 2.0, 800.0])
        y = ad.sigmoid(Tensor(x)).data
        assert ((y >= 0) & (y <= 1)).all()
        assert y[2] == 0.5


class TestBackward:
    def test_linear_map_gradient(self):
        x = Tensor(np.arange(12, dtype=np.float64).reshape(3, 4), requires_grad=True)
        x.zero_grad()
        loss = (x * 3.0).sum()
        loss.backward()
        np.testing.assert_array_equal(x.grad, np.full((3, 4), 3.0))

    def test_detached_parameter_gets_zero_gradient(self):
        used = Tensor(np.ones(3), requires_grad=True)
        unused = Tensor(np.ones(3), requires_grad=True)
        used.zero_grad()
        unused.zero_grad()
        (used * used).sum().backward()
        assert used.grad is not None and np.any(used.grad != 0)
        np.testing.assert_array_equal(unused.grad, np.zeros(3))

    def test_non_scalar_backward_is_shape_error(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            (x * 2.0).backward()

    def test_repeated_backward_after_zeroing_is_identical(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        y = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        loss = ((x @ y) * (x + y)).mean()
        x.zero_grad(), y.zero_grad()
        loss.backward()
        gx1, gy1 = x.grad.copy(), y.grad.copy()
        x.zero_grad(), y.zero_grad()
        loss.backward()
        np.testing.assert_array_equal(x.grad, gx1)
        np.testing.assert_array_equal(y.grad, gy1)

    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        x.zero_grad()
        y = x * x + x * 3.0  # dy/dx = 2x + 3 = 7
        y.sum().backward()
        np.testing.assert_allclose(x.grad, [7.0])

    def test_determinism_bitwise(self):
        rng = np.random.default_rng(6)
        data = rng.normal(size=(8, 8))
        runs = []
        for _ in range(2):
            x = Tensor(data.copy(), requires_grad=True)
            x.zero_grad()
            loss = ad.softmax(x @ x, axis=-1).sum() + ad.leaky_relu(x).mean()
            loss.backward()
            runs.append((loss.data.copy(), x.grad.copy()))
        assert np.array_equal(runs[0][0], runs[1][0])
        assert np.array_equal(runs[0][1], runs[1][1])


class TestOpInventorySuite:
    def test_every_op_passes_finite_difference_checks(self):
        results = run_op_suite(seed=0)
        failures = [r for r in results if not r.passed]
        ops = {r.op for r in results}
        expected = {
            "add", "sub", "mul", "matmul", "conv3d", "instance_norm", "layer_norm",
            "leaky_relu", "sigmoid", "softmax", "concat", "reshape", "permute",
            "mean", "sum", "upsample_nearest2x", "slice",
        }
        assert expected <= ops
        counts = {}
        for r in results:
            counts[r.op] = counts.get(r.op, 0) + 1
        assert all(counts[op] >= 3 for op in expected)
        assert not failures, f"gradient failures: {[(r.op, r.max_rel_err) for r in failures]}"


class TestUpsample:
    def test_nearest_doubles_shape(self):
        x = Tensor(np.arange(8, dtype=np.float64).reshape(1, 1, 2, 2, 2))
        y = ad.upsample_nearest2x(x)
        assert y.shape == (1, 1, 4, 4, 4)
        assert y.data[0, 0, 0, 0, 0] == y.data[0, 0, 1, 1, 1] == x.data[0, 0, 0, 0, 0]

    def test_trilinear_flag_gradients(self):
        from dabseg.network import ad_upsample_trilinear2x

        rng = np.random.default_rng(7)
        x = rng.normal(size=(1, 2, 3, 3, 3))
        err = check_op(lambda xx: (ad_upsample_trilinear2x(xx) * 0.5).sum(), [x])
        assert err < 1e-4

    def test_trilinear_constant_preserved(self):
        from dabseg.network import ad_upsample_trilinear2x

        x = Tensor(np.full((1, 1, 3, 3, 3), 2.5))
        y = ad_upsample_trilinear2x(x)
        np.testing.assert_allclose(y.data, 2.5)


class TestNoGrad:
    def test_no_graph_recorded(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with ad.no_grad():
            y = (x * 2.0).sum()
        assert y._backward is None and not y.requires_grad
