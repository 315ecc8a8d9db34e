"""Reverse-mode tensor ops, sampling/warping and gradient checking."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fogflow.tensor import (
    ABS_EPS, ParamStore, Tensor, as_tensor, bilinear_sample, concat, conv2d, grad_check,
    laplacian, pad2d, pixel_grid, sample, softmax, upsample, warp, warp_with_mask,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def _check(fn, shapes, rng, tol=1e-6, **kw):
    ps = ParamStore({f"x{i}": rng.normal(size=s) for i, s in enumerate(shapes)})
    return grad_check(lambda p: fn(*[p[f"x{i}"] for i in range(len(shapes))]), ps, **kw)


class TestArithmetic:
    def test_broadcast_add_mul_grad(self, rng):
        assert _check(lambda a, b: ((a + b) * a).sum(), [(3, 4), (4,)], rng) < 1e-6

    def test_div_pow_exp_log(self, rng):
        def f(a, b):
            pos = (a * a + 1.0)
            return ((pos.log() + (b * 0.3).exp()) / pos ** 0.5).sum()
        assert _check(f, [(5,), (5,)], rng) < 1e-6

    def test_tanh_sqrt_abs(self, rng):
        assert _check(lambda a: (a.tanh() + (a * a + 0.5).sqrt() + a.abs()).sum(), [(6,)], rng) < 1e-6

    def test_smoothed_abs_is_zero_at_zero(self):
        assert Tensor(0.0).abs().item() == 0.0
        assert Tensor(3.0).abs().item() == pytest.approx(3.0, abs=ABS_EPS)

    def test_matmul_batched(self, rng):
        assert _check(lambda a, b: (a @ b).tanh().sum(), [(2, 3, 4), (4, 5)], rng) < 1e-6

    def test_matmul_rejects_3d_right(self, rng):
        with pytest.raises(ValueError):
            Tensor(np.ones((2, 2))) @ Tensor(np.ones((2, 2, 2)))

    def test_reductions_and_reshape(self, rng):
        def f(a):
            return (a.sum(axis=0, keepdims=True) * a).mean(axis=1).reshape(2, 2).transpose().sum()
        assert _check(f, [(4, 3)], rng) < 1e-6

    def test_take_scatters_repeated_indices(self):
        x = Tensor(np.arange(4.0), requires_grad=True)
        x.take(np.array([0, 0, 3])).sum().backward()
        np.testing.assert_array_equal(x.grad, [2.0, 0.0, 0.0, 1.0])

    def test_getitem_and_concat(self, rng):
        assert _check(lambda a, b: concat([a[1:], b], axis=0).exp().sum(), [(3, 2), (2, 2)], rng) < 1e-6

    def test_softmax_rows_sum_to_one(self, rng):
        s = softmax(Tensor(rng.normal(size=(4, 7)) * 50), axis=1)
        np.testing.assert_allclose(s.data.sum(axis=1), 1.0, atol=1e-12)

    def test_backward_needs_scalar_or_seed(self):
        x = Tensor(np.ones(3), requires_grad=True)
        (x * 2.0).backward(np.ones(3))
        np.testing.assert_array_equal(x.grad, [2.0, 2.0, 2.0])

    def test_constants_do_not_build_graph(self):
        y = Tensor(np.ones(3)) * 2.0
        assert not y.requires_grad and y._parents == ()


class TestSampling:
    def test_zero_flow_warp_is_identity(self, rng):
        img = rng.random((6, 7, 3))
        np.testing.assert_array_equal(warp(img, np.zeros((6, 7, 2))).data, img)

    def test_integer_shift(self, rng):
        img = rng.random((5, 6, 2))
        flow = np.zeros((5, 6, 2))
        flow[..., 0] = 1.0
        out = warp(img, flow).data
        np.testing.assert_allclose(out[:, :-1], img[:, 1:])
        np.testing.assert_allclose(out[:, -1], img[:, -1])  # clamped to the border

    def test_oob_flag(self):
        img = np.zeros((4, 4, 1))
        flow = np.zeros((4, 4, 2))
        flow[0, 0] = (-0.5, 0.0)
        flow[3, 3] = (0.0, 0.25)
        _, oob = warp_with_mask(img, flow)
        assert oob[0, 0] and oob[3, 3] and oob.sum() == 2

    def test_extent_mismatch(self):
        with pytest.raises(ValueError):
            warp(np.zeros((4, 4, 1)), np.zeros((4, 5, 2)))

    def test_bilinear_matches_hand_value(self):
        src = np.array([[0.0, 1.0], [2.0, 3.0]])
        val, oob = bilinear_sample(src, 0.25, 0.5)
        assert val[0] == pytest.approx(0.75 * 0.5 * 0 + 0.25 * 0.5 * 1 + 0.75 * 0.5 * 2 + 0.25 * 0.5 * 3)
        assert not oob

    def test_right_border_exact(self):
        src = np.arange(12.0).reshape(3, 4)
        val, _ = bilinear_sample(src, 3.0, 2.0)
        assert val[0] == 11.0

    def test_warp_grad_wrt_image_and_flow(self, rng):
        img0 = rng.random((8, 8, 3))
        ps = ParamStore({"img": img0, "flow": rng.uniform(-1.3, 1.3, (8, 8, 2))})
        err = grad_check(lambda p: (warp(p["img"], p["flow"]) ** 2).sum(), ps)
        assert err < 1e-5

    def test_upsample_constant_and_shape(self):
        out = upsample(Tensor(np.full((3, 4, 2), 7.0)), 4)
        assert out.shape == (12, 16, 2)
        np.testing.assert_allclose(out.data, 7.0)

    def test_pixel_grid_read_only(self):
        xs, ys = pixel_grid(2, 3)
        with pytest.raises(ValueError):
            xs[0, 0] = 5
        np.testing.assert_array_equal(xs[1], [0, 1, 2])
        np.testing.assert_array_equal(ys[:, 0], [0, 1])

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-3, 3), st.floats(-3, 3))
    def test_sample_stays_in_value_range(self, x, y):
        src = np.random.default_rng(0).random((4, 5, 1))
        val, _ = sample(src, np.array([x]), np.array([y]))
        assert src.min() - 1e-12 <= val.data.min() and val.data.max() <= src.max() + 1e-12


class TestStencils:
    def test_laplacian_of_affine_is_zero(self):
        i, j = np.mgrid[0:6, 0:7]
        lap = laplacian(2.0 * i + 3.0 * j + 1.0).data
        np.testing.assert_allclose(lap, 0.0, atol=1e-12)

    def test_laplacian_of_quadratic(self):
        i, j = np.mgrid[0:6, 0:6]
        lap = laplacian((i ** 2 + j ** 2).astype(float)).data
        np.testing.assert_allclose(lap[1:-1, 1:-1], 4.0)

    def test_laplacian_too_small(self):
        with pytest.raises(ValueError):
            laplacian(np.zeros((2, 5)))

    def test_conv_matches_direct_loop(self, rng):
        x = rng.normal(size=(5, 6, 2))
        w = rng.normal(size=(3 * 3 * 2, 4))
        b = rng.normal(size=4)
        out = conv2d(x, Tensor(w), Tensor(b)).data
        xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
        wk = w.reshape(3, 3, 2, 4)
        ref = np.zeros((5, 6, 4))
        for i in range(5):
            for j in range(6):
                ref[i, j] = np.einsum("abc,abcd->d", xp[i:i + 3, j:j + 3], wk) + b
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_conv_stride_two_extent(self, rng):
        out = conv2d(rng.normal(size=(8, 8, 3)), Tensor(rng.normal(size=(27, 5))), stride=2)
        assert out.shape == (4, 4, 5)

    def test_conv_and_pad_grads(self, rng):
        def f(x, w):
            return conv2d(pad2d(x, 1), w, stride=2).tanh().sum()
        assert _check(f, [(6, 6, 2), (18, 3)], rng) < 1e-6


class TestGradCheck:
    def test_detects_wrong_gradient(self):
        ps = ParamStore({"a": np.array([0.3, -0.7])})

        def bad(p):
            x = p["a"]
            # forward is x**2 but backward claims 3x
            return Tensor._node((x.data ** 2).sum(), (x,), lambda g: (g * 3 * x.data,))
        assert grad_check(bad, ps) > 0.1

    def test_eps_bounds(self):
        ps = ParamStore({"a": np.ones(2)})
        with pytest.raises(ValueError):
            grad_check(lambda p: p["a"].sum(), ps, eps=0.1)

    def test_non_scalar_rejected(self):
        ps = ParamStore({"a": np.ones(2)})
        with pytest.raises(ValueError):
            grad_check(lambda p: p["a"] * 2.0, ps)

    @pytest.mark.filterwarnings("ignore:divide by zero:RuntimeWarning")
    def test_non_finite_rejected(self):
        ps = ParamStore({"a": np.zeros(2)})
        with pytest.raises(FloatingPointError):
            grad_check(lambda p: p["a"].log().sum(), ps)

    def test_subsampled_coordinates(self, rng):
        ps = ParamStore({"a": rng.normal(size=500)})
        assert grad_check(lambda p: (p["a"] ** 2).sum(), ps, max_coords=20) < 1e-6


class TestParamStore:
    def test_state_roundtrip_and_copy_prefix(self, rng):
        ps = ParamStore({"enc.w": rng.normal(size=(2, 2)), "dec.b": np.zeros(3)})
        assert ps.num_params == 7
        sub = ps.copy("enc.")
        assert sub.names() == ["enc.w"]
        sub["enc.w"].data[:] = 0
        assert not np.all(ps["enc.w"].data == 0)
        ps.load_state({"dec.b": np.ones(3)})
        np.testing.assert_array_equal(ps["dec.b"].data, 1.0)

    def test_rejects_non_finite_and_bad_shape(self):
        ps = ParamStore()
        with pytest.raises(ValueError):
            ps.add("a", [np.nan])
        ps.add("b", np.zeros(2))
        with pytest.raises(ValueError):
            ps.load_state({"b": np.zeros(3)})

    def test_as_tensor_passthrough(self):
        t = Tensor(1.0)
        assert as_tensor(t) is t
