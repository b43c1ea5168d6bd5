"""Tensor substrate: elementwise ops, convolution, and the reverse tape."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskcodec import tensor as T
from maskcodec.errors import NumericsError, ShapeError
from maskcodec.gradcheck import grad_check


class TestElementwise:
    def test_add(self):
        out = T.add(T.Tensor([1.0, 2.0]), T.Tensor([3.0, 4.0]))
        np.testing.assert_array_equal(out.data, [4.0, 6.0])

    def test_mul_by_zero_scalar(self):
        out = T.mul(T.Tensor([2.0, 3.0]), 0.0)
        np.testing.assert_array_equal(out.data, [0.0, 0.0])

    def test_sqrt(self):
        out = T.sqrt(T.Tensor([4.0, 9.0]))
        np.testing.assert_array_equal(out.data, [2.0, 3.0])

    def test_operator_sugar(self):
        a = T.Tensor([1.0, 2.0])
        np.testing.assert_allclose(((a + 1.0) * 2.0 - a).data, [3.0, 4.0])

    def test_trailing_broadcast(self):
        a = T.Tensor(np.ones((2, 3)))
        b = T.Tensor([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(T.add(a, b).data, [[2, 3, 4], [2, 3, 4]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
            T.add(T.Tensor([1.0, 2.0]), T.Tensor([1.0, 2.0, 3.0]))

    def test_nan_rejected_at_creation(self):
        with pytest.raises(NumericsError):
            T.Tensor([1.0, np.nan])

    def test_inf_rejected_at_creation(self):
        with pytest.raises(NumericsError):
            T.Tensor([np.inf])

    def test_checked_mode_toggle(self):
        old = T.set_checked(False)
        try:
            t = T.Tensor([np.nan])
            assert np.isnan(t.data[0])
        finally:
            T.set_checked(old)

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8),
           st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
    @settings(max_examples=50, deadline=None)
    def test_scalar_add_associative(self, values, s1, s2):
        a = T.Tensor(values)
        left = T.add(T.add(a, s1), s2).data
        right = T.add(a, s1 + s2).data
        np.testing.assert_allclose(left, right, rtol=1e-12, atol=1e-9)

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8),
           st.floats(-100, 100), st.floats(-100, 100))
    @settings(max_examples=50, deadline=None)
    def test_scalar_mul_associative(self, values, s1, s2):
        a = T.Tensor(values)
        left = T.mul(T.mul(a, s1), s2).data
        right = T.mul(a, s1 * s2).data
        np.testing.assert_allclose(left, right, rtol=1e-12, atol=1e-9)


class TestConv2d:
    def test_identity_1x1_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.random((5, 6, 3))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0] = np.eye(3)
        out = T.conv2d(T.Tensor(x), T.Tensor(k))
        np.testing.assert_array_equal(out.data, x)

    def test_all_ones_kernel_constant_field(self):
        v = 0.37
        x = np.full((6, 6, 1), v)
        k = np.ones((3, 3, 1, 1))
        out = T.conv2d(T.Tensor(x), T.Tensor(k), stride=1, pad=1)
        np.testing.assert_allclose(out.data[1:-1, 1:-1], 9 * v, rtol=1e-12)

    def test_shape_formula(self):
        x = T.Tensor(np.zeros((8, 8, 2)))
        k = T.Tensor(np.zeros((3, 3, 2, 5)))
        out = T.conv2d(x, k, stride=2, pad=1)
        assert out.shape == (4, 4, 5)

    def test_kernel_larger_than_padded_input(self):
        with pytest.raises(ShapeError, match="larger than padded input"):
            T.conv2d(T.Tensor(np.zeros((2, 2, 1))), T.Tensor(np.zeros((5, 5, 1, 1))))

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError, match="odd"):
            T.conv2d(T.Tensor(np.zeros((4, 4, 1))), T.Tensor(np.zeros((2, 2, 1, 1))))

    def test_bad_stride_rejected(self):
        with pytest.raises(ShapeError, match="stride"):
            T.conv2d(T.Tensor(np.zeros((4, 4, 1))), T.Tensor(np.zeros((3, 3, 1, 1))), stride=3)

    def test_transpose_inverts_stride2_geometry(self):
        rng = np.random.default_rng(1)
        x = T.Tensor(rng.random((4, 4, 2)))
        k = T.Tensor(rng.normal(size=(3, 3, 3, 2)))
        out = T.conv2d_transpose(x, k, stride=2, pad=1, out_pad=1)
        assert out.shape == (8, 8, 3)

    def test_transpose_odd_targets(self):
        rng = np.random.default_rng(2)
        x = T.Tensor(rng.random((3, 5, 2)))
        k = T.Tensor(rng.normal(size=(3, 3, 4, 2)))
        out = T.conv2d_transpose(x, k, stride=2, pad=1, out_pad=(0, 1))
        assert out.shape == (5, 10, 4)

    def test_transpose_is_conv_adjoint(self):
        # <conv(x, K), u> == <x, convT(u, K)>: the same kernel array serves both,
        # with its last two axes read as (c_in, c_out) by conv and (c_out, c_in)
        # by the transpose.
        rng = np.random.default_rng(3)
        x = rng.random((7, 7, 2))
        k = rng.normal(size=(3, 3, 2, 4))
        u = rng.random((4, 4, 4))
        cx = T.conv2d(T.Tensor(x), T.Tensor(k), stride=2, pad=1).data
        ctu = T.conv2d_transpose(T.Tensor(u), T.Tensor(k), stride=2, pad=1, out_pad=0)
        assert ctu.shape == (7, 7, 2)
        np.testing.assert_allclose((cx * u).sum(), (x * ctu.data).sum(), rtol=1e-12)


class TestBackward:
    def test_square_at_three(self):
        x = T.Tensor([3.0], requires_grad=True)
        with T.Graph() as g:
            loss = T.tsum(T.square(x))
        grads = T.backward(g, loss)
        np.testing.assert_allclose(grads[x], [6.0])

    def test_sum_gives_ones(self):
        x = T.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with T.Graph() as g:
            loss = T.tsum(x)
        grads = T.backward(g, loss)
        np.testing.assert_array_equal(grads[x], np.ones((2, 3)))

    def test_non_scalar_loss_rejected(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        with T.Graph() as g:
            out = T.square(x)
        with pytest.raises(ShapeError, match="scalar"):
            T.backward(g, out)

    def test_linearity_of_backward(self):
        rng = np.random.default_rng(7)
        xv = rng.random((3, 3))
        x1 = T.Tensor(xv, requires_grad=True)
        with T.Graph() as g1:
            l1 = T.tsum(T.square(x1))
        g_l1 = T.backward(g1, l1)[x1]

        x2 = T.Tensor(xv, requires_grad=True)
        with T.Graph() as g2:
            l2 = T.tsum(T.exp(x2))
        g_l2 = T.backward(g2, l2)[x2]

        x3 = T.Tensor(xv, requires_grad=True)
        with T.Graph() as g3:
            l3 = T.add(T.tsum(T.square(x3)), T.tsum(T.exp(x3)))
        g_l3 = T.backward(g3, l3)[x3]
        np.testing.assert_allclose(g_l3, g_l1 + g_l2, rtol=1e-12, atol=1e-12)

    def test_grad_accumulates_over_reuse(self):
        x = T.Tensor([2.0], requires_grad=True)
        with T.Graph() as g:
            loss = T.tsum(T.mul(x, x))  # both operands are the same leaf
        grads = T.backward(g, loss)
        np.testing.assert_allclose(grads[x], [4.0])

    def test_composed_conv_gdn_mse_matches_finite_differences(self):
        from maskcodec.layers import GdnParams, gdn

        rng = np.random.default_rng(11)
        x = rng.random((6, 6, 2))
        target = rng.random((3, 3, 3))
        kv = rng.normal(0, 0.4, size=(3, 3, 2, 3))
        beta = T.Tensor(np.full(3, 0.8), requires_grad=True)
        gamma = T.Tensor(0.1 * np.eye(3) + 0.01, requires_grad=True)

        def f(kernel):
            y = T.conv2d(T.Tensor(x), kernel, stride=2, pad=1)
            y = gdn(y, GdnParams(beta=beta, gamma=gamma))
            return T.tmean(T.square(T.sub(y, T.Tensor(target))))

        report = grad_check(f, T.Tensor(kv), tol=1e-4)
        assert report.passed, str(report)


def _point(shape=(3, 3, 2), seed=5, lo=0.2, hi=1.2):
    rng = np.random.default_rng(seed)
    return T.Tensor(rng.uniform(lo, hi, size=shape))


_COTAN = np.random.default_rng(99).normal(size=(3, 3, 2))

# every registered differentiable op; straight-through ste_round is excluded
# by design (its "gradient" is the identity surrogate, not the derivative)
_OP_CASES = [
    ("add", lambda t: T.tsum(T.mul(T.add(t, _point(seed=1)), T.Tensor(_COTAN)))),
    ("sub", lambda t: T.tsum(T.mul(T.sub(t, _point(seed=2)), T.Tensor(_COTAN)))),
    ("mul", lambda t: T.tsum(T.mul(T.mul(t, _point(seed=3)), T.Tensor(_COTAN)))),
    ("div", lambda t: T.tsum(T.mul(T.div(t, _point(seed=4, lo=0.5, hi=1.5)), T.Tensor(_COTAN)))),
    ("neg", lambda t: T.tsum(T.mul(T.neg(t), T.Tensor(_COTAN)))),
    ("square", lambda t: T.tsum(T.mul(T.square(t), T.Tensor(_COTAN)))),
    ("sqrt", lambda t: T.tsum(T.mul(T.sqrt(t), T.Tensor(_COTAN)))),
    ("clamp_min", lambda t: T.tsum(T.mul(T.clamp_min(t, 0.7), T.Tensor(_COTAN)))),
    ("abs", lambda t: T.tsum(T.mul(T.absolute(t), T.Tensor(_COTAN)))),
    ("exp", lambda t: T.tsum(T.mul(T.exp(t), T.Tensor(_COTAN)))),
    ("log", lambda t: T.tsum(T.mul(T.log(t), T.Tensor(_COTAN)))),
    ("powc", lambda t: T.tsum(T.mul(T.powc(t, 1.7), T.Tensor(_COTAN)))),
    ("sigmoid", lambda t: T.tsum(T.mul(T.sigmoid(t), T.Tensor(_COTAN)))),
    ("softplus", lambda t: T.tsum(T.mul(T.softplus(t), T.Tensor(_COTAN)))),
    ("gauss_cdf", lambda t: T.tsum(T.mul(T.gauss_cdf(t), T.Tensor(_COTAN)))),
    ("leaky_relu", lambda t: T.tsum(T.mul(T.leaky_relu(t), T.Tensor(_COTAN)))),
    ("sum", lambda t: T.tsum(t)),
    ("mean", lambda t: T.tmean(T.mul(t, T.Tensor(_COTAN)))),
    ("reshape", lambda t: T.tsum(T.mul(T.reshape(t, (9, 2)), T.Tensor(_COTAN.reshape(9, 2))))),
    ("transpose2d", lambda t: T.tsum(T.mul(T.transpose2d(T.reshape(t, (3, 6))),
                                           T.Tensor(_COTAN.reshape(6, 3))))),
    ("matmul", lambda t: T.tsum(T.mul(T.matmul(T.reshape(t, (3, 6)),
                                                _point(shape=(6, 4), seed=6)),
                                      T.Tensor(np.random.default_rng(98).normal(size=(3, 4)))))),
    ("slice_channels", lambda t: T.tsum(T.mul(T.slice_channels(t, 0, 1),
                                              T.Tensor(_COTAN[..., :1])))),
    ("conv2d", lambda t: T.tsum(T.mul(T.conv2d(t, _point(shape=(3, 3, 2, 2), seed=7,
                                                         lo=-0.5, hi=0.5), stride=1, pad=1),
                                      T.Tensor(np.random.default_rng(97).normal(size=(3, 3, 2)))))),
    ("conv2d_transpose", lambda t: T.tsum(T.mul(
        T.conv2d_transpose(t, _point(shape=(3, 3, 2, 2), seed=8, lo=-0.5, hi=0.5),
                           stride=2, pad=1, out_pad=1),
        T.Tensor(np.random.default_rng(96).normal(size=(6, 6, 2)))))),
    ("avg_pool2", lambda t: T.tsum(T.mul(T.avg_pool2(t),
                                          T.Tensor(np.random.default_rng(95).normal(size=(2, 2, 2))))),
     (4, 4, 2)),
]


@pytest.mark.parametrize("case", _OP_CASES, ids=[c[0] for c in _OP_CASES])
def test_every_op_gradient_rule(case):
    name, fn = case[0], case[1]
    shape = case[2] if len(case) > 2 else (3, 3, 2)
    report = grad_check(fn, _point(shape=shape), tol=1e-4, eps=1e-5)
    assert report.passed, f"{name}: {report}"


def test_kernel_gradient_of_conv(self=None):
    rng = np.random.default_rng(12)
    x = T.Tensor(rng.random((4, 4, 2)))
    cot = rng.normal(size=(4, 4, 3))

    def f(kernel):
        return T.tsum(T.mul(T.conv2d(x, kernel, stride=1, pad=1), T.Tensor(cot)))

    report = grad_check(f, T.Tensor(rng.normal(0, 0.3, size=(3, 3, 2, 3))), tol=1e-4)
    assert report.passed, str(report)


class TestGradCheck:
    def test_square_passes_tight(self):
        report = grad_check(lambda t: T.tsum(T.square(t)), T.Tensor([3.0]), tol=1e-6)
        assert report.passed and report.max_rel_err < 1e-6

    def test_abs_kink_excluded(self):
        report = grad_check(lambda t: T.tsum(T.absolute(t)),
                            T.Tensor([0.0, 1.0, -2.0]), tol=1e-6)
        assert report.passed
        assert report.excluded == [0]

    def test_nonfinite_probe_names_coordinate(self):
        def f(t):
            return T.tsum(T.log(t))

        with pytest.raises(NumericsError, match="coordinate"):
            # log probes negative territory at x=eps/2
            grad_check(f, T.Tensor([5e-5, 1.0]), tol=1e-4, eps=1e-4)
