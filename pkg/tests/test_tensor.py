import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from freqsynth import tensor as T
from freqsynth.errors import ArgumentError, ShapeError, StateError, UnsupportedConfigError
from freqsynth.tensor import AdamState, Tensor, adam_step, graph_nodes

from gradcheck import check_gradients
from oracles import naive_conv3d


def gaussian_taps(sigma, radius):
    t = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    return t / t.sum()


class TestConv3d:
    def test_identity_kernel(self, rng):
        x = rng.normal(size=(1, 5, 4, 6))
        w = np.zeros((1, 1, 3, 3, 3))
        w[0, 0, 1, 1, 1] = 1.0
        out = T.conv3d(Tensor(x), Tensor(w))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_input_gives_bias(self, rng):
        w = Tensor(rng.normal(size=(3, 2, 3, 3, 3)))
        b = Tensor(np.array([0.5, -1.0, 2.0]))
        out = T.conv3d(Tensor(np.zeros((2, 4, 4, 4))), w, b)
        for c in range(3):
            assert np.all(out.data[c] == b.data[c])

    def test_matches_naive_loops(self, rng):
        x = rng.normal(size=(1, 4, 4, 4))
        w = rng.normal(size=(1, 1, 3, 3, 3))
        out = T.conv3d(Tensor(x), Tensor(w)).data
        ref = naive_conv3d(x, w)
        np.testing.assert_allclose(out, ref, rtol=1e-6, atol=1e-12)

    def test_multichannel_with_bias_matches_naive(self, rng):
        x = rng.normal(size=(3, 5, 4, 3))
        w = rng.normal(size=(2, 3, 5, 3, 1))
        b = rng.normal(size=2)
        out = T.conv3d(Tensor(x), Tensor(w), Tensor(b)).data
        np.testing.assert_allclose(out, naive_conv3d(x, w, b), rtol=1e-6, atol=1e-12)

    def test_shape_preserved(self, rng):
        out = T.conv3d(Tensor(rng.normal(size=(2, 3, 5, 7))), Tensor(rng.normal(size=(4, 2, 3, 3, 3))))
        assert out.shape == (4, 3, 5, 7)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            T.conv3d(Tensor(rng.normal(size=(2, 4, 4, 4))), Tensor(rng.normal(size=(1, 3, 3, 3, 3))))

    def test_even_kernel_rejected(self, rng):
        with pytest.raises(UnsupportedConfigError):
            T.conv3d(Tensor(rng.normal(size=(1, 4, 4, 4))), Tensor(rng.normal(size=(1, 1, 2, 2, 2))))

    def test_linearity(self, rng):
        x, y = rng.normal(size=(2, 2, 5, 5, 5))
        w = Tensor(rng.normal(size=(3, 2, 3, 3, 3)))
        a, c = 1.7, -0.3
        lhs = T.conv3d(Tensor(a * x + c * y), w).data
        rhs = a * T.conv3d(Tensor(x), w).data + c * T.conv3d(Tensor(y), w).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-5)

    def test_deterministic(self, rng):
        x = rng.normal(size=(4, 8, 8, 8)).astype(np.float32)
        w = rng.normal(size=(4, 4, 3, 3, 3)).astype(np.float32)
        a = T.conv3d(Tensor(x), Tensor(w)).data
        b = T.conv3d(Tensor(x), Tensor(w)).data
        assert a.tobytes() == b.tobytes()


class TestConv1dAxis:
    @pytest.mark.parametrize("axis", ["depth", "height", "width"])
    def test_impulse_is_identity(self, rng, axis):
        x = rng.normal(size=(1, 4, 5, 6))
        w = np.zeros((1, 1, 5))
        w[0, 0, 2] = 1.0
        np.testing.assert_array_equal(T.conv1d_axis(Tensor(x), Tensor(w), axis).data, x)

    @pytest.mark.parametrize("axis", ["depth", "height", "width"])
    def test_box_on_constant(self, axis):
        c = 2.5
        x = np.full((1, 5, 5, 5), c)
        w = np.full((1, 1, 3), 1.0 / 3.0)
        out = T.conv1d_axis(Tensor(x), Tensor(w), axis).data[0]
        ax = T.AXES[axis] - 1
        interior = np.take(out, [1, 2, 3], axis=ax)
        edges = np.take(out, [0, 4], axis=ax)
        np.testing.assert_allclose(interior, c, rtol=1e-12)
        np.testing.assert_allclose(edges, 2 * c / 3, rtol=1e-12)

    def test_equals_conv3d_with_axis_kernel(self, rng):
        x = rng.normal(size=(2, 5, 6, 7))
        w = rng.normal(size=(3, 2, 5))
        for axis, shape in (("depth", (5, 1, 1)), ("height", (1, 5, 1)), ("width", (1, 1, 5))):
            dense = w.reshape((3, 2) + shape)
            np.testing.assert_allclose(T.conv1d_axis(Tensor(x), Tensor(w), axis).data,
                                       T.conv3d(Tensor(x), Tensor(dense)).data, atol=1e-12)

    def test_separable_gaussian_matches_outer_product(self, rng):
        x = rng.normal(size=(1, 6, 6, 6))
        taps = gaussian_taps(1.0, 2)
        w1 = taps.reshape(1, 1, -1)
        out = Tensor(x)
        for axis in ("width", "height", "depth"):
            out = T.conv1d_axis(out, Tensor(w1), axis)
        dense = np.einsum("i,j,k->ijk", taps, taps, taps)[None, None]
        ref = T.conv3d(Tensor(x), Tensor(dense)).data
        np.testing.assert_allclose(out.data, ref, rtol=1e-5, atol=1e-12)

    def test_bad_axis(self, rng):
        with pytest.raises(ArgumentError):
            T.conv1d_axis(Tensor(rng.normal(size=(1, 3, 3, 3))), Tensor(np.ones((1, 1, 3))), "time")


class TestSoftmax:
    def test_equal_logits(self):
        out = T.softmax_channels(Tensor(np.zeros((2, 2, 2, 2)))).data
        np.testing.assert_array_equal(out, 0.5)
        out4 = T.softmax_channels(Tensor(np.full((4, 1, 1, 1), 3.0))).data
        np.testing.assert_allclose(out4, 0.25)

    def test_saturation_without_overflow(self):
        x = np.array([1000.0, -1000.0]).reshape(2, 1, 1, 1)
        with np.errstate(over="raise", invalid="raise"):
            out = T.softmax_channels(Tensor(x)).data.ravel()
        np.testing.assert_array_equal(out, [1.0, 0.0])

    def test_closed_form(self):
        out = T.softmax_channels(Tensor(np.array([1.0, 0.0]).reshape(2, 1, 1, 1))).data.ravel()
        e = math.e
        np.testing.assert_allclose(out, [e / (e + 1), 1 / (e + 1)], rtol=1e-12)
        np.testing.assert_allclose(out, [0.7311, 0.2689], atol=5e-5)

    def test_needs_two_channels(self):
        with pytest.raises(ShapeError):
            T.softmax_channels(Tensor(np.zeros((1, 2, 2, 2))))

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, (3, 2, 2, 2), elements=st.floats(-1e6, 1e6)))
    def test_sums_to_one(self, logits):
        out = T.softmax_channels(Tensor(logits)).data
        np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-6)
        assert np.all(out >= 0)


class TestL1Mean:
    def test_equal_inputs(self):
        assert T.l1_mean(Tensor([1.0, 2.0]), Tensor([1.0, 2.0])).item() == 0.0

    def test_value(self):
        assert T.l1_mean(Tensor([1.0, 2.0, 3.0]), Tensor([0.0, 0.0, 0.0])).item() == 2.0

    def test_gradient_single(self):
        a = Tensor([2.0], requires_grad=True)
        T.l1_mean(a, Tensor([1.0])).backward()
        np.testing.assert_array_equal(a.grad, [1.0])

    def test_subgradient_at_tie_is_zero(self):
        a = Tensor([1.0, 3.0], requires_grad=True)
        T.l1_mean(a, Tensor([1.0, 1.0])).backward()
        np.testing.assert_array_equal(a.grad, [0.0, 0.5])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.l1_mean(Tensor([1.0, 2.0]), Tensor([1.0]))


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(4.0).reshape(2, 2), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 2)))

    def test_non_scalar_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ArgumentError):
            (x * 2.0).backward()

    def test_accumulates(self, rng):
        x = Tensor(rng.normal(size=(1, 4, 4, 4)))
        w = Tensor(rng.normal(size=(2, 1, 3, 3, 3)), requires_grad=True)
        y = Tensor(rng.normal(size=(2, 4, 4, 4)))
        loss = T.l1_mean(T.conv3d(x, w), y)
        loss.backward()
        once = w.grad.copy()
        loss.backward()
        np.testing.assert_array_equal(w.grad, 2 * once)

    def test_l1_conv_matches_finite_differences(self, rng):
        x = Tensor(rng.normal(size=(1, 4, 4, 4)))
        w = Tensor(rng.normal(size=(1, 1, 3, 3, 3)), requires_grad=True)
        # residuals kept at least 0.5 from the L1 kink
        base = T.conv3d(x, w).data
        y = Tensor(base + rng.choice([-1, 1], size=base.shape) * rng.uniform(0.5, 1.0, base.shape))
        report = check_gradients(lambda: T.l1_mean(T.conv3d(x, w), y), [w])
        assert report.skipped == 0
        assert report.checked == w.size
        assert report.ok, report.failures

    def test_record_visits_each_op_once(self, rng):
        x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        h = x * 2.0
        loss = (h + h * h).sum()
        order = graph_nodes(loss)
        assert len(order) == len({id(n) for n in order})
        ids = [id(n) for n in order]
        assert order[-1] is loss
        assert ids.index(id(x)) < ids.index(id(h)) < ids.index(id(loss))
        loss.backward()
        np.testing.assert_allclose(x.grad, 2 + 8 * x.data)

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = (x * 3.0).sum()
        assert not y.requires_grad and y.is_leaf


class TestGradients:
    """Finite-difference checks at 64-bit for every differentiable op."""

    def _check(self, fn, params, **kw):
        report = check_gradients(fn, params, **kw)
        assert report.ok, report.failures
        return report

    def test_conv3d_all_inputs(self, rng):
        x = Tensor(rng.normal(size=(2, 4, 3, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 3, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        proj = rng.normal(size=(3, 4, 3, 5))
        self._check(lambda: (T.conv3d(x, w, b) * proj).sum(), [x, w, b])

    @pytest.mark.parametrize("axis", ["depth", "height", "width"])
    def test_conv1d_axis(self, rng, axis):
        x = Tensor(rng.normal(size=(2, 5, 4, 6)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 2, 5)), requires_grad=True)
        b = Tensor(rng.normal(size=2), requires_grad=True)
        proj = rng.normal(size=(2, 5, 4, 6))
        self._check(lambda: (T.conv1d_axis(x, w, axis, b) * proj).sum(), [x, w, b])

    def test_softmax_channels(self, rng):
        x = Tensor(rng.normal(size=(3, 2, 3, 2)), requires_grad=True)
        proj = rng.normal(size=(3, 2, 3, 2))
        self._check(lambda: (T.softmax_channels(x) * proj).sum(), [x])

    def test_l1_mean_both_arguments(self, rng):
        a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        b = Tensor(a.data + rng.choice([-1, 1], size=(2, 3, 4)) * rng.uniform(0.5, 1, (2, 3, 4)),
                   requires_grad=True)
        self._check(lambda: T.l1_mean(a, b), [a, b])

    def test_pool_upsample_concat(self, rng):
        x = Tensor(rng.normal(size=(2, 4, 4, 4)), requires_grad=True)
        proj = rng.normal(size=(4, 4, 4, 4))

        def f():
            up = T.upsample3d(T.max_pool3d(x, 2), 2)
            return (T.concat([up, x], axis=0) * proj).sum()

        self._check(f, [x])

    def test_elementwise_and_reductions(self, rng):
        a = Tensor(rng.normal(size=(3, 1, 4)), requires_grad=True)
        b = Tensor(rng.uniform(0.5, 2.0, size=(1, 2, 4)), requires_grad=True)

        def f():
            z = (a * b - a / b + T.sigmoid(a) * 0.5) ** 2.0
            return T.log_sigmoid(z.mean(axis=2)).sum() + T.relu(a[1:]).sum()

        self._check(f, [a, b])

    def test_max_pool_routes_to_argmax(self):
        x = Tensor(np.arange(8.0).reshape(1, 2, 2, 2), requires_grad=True)
        T.max_pool3d(x, 2).sum().backward()
        expected = np.zeros(8)
        expected[-1] = 1
        np.testing.assert_array_equal(x.grad.ravel(), expected)

    def test_pool_indivisible(self):
        with pytest.raises(ShapeError, match="height"):
            T.max_pool3d(Tensor(np.zeros((1, 4, 3, 4))), 2)


class TestAdam:
    def test_zero_grads_leave_params(self, rng):
        p = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        before = p.data.copy()
        state = AdamState.for_params([p])
        p.grad = np.zeros_like(p.data)
        adam_step([p], state)
        np.testing.assert_array_equal(p.data, before)
        assert p.grad is None and state.t == 1

    def test_first_step(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        p.grad = np.array([1.0])
        state = AdamState.for_params([p], lr=0.001)
        adam_step([p], state)
        # m_hat = v_hat = 1 after bias correction
        np.testing.assert_allclose(p.data, [-0.001 / (1 + 1e-8)], rtol=1e-12)

    def test_converges_on_quadratic(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        state = AdamState.for_params([p], lr=0.001)
        for step in range(10_000):
            ((p - 3.0) ** 2.0).sum().backward()
            adam_step([p], state)
            if abs(p.data[0] - 3.0) < 0.01:
                break
        assert abs(p.data[0] - 3.0) < 0.01
        assert state.t == step + 1

    def test_missing_grad(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        with pytest.raises(StateError):
            adam_step([p], AdamState.for_params([p]))

    def test_state_shapes(self, rng):
        ps = [Tensor(rng.normal(size=s), requires_grad=True) for s in [(2, 3), (4,)]]
        state = AdamState.for_params(ps)
        assert [m.shape for m in state.m] == [(2, 3), (4,)]
        assert [v.shape for v in state.v] == [(2, 3), (4,)]
