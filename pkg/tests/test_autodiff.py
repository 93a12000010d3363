import math

import numpy as np
import pytest

from dasnn.autodiff import (
    BatchNormParams,
    NonFiniteError,
    Tape,
    Tensor,
    add,
    backward,
    batchnorm,
    concat_channels,
    conv2d,
    cross_entropy_smoothed,
    global_avgpool,
    linear,
    mean_all,
    mul,
    sum_all,
)
from dasnn.autodiff.gradcheck import gradcheck


def rand(rng, *shape, grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=grad)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestConv2d:
    def test_all_ones(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = conv2d(x, w)
        assert out.shape == (1, 1, 1, 1)
        assert out.data.item() == 9.0

    def test_identity_kernel(self, rng):
        x = Tensor(rng.standard_normal((2, 1, 5, 6)))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        out = conv2d(x, Tensor(k), stride=1, padding=1)
        np.testing.assert_array_equal(out.data, x.data)

    @pytest.mark.parametrize("h,k,s,p", [(8, 3, 1, 0), (8, 3, 2, 1), (7, 1, 2, 0), (5, 3, 1, 1)])
    def test_output_size(self, h, k, s, p):
        x = Tensor(np.zeros((1, 2, h, h)))
        w = Tensor(np.zeros((3, 2, k, k)))
        assert conv2d(x, w, s, p).shape == (1, 3, (h + 2 * p - k) // s + 1, (h + 2 * p - k) // s + 1)

    def test_matches_direct_loops(self, rng):
        x = rng.standard_normal((2, 3, 6, 5))
        w = rng.standard_normal((4, 3, 3, 3))
        out = conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros_like(out)
        for b in range(2):
            for o in range(4):
                for i in range(out.shape[2]):
                    for j in range(out.shape[3]):
                        ref[b, o, i, j] = (xp[b, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]).sum()
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (1, 0)])
    def test_gradcheck(self, rng, stride, padding):
        x = rand(rng, 2, 3, 8, 8)
        w = rand(rng, 4, 3, 3, 3)
        shape = conv2d(x, w, stride, padding).shape
        c = Tensor(np.cos(np.arange(np.prod(shape))).reshape(shape))
        r = gradcheck(lambda: sum_all(mul(conv2d(x, w, stride, padding), c)), [x, w], max_entries=60)
        assert r.rel_error <= 1e-4

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
        with pytest.raises(ValueError):
            conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))

    def test_non_finite_output_raises(self):
        x = Tensor(np.full((1, 1, 3, 3), np.inf))
        with pytest.raises(NonFiniteError):
            conv2d(x, Tensor(np.ones((1, 1, 3, 3))))


class TestBatchNorm:
    def test_constant_channel_gives_zero(self):
        p = BatchNormParams.create(2, dtype=np.float64)
        x = Tensor(np.full((4, 2, 3, 3), 7.5))
        out = batchnorm(x, p, training=True)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_standard_normalizes(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.standard_normal((10_000, 1)))
        out = batchnorm(x, BatchNormParams.create(1, dtype=np.float64), training=True).data
        assert abs(out.mean()) < 0.05
        assert abs(out.var() - 1.0) < 0.1

    @pytest.mark.parametrize("v_th", [1.0, 0.5])
    def test_tdbn_scales_by_threshold(self, v_th):
        rng = np.random.default_rng(8)
        x = Tensor(rng.standard_normal((10_000, 1)))
        p = BatchNormParams.create(1, mode="tdbn", v_th=v_th, dtype=np.float64)
        out = batchnorm(x, p, training=True, time_steps=4).data
        assert abs(out.mean()) < 0.05
        assert abs(out.var() - v_th ** 2) / v_th ** 2 < 0.1

    def test_time_fold_must_divide(self):
        p = BatchNormParams.create(1, mode="tdbn", dtype=np.float64)
        with pytest.raises(ValueError):
            batchnorm(Tensor(np.zeros((10, 1))), p, training=True, time_steps=3)

    def test_running_stats_update(self):
        p = BatchNormParams.create(1, dtype=np.float64)
        x = Tensor(np.array([[1.0], [3.0]]))
        batchnorm(x, p, training=True)
        assert p.running_mean[0] == pytest.approx(0.1 * 2.0)
        assert p.running_var[0] == pytest.approx(0.9 + 0.1 * 2.0)

    def test_eval_is_affine_per_channel(self, rng):
        p = BatchNormParams.create(3, dtype=np.float64)
        p.running_mean = rng.standard_normal(3)
        p.running_var = rng.uniform(0.5, 2.0, 3)
        p.gamma.data[:] = rng.standard_normal(3)
        p.beta.data[:] = rng.standard_normal(3)
        x1, x2 = rng.standard_normal((2, 5, 3, 2, 2))
        f = lambda x: batchnorm(Tensor(x), p, training=False).data
        lam = 0.3
        np.testing.assert_allclose(f(lam * x1 + (1 - lam) * x2), lam * f(x1) + (1 - lam) * f(x2), atol=1e-12)

    def test_zero_variance_no_division_error(self):
        p = BatchNormParams.create(1, dtype=np.float64)
        out = batchnorm(Tensor(np.zeros((1, 1, 1, 1))), p, training=True)
        assert np.isfinite(out.data).all()

    @pytest.mark.parametrize("mode,training", [("standard", True), ("tdbn", True), ("standard", False)])
    def test_gradcheck(self, rng, mode, training):
        p = BatchNormParams.create(3, mode=mode, v_th=0.7, dtype=np.float64)
        p.gamma.data[:] = rng.standard_normal(3)
        p.beta.data[:] = rng.standard_normal(3)
        x = rand(rng, 4, 3, 3, 3)
        c = Tensor(rng.standard_normal((4, 3, 3, 3)))
        r = gradcheck(lambda: sum_all(mul(batchnorm(x, p, training=training, time_steps=2), c)),
                      [x, p.gamma, p.beta])
        assert r.rel_error <= 1e-4

    def test_rejects_nonpositive_running_var(self):
        p = BatchNormParams.create(2)
        with pytest.raises(ValueError):
            BatchNormParams(p.gamma, p.beta, p.running_mean, np.zeros(2))


class TestAddConcat:
    def test_additive_identity(self, rng):
        x = Tensor(rng.standard_normal((2, 3)))
        np.testing.assert_array_equal(add(x, Tensor(np.zeros((2, 3)))).data, x.data)

    def test_binary_plus_binary(self, rng):
        a = Tensor(rng.integers(0, 2, (50,)).astype(float))
        b = Tensor(rng.integers(0, 2, (50,)).astype(float))
        assert set(np.unique(add(a, b).data)) <= {0.0, 1.0, 2.0}

    def test_add_gradcheck(self, rng):
        a, b = rand(rng, 3, 4), rand(rng, 3, 4)
        c = Tensor(rng.standard_normal((3, 4)))
        r = gradcheck(lambda: sum_all(mul(mul(add(a, b), add(a, b)), c)), [a, b])
        assert r.rel_error <= 1e-6

    def test_add_shape_mismatch(self):
        with pytest.raises(ValueError):
            add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_concat_shape(self):
        out = concat_channels(Tensor(np.zeros((2, 4, 5, 5))), Tensor(np.ones((2, 8, 5, 5))))
        assert out.shape == (2, 12, 5, 5)

    def test_concat_backward_splits_exactly(self, rng):
        a, b = rand(rng, 2, 4, 3, 3), rand(rng, 2, 8, 3, 3)
        up = rng.standard_normal((2, 12, 3, 3))
        with Tape() as tape:
            loss = sum_all(mul(concat_channels(a, b), Tensor(up)))
        backward(tape, loss)
        np.testing.assert_array_equal(a.grad, up[:, :4])
        np.testing.assert_array_equal(b.grad, up[:, 4:])

    def test_concat_gradcheck(self, rng):
        a, b = rand(rng, 2, 2, 3, 3), rand(rng, 2, 3, 3, 3)
        c = Tensor(rng.standard_normal((2, 5, 3, 3)))
        r = gradcheck(lambda: sum_all(mul(mul(concat_channels(a, b), concat_channels(a, b)), c)), [a, b])
        assert r.rel_error <= 1e-6

    def test_concat_mismatch(self):
        with pytest.raises(ValueError):
            concat_channels(Tensor(np.zeros((2, 4, 5, 5))), Tensor(np.zeros((2, 4, 4, 5))))


class TestPoolLinearLoss:
    def test_avgpool_constant(self):
        assert np.all(global_avgpool(Tensor(np.full((2, 3, 4, 4), 1.75))).data == 1.75)

    def test_avgpool_mean(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))
        assert global_avgpool(x).data.item() == 2.5

    def test_avgpool_gradcheck(self, rng):
        x = rand(rng, 2, 3, 4, 5)
        c = Tensor(rng.standard_normal((2, 3)))
        r = gradcheck(lambda: sum_all(mul(mul(global_avgpool(x), global_avgpool(x)), c)), [x])
        assert r.rel_error <= 1e-6

    def test_linear_identity(self, rng):
        x = Tensor(rng.standard_normal((3, 4)))
        out = linear(x, Tensor(np.eye(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_linear_zero_weight(self, rng):
        b = rng.standard_normal(5)
        out = linear(Tensor(rng.standard_normal((3, 4))), Tensor(np.zeros((5, 4))), Tensor(b))
        np.testing.assert_array_equal(out.data, np.broadcast_to(b, (3, 5)))

    def test_linear_gradcheck(self, rng):
        x, w, b = rand(rng, 3, 4), rand(rng, 5, 4), rand(rng, 5)
        c = Tensor(rng.standard_normal((3, 5)))
        r = gradcheck(lambda: sum_all(mul(mul(linear(x, w, b), linear(x, w, b)), c)), [x, w, b])
        assert r.rel_error <= 1e-6

    def test_linear_shape_mismatch(self):
        with pytest.raises(ValueError):
            linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    @pytest.mark.parametrize("k", [2, 10, 1000])
    def test_uniform_logits_give_log_k(self, k):
        loss = cross_entropy_smoothed(Tensor(np.zeros((3, k))), [0, 1, 1], 0.0)
        assert loss.item() == pytest.approx(math.log(k), rel=1e-12)

    def test_confident_correct_logits_give_zero(self):
        z = np.full((2, 4), -1e4)
        z[0, 2] = z[1, 0] = 1e4
        assert cross_entropy_smoothed(Tensor(z), [2, 0], 0.0).item() == pytest.approx(0.0, abs=1e-12)

    def test_smoothed_matches_direct_formula(self, rng):
        z = rng.standard_normal((6, 10)) * 3
        y = rng.integers(0, 10, 6)
        eps = 0.1
        expected = 0.0
        for row, t in zip(z, y):
            logsum = math.log(sum(math.exp(v) for v in row))
            for j, v in enumerate(row):
                target = eps / 10 + (1 - eps if j == t else 0.0)
                expected -= target * (v - logsum)
        expected /= 6
        assert cross_entropy_smoothed(Tensor(z), y, eps).item() == pytest.approx(expected, abs=1e-6)

    def test_cross_entropy_gradcheck(self, rng):
        z = rand(rng, 4, 6)
        r = gradcheck(lambda: cross_entropy_smoothed(z, [0, 5, 2, 2], 0.1), [z])
        assert r.rel_error <= 1e-6

    def test_bad_target(self):
        with pytest.raises(ValueError):
            cross_entropy_smoothed(Tensor(np.zeros((1, 3))), [3])


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = rand(rng, 3, 4)
        with Tape() as tape:
            loss = sum_all(x)
        backward(tape, loss)
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_paths_are_summed(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        with Tape() as tape:
            y = add(mul(x, x), x)
            loss = sum_all(y)
        backward(tape, loss)
        assert x.grad[0] == 7.0

    def test_unused_tensor_gets_no_gradient(self, rng):
        x, unused = rand(rng, 2), rand(rng, 2)
        with Tape() as tape:
            loss = sum_all(x)
        backward(tape, loss)
        assert unused.grad is None

    def test_each_node_visited_once(self, rng):
        x = rand(rng, 2)
        calls = []
        with Tape() as tape:
            y = add(x, x)
            z = mul(y, y)
            loss = mean_all(z)
        for node in tape.nodes:
            orig = node.backward
            node.backward = lambda g, orig=orig, n=node: (calls.append(n.op), orig(g))[1]
        backward(tape, loss)
        assert calls == ["mean", "mul", "add"]

    def test_foreign_loss_rejected(self, rng):
        x = rand(rng, 2)
        with Tape():
            loss = sum_all(x)
        with pytest.raises(ValueError):
            backward(Tape(), loss)

    def test_non_scalar_rejected(self, rng):
        x = rand(rng, 2)
        with Tape() as tape:
            y = add(x, x)
        with pytest.raises(ValueError):
            backward(tape, y)

    def test_tape_order_is_topological(self, rng):
        x = rand(rng, 2)
        with Tape() as tape:
            sum_all(mul(add(x, x), x))
        seen = {id(x)}
        for node in tape.nodes:
            assert all(id(i) in seen for i in node.inputs)
            seen.add(id(node.output))
