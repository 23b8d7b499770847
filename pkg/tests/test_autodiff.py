import numpy as np
import pytest

import hseg.autodiff as ad
from hseg.autodiff import AdamState, Tensor, adam_step, backward, tensor
from oracles import fd_gradient, naive_conv2d, rel_err, scalar_adam


def rand_t(rng, shape, requires_grad=False, dtype=np.float64, scale=1.0):
    return tensor(rng.normal(0, scale, shape), requires_grad=requires_grad, dtype=dtype)


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rand_t(rng, (3, 6, 7))
        w = np.zeros((3, 3, 1, 1))
        for c in range(3):
            w[c, c, 0, 0] = 1.0
        out = ad.conv2d(x, tensor(w, dtype=np.float64), tensor(np.zeros(3), dtype=np.float64), padding=0)
        np.testing.assert_allclose(out.data, x.data)

    def test_zero_weights_give_bias(self):
        rng = np.random.default_rng(1)
        x = rand_t(rng, (2, 5, 5))
        w = tensor(np.zeros((4, 2, 3, 3)), dtype=np.float64)
        b = tensor(np.arange(4.0), dtype=np.float64)
        out = ad.conv2d(x, w, b)
        for c in range(4):
            np.testing.assert_allclose(out.data[c], float(c))

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_naive(self, seed):
        rng = np.random.default_rng(seed)
        Cin, Cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        H, W = int(rng.integers(4, 12)), int(rng.integers(4, 12))
        k = int(rng.choice([1, 3, 5]))
        stride = int(rng.choice([1, 2]))
        padding = int(rng.integers(0, k // 2 + 2))
        if H + 2 * padding < k or W + 2 * padding < k:
            padding = k
        x = rng.normal(0, 1, (Cin, H, W))
        w = rng.normal(0, 1, (Cout, Cin, k, k))
        b = rng.normal(0, 1, Cout)
        out = ad.conv2d(
            tensor(x, dtype=np.float64), tensor(w, dtype=np.float64), tensor(b, dtype=np.float64),
            stride=stride, padding=padding,
        )
        ref = naive_conv2d(x, w, b, stride=stride, padding=padding)
        np.testing.assert_allclose(out.data, ref, atol=1e-6)

    def test_shape_mismatch(self):
        x = tensor(np.zeros((3, 4, 4)))
        w = tensor(np.zeros((2, 5, 3, 3)))
        with pytest.raises(ValueError):
            ad.conv2d(x, w, tensor(np.zeros(2)))

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            ad.conv2d(tensor(np.zeros((1, 4, 4))), tensor(np.zeros((1, 1, 2, 2))), tensor(np.zeros(1)))


class TestBackwardBasics:
    def test_sum_gradient_is_ones(self):
        rng = np.random.default_rng(2)
        x = rand_t(rng, (3, 4), requires_grad=True)
        backward(ad.sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_l1_of_x_with_itself_is_zero_grad(self):
        rng = np.random.default_rng(3)
        x = rand_t(rng, (2, 4, 4), requires_grad=True)
        loss = ad.l1_loss(x, x.data.copy(), np.ones((4, 4)))
        backward(loss)
        np.testing.assert_array_equal(x.grad, 0.0)

    def test_non_scalar_loss_rejected(self):
        x = tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(ValueError):
            backward(ad.relu(x))

    def test_unreached_params_get_zero(self):
        x = tensor(np.ones(3), requires_grad=True)
        y = tensor(np.ones(3), requires_grad=True)
        backward(ad.sum_all(x), params=[x, y])
        np.testing.assert_array_equal(y.grad, 0.0)

    def test_reused_node_accumulates(self):
        x = tensor(np.array([2.0]), requires_grad=True)
        backward(ad.sum_all(ad.add(x, x)))
        np.testing.assert_array_equal(x.grad, [2.0])


def three_layer_loss(params, x, target, mask, dtype):
    w1, b1, w2, b2, w3, b3 = [tensor(p, requires_grad=True, dtype=dtype) for p in params]
    xt = tensor(x, dtype=dtype)
    h = ad.relu(ad.conv2d(xt, w1, b1))
    h = ad.relu(ad.conv2d(h, w2, b2))
    out = ad.conv2d(h, w3, b3)
    loss = ad.l1_loss(out, target.astype(dtype), mask)
    return loss, [w1, b1, w2, b2, w3, b3]


class TestNetworkGradients:
    def setup_method(self):
        rng = np.random.default_rng(4)
        self.params = [
            rng.normal(0, 0.5, (4, 2, 3, 3)),
            rng.normal(0, 0.1, 4),
            rng.normal(0, 0.5, (4, 4, 3, 3)),
            rng.normal(0, 0.1, 4),
            rng.normal(0, 0.5, (3, 4, 1, 1)),
            rng.normal(0, 0.1, 3),
        ]
        self.x = rng.normal(0, 1, (2, 6, 6))
        self.target = rng.normal(0, 1, (3, 6, 6))
        self.mask = (rng.random((6, 6)) > 0.3).astype(np.float64)

    def analytic(self, dtype):
        loss, tensors = three_layer_loss(self.params, self.x, self.target, self.mask, dtype)
        backward(loss, params=tensors)
        return [t.grad for t in tensors]

    def numeric(self, i):
        def f(p):
            ps = list(self.params)
            ps[i] = p
            loss, _ = three_layer_loss(ps, self.x, self.target, self.mask, np.float64)
            return loss.item()

        return fd_gradient(f, self.params[i].copy(), step=1e-6)

    def test_fd_agreement_64_and_32_bit(self):
        g64 = self.analytic(np.float64)
        g32 = self.analytic(np.float32)
        for i in range(len(self.params)):
            n = self.numeric(i)
            assert rel_err(g64[i], n) < 1e-7
            assert rel_err(g32[i], n) < 1e-4


class TestPointwiseOps:
    def test_relu_clamps(self):
        x = tensor(np.array([-2.0, 0.0, 3.0]))
        np.testing.assert_array_equal(ad.relu(x).data, [0.0, 0.0, 3.0])

    def test_relu_of_negated_nonnegative_is_zero(self):
        rng = np.random.default_rng(5)
        x = np.abs(rng.normal(0, 1, (3, 4)))
        np.testing.assert_array_equal(ad.relu(tensor(-x)).data, 0.0)

    def test_sigmoid_range_and_grad(self):
        rng = np.random.default_rng(6)
        x = rand_t(rng, (8,), requires_grad=True)
        s = ad.sigmoid(x)
        assert np.all((s.data > 0) & (s.data < 1))
        backward(ad.sum_all(s))
        expect = s.data * (1 - s.data)
        np.testing.assert_allclose(x.grad, expect, rtol=1e-6)

    def test_concat_then_split_restores(self):
        rng = np.random.default_rng(7)
        a = rand_t(rng, (2, 4, 4))
        b = rand_t(rng, (3, 4, 4))
        cat = ad.concat([a, b])
        ra, rb = ad.split_channels(cat, [2, 3])
        np.testing.assert_array_equal(ra.data, a.data)
        np.testing.assert_array_equal(rb.data, b.data)

    def test_maxpool_then_upsample_idempotent_on_block_constant(self):
        rng = np.random.default_rng(8)
        base = rng.normal(0, 1, (2, 3, 5))
        x = np.repeat(np.repeat(base, 2, axis=1), 2, axis=2)
        up = ad.nearest_upsample2x(ad.maxpool2x2(tensor(x, dtype=np.float64)))
        np.testing.assert_array_equal(up.data, x)

    def test_maxpool_odd_extent_rejected(self):
        with pytest.raises(ValueError):
            ad.maxpool2x2(tensor(np.zeros((1, 3, 4))))

    @pytest.mark.parametrize("op", ["relu", "sigmoid", "maxpool", "upsample", "concat"])
    def test_fd_gradients(self, op):
        rng = np.random.default_rng(hash(op) % 2**32)
        x0 = rng.normal(0, 1, (2, 4, 4))
        mask = np.ones((4, 4)) if op != "maxpool" else np.ones((2, 2))
        if op == "upsample":
            mask = np.ones((8, 8))
        target_shape = {"relu": (2, 4, 4), "sigmoid": (2, 4, 4), "maxpool": (2, 2, 2),
                        "upsample": (2, 8, 8), "concat": (4, 4, 4)}[op]
        target = rng.normal(0, 1, target_shape)

        def build(xv):
            xt = tensor(xv, requires_grad=True, dtype=np.float64)
            if op == "relu":
                out = ad.relu(xt)
            elif op == "sigmoid":
                out = ad.sigmoid(xt)
            elif op == "maxpool":
                out = ad.maxpool2x2(xt)
            elif op == "upsample":
                out = ad.nearest_upsample2x(xt)
            else:
                out = ad.concat([xt, ad.relu(xt)])
            return ad.l1_loss(out, target, mask), xt

        loss, xt = build(x0)
        backward(loss)
        numeric = fd_gradient(lambda v: build(v)[0].item(), x0.copy(), step=1e-6)
        assert rel_err(xt.grad, numeric) < 1e-7


class TestLosses:
    def test_l1_example_six(self):
        pred = tensor(np.zeros((12, 4, 4)))
        target = np.full((12, 4, 4), 0.5)
        loss = ad.l1_loss(pred, target, np.ones((4, 4)))
        assert loss.item() == pytest.approx(6.0)

    def test_l1_zero_mask_rejected(self):
        with pytest.raises(ValueError):
            ad.l1_loss(tensor(np.zeros((2, 3, 3))), np.zeros((2, 3, 3)), np.zeros((3, 3)))

    def test_l1_masked_region_only(self):
        pred = tensor(np.zeros((1, 2, 2)))
        target = np.array([[[1.0, 5.0], [5.0, 5.0]]])
        mask = np.array([[1.0, 0.0], [0.0, 0.0]])
        assert ad.l1_loss(pred, target, mask).item() == pytest.approx(1.0)

    def test_bce_at_zero_logits(self):
        logits = tensor(np.zeros((1, 3, 3)))
        target = np.ones((1, 3, 3))
        assert ad.bce_loss(logits, target).item() == pytest.approx(np.log(2), rel=1e-6)

    def test_bce_gradient(self):
        rng = np.random.default_rng(9)
        z0 = rng.normal(0, 2, (1, 3, 3))
        t = (rng.random((1, 3, 3)) > 0.5).astype(np.float64)

        def f(z):
            return ad.bce_loss(tensor(z, requires_grad=True, dtype=np.float64), t).item()

        zt = tensor(z0, requires_grad=True, dtype=np.float64)
        backward(ad.bce_loss(zt, t))
        numeric = fd_gradient(f, z0.copy(), step=1e-6)
        assert rel_err(zt.grad, numeric) < 1e-7

    def test_bce_extreme_logits_stable(self):
        z = tensor(np.array([[-500.0, 500.0]]))
        t = np.array([[0.0, 1.0]])
        assert np.isfinite(ad.bce_loss(z, t).item())


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = [np.array([1.0, -2.0])]
        state = AdamState.init(p)
        adam_step(p, [np.zeros(2)], state, lr=0.1)
        np.testing.assert_array_equal(p[0], [1.0, -2.0])
        assert state.t == 1

    def test_constant_gradient_reaches_sign_step(self):
        p = [np.array([0.0])]
        g = [np.array([3.7])]
        state = AdamState.init(p)
        prev = 0.0
        for _ in range(200):
            adam_step(p, g, state, lr=0.01)
            step = prev - p[0][0]
            prev = p[0][0]
        assert step == pytest.approx(0.01, rel=1e-3)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(10)
        grads = rng.normal(0, 1, 25)
        ref = scalar_adam(0.3, grads, lr=0.05)
        p = [np.array([0.3])]
        state = AdamState.init(p)
        got = []
        for g in grads:
            adam_step(p, [np.array([g])], state, lr=0.05)
            got.append(p[0][0])
        np.testing.assert_allclose(got, ref, rtol=1e-12)

    def test_single_step_from_zero_state(self):
        # first update with bias correction reduces to -lr*g/(|g|+eps)
        ref = scalar_adam(0.0, [0.42], lr=0.1)[0]
        assert ref == pytest.approx(-0.1 * 0.42 / (0.42 + 1e-8), rel=1e-9)
        p = [np.array([0.0])]
        adam_step(p, [np.array([0.42])], AdamState.init(p), lr=0.1)
        assert p[0][0] == pytest.approx(ref, rel=1e-12)

    def test_shape_mismatch_rejected(self):
        p = [np.zeros(3)]
        with pytest.raises(ValueError):
            adam_step(p, [np.zeros(4)], AdamState.init(p), lr=0.1)


class TestDeterminism:
    def test_forward_deterministic(self):
        rng = np.random.default_rng(11)
        x = rng.normal(0, 1, (3, 8, 8)).astype(np.float32)
        w = rng.normal(0, 1, (4, 3, 3, 3)).astype(np.float32)
        b = rng.normal(0, 1, 4).astype(np.float32)
        a = ad.conv2d(tensor(x), tensor(w), tensor(b)).data
        c = ad.conv2d(tensor(x), tensor(w), tensor(b)).data
        np.testing.assert_array_equal(a, c)
