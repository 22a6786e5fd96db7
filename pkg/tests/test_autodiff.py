"""Tensor/tape tests: hand-derived values plus the finite-difference oracle."""

import math

import numpy as np
import pytest

from moerec import autodiff as ad
from moerec.autodiff import Tape, Tensor, backward
from moerec.errors import ContractError, ShapeError

RNG = np.random.default_rng(20240811)


def fd_grad(f, tensor, h=1e-5):
    """Central finite differences of the scalar f() wrt one tensor, in place."""
    g = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        lp = f().item()
        flat[i] = orig - h
        lm = f().item()
        flat[i] = orig
        gflat[i] = (lp - lm) / (2.0 * h)
    return g


def check_grads(f, tensors, rtol=1e-4):
    """Autodiff vs finite differences for every tensor, relative error <= rtol."""
    for t in tensors:
        t.zero_grad()
    with Tape() as tape:
        loss = f()
    backward(loss, tape)
    for t in tensors:
        fd = fd_grad(f, t)
        denom = np.maximum(1.0, np.maximum(np.abs(t.grad), np.abs(fd)))
        err = np.max(np.abs(t.grad - fd) / denom)
        assert err < rtol, f"gradient mismatch {err:.3e} for shape {t.data.shape}"


def param(*shape):
    return Tensor(RNG.standard_normal(shape), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(ad.matmul(a, b).data, b.data)

    def test_manual_expansion(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_array_equal(ad.matmul(a, b).data, [[19.0, 22.0], [43.0, 50.0]])

    def test_shape_error_names_both_shapes(self):
        a = Tensor(np.zeros((2, 3)))
        b = Tensor(np.zeros((4, 2)))
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
            ad.matmul(a, b)

    def test_grad(self):
        a, b = param(3, 4), param(4, 2)
        check_grads(lambda: ad.tsum(ad.matmul(a, b)), [a, b])

    def test_grad_batched_with_2d_weight(self):
        a, w = param(2, 3, 4), param(4, 5)
        check_grads(lambda: ad.tsum(ad.matmul(a, w)), [a, w])

    def test_grad_stacked(self):
        a, b = param(2, 3, 4, 5), param(2, 3, 5, 4)
        check_grads(lambda: ad.tsum(ad.matmul(a, b)), [a, b])


class TestSoftmax:
    def test_symmetry(self):
        out = ad.softmax(Tensor([0.0, 0.0, 0.0])).data
        np.testing.assert_allclose(out, [1 / 3] * 3, atol=1e-15)

    def test_scalar_oracle(self):
        # independent scalar exp/sum computation
        e = [math.exp(v) for v in (1.0, 0.0, 0.0)]
        expected = [v / sum(e) for v in e]
        out = ad.softmax(Tensor([1.0, 0.0, 0.0])).data
        np.testing.assert_allclose(out, expected, atol=1e-12)
        np.testing.assert_allclose(out, [0.57612, 0.21194, 0.21194], atol=1e-4)

    def test_large_magnitudes_no_overflow(self):
        out = ad.softmax(Tensor([1000.0, 0.0])).data
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-300)
        assert np.all(np.isfinite(out))

    def test_sum_to_one_and_shift_invariance(self):
        x = RNG.standard_normal((50, 7)) * 30
        y = ad.softmax(Tensor(x), axis=-1).data
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
        y2 = ad.softmax(Tensor(x + 123.456), axis=-1).data
        np.testing.assert_allclose(y, y2, atol=1e-12)

    def test_grad(self):
        x = param(4, 6)
        w = Tensor(RNG.standard_normal((4, 6)))
        check_grads(lambda: ad.tsum(ad.mul(ad.softmax(x, axis=-1), w)), [x])


class TestLayerNorm:
    def test_constant_row_absorbed_by_eps(self):
        gain, bias = Tensor(np.ones(4)), Tensor(np.zeros(4))
        out = ad.layer_norm(Tensor([[5.0, 5.0, 5.0, 5.0]]), gain, bias).data
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_two_point_row(self):
        gain, bias = Tensor(np.ones(2)), Tensor(np.zeros(2))
        out = ad.layer_norm(Tensor([[1.0, 3.0]]), gain, bias).data
        np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-3)

    def test_zero_gain_gives_bias(self):
        gain = Tensor(np.zeros(3))
        bias = Tensor([7.0, 8.0, 9.0])
        out = ad.layer_norm(Tensor([[1.0, 2.0, 3.0]]), gain, bias).data
        np.testing.assert_allclose(out, [[7.0, 8.0, 9.0]], atol=1e-12)

    def test_row_stats(self):
        x = RNG.standard_normal((6, 16))
        gain, bias = Tensor(np.ones(16)), Tensor(np.zeros(16))
        out = ad.layer_norm(Tensor(x), gain, bias).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.std(axis=-1), 1.0, atol=1e-4)

    def test_grad(self):
        x, gain, bias = param(3, 8), param(8), param(8)
        check_grads(lambda: ad.tsum(ad.mul(ad.layer_norm(x, gain, bias),
                                           ad.layer_norm(x, gain, bias))),
                    [x, gain, bias])


class TestCrossEntropy:
    def test_uniform_logits(self):
        logits = Tensor(np.zeros((3, 4)))
        out = ad.cross_entropy(logits, [0, 1, 2])
        assert out.item() == pytest.approx(math.log(4.0), abs=1e-12)

    def test_scalar_oracle_large_margin(self):
        # -log(e^10 / (e^10 + e^-10)) = log(1 + e^-20)
        out = ad.cross_entropy(Tensor([[10.0, -10.0]]), [0])
        assert out.item() == pytest.approx(math.log1p(math.exp(-20.0)), rel=1e-9)
        assert out.item() == pytest.approx(2.06e-9, rel=1e-2)

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            ad.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])

    def test_grad_is_softmax_minus_onehot(self):
        z = RNG.standard_normal((4, 5))
        logits = Tensor(z, requires_grad=True)
        labels = np.array([0, 2, 4, 1])
        with Tape() as tape:
            loss = ad.cross_entropy(logits, labels)
        backward(loss, tape)
        e = np.exp(z - z.max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)
        p[np.arange(4), labels] -= 1.0
        np.testing.assert_allclose(logits.grad, p / 4.0, atol=1e-12)

    def test_grad_fd(self):
        logits = param(5, 4)
        labels = [0, 1, 2, 3, 1]
        check_grads(lambda: ad.cross_entropy(logits, labels), [logits])


class TestBackward:
    def test_sum_gives_ones(self):
        x = param(3, 5)
        with Tape() as tape:
            loss = ad.tsum(x)
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, np.ones((3, 5)))

    def test_analytic_square(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        with Tape() as tape:
            loss = ad.tsum(ad.mul(x, x))
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0], atol=1e-12)

    def test_non_scalar_loss_rejected(self):
        x = param(3)
        with Tape() as tape:
            y = ad.mul(x, x)
        with pytest.raises(ContractError):
            backward(y, tape)

    def test_unreachable_tensor_keeps_zero_grad(self):
        x, unused = param(3), param(4)
        with Tape() as tape:
            loss = ad.tsum(x)
        backward(loss, tape)
        np.testing.assert_array_equal(unused.grad, np.zeros(4))

    def test_diamond_graph_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        with Tape() as tape:
            y = ad.mul(x, x)          # x^2
            loss = ad.tsum(ad.add(y, y))  # 2x^2 -> d/dx = 4x = 8
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, [8.0], atol=1e-12)

    def test_deterministic_bit_identical(self):
        def run():
            rng = np.random.default_rng(7)
            x = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
            w = Tensor(rng.standard_normal((6, 3)), requires_grad=True)
            with Tape() as tape:
                loss = ad.cross_entropy(ad.matmul(ad.relu(x), w), [0, 1, 2, 0])
            backward(loss, tape)
            return x.grad.copy(), w.grad.copy()

        g1, g2 = run(), run()
        assert (g1[0] == g2[0]).all() and (g1[1] == g2[1]).all()


class TestEveryOpGradcheck:
    """Central finite differences (h=1e-5) vs autodiff for each op."""

    def test_add_broadcast(self):
        a, b = param(4, 3), param(3)
        check_grads(lambda: ad.tsum(ad.mul(ad.add(a, b), ad.add(a, b))), [a, b])

    def test_sub(self):
        a, b = param(4, 3), param(4, 3)
        check_grads(lambda: ad.tsum(ad.mul(ad.sub(a, b), ad.sub(a, b))), [a, b])

    def test_mul_broadcast(self):
        a, b = param(2, 5), param(5)
        check_grads(lambda: ad.tsum(ad.mul(a, b)), [a, b])

    def test_div(self):
        a = param(3, 4)
        b = Tensor(RNG.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
        check_grads(lambda: ad.tsum(ad.div(a, b)), [a, b])

    def test_scale(self):
        a = param(6)
        check_grads(lambda: ad.tsum(ad.scale(a, -2.5)), [a])

    def test_reshape_transpose(self):
        a = param(2, 3, 4)
        check_grads(
            lambda: ad.tsum(ad.mul(ad.transpose(ad.reshape(a, (6, 4)), (1, 0)),
                                   ad.transpose(ad.reshape(a, (6, 4)), (1, 0)))),
            [a],
        )

    def test_concat_stack(self):
        a, b = param(3, 2), param(3, 4)
        check_grads(lambda: ad.tsum(ad.mul(ad.concat([a, b], axis=1),
                                           ad.concat([a, b], axis=1))), [a, b])
        c, d = param(3, 4), param(3, 4)
        check_grads(lambda: ad.tsum(ad.mul(ad.stack([c, d], axis=1),
                                           ad.stack([c, d], axis=1))), [c, d])

    def test_sum_axis_and_mean(self):
        a = param(3, 4, 5)
        check_grads(lambda: ad.tsum(ad.mul(ad.tsum(a, axis=1), ad.tsum(a, axis=1))), [a])
        check_grads(lambda: ad.tmean(ad.mul(a, a)), [a])

    def test_relu(self):
        # keep inputs away from the kink
        a = Tensor(RNG.uniform(0.2, 1.0, (4, 4)) * np.sign(RNG.standard_normal((4, 4))),
                   requires_grad=True)
        check_grads(lambda: ad.tsum(ad.mul(ad.relu(a), ad.relu(a))), [a])

    def test_gelu(self):
        a = param(5, 3)
        check_grads(lambda: ad.tsum(ad.gelu(a)), [a])

    def test_conv1d(self):
        x = param(2, 3, 10)
        w = param(4, 3, 5)
        b = param(4)
        check_grads(lambda: ad.tsum(ad.mul(ad.conv1d(x, w, b, padding=2),
                                           ad.conv1d(x, w, b, padding=2))), [x, w, b])

    def test_conv1d_shape_preserved(self):
        x, w, b = param(2, 1, 12), param(8, 1, 5), param(8)
        assert ad.conv1d(x, w, b, padding=2).shape == (2, 8, 12)
