import math

import numpy as np
import pytest

from s5 import tensor as T
from s5.errors import DimensionError, GraphStateError

from oracles import (
    naive_matmul,
    scalar_softmax,
    scalar_layer_norm,
    scalar_cross_entropy_masked,
    rel_err,
)


def gradcheck(build_loss, tensors, h=1e-5, tol=1e-5):
    """Analytical grads of build_loss(*tensors) vs central differences."""
    loss = build_loss(*tensors)
    T.backward(loss)
    for t in tensors:
        fd = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        fd_flat = fd.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            up = build_loss(*tensors).item()
            flat[idx] = orig - h
            down = build_loss(*tensors).item()
            flat[idx] = orig
            fd_flat[idx] = (up - down) / (2 * h)
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        assert rel_err(grad, fd) < tol


class TestMatmul:
    def test_identity(self):
        a = T.Tensor(np.eye(2))
        b = T.Tensor([[3.0, 4.0], [5.0, 6.0]])
        assert np.array_equal(T.matmul(a, b).data, [[3, 4], [5, 6]])

    def test_zeros_annihilate(self):
        a = T.Tensor(np.zeros((2, 3)))
        b = T.Tensor(np.random.default_rng(0).random((3, 2)))
        assert np.array_equal(T.matmul(a, b).data, np.zeros((2, 2)))

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(7)
        a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
        got = T.matmul(T.Tensor(a), T.Tensor(b)).data
        assert np.max(np.abs(got - naive_matmul(a, b))) < 1e-12

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 3))))

    def test_gradient(self):
        rng = np.random.default_rng(1)
        a = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = T.Tensor(rng.standard_normal((4, 2)), requires_grad=True)
        gradcheck(lambda x, y: T.sum_all(T.matmul(x, y)), [a, b])


class TestSoftmaxRows:
    def test_uniform(self):
        out = T.softmax_rows(T.Tensor(np.zeros((1, 4)))).data
        assert np.array_equal(out, np.full((1, 4), 0.25))

    def test_shift_invariance(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((6, 5))
        base = T.softmax_rows(T.Tensor(x)).data
        for c in (-37.25, 0.5, 80.0):
            shifted = T.softmax_rows(T.Tensor(x + c)).data
            assert np.max(np.abs(shifted - base)) < 1e-12

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((50, 7)) * 30
        out = T.softmax_rows(T.Tensor(x)).data
        assert np.all(out >= 0)
        assert np.max(np.abs(out.sum(axis=1) - 1.0)) < 1e-12

    def test_matches_scalar_loop(self):
        got = T.softmax_rows(T.Tensor([[1.0, 2.0, 3.0]])).data[0]
        want = scalar_softmax([1.0, 2.0, 3.0])
        assert np.max(np.abs(got - want)) < 1e-12

    def test_extreme_values_stay_finite(self):
        out = T.softmax_rows(T.Tensor([[1000.0, 0.0, -1000.0]])).data
        assert np.all(np.isfinite(out))

    def test_gradient(self):
        rng = np.random.default_rng(5)
        x = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        w = rng.standard_normal((3, 4))
        gradcheck(lambda t: T.sum_all(T.mul(T.softmax_rows(t), T.Tensor(w))), [x])


class TestLayerNorm:
    def test_constant_row_is_zero(self):
        x = T.Tensor(np.full((2, 5), 3.7))
        gain, bias = T.Tensor(np.ones(5)), T.Tensor(np.zeros(5))
        assert np.array_equal(T.layer_norm(x, gain, bias, 1e-6).data, np.zeros((2, 5)))

    def test_zero_gain_gives_bias(self):
        rng = np.random.default_rng(6)
        x = T.Tensor(rng.standard_normal((3, 4)))
        bias = rng.standard_normal(4)
        out = T.layer_norm(x, T.Tensor(np.zeros(4)), T.Tensor(bias), 1e-6).data
        assert np.array_equal(out, np.broadcast_to(bias, (3, 4)))

    def test_standardizes_rows(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((10, 32))
        out = T.layer_norm(T.Tensor(x), T.Tensor(np.ones(32)), T.Tensor(np.zeros(32)), 1e-12).data
        assert np.max(np.abs(out.mean(axis=1))) < 1e-9
        assert np.max(np.abs(out.var(axis=1) - 1.0)) < 1e-9

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(8)
        row = rng.standard_normal(6)
        gain = rng.standard_normal(6)
        bias = rng.standard_normal(6)
        got = T.layer_norm(T.Tensor(row[None]), T.Tensor(gain), T.Tensor(bias), 1e-5).data[0]
        want = scalar_layer_norm(list(row), list(gain), list(bias), 1e-5)
        assert np.max(np.abs(got - np.array(want))) < 1e-12

    def test_gradient(self):
        rng = np.random.default_rng(9)
        x = T.Tensor(rng.standard_normal((4, 6)), requires_grad=True)
        gain = T.Tensor(rng.standard_normal(6), requires_grad=True)
        bias = T.Tensor(rng.standard_normal(6), requires_grad=True)
        w = rng.standard_normal((4, 6))
        gradcheck(
            lambda t, g, b: T.sum_all(T.mul(T.layer_norm(t, g, b, 1e-3), T.Tensor(w))),
            [x, gain, bias],
        )


class TestCrossEntropyMasked:
    def test_uniform_logits(self):
        logits = T.Tensor(np.zeros((3, 4)))
        loss = T.cross_entropy_masked(logits, [0, 1, 2], [1, 1, 1])
        assert abs(loss.item() - math.log(4)) < 1e-12

    def test_empty_mask_is_zero(self):
        logits = T.Tensor(np.random.default_rng(0).standard_normal((3, 4)), requires_grad=True)
        loss = T.cross_entropy_masked(logits, [0, 1, 2], [0, 0, 0])
        assert loss.item() == 0.0
        assert loss._parents == ()  # detached constant

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(11)
        logits = rng.standard_normal((3, 5))
        labels = rng.integers(0, 5, 3)
        mask = np.array([1, 0, 1])
        got = T.cross_entropy_masked(T.Tensor(logits), labels, mask).item()
        want = scalar_cross_entropy_masked(logits, labels, mask)
        assert abs(got - want) < 1e-12

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            T.cross_entropy_masked(T.Tensor(np.zeros((2, 3))), [0, 3], [1, 1])

    def test_large_logits_stable(self):
        logits = T.Tensor([[500.0, -500.0], [-500.0, 500.0]])
        loss = T.cross_entropy_masked(logits, [0, 1], [1, 1])
        assert math.isfinite(loss.item())
        assert loss.item() < 1e-8

    def test_gradient(self):
        rng = np.random.default_rng(12)
        logits = T.Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        labels = rng.integers(0, 3, 4)
        mask = np.array([1, 1, 0, 1])
        gradcheck(lambda t: T.cross_entropy_masked(t, labels, mask), [logits])


class TestConcatChannels:
    def test_empty_left_operand(self):
        a = T.Tensor(np.zeros((2, 0)))
        b = T.Tensor(np.arange(6, dtype=float).reshape(2, 3))
        assert np.array_equal(T.concat_channels(a, b).data, b.data)

    def test_basic(self):
        a = T.Tensor([[1.0, 2.0]])
        b = T.Tensor([[9.0]])
        assert np.array_equal(T.concat_channels(a, b).data, [[1, 2, 9]])

    def test_row_mismatch(self):
        with pytest.raises(DimensionError):
            T.concat_channels(T.Tensor(np.zeros((2, 1))), T.Tensor(np.zeros((3, 1))))

    def test_gradient_splits(self):
        a = T.Tensor(np.random.default_rng(0).random((2, 3)), requires_grad=True)
        b = T.Tensor(np.random.default_rng(1).random((2, 2)), requires_grad=True)
        loss = T.sum_all(T.concat_channels(a, b))
        T.backward(loss)
        assert np.array_equal(a.grad, np.ones((2, 3)))
        assert np.array_equal(b.grad, np.ones((2, 2)))

    def test_gradient_finite_difference(self):
        rng = np.random.default_rng(13)
        a = T.Tensor(rng.standard_normal((3, 2)), requires_grad=True)
        b = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        w = rng.standard_normal((3, 6))
        gradcheck(lambda x, y: T.sum_all(T.mul(T.concat_channels(x, y), T.Tensor(w))), [a, b])


class TestLinearCat:
    def test_single_pair_matches_plain(self):
        rng = np.random.default_rng(14)
        x = rng.standard_normal((5, 4))
        w = rng.standard_normal((4, 6))
        b = rng.standard_normal(6)
        fused = T.linear_cat(T.Tensor(x), [(T.Tensor(w), T.Tensor(b))]).data
        plain = T.add(T.matmul(T.Tensor(x), T.Tensor(w)), T.Tensor(b)).data
        assert np.array_equal(fused, plain)

    def test_split_weights_bit_identical(self):
        # column-sliced weights must reproduce the unsplit linear exactly
        rng = np.random.default_rng(15)
        x = rng.standard_normal((7, 8))
        w = rng.standard_normal((8, 12))
        b = rng.standard_normal(12)
        whole = T.linear_cat(T.Tensor(x), [(T.Tensor(w), T.Tensor(b))]).data
        for cut in (0, 3, 12):
            split = T.linear_cat(T.Tensor(x), [
                (T.Tensor(w[:, :cut].copy()), T.Tensor(b[:cut].copy())),
                (T.Tensor(w[:, cut:].copy()), T.Tensor(b[cut:].copy())),
            ]).data
            assert np.array_equal(whole, split)

    def test_gradient(self):
        rng = np.random.default_rng(16)
        x = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        w1 = T.Tensor(rng.standard_normal((4, 2)), requires_grad=True)
        b1 = T.Tensor(rng.standard_normal(2), requires_grad=True)
        w2 = T.Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        b2 = T.Tensor(rng.standard_normal(3), requires_grad=True)
        w = rng.standard_normal((3, 5))
        gradcheck(
            lambda t, a, c, d, e: T.sum_all(T.mul(T.linear_cat(t, [(a, c), (d, e)]), T.Tensor(w))),
            [x, w1, b1, w2, b2],
        )


class TestBackward:
    def test_sum_gives_ones(self):
        p = T.Tensor(np.random.default_rng(0).random((3, 2)), requires_grad=True)
        T.backward(T.sum_all(p))
        assert np.array_equal(p.grad, np.ones((3, 2)))

    def test_zero_scale_gives_zeros(self):
        p = T.Tensor(np.random.default_rng(1).random((2, 2)), requires_grad=True)
        T.backward(T.sum_all(T.mul(p, 0.0)))
        assert np.array_equal(p.grad, np.zeros((2, 2)))

    def test_twice_raises(self):
        p = T.Tensor(np.ones((2, 2)), requires_grad=True)
        loss = T.sum_all(p)
        T.backward(loss)
        with pytest.raises(GraphStateError):
            T.backward(loss)

    def test_non_scalar_rejected(self):
        p = T.Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(DimensionError):
            T.backward(T.mul(p, 2.0))

    def test_linearity(self):
        rng = np.random.default_rng(17)
        data = rng.standard_normal((4, 3))
        w1 = rng.standard_normal((4, 3))
        w2 = rng.standard_normal((4, 3))
        alpha, beta = 0.7, -1.3

        def grad_of(factors):
            p = T.Tensor(data, requires_grad=True)
            l1 = T.sum_all(T.mul(T.relu(p), T.Tensor(w1)))
            l2 = T.sum_all(T.mul(T.softmax_rows(p), T.Tensor(w2)))
            T.backward(T.add(T.mul(l1, factors[0]), T.mul(l2, factors[1])))
            return p.grad

        combined = grad_of((alpha, beta))
        ga = grad_of((1.0, 0.0))
        gb = grad_of((0.0, 1.0))
        assert np.max(np.abs(combined - (alpha * ga + beta * gb))) < 1e-10

    def test_diamond_graph_accumulates_once(self):
        p = T.Tensor(np.ones((2, 2)) * 3.0, requires_grad=True)
        shared = T.mul(p, 2.0)
        loss = T.sum_all(T.add(shared, shared))
        T.backward(loss)
        assert np.array_equal(p.grad, np.full((2, 2), 4.0))

    def test_no_grad_suppresses_tape(self):
        p = T.Tensor(np.ones((2, 2)), requires_grad=True)
        with T.no_grad():
            out = T.sum_all(T.mul(p, 2.0))
        assert out._parents == ()
        assert not out.requires_grad


class TestDeterminism:
    def test_forward_is_bit_reproducible(self):
        rng = np.random.default_rng(42)
        x = rng.standard_normal((6, 8))
        w = rng.standard_normal((8, 8))

        def run():
            t = T.Tensor(x, requires_grad=True)
            out = T.softmax_rows(T.matmul(T.relu(t), T.Tensor(w)))
            loss = T.sum_all(T.mul(out, T.Tensor(w[:6])))
            T.backward(loss)
            return out.data.tobytes(), t.grad.tobytes()

        assert run() == run()


class TestAuxOps:
    def test_gather_rows_roundtrip(self):
        rng = np.random.default_rng(18)
        x = T.Tensor(rng.standard_normal((6, 3)), requires_grad=True)
        perm = rng.permutation(6)
        out = T.gather_rows(x, perm)
        assert np.array_equal(out.data, x.data[perm])
        w = rng.standard_normal((6, 3))
        gradcheck(lambda t: T.sum_all(T.mul(T.gather_rows(t, perm), T.Tensor(w))), [x])

    def test_slice_transpose_reshape_grads(self):
        rng = np.random.default_rng(19)
        x = T.Tensor(rng.standard_normal((4, 6)), requires_grad=True)
        w = rng.standard_normal((2, 12))

        def build(t):
            part = T.slice_cols(t, 1, 4)
            flipped = T.transpose2d(part)
            narrow = T.reshape(flipped, (2, 6))
            wide = T.concat_channels(narrow, T.mul(narrow, 0.5))
            return T.sum_all(T.mul(wide, T.Tensor(w)))

        gradcheck(build, [x])

    def test_add_bias_broadcast_grad(self):
        rng = np.random.default_rng(20)
        x = T.Tensor(rng.standard_normal((5, 3)), requires_grad=True)
        b = T.Tensor(rng.standard_normal(3), requires_grad=True)
        w = rng.standard_normal((5, 3))
        gradcheck(lambda t, c: T.sum_all(T.mul(T.add(t, c), T.Tensor(w))), [x, b])

    def test_relu_grad(self):
        rng = np.random.default_rng(21)
        x = T.Tensor(rng.standard_normal((4, 4)) + 0.3, requires_grad=True)
        w = rng.standard_normal((4, 4))
        gradcheck(lambda t: T.sum_all(T.mul(T.relu(t), T.Tensor(w))), [x])
