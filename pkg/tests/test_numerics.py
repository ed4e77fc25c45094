"""Kernel-level tests: frozen oracles, closed forms, and gradient checks."""

import math

import numpy as np
import pytest

from lvprune import numerics as nm
from lvprune.numerics import (
    DegenerateRowError,
    DimensionError,
    SeededRng,
    Tensor,
)


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = nm.matmul(Tensor(np.eye(2)), Tensor(a))
        np.testing.assert_array_equal(out.data, a)

    def test_selector_row(self):
        out = nm.matmul(Tensor([[1.0, 0.0]]), Tensor([[5.0], [7.0]]))
        np.testing.assert_array_equal(out.data, [[5.0]])

    def test_against_triple_loop(self):
        rng = SeededRng(7, 0)
        a, b = rng.normal((3, 4)), rng.normal((4, 2))
        expected = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    expected[i, j] += a[i, k] * b[k, j]
        out = nm.matmul(Tensor(a), Tensor(b)).data
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            nm.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batched_broadcast(self):
        rng = SeededRng(8, 0)
        a, w = rng.normal((5, 3, 4)), rng.normal((4, 2))
        out = nm.matmul(Tensor(a), Tensor(w)).data
        np.testing.assert_allclose(out, a @ w, atol=1e-12)


class TestRowSoftmax:
    def test_uniform(self):
        out = nm.row_softmax(Tensor([[0.0, 0.0, 0.0]])).data
        np.testing.assert_allclose(out, [[1 / 3] * 3], atol=1e-15)

    def test_closed_form(self):
        out = nm.row_softmax(Tensor([[0.0, math.log(3.0)]])).data
        np.testing.assert_allclose(out, [[0.25, 0.75]], atol=1e-12)

    def test_no_overflow(self):
        out = nm.row_softmax(Tensor([[1000.0, 1000.0]])).data
        np.testing.assert_allclose(out, [[0.5, 0.5]], atol=1e-15)
        assert np.all(np.isfinite(out))


class TestMaskedRowSoftmax:
    def test_uniform_over_unmasked(self):
        out = nm.masked_row_softmax(
            Tensor([[0.0, 0.0, 0.0, 0.0]]), Tensor([[1.0, 0.0, 1.0, 1.0]])
        ).data
        np.testing.assert_allclose(out, [[1 / 3, 0.0, 1 / 3, 1 / 3]], atol=1e-15)

    def test_all_ones_equals_plain(self):
        rng = SeededRng(9, 0)
        a = rng.normal((4, 6), scale=3.0)
        masked = nm.masked_row_softmax(Tensor(a), Tensor(np.ones((4, 6)))).data
        plain = nm.row_softmax(Tensor(a)).data
        np.testing.assert_allclose(masked, plain, atol=1e-15)

    def test_causal_premask_by_hand(self):
        # exp(-1e9) vanishes; among the remaining entries only column 1 is
        # admissible, so it takes the whole row mass
        out = nm.masked_row_softmax(
            Tensor([[-1e9, 0.0, 0.0]]), Tensor([[1.0, 1.0, 0.0]])
        ).data
        np.testing.assert_allclose(out, [[0.0, 1.0, 0.0]], atol=1e-15)

    def test_masked_entries_exactly_zero_and_rows_sum_to_one(self):
        rng = SeededRng(10, 0)
        for _ in range(25):
            n = int(rng.integers(2, 9, ()))
            mask = (rng.uniform((n, n)) < 0.5).astype(float)
            np.fill_diagonal(mask, 1.0)
            p = nm.masked_row_softmax(Tensor(rng.normal((n, n), scale=4.0)), Tensor(mask)).data
            assert np.all(p[mask == 0.0] == 0.0)
            np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_degenerate_row_raises(self):
        with pytest.raises(DegenerateRowError):
            nm.masked_row_softmax(Tensor([[1.0, 2.0]]), Tensor([[0.0, 0.0]]))


class TestLayerNorm:
    def test_constant_row_is_zero(self):
        out = nm.layer_norm(
            Tensor([[3.0, 3.0, 3.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3))
        ).data
        np.testing.assert_allclose(out, 0.0, atol=1e-3)

    def test_already_normalized(self):
        out = nm.layer_norm(
            Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-15
        ).data
        np.testing.assert_allclose(out, [[1.0, -1.0]], atol=1e-7)

    def test_against_direct_formula(self):
        rng = SeededRng(11, 0)
        x = rng.normal((5, 8))
        gain, bias = rng.normal((8,)), rng.normal((8,))
        eps = 1e-6
        mu = x.mean(axis=1, keepdims=True)
        var = x.var(axis=1, keepdims=True)
        expected = (x - mu) / np.sqrt(var + eps) * gain + bias
        out = nm.layer_norm(Tensor(x), Tensor(gain), Tensor(bias), eps).data
        np.testing.assert_allclose(out, expected, atol=1e-10)


class TestSilu:
    def test_zero(self):
        assert nm.silu(Tensor([0.0])).data[0] == 0.0

    def test_asymptotics(self):
        out = nm.silu(Tensor([50.0, -50.0])).data
        assert abs(out[0] - 50.0) < 1e-12
        assert abs(out[1]) < 1e-12

    def test_at_one(self):
        expected = 1.0 / (1.0 + math.exp(-1.0))
        assert abs(nm.silu(Tensor([1.0])).data[0] - expected) < 1e-12


class TestSeededRngAndGumbel:
    def test_reproducible_streams(self):
        a = SeededRng(42, 3).uniform((100,))
        b = SeededRng(42, 3).uniform((100,))
        np.testing.assert_array_equal(a, b)
        c = SeededRng(42, 4).uniform((100,))
        assert not np.array_equal(a, c)

    def test_derive_disjoint(self):
        base = SeededRng(1, 0)
        assert base.derive(5).stream != base.derive(6).stream
        assert base.derive(5).stream == SeededRng(1, 0).derive(5).stream

    def test_gumbel_mean_euler_mascheroni(self):
        draws = nm.sample_gumbel((1_000_000,), SeededRng(0, 1))
        assert abs(draws.mean() - 0.5772156649) < 0.01

    def test_gumbel_finite(self):
        draws = nm.sample_gumbel((200_000,), SeededRng(3, 9))
        assert np.all(np.isfinite(draws))


class TestStraightThrough:
    def test_forward_is_hard_one_hot(self):
        soft = nm.row_softmax(Tensor([[1.0, 2.0], [5.0, -1.0]], requires_grad=True))
        hard = nm.hard_one_hot_st(soft)
        np.testing.assert_array_equal(hard.data, [[0.0, 1.0], [1.0, 0.0]])

    def test_backward_is_identity(self):
        x = Tensor([[1.0, 2.0]], requires_grad=True)
        soft = nm.row_softmax(x)
        out = nm.sum_all(nm.mul(nm.hard_one_hot_st(soft), Tensor([[3.0, 7.0]])))
        out.backward()
        # gradient equals that of sum(soft * [3, 7]) at the same point
        x2 = Tensor([[1.0, 2.0]], requires_grad=True)
        ref = nm.sum_all(nm.mul(nm.row_softmax(x2), Tensor([[3.0, 7.0]])))
        ref.backward()
        np.testing.assert_allclose(x.grad, x2.grad, atol=1e-14)


class TestFiniteDiff:
    def test_quadratic_is_near_exact(self):
        p = Tensor(SeededRng(12, 0).normal((4,)), requires_grad=True)

        def loss():
            return nm.sum_all(nm.mul(p, p))

        assert nm.finite_diff_check(loss, [p]) < 1e-8

    def test_gradients_of_nontrainable_not_materialized(self):
        frozen = Tensor(np.ones((2, 2)), requires_grad=False)
        live = Tensor(np.ones((2, 2)), requires_grad=True)
        nm.sum_all(nm.matmul(frozen, live)).backward()
        assert frozen.grad is None
        assert live.grad is not None


def _gradcheck_case(name, build):
    rng = SeededRng(hash(name) % 2**32, 0)
    params, loss_fn = build(rng)
    err = nm.finite_diff_check(loss_fn, params)
    assert err < 1e-4, f"{name}: relative error {err}"


@pytest.mark.parametrize("name", [
    "matmul", "add_broadcast", "mul", "softmax", "masked_softmax",
    "layer_norm", "silu", "cross_entropy", "take", "concat_slice",
    "huber", "mean_last", "take_per_sample", "embedding",
])
def test_op_gradients_match_finite_differences(name):
    def build(rng):
        if name == "matmul":
            a = Tensor(rng.normal((3, 4)), requires_grad=True)
            b = Tensor(rng.normal((4, 2)), requires_grad=True)
            return [a, b], lambda: nm.mean_all(nm.matmul(a, b))
        if name == "add_broadcast":
            a = Tensor(rng.normal((3, 4)), requires_grad=True)
            b = Tensor(rng.normal((4,)), requires_grad=True)
            w = rng.normal((3, 4))
            return [a, b], lambda: nm.mean_all(nm.mul(nm.add(a, b), w))
        if name == "mul":
            a = Tensor(rng.normal((3, 4)), requires_grad=True)
            b = Tensor(rng.normal((3, 4)), requires_grad=True)
            return [a, b], lambda: nm.sum_all(nm.mul(a, b))
        if name == "softmax":
            a = Tensor(rng.normal((4, 5)), requires_grad=True)
            w = rng.normal((4, 5))
            return [a], lambda: nm.sum_all(nm.mul(nm.row_softmax(a), w))
        if name == "masked_softmax":
            a = Tensor(rng.normal((4, 4)), requires_grad=True)
            m = Tensor(rng.uniform((4, 4)) + 0.05, requires_grad=True)
            w = rng.normal((4, 4))
            return [a, m], lambda: nm.sum_all(nm.mul(nm.masked_row_softmax(a, m), w))
        if name == "layer_norm":
            x = Tensor(rng.normal((3, 6)), requires_grad=True)
            g = Tensor(rng.normal((6,)), requires_grad=True)
            b = Tensor(rng.normal((6,)), requires_grad=True)
            w = rng.normal((3, 6))
            return [x, g, b], lambda: nm.sum_all(nm.mul(nm.layer_norm(x, g, b), w))
        if name == "silu":
            x = Tensor(rng.normal((3, 4)), requires_grad=True)
            return [x], lambda: nm.sum_all(nm.silu(x))
        if name == "cross_entropy":
            logits = Tensor(rng.normal((3, 5)), requires_grad=True)
            targets = rng.integers(0, 5, (3,))
            return [logits], lambda: nm.cross_entropy_mean(logits, targets)
        if name == "take":
            x = Tensor(rng.normal((5, 3)), requires_grad=True)
            return [x], lambda: nm.mean_all(nm.take(x, [0, 2, 2], axis=0))
        if name == "concat_slice":
            a = Tensor(rng.normal((2, 3)), requires_grad=True)
            b = Tensor(rng.normal((2, 2)), requires_grad=True)
            w = rng.normal((2, 3))
            return [a, b], lambda: nm.sum_all(
                nm.mul(nm.slice_last(nm.concat([a, b], axis=-1), 1, 4), w)
            )
        if name == "huber":
            x = Tensor(np.array([0.1, -0.3, 0.9, -1.4]), requires_grad=True)
            return [x], lambda: nm.sum_all(nm.huber(x, 0.5))
        if name == "mean_last":
            x = Tensor(rng.normal((3, 5)), requires_grad=True)
            w = rng.normal((3,))
            return [x], lambda: nm.sum_all(nm.mul(nm.mean_last(x), w))
        if name == "take_per_sample":
            x = Tensor(rng.normal((2, 5, 3)), requires_grad=True)
            idx = np.array([[0, 2], [4, 1]])
            return [x], lambda: nm.mean_all(nm.take_per_sample(x, idx))
        if name == "embedding":
            table = Tensor(rng.normal((6, 3)), requires_grad=True)
            ids = rng.integers(0, 6, (2, 4))
            w = rng.normal((2, 4, 3))
            return [table], lambda: nm.sum_all(nm.mul(nm.embedding_rows(table, ids), w))
        raise AssertionError(name)

    _gradcheck_case(name, build)


class TestDeterminismAndFiniteness:
    def test_operations_deterministic(self):
        rng = SeededRng(13, 0)
        a, b = rng.normal((4, 4)), rng.normal((4, 4))
        first = nm.silu(nm.matmul(Tensor(a), Tensor(b))).data
        second = nm.silu(nm.matmul(Tensor(a), Tensor(b))).data
        np.testing.assert_array_equal(first, second)

    def test_finite_outputs_on_finite_inputs(self):
        rng = SeededRng(14, 0)
        a = Tensor(rng.normal((4, 4), scale=100.0))
        mask = Tensor((rng.uniform((4, 4)) < 0.5).astype(float) + np.eye(4).clip(0, 1))
        for out in (
            nm.row_softmax(a),
            nm.masked_row_softmax(a, mask),
            nm.silu(a),
            nm.layer_norm(a, Tensor(np.ones(4)), Tensor(np.zeros(4))),
        ):
            assert np.all(np.isfinite(out.data))


class TestFlopCounter:
    def test_counts_two_mkn_per_matmul(self):
        with nm.matmul_flop_counter() as counter:
            nm.matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((4, 5))))
        assert counter.flops == 2 * 3 * 4 * 5

    def test_counts_batched(self):
        with nm.matmul_flop_counter() as counter:
            nm.matmul(Tensor(np.ones((2, 3, 4))), Tensor(np.ones((2, 4, 5))))
        assert counter.flops == 2 * 2 * 3 * 4 * 5
