import math

import numpy as np
import pytest

from gcgpn import autodiff as ad
from gcgpn.autodiff import (
    Matrix,
    Parameter,
    ShapeError,
    Tape,
    TapeError,
    cosine_similarity,
    cross_entropy,
    finite_difference_check,
    matmul,
    row_normalize,
    sgd_step,
    softmax_rows,
)


def matmul_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Naive triple-loop product, independent of numpy's matmul path."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def weighted_sum(x: Matrix, weights: np.ndarray) -> Matrix:
    """Reduce a node to 1x1 with fixed weights so every entry matters."""
    flat = ad.mul(x, Matrix(weights))
    ones_left = Matrix(np.ones((1, x.rows)))
    ones_right = Matrix(np.ones((x.cols, 1)))
    return matmul(matmul(ones_left, flat), ones_right)


class TestMatmul:
    def test_identity(self):
        x = np.arange(9.0).reshape(3, 3)
        out = matmul(Matrix(np.eye(3)), Matrix(x))
        np.testing.assert_array_equal(out.data, x)

    def test_scalar_case(self):
        assert matmul(Matrix([[2.0]]), Matrix([[3.0]])).item() == 6.0

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        np.testing.assert_allclose(matmul(Matrix(a), Matrix(b)).data, matmul_oracle(a, b), atol=1e-12)

    def test_random_square_instances(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            a = rng.standard_normal((5, 5))
            b = rng.standard_normal((5, 5))
            np.testing.assert_allclose(matmul(Matrix(a), Matrix(b)).data, matmul_oracle(a, b), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(Matrix(np.ones((2, 3))), Matrix(np.ones((2, 3))))


class TestRowNormalize:
    def test_already_unit(self):
        out = row_normalize(Matrix([[0.6, 0.8]]))
        np.testing.assert_allclose(out.data, [[0.6, 0.8]], atol=1e-15)

    def test_three_four_five(self):
        out = row_normalize(Matrix([[3.0, 4.0]]))
        np.testing.assert_allclose(out.data, [[0.6, 0.8]], atol=1e-15)

    def test_zero_row_passes_through(self):
        out = row_normalize(Matrix([[0.0, 0.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data[0], [0.0, 0.0])

    def test_unit_norm_property(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((20, 6)) * rng.uniform(1e-5, 10, size=(20, 1))
        out = row_normalize(Matrix(x))
        norms = np.linalg.norm(out.data, axis=1)
        keep = np.linalg.norm(x, axis=1) > 1e-6
        np.testing.assert_allclose(norms[keep], 1.0, atol=1e-9)

    def test_zero_row_gets_zero_gradient(self):
        x = Parameter([[0.0, 0.0], [1.0, 2.0]])
        with Tape() as tape:
            loss = weighted_sum(row_normalize(x), np.ones((2, 2)))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad[0], [0.0, 0.0])
        assert np.any(x.grad[1] != 0.0)


class TestSoftmaxRows:
    def test_constant_row_is_uniform(self):
        for t in (0.5, 1.0, 7.0):
            out = softmax_rows(Matrix([[3.0, 3.0, 3.0, 3.0]]), inv_temperature=t)
            np.testing.assert_allclose(out.data, 0.25, atol=1e-15)

    def test_hand_value(self):
        out = softmax_rows(Matrix([[math.log(2.0), 0.0]]))
        np.testing.assert_allclose(out.data, [[2.0 / 3.0, 1.0 / 3.0]], atol=1e-12)

    def test_sharp_temperature_limit(self):
        out = softmax_rows(Matrix([[1.0, 0.0]]), inv_temperature=1000.0)
        assert out.data.max() > 1.0 - 1e-6

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        out = softmax_rows(Matrix(rng.standard_normal((8, 5)) * 40.0))
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(out.data > 0.0) and np.all(out.data <= 1.0)

    def test_rejects_nonpositive_temperature(self):
        with pytest.raises(ValueError):
            softmax_rows(Matrix([[1.0, 2.0]]), inv_temperature=0.0)


class TestCosineSimilarity:
    def test_self_similarity(self):
        v = Matrix([[1.0, 2.0, 3.0]])
        np.testing.assert_allclose(cosine_similarity(v, v).item(), 1.0, atol=1e-12)

    def test_orthogonal(self):
        out = cosine_similarity(Matrix([[1.0, 0.0]]), Matrix([[0.0, 1.0]]))
        assert out.item() == 0.0

    def test_hand_value(self):
        out = cosine_similarity(Matrix([[1.0, 1.0]]), Matrix([[1.0, 0.0]]))
        np.testing.assert_allclose(out.item(), 1.0 / math.sqrt(2.0), atol=1e-12)

    def test_pairwise_shape_and_range(self):
        rng = np.random.default_rng(4)
        out = cosine_similarity(Matrix(rng.standard_normal((4, 6))), Matrix(rng.standard_normal((3, 6))))
        assert out.shape == (4, 3)
        assert np.all(np.abs(out.data) <= 1.0 + 1e-12)


class TestCrossEntropy:
    def test_uniform(self):
        log_p = ad.log(Matrix(np.full((3, 5), 0.2)))
        np.testing.assert_allclose(cross_entropy(log_p, [0, 3, 4]).item(), math.log(5.0), atol=1e-12)

    def test_perfect_prediction(self):
        probs = np.array([[1.0, 0.0]])
        log_p = Matrix(np.log(probs, out=np.full_like(probs, -1e300), where=probs > 0))
        assert cross_entropy(log_p, [0]).item() == 0.0

    def test_hand_value(self):
        log_p = ad.log(Matrix([[0.25, 0.75]]))
        np.testing.assert_allclose(cross_entropy(log_p, [1]).item(), -math.log(0.75), atol=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            cross_entropy(Matrix([[0.0, 0.0]]), [2])


class TestSgdStep:
    def test_plain_step(self):
        p = Parameter([[1.0]])
        p.grad[...] = 1.0
        sgd_step([p], lr=0.1)
        np.testing.assert_allclose(p.data, [[0.9]], atol=1e-15)

    def test_momentum_recursion(self):
        p = Parameter([[0.0]])
        p.grad[...] = 1.0
        sgd_step([p], lr=0.1, momentum=0.9)
        np.testing.assert_allclose(p.data, [[-0.1]], atol=1e-15)
        p.grad[...] = 1.0
        sgd_step([p], lr=0.1, momentum=0.9)
        np.testing.assert_allclose(p.data, [[-0.29]], atol=1e-15)

    def test_pure_weight_decay(self):
        p = Parameter([[10.0]])
        sgd_step([p], lr=0.1, weight_decay=0.0005)
        np.testing.assert_allclose(p.data, [[9.9995]], atol=1e-15)

    def test_frozen_parameter_untouched(self):
        p = Parameter([[1.0]], trainable=False)
        p.grad[...] = 5.0
        sgd_step([p], lr=0.1)
        assert p.item() == 1.0

    def test_monotone_on_convex_quadratic(self):
        # loss = sum(a_i x_i^2); gradient descent with lr below 1/max(a) decreases it.
        a = np.array([[0.5, 1.0, 2.0]])
        p = Parameter([[3.0, -2.0, 1.5]])
        losses = []
        for _ in range(50):
            with Tape() as tape:
                loss = weighted_sum(ad.mul(ad.mul(p, p), Matrix(a)), np.ones((1, 3)))
            losses.append(loss.item())
            p.zero_grad()
            tape.backward(loss)
            sgd_step([p], lr=0.4)
        assert all(b < a_ for a_, b in zip(losses, losses[1:]))


class TestTape:
    def test_backward_twice_is_an_error(self):
        p = Parameter([[2.0]])
        with Tape() as tape:
            loss = ad.mul(p, p)
        tape.backward(loss)
        with pytest.raises(TapeError):
            tape.backward(loss)

    def test_zero_grad_is_exact(self):
        p = Parameter([[2.0, 3.0]])
        with Tape() as tape:
            loss = weighted_sum(ad.mul(p, p), np.ones((1, 2)))
        tape.backward(loss)
        assert np.any(p.grad != 0.0)
        p.zero_grad()
        np.testing.assert_array_equal(p.grad, np.zeros((1, 2)))

    def test_no_recording_outside_tape(self):
        p = Parameter([[2.0]])
        out = ad.mul(p, p)
        assert out.grad is None

    def test_constants_stay_untracked(self):
        c = Matrix([[1.0, 2.0]])
        with Tape() as tape:
            out = ad.mul(c, c)
        assert out.grad is None and len(tape) == 0

    def test_gradient_accumulates_on_reuse(self):
        p = Parameter([[3.0]])
        with Tape() as tape:
            loss = ad.add(ad.mul(p, p), ad.mul(p, p))
        tape.backward(loss)
        np.testing.assert_allclose(p.grad, [[12.0]], atol=1e-12)


class TestFiniteDifferenceCheck:
    def test_square_function(self):
        p = Parameter([[3.0]])
        err = finite_difference_check(lambda: ad.mul(p, p), [p])
        assert err < 1e-9

    def test_analytic_gradient_of_square(self):
        p = Parameter([[3.0]])
        with Tape() as tape:
            loss = ad.mul(p, p)
        tape.backward(loss)
        np.testing.assert_allclose(p.grad, [[6.0]], atol=1e-12)


def _fd_cases():
    rng = np.random.default_rng(7)

    def case_matmul():
        p = Parameter(rng.standard_normal((3, 4)))
        q = Parameter(rng.standard_normal((4, 2)))
        w = rng.standard_normal((3, 2))
        return lambda: weighted_sum(matmul(p, q), w), [p, q]

    def case_add_sub_broadcast():
        p = Parameter(rng.standard_normal((3, 4)))
        col = Parameter(rng.standard_normal((3, 1)))
        row = Parameter(rng.standard_normal((1, 4)))
        w = rng.standard_normal((3, 4))
        return lambda: weighted_sum(ad.sub(ad.add(p, col), row), w), [p, col, row]

    def case_mul_broadcast():
        p = Parameter(rng.standard_normal((3, 4)))
        s = Parameter(rng.standard_normal((1, 1)))
        w = rng.standard_normal((3, 4))
        return lambda: weighted_sum(ad.mul(p, s), w), [p, s]

    def case_exp_log():
        p = Parameter(rng.uniform(0.5, 2.0, size=(2, 3)))
        w = rng.standard_normal((2, 3))
        return lambda: weighted_sum(ad.log(ad.exp(p)), w), [p]

    def case_relu():
        # values kept away from the kink so central differences are valid
        vals = rng.uniform(0.2, 1.0, size=(3, 3)) * rng.choice([-1.0, 1.0], size=(3, 3))
        p = Parameter(vals)
        w = rng.standard_normal((3, 3))
        return lambda: weighted_sum(ad.relu(p), w), [p]

    def case_structural():
        p = Parameter(rng.standard_normal((4, 3)))
        w = rng.standard_normal((5, 3))
        idx = [0, 2, 2, 3, 1]

        def f():
            g = ad.gather_rows(p, idx)
            top = ad.slice_rows(g, 0, 2)
            rest = ad.slice_rows(g, 2, 5)
            return weighted_sum(ad.concat_rows(top, rest), w)

        return f, [p]

    def case_embed_transpose_sum():
        p = Parameter(rng.standard_normal((2, 3)))
        w = rng.standard_normal((5, 1))
        return lambda: weighted_sum(ad.sum_rows(ad.embed_block(ad.transpose(p), 5, 4, 1, 1)), w), [p]

    def case_row_normalize():
        p = Parameter(rng.standard_normal((4, 3)) + 0.5)
        w = rng.standard_normal((4, 3))
        return lambda: weighted_sum(row_normalize(p), w), [p]

    def case_softmax_with_temperature_node():
        p = Parameter(rng.standard_normal((3, 4)))
        u = Parameter([[0.3]])
        w = rng.standard_normal((3, 4))
        return lambda: weighted_sum(softmax_rows(p, inv_temperature=ad.exp(u)), w), [p, u]

    def case_cosine():
        p = Parameter(rng.standard_normal((3, 4)))
        q = Parameter(rng.standard_normal((2, 4)))
        w = rng.standard_normal((3, 2))
        return lambda: weighted_sum(cosine_similarity(p, q), w), [p, q]

    def case_cross_entropy_pipeline():
        p = Parameter(rng.standard_normal((4, 3)))
        labels = [0, 2, 1, 2]
        return lambda: cross_entropy(ad.log(softmax_rows(p, inv_temperature=2.0)), labels), [p]

    return {
        "matmul": case_matmul,
        "add_sub_broadcast": case_add_sub_broadcast,
        "mul_broadcast": case_mul_broadcast,
        "exp_log": case_exp_log,
        "relu": case_relu,
        "structural": case_structural,
        "embed_transpose_sum": case_embed_transpose_sum,
        "row_normalize": case_row_normalize,
        "softmax_with_temperature_node": case_softmax_with_temperature_node,
        "cosine": case_cosine,
        "cross_entropy_pipeline": case_cross_entropy_pipeline,
    }


@pytest.mark.parametrize("name", sorted(_fd_cases()))
def test_gradients_match_finite_differences(name):
    f, params = _fd_cases()[name]()
    assert finite_difference_check(f, params) < 1e-4
