import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from helpers import weighted_sum
from modules.errors import DimensionError, InputError, NumericError
from modules.tensor import (
    Tensor, add, build_tape, check_gradients, clip, concat, embedding_lookup, gelu, l2_normalize_rows,
    layer_norm, log, matmul, mean_along_axis, mul, no_grad, relu, reshape, scale, sigmoid, slice_axis,
    softmax_rows, sub, sum_along_axis, transpose,
)

SEEDS = range(10)


def leaf(rng, *shape, positive=False):
    data = rng.normal(size=shape)
    if positive:
        data = np.abs(data) + 0.5
    return Tensor(data, requires_grad=True)


class TestMatmul:
    def test_identity(self):
        eye = Tensor(np.eye(2))
        assert_array_equal(matmul(eye, eye).data, np.eye(2))

    def test_zero(self):
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [0.0]]))
        assert_array_equal(out.data, [[0.0], [0.0]])

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(0)
        a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
        assert check_gradients(lambda: weighted_sum(matmul(a, b)), [a, b], eps=1e-5) < 1e-6

    def test_backward_rule(self):
        rng = np.random.default_rng(1)
        a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
        g = rng.normal(size=(3, 2))
        matmul(a, b).backward(g)
        assert_allclose(a.grad, g @ b.data.T)
        assert_allclose(b.grad, a.data.T @ g)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batched(self):
        rng = np.random.default_rng(2)
        a, b = leaf(rng, 2, 3, 4), leaf(rng, 4, 5)
        assert_allclose(matmul(a, b).data, a.data @ b.data)
        assert check_gradients(lambda: weighted_sum(matmul(a, b)), [a, b]) < 1e-6


class TestSoftmax:
    def test_uniform_row(self):
        assert_allclose(softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3, 1 / 3, 1 / 3]])

    def test_analytic_row(self):
        c = 0.7
        assert_allclose(softmax_rows(Tensor([[c, c + np.log(2.0)]])).data, [[1 / 3, 2 / 3]], atol=1e-12)

    def test_large_logits_do_not_overflow(self):
        out = softmax_rows(Tensor([[1000.0, 0.0]])).data
        assert np.isfinite(out).all()
        assert_allclose(out, [[1.0, 0.0]], atol=1e-300)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_rows_sum_to_one(self, seed):
        x = np.random.default_rng(seed).normal(scale=50.0, size=(6, 9))
        assert_allclose(softmax_rows(Tensor(x)).data.sum(axis=-1), 1.0, atol=1e-9)

    def test_nan_input_raises(self):
        with pytest.raises(NumericError):
            softmax_rows(Tensor([[0.0, np.nan]]))


class TestLayerNorm:
    def test_constant_token_maps_to_zero(self):
        out = layer_norm(Tensor([[5.0, 5.0, 5.0, 5.0]]), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        assert_allclose(out.data, 0.0, atol=1e-12)

    def test_zero_gamma_gives_beta(self):
        beta = np.array([0.5, -1.0, 2.0])
        out = layer_norm(Tensor(np.random.default_rng(0).normal(size=(4, 3))), Tensor(np.zeros(3)), Tensor(beta))
        assert_allclose(out.data, np.broadcast_to(beta, (4, 3)))

    def test_normalised_statistics(self):
        x = np.random.default_rng(1).normal(3.0, 4.0, size=(5, 16))
        out = layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
        assert np.abs(out.mean(axis=-1)).max() < 1e-10
        assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-4

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        x, gamma, beta = leaf(rng, 3, 8), leaf(rng, 8), leaf(rng, 8)
        assert check_gradients(lambda: weighted_sum(layer_norm(x, gamma, beta)), [x, gamma, beta]) < 1e-5


class TestCheckGradients:
    def test_square_sum(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        error = check_gradients(lambda: sum_along_axis(mul(x, x)), [x])
        assert_allclose(x.grad, [2.0, 4.0])
        assert error < 1e-8

    def test_constant_function(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        assert check_gradients(lambda: Tensor(3.0), [x]) == 0.0

    def test_needs_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(DimensionError):
            check_gradients(lambda: scale(x, 2.0), [x])


PRIMITIVES = {
    "add": (lambda a, b: add(a, b), [(3, 4), (4,)], False),
    "sub": (lambda a, b: sub(a, b), [(3, 4), (3, 4)], False),
    "mul": (lambda a, b: mul(a, b), [(3, 4), (3, 1)], False),
    "scale": (lambda a: scale(a, -1.7), [(3, 4)], False),
    "concat": (lambda a, b: concat([a, b], axis=1), [(3, 2), (3, 4)], False),
    "mean": (lambda a: mean_along_axis(a, axis=0), [(3, 4)], False),
    "sum": (lambda a: sum_along_axis(a, axis=1, keepdims=True), [(3, 4)], False),
    "relu": (lambda a: relu(a), [(3, 4)], False),
    "gelu": (lambda a: gelu(a), [(3, 4)], False),
    "sigmoid": (lambda a: sigmoid(a), [(3, 4)], False),
    "log": (lambda a: log(a), [(3, 4)], True),
    "l2_normalize_rows": (lambda a: l2_normalize_rows(a), [(3, 4)], False),
    "transpose": (lambda a: transpose(a), [(3, 4)], False),
    "transpose_axes": (lambda a: transpose(a, (2, 0, 1)), [(2, 3, 4)], False),
    "reshape": (lambda a: reshape(a, (2, 6)), [(3, 4)], False),
    "slice": (lambda a: slice_axis(a, 1, 3, axis=1), [(3, 4)], False),
    "softmax_rows": (lambda a: softmax_rows(a), [(3, 4)], False),
    "embedding_lookup": (lambda a: embedding_lookup(a, np.array([[0, 2], [2, 1]])), [(3, 4)], False),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@pytest.mark.parametrize("seed", SEEDS)
def test_primitive_gradients(name, seed):
    op, shapes, positive = PRIMITIVES[name]
    rng = np.random.default_rng(seed)
    inputs = [leaf(rng, *shape, positive=positive) for shape in shapes]
    assert check_gradients(lambda: weighted_sum(op(*inputs), seed=seed), inputs) < 1e-3


class TestNormalizeRows:
    def test_unit_norm(self):
        x = np.random.default_rng(0).normal(size=(20, 7))
        out = l2_normalize_rows(Tensor(x)).data
        assert np.abs(np.linalg.norm(out, axis=1) - 1.0).max() < 1e-9

    def test_zero_row_stays_zero(self):
        x = Tensor(np.array([[0.0, 0.0], [3.0, 4.0]]), requires_grad=True)
        out = l2_normalize_rows(x)
        assert_array_equal(out.data[0], [0.0, 0.0])
        weighted_sum(out).backward()
        assert np.isfinite(x.grad).all()
        assert_array_equal(x.grad[0], [0.0, 0.0])


class TestTape:
    def test_topological_order_and_single_visit(self):
        rng = np.random.default_rng(0)
        a, b = leaf(rng, 2, 3), leaf(rng, 3, 2)
        shared = matmul(a, b)
        root = sum_along_axis(add(relu(shared), sigmoid(shared)))
        tape = build_tape(root)
        position = {id(node): i for i, node in enumerate(tape.nodes)}
        assert len(position) == len(tape)
        for node in tape.nodes:
            for parent in node._parents:
                assert position[id(parent)] < position[id(node)]
        assert tape.nodes[-1] is root

    def test_linearity_of_branches(self):
        rng = np.random.default_rng(1)
        x = leaf(rng, 4, 3)

        def branch_a():
            return sum_along_axis(gelu(x))

        def branch_b():
            return weighted_sum(sigmoid(x))

        add(branch_a(), branch_b()).backward()
        joint = x.grad.copy()
        x.grad = None
        branch_a().backward()
        separate = x.grad.copy()
        x.grad = None
        branch_b().backward()
        assert_allclose(joint, separate + x.grad, atol=1e-12)

    def test_every_reachable_leaf_gets_a_gradient(self):
        rng = np.random.default_rng(2)
        a, b, unused = leaf(rng, 2, 2), leaf(rng, 2, 2), leaf(rng, 2, 2)
        sum_along_axis(mul(a, b)).backward()
        assert a.grad.shape == a.shape and b.grad.shape == b.shape
        assert unused.grad is None

    def test_gradients_accumulate(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        sum_along_axis(x).backward()
        sum_along_axis(x).backward()
        assert_array_equal(x.grad, [2.0, 2.0])

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with no_grad():
            out = sum_along_axis(mul(x, x))
        assert not out.requires_grad


class TestEdgeCases:
    def test_embedding_lookup_out_of_range(self):
        with pytest.raises(InputError):
            embedding_lookup(Tensor(np.ones((3, 2))), np.array([3]))

    def test_embedding_lookup_accumulates_repeated_ids(self):
        table = Tensor(np.ones((3, 2)), requires_grad=True)
        sum_along_axis(embedding_lookup(table, np.array([1, 1, 2]))).backward()
        assert_array_equal(table.grad, [[0.0, 0.0], [2.0, 2.0], [1.0, 1.0]])

    def test_relu_gradient_is_zero_at_zero(self):
        x = Tensor([0.0, 1.0, -1.0], requires_grad=True)
        sum_along_axis(relu(x)).backward()
        assert_array_equal(x.grad, [0.0, 1.0, 0.0])

    def test_clip_blocks_gradient_outside_range(self):
        x = Tensor([-1.0, 0.5, 2.0], requires_grad=True)
        sum_along_axis(clip(x, 0.0, 1.0)).backward()
        assert_array_equal(x.grad, [0.0, 1.0, 0.0])

    def test_concat_shape_mismatch(self):
        with pytest.raises(DimensionError):
            concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))], axis=1)

    def test_division_by_tensor_is_rejected(self):
        with pytest.raises(InputError):
            Tensor([1.0]) / Tensor([2.0])
