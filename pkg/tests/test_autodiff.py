import math

import numpy as np
import pytest

from fractalvit.autodiff import Tape, Tensor
from fractalvit.errors import ContractError, InvalidMaskError, ShapeError


def matmul_oracle(a, b):
    """Naive triple loop; the independent reference for matmul."""
    m, p = a.shape
    p2, q = b.shape
    assert p == p2
    out = np.zeros((m, q))
    for i in range(m):
        for j in range(q):
            acc = 0.0
            for r in range(p):
                acc += a[i, r] * b[r, j]
            out[i, j] = acc
    return out


def fd_gradient(fn, x, eps=1e-5):
    """Central finite differences of a scalar fn at array x."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        plus = fn()
        flat[i] = saved - eps
        minus = fn()
        flat[i] = saved
        gflat[i] = (plus - minus) / (2 * eps)
    return grad


def rel_err(a, b):
    return np.abs(a - b) / np.maximum.reduce(
        [np.abs(a), np.abs(b), np.full_like(a, 1e-6)]
    )


# ----------------------------------------------------------------------
# matmul
# ----------------------------------------------------------------------

def test_matmul_identity():
    t = Tape()
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = t.matmul(a, Tensor(np.eye(2)))
    assert np.array_equal(out.data, a.data)


def test_matmul_known_product():
    t = Tape()
    out = t.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
    assert np.array_equal(out.data, [[17.0], [39.0]])


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(0)
    t = Tape(recording=False)
    for _ in range(20):
        m, p, q = rng.integers(1, 17, size=3)
        a = rng.standard_normal((m, p))
        b = rng.standard_normal((p, q))
        out = t.matmul(Tensor(a), Tensor(b))
        assert np.abs(out.data - matmul_oracle(a, b)).max() < 1e-12


def test_matmul_shape_error_names_both_shapes():
    t = Tape()
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        t.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_grad_of_sum_is_ones_outer():
    t = Tape()
    a = Tensor(np.random.default_rng(1).standard_normal((3, 4)))
    b = Tensor(np.random.default_rng(2).standard_normal((4, 2)))
    t.backward(t.sum_all(t.matmul(a, b)))
    assert np.allclose(a.grad, np.ones((3, 2)) @ b.data.T, atol=1e-12)
    assert np.allclose(b.grad, a.data.T @ np.ones((3, 2)), atol=1e-12)


def test_matmul_grads_match_finite_differences():
    rng = np.random.default_rng(3)
    a = Tensor(rng.standard_normal((3, 5)))
    b = Tensor(rng.standard_normal((5, 2)))
    t = Tape()
    t.backward(t.sum_all(t.matmul(a, b)))
    notape = Tape(recording=False)

    def run():
        return float(notape.sum_all(notape.matmul(a, b)).data)

    for tensor in (a, b):
        fd = fd_gradient(run, tensor.data)
        assert rel_err(tensor.grad, fd).max() < 1e-4


# ----------------------------------------------------------------------
# masked softmax
# ----------------------------------------------------------------------

def test_masked_softmax_single_allowed_entry():
    t = Tape()
    out = t.masked_softmax(Tensor([[0.0, 0.0]]), np.array([[True, False]]))
    assert np.array_equal(out.data, [[1.0, 0.0]])
    assert out.data[0, 1] == 0.0  # bitwise zero


def test_masked_softmax_symmetry_and_closed_form():
    t = Tape()
    out = t.masked_softmax(Tensor([[1.0, 1.0, 1.0]]), np.ones((1, 3), bool))
    assert np.allclose(out.data, 1 / 3, atol=1e-15)
    out2 = t.masked_softmax(Tensor([[0.0, math.log(2.0)]]), np.ones((1, 2), bool))
    assert np.allclose(out2.data, [[1 / 3, 2 / 3]], atol=1e-15)


def test_masked_softmax_all_masked_row_raises():
    t = Tape()
    mask = np.array([[True, True], [False, False]])
    with pytest.raises(InvalidMaskError):
        t.masked_softmax(Tensor(np.zeros((2, 2))), mask)


def test_masked_softmax_rows_sum_to_one_and_zeros_exact():
    rng = np.random.default_rng(4)
    t = Tape(recording=False)
    for _ in range(25):
        n = int(rng.integers(2, 9))
        logits = rng.standard_normal((n, n)) * 5
        mask = rng.random((n, n)) < 0.5
        mask[np.arange(n), np.arange(n)] = True  # keep rows non-empty
        out = t.masked_softmax(Tensor(logits), mask)
        assert np.abs(out.data.sum(axis=-1) - 1.0).max() < 1e-12
        assert np.all(out.data[~mask] == 0.0)


def test_masked_softmax_bias_shifts_logits():
    t = Tape(recording=False)
    logits = Tensor([[1.0, 2.0, 0.5]])
    bias = np.array([[0.3, -0.7, 0.0]])
    mask = np.ones((1, 3), bool)
    with_bias = t.masked_softmax(logits, mask, bias)
    direct = t.masked_softmax(Tensor(logits.data + bias), mask)
    assert np.allclose(with_bias.data, direct.data, atol=1e-15)


def test_masked_softmax_grads_match_finite_differences():
    rng = np.random.default_rng(5)
    logits = Tensor(rng.standard_normal((4, 4)))
    bias = Tensor(rng.standard_normal((4, 4)))
    mask = rng.random((4, 4)) < 0.6
    mask[np.arange(4), np.arange(4)] = True
    t = Tape()
    weights = np.arange(16, dtype=float).reshape(4, 4)  # break symmetry
    out = t.masked_softmax(logits, mask, bias)
    t.backward(t.sum_all(t.mul(out, Tensor(weights))))
    notape = Tape(recording=False)

    def run():
        p = notape.masked_softmax(logits, mask, bias)
        return float(notape.sum_all(notape.mul(p, Tensor(weights))).data)

    for tensor in (logits, bias):
        fd = fd_gradient(run, tensor.data)
        assert rel_err(tensor.grad, fd).max() < 1e-4


# ----------------------------------------------------------------------
# layer norm
# ----------------------------------------------------------------------

def test_layer_norm_constant_row_is_zero():
    t = Tape()
    out = t.layer_norm(Tensor([[1.0, 1.0]]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]))
    assert np.allclose(out.data, 0.0, atol=1e-12)


def test_layer_norm_already_normalized_row():
    # population variance of [-1, 1] is exactly 1, so eps=0 reproduces it
    t = Tape()
    out = t.layer_norm(
        Tensor([[-1.0, 1.0]]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]), eps=0.0
    )
    assert np.array_equal(out.data, [[-1.0, 1.0]])


def test_layer_norm_needs_two_features():
    t = Tape()
    with pytest.raises(ContractError):
        t.layer_norm(Tensor([[1.0]]), Tensor([1.0]), Tensor([0.0]))


def test_layer_norm_grads_match_finite_differences():
    rng = np.random.default_rng(6)
    x = Tensor(rng.standard_normal((3, 6)))
    gain = Tensor(rng.standard_normal(6))
    shift = Tensor(rng.standard_normal(6))
    weights = Tensor(rng.standard_normal((3, 6)))
    t = Tape()
    t.backward(t.sum_all(t.mul(t.layer_norm(x, gain, shift), weights)))
    notape = Tape(recording=False)

    def run():
        out = notape.layer_norm(x, gain, shift)
        return float(notape.sum_all(notape.mul(out, weights)).data)

    for tensor in (x, gain, shift):
        fd = fd_gradient(run, tensor.data)
        assert rel_err(tensor.grad, fd).max() < 1e-4


# ----------------------------------------------------------------------
# gelu
# ----------------------------------------------------------------------

def test_gelu_fixed_points():
    t = Tape()
    out = t.gelu(Tensor([0.0, 10.0, -10.0]))
    assert out.data[0] == 0.0
    assert abs(out.data[1] - 10.0) < 1e-9
    assert abs(out.data[2]) < 1e-9


def test_gelu_gradient_at_zero_is_half():
    t = Tape()
    x = Tensor([0.0])
    t.backward(t.sum_all(t.gelu(x)))
    assert x.grad[0] == 0.5


def test_gelu_grads_match_finite_differences():
    x = Tensor(np.linspace(-3, 3, 13))
    t = Tape()
    t.backward(t.sum_all(t.gelu(x)))
    notape = Tape(recording=False)
    fd = fd_gradient(lambda: float(notape.sum_all(notape.gelu(x)).data), x.data)
    assert rel_err(x.grad, fd).max() < 1e-4


def test_central_difference_error_shrinks_quadratically():
    # Richardson check: the central-difference error at 2*eps should be
    # about 4x the error at eps while truncation dominates.
    x0 = 0.7
    t = Tape()
    x = Tensor([x0])
    t.backward(t.sum_all(t.gelu(x)))
    exact = x.grad[0]
    notape = Tape(recording=False)

    def fd(eps):
        probe = Tensor([x0 + eps])
        plus = float(notape.sum_all(notape.gelu(probe)).data)
        probe = Tensor([x0 - eps])
        minus = float(notape.sum_all(notape.gelu(probe)).data)
        return (plus - minus) / (2 * eps)

    err1 = abs(fd(1e-3) - exact)
    err2 = abs(fd(2e-3) - exact)
    assert 2.5 < err2 / err1 < 6.0


# ----------------------------------------------------------------------
# backward mechanics
# ----------------------------------------------------------------------

def test_backward_of_plain_sum_is_ones():
    t = Tape()
    x = Tensor(np.random.default_rng(7).standard_normal((2, 3, 4)))
    t.backward(t.sum_all(x))
    assert np.array_equal(x.grad, np.ones_like(x.data))


def test_backward_of_half_square_sum_is_identity():
    t = Tape()
    x = Tensor([1.0, -2.0, 3.0])
    t.backward(t.scale(t.sum_all(t.mul(x, x)), 0.5))
    assert np.array_equal(x.grad, x.data)


def test_backward_requires_scalar_loss():
    t = Tape()
    x = Tensor([1.0, 2.0])
    y = t.mul(x, x)
    with pytest.raises(ContractError):
        t.backward(y)


def test_repeated_backward_accumulates():
    t = Tape()
    x = Tensor([1.0, 2.0])
    loss = t.sum_all(x)
    t.backward(loss)
    t.backward(loss)
    assert np.array_equal(x.grad, [2.0, 2.0])


def test_branching_graph_accumulates_through_shared_input():
    t = Tape()
    x = Tensor([1.0, 2.0])
    loss = t.add(t.sum_all(t.mul(x, x)), t.sum_all(x))
    t.backward(loss)
    assert np.array_equal(x.grad, 2 * x.data + 1)


# ----------------------------------------------------------------------
# structural ops
# ----------------------------------------------------------------------

def test_add_trailing_broadcast_and_grads():
    t = Tape()
    a = Tensor(np.ones((3, 4)))
    b = Tensor(np.arange(4.0))
    out = t.add(a, b)
    assert np.array_equal(out.data, a.data + b.data)
    t.backward(t.sum_all(out))
    assert np.array_equal(a.grad, np.ones((3, 4)))
    assert np.array_equal(b.grad, np.full(4, 3.0))


def test_add_shape_mismatch_raises():
    t = Tape()
    with pytest.raises(ShapeError):
        t.add(Tensor(np.zeros((3, 4))), Tensor(np.zeros(3)))


def test_linear_matches_explicit_composition():
    rng = np.random.default_rng(8)
    x = Tensor(rng.standard_normal((5, 3)))
    w = Tensor(rng.standard_normal((4, 3)))
    b = Tensor(rng.standard_normal(4))
    t = Tape()
    fused = t.linear(x, w, b)
    explicit = t.add(t.matmul(x, t.transpose(w)), b)
    assert np.allclose(fused.data, explicit.data, atol=1e-15)
    t.backward(t.sum_all(fused))
    notape = Tape(recording=False)

    def run():
        return float(notape.sum_all(notape.linear(x, w, b)).data)

    for tensor in (x, w, b):
        fd = fd_gradient(run, tensor.data)
        assert rel_err(tensor.grad, fd).max() < 1e-4


def test_slice_concat_transpose_reshape_roundtrip_grads():
    rng = np.random.default_rng(9)
    x = Tensor(rng.standard_normal((4, 6)))
    t = Tape()
    left = t.slice_cols(x, 0, 3)
    right = t.slice_cols(x, 3, 6)
    rebuilt = t.concat([left, right], axis=1)
    assert np.array_equal(rebuilt.data, x.data)
    top = t.slice_rows(rebuilt, 0, 2)
    flipped = t.transpose(top)
    flat = t.reshape(flipped, (12,))
    t.backward(t.sum_all(flat))
    expected = np.zeros((4, 6))
    expected[:2, :] = 1.0
    assert np.array_equal(x.grad, expected)


def test_slice_out_of_range_raises():
    t = Tape()
    with pytest.raises(ContractError):
        t.slice_rows(Tensor(np.zeros((2, 2))), 0, 3)


# ----------------------------------------------------------------------
# cross entropy
# ----------------------------------------------------------------------

def test_cross_entropy_uniform_logits():
    t = Tape()
    out = t.softmax_cross_entropy(Tensor(np.zeros(16)), 3)
    assert abs(float(out.data) - math.log(16)) < 1e-15


def test_cross_entropy_confident_correct():
    t = Tape()
    out = t.softmax_cross_entropy(Tensor([10.0, -10.0]), 0)
    # closed form: log(1 + exp(-20)); float cancellation leaves ~1e-15 slack
    assert abs(float(out.data) - 2.0611536181902037e-09) < 1e-14


def test_cross_entropy_label_out_of_range():
    t = Tape()
    with pytest.raises(ContractError):
        t.softmax_cross_entropy(Tensor(np.zeros(4)), 4)


def test_cross_entropy_grads_match_finite_differences():
    logits = Tensor(np.array([1.5, -0.3, 0.8, 0.0]))
    t = Tape()
    t.backward(t.softmax_cross_entropy(logits, 2))
    notape = Tape(recording=False)
    fd = fd_gradient(
        lambda: float(notape.softmax_cross_entropy(logits, 2).data), logits.data
    )
    assert rel_err(logits.grad, fd).max() < 1e-4


# ----------------------------------------------------------------------
# randomized per-op gradient sweep
# ----------------------------------------------------------------------

def test_primitive_gradients_on_random_shapes():
    rng = np.random.default_rng(10)
    for _ in range(10):
        rows = int(rng.integers(2, 9))
        cols = int(rng.integers(2, 9))
        x = Tensor(rng.standard_normal((rows, cols)))
        gain = Tensor(rng.standard_normal(cols))
        shift = Tensor(rng.standard_normal(cols))
        w = Tensor(rng.standard_normal((3, cols)))
        t = Tape()
        h = t.layer_norm(x, gain, shift)
        h = t.gelu(t.linear(h, w))
        mask = np.ones((rows, 3), bool)
        p = t.masked_softmax(h, mask)
        t.backward(t.sum_all(t.mul(p, p)))
        notape = Tape(recording=False)

        def run():
            h2 = notape.layer_norm(x, gain, shift)
            h2 = notape.gelu(notape.linear(h2, w))
            p2 = notape.masked_softmax(h2, mask)
            return float(notape.sum_all(notape.mul(p2, p2)).data)

        for tensor in (x, gain, shift, w):
            fd = fd_gradient(run, tensor.data)
            assert rel_err(tensor.grad, fd).max() < 1e-4
