import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from skillnetx.tensor import (
    ContractError,
    GradTape,
    ShapeError,
    Tensor,
    add,
    add_bias,
    backward,
    cross_entropy,
    dropout,
    finite_diff_grad,
    layer_norm,
    linear,
    matmul,
    mean_stack,
    mul,
    no_grad,
    parameter,
    relu,
    reshape,
    scale,
    scale_rows,
    scatter_rows,
    softmax_lastdim,
    sub,
    sum_all,
    take,
    transpose,
    zero_grads,
)

from .gradcheck import grad_errors

SEEDS = range(20)


def rand(rng, *shape):
    return parameter(rng.normal(size=shape))


def weighted(out: Tensor, rng_seed: int = 99) -> Tensor:
    """Random linear functional of ``out`` so every output element matters."""
    w = np.random.default_rng(rng_seed).normal(size=out.shape)
    return sum_all(mul(out, Tensor(w)))


# ---------------------------------------------------------------- forward values


def test_matmul_examples():
    eye = Tensor(np.eye(2))
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(eye, m).data, m.data)
    proj = Tensor([[1.0, 0.0], [0.0, 0.0]])
    assert np.array_equal(matmul(proj, Tensor([[5.0, 6.0], [7.0, 8.0]])).data, [[5, 6], [0, 0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_elementwise_shape_mismatch_is_error():
    with pytest.raises(ShapeError):
        add(Tensor(np.zeros(3)), Tensor(np.zeros((1, 3))))


def test_softmax_examples():
    assert np.allclose(softmax_lastdim(Tensor([0.0, 0.0])).data, [0.5, 0.5], atol=0, rtol=1e-15)
    assert np.allclose(softmax_lastdim(Tensor([1000.0, 1000.0])).data, [0.5, 0.5], atol=0, rtol=1e-15)
    assert np.allclose(softmax_lastdim(Tensor([0.0, math.log(3)])).data, [0.25, 0.75], atol=1e-15)


@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e4))
def test_softmax_rows_sum_to_one(seed, spread):
    x = np.random.default_rng(seed).uniform(-spread, spread, size=(4, 7))
    assert np.all(np.abs(softmax_lastdim(Tensor(x)).data.sum(-1) - 1.0) <= 1e-12)


def test_layer_norm_examples():
    out = layer_norm(Tensor([5.0, 5.0, 5.0, 5.0]), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert np.array_equal(out.data, np.zeros(4))
    beta = np.array([0.1, -2.0, 3.0])
    x = np.random.default_rng(0).normal(size=(2, 3))
    out = layer_norm(Tensor(x), Tensor(np.zeros(3)), Tensor(beta))
    assert np.array_equal(out.data, np.broadcast_to(beta, (2, 3)))


def test_cross_entropy_examples():
    assert cross_entropy(Tensor([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(2), abs=1e-15)
    assert cross_entropy(Tensor([[30.0, -30.0]]), [0]).item() == pytest.approx(0.0, abs=1e-20)


def test_cross_entropy_rejects_bad_label():
    with pytest.raises(ValueError, match="label 3 at batch index 1"):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


# ---------------------------------------------------------------- gradients


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_gradient(seed):
    rng = np.random.default_rng(seed)
    a, b = rand(rng, 3, 4), rand(rng, 4, 2)
    assert max(grad_errors(lambda: sum_all(matmul(a, b)), [a, b])) <= 1e-6


@pytest.mark.parametrize("seed", SEEDS)
def test_batched_matmul_gradient(seed):
    rng = np.random.default_rng(seed)
    a, b = rand(rng, 2, 3, 3, 4), rand(rng, 2, 3, 4, 2)
    assert max(grad_errors(lambda: weighted(matmul(a, b)), [a, b])) <= 1e-6


@pytest.mark.parametrize("seed", SEEDS)
def test_layer_norm_gradient(seed):
    rng = np.random.default_rng(seed)
    x, g, b = rand(rng, 2, 3, 5), rand(rng, 5), rand(rng, 5)
    assert max(grad_errors(lambda: weighted(layer_norm(x, g, b)), [x, g, b])) <= 1e-5


@pytest.mark.parametrize("seed", SEEDS)
def test_cross_entropy_gradient(seed):
    rng = np.random.default_rng(seed)
    z = rand(rng, 4, 3)
    y = rng.integers(0, 3, size=4)
    assert max(grad_errors(lambda: cross_entropy(z, y), [z])) <= 1e-6


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_gradient_with_mask(seed):
    rng = np.random.default_rng(seed)
    x = rand(rng, 2, 3, 5)
    keep = rng.random((2, 3, 5)) < 0.7
    keep[..., 0] = True
    assert max(grad_errors(lambda: weighted(softmax_lastdim(x, keep)), [x])) <= 1e-6


@pytest.mark.parametrize("seed", SEEDS)
def test_structural_ops_gradient(seed):
    rng = np.random.default_rng(seed)
    x, w, bias = rand(rng, 2, 3, 4), rand(rng, 4, 6), rand(rng, 6)
    r = rand(rng, 6)
    rows = np.array([0, 2, 3, 5])

    def loss():
        h = relu(linear(x, w, bias))  # [2,3,6]
        h = transpose(reshape(h, (6, 6)), (1, 0))
        picked = take(h, rows)  # [4,6]
        mixed = scale_rows(picked, take(r, rows))
        back = scatter_rows(mixed, rows, 6)
        return weighted(add_bias(scale(sub(back, h), 0.5), bias))

    assert max(grad_errors(loss, [x, w, bias, r])) <= 1e-5


@pytest.mark.parametrize("seed", SEEDS)
def test_mean_stack_gradient(seed):
    rng = np.random.default_rng(seed)
    xs = [rand(rng, 2, 3) for _ in range(3)]
    assert max(grad_errors(lambda: weighted(mean_stack(xs)), xs)) <= 1e-8


# ---------------------------------------------------------------- tape semantics


def test_sum_of_linear_gives_replicated_input():
    x = np.array([1.0, -2.0, 3.0])
    w = parameter(np.zeros((3, 2)))
    with GradTape() as tape:
        backward(sum_all(linear(Tensor(x[None]), w)), tape)
    assert np.array_equal(w.grad, np.repeat(x[:, None], 2, axis=1))


def test_leaf_off_the_loss_path_gets_no_gradient():
    a, unused = parameter([1.0, 2.0]), parameter([3.0])
    with GradTape() as tape:
        backward(sum_all(a), tape)
    assert unused.grad is None
    assert np.array_equal(a.grad, [1.0, 1.0])


def test_fan_out_gradients_sum():
    a = parameter([2.0, 3.0])
    with GradTape() as tape:
        backward(sum_all(add(mul(a, a), a)), tape)
    assert np.array_equal(a.grad, 2 * a.data + 1)


def test_gradients_accumulate_until_zeroed():
    a = parameter([1.0])
    for _ in range(2):
        with GradTape() as tape:
            backward(sum_all(scale(a, 3.0)), tape)
    assert a.grad[0] == 6.0
    zero_grads([a])
    assert a.grad is None


def test_backward_is_deterministic():
    rng = np.random.default_rng(0)
    x, w = rand(rng, 5, 4), rand(rng, 4, 3)
    grads = []
    for _ in range(2):
        zero_grads([x, w])
        with GradTape() as tape:
            backward(weighted(layer_norm(linear(x, w), Tensor(np.ones(3)), Tensor(np.zeros(3)))), tape)
        grads.append((x.grad.copy(), w.grad.copy()))
    assert all(np.array_equal(a, b) for a, b in zip(grads[0], grads[1]))


def test_backward_contracts():
    a = parameter(np.ones(3))
    with GradTape() as tape:
        out = scale(a, 2.0)
        with pytest.raises(ContractError, match="scalar"):
            backward(out, tape)
    with pytest.raises(ContractError):
        backward(sum_all(a), GradTape())
    with pytest.raises(ContractError):
        Tensor(np.ones(2)).item()


def test_no_grad_records_nothing():
    a = parameter(np.ones(3))
    with GradTape() as tape:
        with no_grad():
            sum_all(a)
    assert len(tape) == 0


def test_dropout_identity_without_rng_and_scaled_with_rng():
    x = Tensor(np.ones((100, 100)))
    assert dropout(x, 0.5, None) is x
    out = dropout(x, 0.5, np.random.default_rng(0)).data
    assert set(np.unique(out)) <= {0.0, 2.0}


# ---------------------------------------------------------------- finite differences


def test_finite_diff_of_sum_is_ones():
    x = Tensor(np.random.default_rng(1).normal(size=(3, 2)))
    assert np.allclose(finite_diff_grad(lambda t: t.data.sum(), x).data, 1.0, atol=1e-9)


def test_finite_diff_of_half_square_norm_is_point():
    x = Tensor(np.random.default_rng(2).normal(size=7))
    g = finite_diff_grad(lambda t: 0.5 * float(t.data @ t.data), x)
    assert np.max(np.abs(g.data - x.data)) <= 1e-8


# ---------------------------------------------------------------- order independence


@given(st.integers(0, 2**31 - 1), st.integers(1, 10), st.randoms(use_true_random=False))
def test_mean_stack_is_bitwise_order_independent(seed, k, shuffler):
    rng = np.random.default_rng(seed)
    xs = [Tensor(rng.normal(size=(3, 4)) * 10.0 ** rng.integers(-3, 4)) for _ in range(k)]
    perm = list(range(k))
    shuffler.shuffle(perm)
    assert np.array_equal(mean_stack(xs).data, mean_stack([xs[i] for i in perm]).data)
