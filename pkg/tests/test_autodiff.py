import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from macl.autodiff import (
    AdamState,
    Tensor,
    adam_step,
    build_tape,
    clip,
    concat,
    cosine_similarity,
    elementwise,
    embedding,
    layer_norm,
    matmul,
    softmax,
    stack,
    zero_grad,
)
from macl.errors import ContractError, DegenerateInputError, DimensionError, DomainError, TrainingDivergenceError
from oracles import central_difference, relative_error


def leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def check_grad(fn, *arrays, tol=1e-4):
    """Compare backward() of scalar fn(*leaves) with central differences."""
    leaves = [leaf(a) for a in arrays]
    out = fn(*leaves)
    out.backward()
    raw = [t.data for t in leaves]
    numeric = central_difference(lambda: float(fn(*[Tensor(a) for a in raw]).data), raw)
    for t, n in zip(leaves, numeric):
        assert relative_error(t.grad, n) < tol


# -- matmul ------------------------------------------------------------------
def test_matmul_identity_and_basis():
    eye = Tensor(np.eye(2))
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(eye, m).data, m.data)
    assert np.array_equal(matmul(Tensor([[1.0, 0.0]]), Tensor([[0.0], [5.0]])).data, [[0.0]])


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    leaves = [leaf(a), leaf(b)]
    matmul(*leaves).sum().backward()
    num = central_difference(lambda: float((a @ b).sum()), [a, b])
    assert relative_error(leaves[0].grad, num[0]) < 1e-5
    assert relative_error(leaves[1].grad, num[1]) < 1e-5


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_batched_matmul_gradient():
    rng = np.random.default_rng(1)
    check_grad(lambda a, b: (a @ b).tanh().sum(), rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5)))


# -- elementwise -----------------------------------------------------------------
def test_elementwise_examples():
    assert np.array_equal(elementwise("tanh", Tensor(np.zeros(4))).data, np.zeros(4))
    assert elementwise("sigmoid", Tensor(0.0)).item() == 0.5
    assert np.array_equal(elementwise("hadamard", Tensor([1.0, 2, 3]), Tensor([4.0, 5, 6])).data, [4, 10, 18])
    assert np.array_equal(elementwise("scale", Tensor([1.0, -2.0]), 3.0).data, [3.0, -6.0])
    assert np.array_equal(elementwise("negate", Tensor([1.0, -2.0])).data, [-1.0, 2.0])


def test_elementwise_shape_mismatch():
    with pytest.raises(DimensionError):
        elementwise("add", Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


def test_sigmoid_is_stable_at_extremes():
    out = Tensor([-1000.0, 1000.0]).sigmoid().data
    assert np.all(np.isfinite(out))
    assert out[0] == 0.0 and out[1] == 1.0


@pytest.mark.parametrize("op", ["add", "sub", "hadamard"])
def test_binary_elementwise_gradients(op):
    rng = np.random.default_rng(2)
    check_grad(lambda a, b: (elementwise(op, a, b) * elementwise(op, a, b)).sum(), rng.normal(size=5), rng.normal(size=5))


@pytest.mark.parametrize("op", ["tanh", "sigmoid", "negate", "exp"])
def test_unary_elementwise_gradients(op):
    rng = np.random.default_rng(3)
    check_grad(lambda a: (elementwise(op, a) * a).sum(), rng.normal(size=6))


def test_log_sqrt_div_relu_gradients():
    rng = np.random.default_rng(4)
    x = rng.uniform(0.5, 2.0, size=6)
    y = rng.uniform(0.5, 2.0, size=6)
    check_grad(lambda a, b: (a.log() + b.sqrt() + a / b + (a - 1.2).relu()).sum(), x, y)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_composite_gradients(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4,))
    w = rng.normal(size=(4, 2))

    def f(a, b, w):
        h = ((a + b) @ w).tanh()
        return (softmax(h, axis=-1) * h).sum() + (a * b).sigmoid().mean()

    check_grad(f, a, b, w)


def test_broadcast_gradient_sums_over_expanded_axes():
    rng = np.random.default_rng(5)
    check_grad(lambda a, b: ((a * b) + b).sum(), rng.normal(size=(3, 4)), rng.normal(size=(1, 4)))


# -- softmax ---------------------------------------------------------------------
def test_softmax_examples():
    assert np.allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    assert np.allclose(softmax(Tensor([1000.0, 1000.0])).data, [0.5, 0.5])
    assert np.allclose(softmax(Tensor([0.0, np.log(3.0)])).data, [0.25, 0.75], atol=1e-15)


def test_softmax_empty_raises():
    with pytest.raises(DomainError):
        softmax(Tensor(np.zeros(0)))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-100, 100))
def test_softmax_sums_to_one_and_is_shift_invariant(xs, c):
    x = np.array(xs)
    p = softmax(Tensor(x)).data
    assert abs(p.sum() - 1.0) < 1e-9 and np.all(p > 0)
    assert np.max(np.abs(softmax(Tensor(x + c)).data - p)) < 1e-12


def test_softmax_gradient():
    rng = np.random.default_rng(6)
    t = rng.normal(size=(3, 5))
    check_grad(lambda x: (softmax(x, axis=-1) * Tensor(t)).sum(), rng.normal(size=(3, 5)))


# -- cosine ---------------------------------------------------------------------
def test_cosine_examples():
    v = Tensor([0.3, -1.2, 2.0])
    assert abs(cosine_similarity(v, v).item() - 1.0) < 1e-15
    assert cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 0.0
    assert abs(cosine_similarity(Tensor([1.0, 2.0]), Tensor([2.0, 4.0])).item() - 1.0) < 1e-15


def test_cosine_zero_vector_raises():
    with pytest.raises(DegenerateInputError):
        cosine_similarity(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_cosine_symmetric_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = Tensor(rng.normal(size=7)), Tensor(rng.normal(size=7))
    ab, ba = cosine_similarity(a, b).item(), cosine_similarity(b, a).item()
    assert ab == ba
    assert abs(ab) <= 1 + 1e-12


def test_cosine_gradient_batched():
    rng = np.random.default_rng(7)
    check_grad(lambda a, b: cosine_similarity(a, b).exp().sum(), rng.normal(size=(4, 3)), rng.normal(size=(4, 3)))
    check_grad(lambda a, b: cosine_similarity(a.reshape(2, 1, 3), b).sum(), rng.normal(size=(2, 3)), rng.normal(size=(2, 5, 3)))


# -- structural ops ----------------------------------------------------------------
def test_embedding_padding_row_receives_no_gradient():
    table = leaf(np.arange(12.0).reshape(4, 3))
    embedding(table, np.array([[0, 2, 2], [1, 0, 3]])).sum().backward()
    assert np.array_equal(table.grad[:, 0], [0.0, 1.0, 2.0, 1.0])


def test_concat_stack_getitem_gradients():
    rng = np.random.default_rng(8)
    check_grad(lambda a, b: concat([a, b], axis=-1).tanh().sum(), rng.normal(size=(2, 3)), rng.normal(size=(2, 2)))
    check_grad(lambda a, b: stack([a, b], axis=0)[1, ::2].exp().sum(), rng.normal(size=(3, 4)), rng.normal(size=(3, 4)))
    check_grad(lambda a: a[np.array([0, 0, 2])].exp().sum(), rng.normal(size=(3, 2)))


def test_clip_gradient_is_zero_outside_range():
    x = leaf([-2.0, 0.5, 2.0])
    clip(x, -1.0, 1.0).sum().backward()
    assert np.array_equal(x.grad, [0.0, 1.0, 0.0])


def test_layer_norm_gradient():
    rng = np.random.default_rng(9)
    w = rng.normal(size=(2, 3, 6))
    check_grad(lambda x, g, b: (layer_norm(x, g, b, 1e-8) * Tensor(w)).sum(), rng.normal(size=(2, 3, 6)), rng.normal(size=6), rng.normal(size=6))


def test_reshape_transpose_mean_gradients():
    rng = np.random.default_rng(10)
    check_grad(lambda a: a.reshape(3, 4).T.swapaxes(0, 1).transpose(1, 0).mean(axis=0).exp().sum(), rng.normal(size=12))


# -- backward ----------------------------------------------------------------------
def test_backward_examples():
    x = leaf(np.ones((2, 3)))
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((2, 3)))
    y = leaf([1.0, 2.0])
    (y * y).sum().backward()
    assert np.array_equal(y.grad, [2.0, 4.0])


def test_backward_accumulates_until_reset():
    y = leaf([1.0, 2.0])
    (y * y).sum().backward()
    (y * y).sum().backward()
    assert np.array_equal(y.grad, [4.0, 8.0])
    zero_grad([y])
    assert y.grad is None


def test_non_scalar_backward_raises():
    with pytest.raises(ContractError):
        (leaf([1.0, 2.0]) * 2.0).backward()


def test_tape_is_topological_and_visits_once():
    a = leaf([1.0])
    b = a * a
    c = b + a
    d = c * b
    tape = build_tape(d)
    pos = {id(n): i for i, n in enumerate(tape)}
    assert len(tape) == len(pos)
    for n in tape:
        for p in n._parents:
            assert pos[id(p)] < pos[id(n)]


def test_backward_is_deterministic():
    def grads():
        rng = np.random.default_rng(11)
        w = leaf(rng.normal(size=(5, 5)))
        x = Tensor(rng.normal(size=(3, 5)))
        softmax((x @ w).tanh(), axis=-1).log().sum().backward()
        return w.grad

    assert np.array_equal(grads(), grads())


def test_ndarray_on_the_left_defers_to_tensor():
    t = leaf([1.0, 2.0])
    out = np.array([3.0, 4.0]) * t
    assert isinstance(out, Tensor)
    out.sum().backward()
    assert np.array_equal(t.grad, [3.0, 4.0])


# -- adam ----------------------------------------------------------------------------
def test_adam_zero_gradient_leaves_params():
    p = {"p": leaf([1.0, -2.0])}
    adam_step(p, AdamState(), {"p": np.zeros(2)})
    assert np.array_equal(p["p"].data, [1.0, -2.0])


def test_adam_single_step_closed_form():
    p = {"p": leaf(0.0)}
    state = AdamState(learning_rate=0.001)
    adam_step(p, state, {"p": np.array(1.0)})
    # m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    assert abs(p["p"].item() - (-0.001 / (1 + 1e-8))) < 1e-15
    assert state.step_count == 1


def test_adam_converges_on_quadratic():
    p = {"p": leaf(0.0)}
    state = AdamState(learning_rate=0.1)
    for _ in range(1000):
        zero_grad(p.values())
        ((p["p"] - 3.0) * (p["p"] - 3.0)).backward()
        adam_step(p, state)
    assert abs(p["p"].item() - 3.0) < 0.01
    assert state.step_count == 1000


def test_adam_nan_gradient_names_parameter():
    p = {"weights": leaf([1.0])}
    with pytest.raises(TrainingDivergenceError, match="weights"):
        adam_step(p, AdamState(), {"weights": np.array([np.nan])})
