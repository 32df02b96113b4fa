import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wri_lab import diffcore as dc
from wri_lab.diffcore import Tape


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b))))


def grad_check(build, shapes, rng, positive=False, h=1e-6):
    """Compare tape gradients of ``build(*tensors)`` with central differences."""
    xs = [rng.uniform(0.5, 2.0, s) if positive else rng.standard_normal(s) for s in shapes]

    def f(*arrs):
        tape = Tape()
        return float(build(*[tape.leaf(a) for a in arrs]).data)

    tape = Tape()
    leaves = [tape.leaf(x) for x in xs]
    out = build(*leaves)
    got = tape.backward(out, leaves)
    for i, x in enumerate(xs):
        fd = dc.finite_diff_grad(lambda a: f(*xs[:i], a, *xs[i + 1:]), x, h=h)
        assert rel_err(got[i], fd) < 1e-4


# ----------------------------------------------------------------------------
# forward values


def test_sigmoid_zero():
    t = Tape()
    assert dc.sigmoid(t.leaf(0.0)).item() == 0.5


def test_mean_of_three():
    t = Tape()
    assert dc.mean(t.leaf([1.0, 2.0, 3.0])).item() == 2.0


def test_squared_error_value():
    t = Tape()
    np.testing.assert_allclose(dc.squared_error(t.leaf([1.5]), [1.0]).data, [0.25])


def test_logistic_loss_is_stable_for_large_logits():
    t = Tape()
    out = dc.logistic_loss(t.leaf([800.0, -800.0]), [1, 0]).data
    np.testing.assert_allclose(out, [0.0, 0.0], atol=1e-300)


def test_softmax_cross_entropy_uniform_logits():
    t = Tape()
    out = dc.softmax_cross_entropy(t.leaf(np.zeros((4, 5))), [0, 1, 2, 3]).data
    np.testing.assert_allclose(out, np.log(5.0))


def test_variance_over_list():
    t = Tape()
    v = dc.variance([t.leaf(0.0), t.leaf(1.0), t.leaf(2.0)])
    np.testing.assert_allclose(v.item(), 2.0 / 3.0)


def test_shape_mismatch_names_op_and_shapes():
    t = Tape()
    with pytest.raises(dc.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        dc.matmul(t.leaf(np.ones((2, 3))), t.leaf(np.ones((2, 3))))


def test_log_of_nonpositive_is_domain_error():
    t = Tape()
    with pytest.raises(dc.DomainError):
        dc.log(t.leaf([1.0, 0.0]))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_is_surfaced():
    t = Tape()
    with pytest.raises(dc.NonFiniteError):
        dc.mul(t.leaf([np.inf]), 0.0)


# ----------------------------------------------------------------------------
# backward


def test_square_grad_at_three():
    t = Tape()
    x = t.leaf(3.0)
    (g,) = t.backward(dc.square(x), [x])
    assert g == 6.0


def test_mean_grad_is_one_over_n():
    t = Tape()
    x = t.leaf(np.arange(7.0))
    (g,) = t.backward(dc.mean(x), [x])
    np.testing.assert_allclose(g, np.full(7, 1 / 7))


def test_backward_rejects_non_scalar():
    t = Tape()
    x = t.leaf([1.0, 2.0])
    with pytest.raises(dc.ShapeError):
        t.backward(dc.square(x), [x])


def test_backward_twice_is_idempotent():
    t = Tape()
    x = t.leaf([0.3, -1.2])
    y = dc.sum_(dc.mul(dc.sigmoid(x), x))
    g1 = t.backward(y, [x])[0]
    g2 = t.backward(y, [x])[0]
    np.testing.assert_array_equal(g1, g2)


def test_unused_leaf_gets_zero_gradient():
    t = Tape()
    x, z = t.leaf(2.0), t.leaf([1.0, 1.0])
    gx, gz = t.backward(dc.square(x), [x, z])
    assert gx == 4.0
    np.testing.assert_array_equal(gz, [0.0, 0.0])


def test_detach_blocks_gradient():
    t = Tape()
    x = t.leaf([1.0, 2.0])
    (g,) = t.backward(dc.sum_(dc.mul(dc.detach(x), x)), [x])
    np.testing.assert_array_equal(g, [1.0, 2.0])


def test_mlp_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((6, 3))
    y = rng.standard_normal(6)

    def build(W1, b1, W2):
        h = dc.relu(dc.add(dc.matmul(X, W1), b1))
        return dc.mean(dc.squared_error(dc.reshape(dc.matmul(h, W2), (6,)), y))

    grad_check(build, [(3, 4), (4,), (4, 1)], rng)


UNARY = {
    "neg": (dc.neg, False),
    "square": (dc.square, False),
    "sqrt": (dc.sqrt, True),
    "exp": (dc.exp, False),
    "log": (dc.log, True),
    "relu": (dc.relu, False),
    "sigmoid": (dc.sigmoid, False),
    "scale": (lambda x: dc.scale(x, -2.5), False),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_gradients(name):
    fn, positive = UNARY[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    for _ in range(10):
        grad_check(lambda x: dc.sum_(dc.mul(fn(x), np.arange(1.0, 6.0))), [(5,)], rng, positive)


BINARY = {
    "add": dc.add,
    "sub": dc.sub,
    "mul": dc.mul,
    "div": dc.div,
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_ops_gradients_with_broadcast(name):
    fn = BINARY[name]
    rng = np.random.default_rng(len(name))
    for _ in range(10):
        grad_check(lambda a, b: dc.sum_(dc.square(fn(a, b))), [(3, 4), (4,)], rng, positive=True)


def test_reductions_and_stack_gradients():
    rng = np.random.default_rng(5)
    for _ in range(10):
        grad_check(lambda x: dc.sum_(dc.square(dc.sum_(x, axis=0))), [(4, 3)], rng)
        grad_check(lambda x: dc.sum_(dc.square(dc.mean(x, axis=1))), [(4, 3)], rng)
        grad_check(lambda a, b: dc.variance([dc.mean(a), dc.mean(b), dc.sum_(a)]), [(3,), (2,)], rng)
        grad_check(lambda a: dc.sum_(dc.square(dc.reshape(a, (6,)))), [(2, 3)], rng)


def test_loss_gradients():
    rng = np.random.default_rng(6)
    y_bin = np.array([0, 1, 1, 0, 1])
    y_cls = np.array([0, 2, 1, 2, 0])
    y_reg = rng.standard_normal(5)
    for _ in range(10):
        grad_check(lambda z: dc.mean(dc.logistic_loss(z, y_bin)), [(5,)], rng)
        grad_check(lambda z: dc.mean(dc.squared_error(z, y_reg)), [(5,)], rng)
        grad_check(lambda z: dc.mean(dc.softmax_cross_entropy(z, y_cls)), [(5, 3)], rng)


def test_matmul_vector_and_matrix_gradients():
    rng = np.random.default_rng(7)
    for _ in range(10):
        grad_check(lambda A, v: dc.sum_(dc.square(dc.matmul(A, v))), [(3, 4), (4,)], rng)
        grad_check(lambda A, B: dc.sum_(dc.matmul(A, B)), [(2, 3), (3, 2)], rng)


# ----------------------------------------------------------------------------
# finite differences


def test_finite_diff_examples():
    np.testing.assert_allclose(dc.finite_diff_grad(lambda x: float(x[0] ** 2), np.array([3.0])), [6.0], atol=1e-6)
    np.testing.assert_array_equal(dc.finite_diff_grad(lambda x: 4.0, np.zeros(3)), np.zeros(3))
    np.testing.assert_allclose(dc.finite_diff_grad(lambda x: float(np.log(x[0])), np.array([2.0])), [0.5],
                               atol=1e-8)


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ValueError):
        dc.finite_diff_grad(lambda x: 0.0, np.zeros(1), h=0.0)


# ----------------------------------------------------------------------------
# Adam


def test_adam_first_step_is_lr_sign_g():
    p = {"w": np.array([1.0, -1.0, 0.5])}
    st_ = dc.adam_init(p, lr=0.01)
    new = dc.adam_step(st_, p, {"w": np.array([3.0, -0.2, 1e3])})
    np.testing.assert_allclose(new["w"] - p["w"], [-0.01, 0.01, -0.01], rtol=1e-6)
    assert st_.step == 1


def test_adam_zero_gradient_no_decay_is_identity():
    p = {"w": np.array([1.0, 2.0])}
    st_ = dc.adam_init(p, lr=0.1)
    new = dc.adam_step(st_, p, {"w": np.zeros(2)})
    np.testing.assert_array_equal(new["w"], p["w"])


def test_adam_two_steps_on_quadratic_decrease():
    p = {"x": np.array(1.0)}
    st_ = dc.adam_init(p, lr=0.1)
    xs = [1.0]
    for _ in range(2):
        p = dc.adam_step(st_, p, {"x": 2 * p["x"]})
        xs.append(float(p["x"]))
    assert xs[0] > xs[1] > xs[2]


def test_adam_rejects_nan_with_step_index():
    p = {"w": np.zeros(2)}
    st_ = dc.adam_init(p)
    dc.adam_step(st_, p, {"w": np.ones(2)})
    with pytest.raises(dc.NonFiniteError, match="step 2"):
        dc.adam_step(st_, p, {"w": np.array([np.nan, 0.0])})


def test_adam_decoupled_weight_decay():
    p = {"w": np.array([2.0])}
    st_ = dc.adam_init(p, lr=0.1, weight_decay=0.5)
    new = dc.adam_step(st_, p, {"w": np.zeros(1)})
    np.testing.assert_allclose(new["w"], [2.0 - 0.1 * 0.5 * 2.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=6), st.integers(1, 5))
def test_adam_zero_lr_never_moves(g, n):
    p = {"w": np.linspace(-1, 1, len(g))}
    st_ = dc.adam_init(p, lr=0.0)
    q = p
    for _ in range(n):
        q = dc.adam_step(st_, q, {"w": np.array(g)})
    np.testing.assert_array_equal(q["w"], p["w"])
    assert st_.step == n


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_matmul_matches_numpy(n, m, seed):
    rng = np.random.default_rng(seed)
    A, B = rng.standard_normal((n, m)), rng.standard_normal((m, 3))
    t = Tape()
    np.testing.assert_allclose(dc.matmul(t.leaf(A), t.leaf(B)).data, A @ B, rtol=1e-12)
