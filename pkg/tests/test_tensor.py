import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stbd.errors import DimensionError, NumericError, UsageError
from stbd.tensor import (Tensor, concat, cross_entropy, dropout, embedding, grad_check,
                         layer_norm, log_softmax, matmul, no_grad, relu, softmax)


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# -- matmul -----------------------------------------------------------------

def test_matmul_identity():
    b = t64([[1.5, -2.0], [0.25, 3.0]])
    assert np.array_equal(matmul(t64(np.eye(2)), b).data, b.data)


def test_matmul_hand_example():
    out = matmul(t64([[1, 2], [3, 4]]), t64([[1], [1]]))
    assert np.array_equal(out.data, [[3], [7]])


def test_matmul_mismatch_reports_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))


def test_matmul_backward_formula():
    rng = np.random.default_rng(1)
    a, b = t64(rng.standard_normal((3, 4)), True), t64(rng.standard_normal((4, 2)), True)
    g = rng.standard_normal((3, 2))
    (matmul(a, b) * Tensor(g)).sum().backward()
    assert np.allclose(a.grad, g @ b.data.T)
    assert np.allclose(b.grad, a.data.T @ g)


# -- softmax ----------------------------------------------------------------

@pytest.mark.parametrize("x, expected", [
    ([0.0, 0.0], [0.5, 0.5]),
    ([0.0, 1.0], [0.26894, 0.73106]),
    ([1000.0, 1000.0], [0.5, 0.5]),
])
def test_softmax_examples(x, expected):
    assert np.allclose(softmax(t64(x)).data, expected, atol=1e-5)


def test_softmax_rejects_nonfinite():
    with pytest.raises(NumericError):
        softmax(t64([0.0, np.inf]))
    with pytest.raises(NumericError):
        softmax(t64([np.nan, 1.0]))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=12), st.floats(-1e3, 1e3))
def test_softmax_sums_to_one_and_shift_invariant(xs, c):
    x = np.array(xs)
    y = softmax(t64(x)).data
    assert abs(y.sum() - 1.0) < 1e-6
    assert np.allclose(softmax(t64(x + c)).data, y, atol=1e-6)


def test_softmax_along_first_axis():
    x = np.random.default_rng(0).standard_normal((4, 3))
    y = softmax(t64(x), axis=0).data
    assert np.allclose(y.sum(axis=0), 1.0)


# -- layer norm ---------------------------------------------------------------

def test_layer_norm_examples():
    one, zero = t64(np.ones(4)), t64(np.zeros(4))
    assert np.array_equal(layer_norm(t64([1, 1, 1, 1]), one, zero).data, np.zeros(4))
    assert np.allclose(layer_norm(t64([1, -1]), t64([1, 1]), t64([0, 0])).data, [1, -1])
    x = t64(np.random.default_rng(3).standard_normal((2, 4)))
    bias = t64([0.5, -1.0, 2.0, 3.0])
    assert np.allclose(layer_norm(x, t64(np.zeros(4)), bias).data, np.broadcast_to(bias.data, (2, 4)))


def test_layer_norm_moments():
    x = t64(np.random.default_rng(5).standard_normal((6, 10)) * 7 + 3)
    y = layer_norm(x, t64(np.ones(10)), t64(np.zeros(10))).data
    assert np.allclose(y.mean(axis=1), 0, atol=1e-12)
    assert np.allclose(y.var(axis=1), 1, atol=1e-9)


def test_layer_norm_needs_two_features():
    with pytest.raises(DimensionError):
        layer_norm(t64([[1.0]]), t64([1.0]), t64([0.0]))


def test_layer_norm_width_two_has_zero_input_gradient():
    x = t64([[0.3, 1.9], [-2.0, 5.0]], True)
    w = t64([[1.0, 2.0], [-3.0, 0.5]])
    (layer_norm(x, t64([1.0, 1.0]), t64([0.0, 0.0])) * w).sum().backward()
    assert np.abs(x.grad).max() < 1e-9


def test_layer_norm_constant_rows_have_finite_gradient():
    x = t64(np.full((2, 4), 3.0), True)
    layer_norm(x, t64(np.ones(4)), t64(np.zeros(4))).sum().backward()
    assert np.isfinite(x.grad).all()


# -- backward -------------------------------------------------------------------

def test_backward_of_sum_is_ones():
    x = t64(np.random.default_rng(0).standard_normal((2, 3, 4)), True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_square():
    x = t64([2.0, 3.0], True)
    (x * x).sum().backward()
    assert np.array_equal(x.grad, [4.0, 6.0])


def test_unreachable_leaf_has_no_gradient():
    x, y = t64([1.0, 2.0], True), t64([3.0], True)
    x.sum().backward()
    assert y.grad is None or not y.grad.any()


def test_backward_requires_scalar():
    with pytest.raises(UsageError):
        (t64([1.0, 2.0], True) * 2.0).backward()


def test_fan_out_accumulates():
    rng = np.random.default_rng(11)
    w = rng.standard_normal((3, 3))
    x = t64(rng.standard_normal((2, 3)), True)
    f = lambda a, b: (relu(matmul(a, t64(w))) * b).sum()
    f(x, x).backward()
    shared = x.grad.copy()
    a, b = t64(x.data, True), t64(x.data, True)
    f(a, b).backward()
    assert np.allclose(shared, a.grad + b.grad)


def test_graph_deep_chain_is_iterative():
    x = t64([1.0], True)
    y = x
    for _ in range(5000):
        y = y + 0.0
    y.sum().backward()
    assert x.grad[0] == 1.0


def test_no_grad_records_nothing():
    x = t64([1.0, 2.0], True)
    with no_grad():
        y = (x * x).sum()
    assert not y.requires_grad


def test_relu_subgradient_zero_at_zero():
    x = t64([-1.0, 0.0, 2.0], True)
    relu(x).sum().backward()
    assert np.array_equal(x.grad, [0.0, 0.0, 1.0])


def test_getitem_fancy_index_accumulates():
    x = t64([1.0, 2.0, 3.0], True)
    x[np.array([0, 0, 2])].sum().backward()
    assert np.array_equal(x.grad, [2.0, 0.0, 1.0])


# -- dropout ------------------------------------------------------------------

def test_dropout_identity_at_eval():
    x = t64(np.ones((4, 4)))
    assert dropout(x, 0.5, np.random.default_rng(0), training=False) is x


def test_dropout_inverted_scaling():
    x = t64(np.ones(20000))
    y = dropout(x, 0.2, np.random.default_rng(0), training=True).data
    assert set(np.unique(y)) <= {0.0, 1.25}
    assert abs(y.mean() - 1.0) < 0.02


def test_dropout_seeded():
    x = t64(np.ones(50))
    a = dropout(x, 0.3, np.random.default_rng(4), True).data
    b = dropout(x, 0.3, np.random.default_rng(4), True).data
    assert np.array_equal(a, b)


# -- cross entropy --------------------------------------------------------------

def test_cross_entropy_mean_over_unmasked():
    logits = np.log(np.array([[[0.5, 0.25, 0.25], [0.1, 0.8, 0.1], [1 / 3, 1 / 3, 1 / 3]]]))
    loss = cross_entropy(t64(logits), [[0, 1, 2]], [[True, True, False]])
    assert np.isclose(loss.data, -(np.log(0.5) + np.log(0.8)) / 2)


def test_cross_entropy_all_padded():
    with pytest.raises(UsageError):
        cross_entropy(t64(np.zeros((1, 2, 3))), [[0, 0]], [[False, False]])


# -- grad_check ---------------------------------------------------------------

def test_grad_check_quadratic_and_linear():
    x = t64(np.random.default_rng(2).standard_normal(6))
    assert grad_check(lambda v: (v * v).sum(), x) < 1e-6
    assert grad_check(lambda v: v.sum(), x) < 1e-10


def test_grad_check_rejects_bad_step_and_precision():
    with pytest.raises(UsageError):
        grad_check(lambda v: v.sum(), t64([1.0]), step=1e-2)
    with pytest.raises(UsageError):
        grad_check(lambda v: v.sum(), Tensor(np.ones(2, dtype=np.float32)))


def test_grad_check_flags_wrong_gradient():
    x = t64([0.3, -0.7])
    wrong = lambda v: Tensor._make(np.asarray((v.data ** 3).sum()), (v,), lambda g: (g * v.data,), "bad")
    assert grad_check(wrong, x) > 1e-2


def test_grad_check_nonfinite_raises():
    # log(x + 5e-7) is finite at 0 but not at 0 - 1e-6
    def f(v):
        with np.errstate(invalid="ignore"):
            out = np.log(v.data + 5e-7).sum()
        return Tensor._make(np.asarray(out), (v,), lambda g: (g / (v.data + 5e-7),), "log")

    with pytest.raises(NumericError):
        grad_check(f, t64([0.0]), step=1e-6)


# -- randomized op-level gradient checks (100 seeds each) --------------------------

def _shape(rng):
    return int(rng.integers(2, 5)), int(rng.integers(2, 5))


def _op_cases():
    def mm(rng):
        m, k = _shape(rng)
        b = t64(rng.standard_normal((k, int(rng.integers(1, 3)))))
        w = rng.standard_normal((m, b.shape[1]))
        return rng.standard_normal((m, k)), lambda x: (matmul(x, b) * Tensor(w)).sum()

    def sm(rng):
        shape = _shape(rng)
        w = rng.standard_normal(shape)
        return rng.standard_normal(shape), lambda x: (softmax(x) * Tensor(w)).sum()

    def lsm(rng):
        shape = _shape(rng)
        w = rng.standard_normal(shape)
        return rng.standard_normal(shape), lambda x: (log_softmax(x) * Tensor(w)).sum()

    def ln(rng):
        # width 2 normalises every row to exactly +-1, so its true gradient is
        # zero and the relative error compares roundoff with roundoff
        shape = int(rng.integers(2, 5)), int(rng.integers(3, 6))
        gain, bias = t64(rng.standard_normal(shape[1])), t64(rng.standard_normal(shape[1]))
        w = rng.standard_normal(shape)
        return rng.standard_normal(shape), lambda x: (layer_norm(x, gain, bias) * Tensor(w)).sum()

    def rl(rng):
        shape = _shape(rng)
        x = rng.standard_normal(shape)
        x[np.abs(x) < 0.05] += 0.1      # keep away from the kink
        w = rng.standard_normal(shape)
        return x, lambda v: (relu(v) * Tensor(w)).sum()

    def emb(rng):
        v, d = _shape(rng)
        ids = rng.integers(0, v, size=(2, 3))
        w = rng.standard_normal((2, 3, d))
        return rng.standard_normal((v, d)), lambda t: (embedding(t, ids) * Tensor(w)).sum()

    def ce(rng):
        n, v = _shape(rng)
        tgt = rng.integers(0, v, size=(1, n))
        mask = np.ones((1, n), dtype=bool)
        mask[0, -1] = n < 3
        return rng.standard_normal((1, n, v)), lambda x: cross_entropy(x, tgt, mask)

    def cat(rng):
        m, k = _shape(rng)
        other = t64(rng.standard_normal((1, k)))
        w = rng.standard_normal((m + 1, k))
        return rng.standard_normal((m, k)), lambda x: (concat([x, other]) * Tensor(w)).sum()

    return {"matmul": mm, "softmax": sm, "log_softmax": lsm, "layer_norm": ln, "relu": rl,
            "embedding": emb, "cross_entropy": ce, "concat": cat}


@pytest.mark.parametrize("op", sorted(_op_cases()))
def test_op_gradients_over_100_seeds(op):
    make = _op_cases()[op]
    worst = 0.0
    for seed in range(100):
        data, f = make(np.random.default_rng(seed))
        worst = max(worst, grad_check(f, t64(data)))
    assert worst < 1e-4, f"{op}: {worst}"
