import numpy as np
import pytest

from cohortgraph.autodiff import (NumericsError, Parameter, Tensor, batch_norm,
                                  concat, grad_check, segment_max, segment_sum,
                                  set_check_finite, weighted_gather_sum)


def test_matmul_ones():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((3, 2)))
    assert np.array_equal((a @ b).data, np.full((2, 2), 3.0))


def test_softmax_symmetric():
    out = Tensor(np.array([[0.0, 0.0]])).softmax_rows()
    assert np.allclose(out.data, [[0.5, 0.5]])


def test_leaky_relu_negative():
    out = Tensor(np.array([-1.0])).leaky_relu(0.2)
    assert np.allclose(out.data, [-0.2])


def test_square_gradient():
    x = Parameter("x", np.array(3.0))
    (x * x).backward()
    assert np.allclose(x.grad, 6.0)


def test_softmax_sum_has_zero_gradient():
    v = Parameter("v", np.array([[0.3, -1.2, 4.0]]))
    v.softmax_rows().sum().backward()
    assert np.allclose(v.grad, 0.0, atol=1e-15)


def test_sigmoid_cross_entropy_grad_at_zero():
    # d/dz [-log sigmoid(z)] at z=0 is sigmoid(0) - 1 = -0.5
    z = Parameter("z", np.array(0.0))
    (-(z.sigmoid().log())).backward()
    assert np.allclose(z.grad, -0.5)


def test_backward_rejects_nonscalar():
    x = Parameter("x", np.ones(3))
    with pytest.raises(NumericsError):
        (x * 2.0).backward()


def test_matmul_shape_mismatch():
    with pytest.raises(NumericsError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_check_finite_flag():
    set_check_finite(True)
    try:
        with np.errstate(divide="ignore"):
            with pytest.raises(NumericsError):
                Tensor(np.array([0.0])).log()
    finally:
        set_check_finite(False)


def test_grad_check_quadratic():
    w = Parameter("w", np.array([[1.0, 2.0], [0.5, -1.0]]))
    x = np.array([[0.3], [0.7]])

    def build():
        v = Tensor(x)
        return (v.T @ (w @ v)).sum()

    assert grad_check(build, [w], eps=1e-5) < 1e-6


def test_grad_check_rejects_bad_eps():
    w = Parameter("w", np.array(1.0))
    with pytest.raises(ValueError):
        grad_check(lambda: w * w, [w], eps=1e-2)


def test_grad_check_detects_nondeterminism():
    w = Parameter("w", np.array(1.0))
    rng = np.random.default_rng(0)

    def build():
        return w * float(rng.random())

    with pytest.raises(NumericsError):
        grad_check(build, [w])


@pytest.mark.parametrize("seed", range(10))
def test_composed_ops_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    w1 = Parameter("w1", 0.4 * rng.standard_normal((4, 3)))
    b1 = Parameter("b1", 0.2 * rng.standard_normal(3))
    w2 = Parameter("w2", 0.4 * rng.standard_normal((3, 2)))
    x = rng.standard_normal((5, 4))
    idx = np.array([0, 2, 4])
    labels = np.array([0, 1, 0])

    def build():
        h = (Tensor(x) @ w1 + b1).relu()
        h = h.l2_normalize_rows()
        logits = h @ w2
        picked = logits.gather_rows(idx).log_softmax_rows().pick(labels)
        return -picked.mean()

    assert grad_check(build, [w1, b1, w2]) < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_elementwise_ops_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    p = Parameter("p", 0.5 + rng.random((3, 4)))

    def build():
        t = p.sigmoid().log().exp().leaky_relu() ** 2.0
        t = (t / (p + 3.0)) - p * 0.25
        return t.mean(axis=0).sum()

    assert grad_check(build, [p]) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_segment_and_sparse_ops_match_finite_differences(seed):
    rng = np.random.default_rng(200 + seed)
    vals = Parameter("v", rng.standard_normal((6, 3)))
    wts = Parameter("w", 0.5 + rng.random(5))
    seg = np.array([0, 0, 1, 2, 1, 2])
    rows = np.array([0, 1, 2, 0, 1])
    cols = np.array([1, 2, 0, 2, 0])

    def build():
        s = segment_sum(vals, seg, 3)
        agg = weighted_gather_sum(wts, s, rows, cols, 3)
        return (concat([s, agg], axis=1) ** 2.0).sum()

    assert grad_check(build, [vals, wts]) < 1e-4


def test_segment_max_matches_loop():
    rng = np.random.default_rng(3)
    vals = rng.standard_normal((8, 2))
    seg = rng.integers(0, 3, size=8)
    got = segment_max(vals, seg, 3)
    for s in range(3):
        assert np.array_equal(got[s], vals[seg == s].max(axis=0))


def test_softmax_rows_sum_to_one_and_positive():
    rng = np.random.default_rng(4)
    y = Tensor(50.0 * rng.standard_normal((20, 6))).softmax_rows().data
    assert np.all(y > 0.0)
    assert np.allclose(y.sum(axis=1), 1.0, atol=1e-12)


def test_dropout_identity_cases():
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((4, 4)))
    assert x.dropout(0.0, rng, training=True) is x
    assert x.dropout(0.9, rng, training=False) is x


def test_dropout_inverted_scaling():
    rng = np.random.default_rng(6)
    x = Tensor(np.ones((2000, 4)))
    y = x.dropout(0.5, rng, training=True).data
    kept = y != 0.0
    assert np.allclose(y[kept], 2.0)
    assert abs(kept.mean() - 0.5) < 0.05


def test_batch_norm_train_statistics():
    rng = np.random.default_rng(7)
    x = Tensor(5.0 + 3.0 * rng.standard_normal((200, 4)))
    gamma = Tensor(np.ones(4))
    beta = Tensor(np.zeros(4))
    state = {"mean": np.zeros(4), "var": np.ones(4)}
    y = batch_norm(x, gamma, beta, state, training=True).data
    assert np.all(np.abs(y.mean(axis=0)) < 1e-8)
    assert np.all(np.abs(y.var(axis=0) - 1.0) < 1e-4)


def test_batch_norm_eval_uses_running_stats():
    x = Tensor(np.array([[2.0, -1.0]]))
    gamma = Tensor(np.ones(2))
    beta = Tensor(np.zeros(2))
    state = {"mean": np.array([1.0, 1.0]), "var": np.array([4.0, 1.0])}
    y = batch_norm(x, gamma, beta, state, training=False).data
    assert np.allclose(y, [[0.5, -2.0]], atol=1e-4)


def test_unreached_parameter_has_no_gradient():
    used = Parameter("a", np.array(2.0))
    unused = Parameter("b", np.array(5.0))
    (used * used).backward()
    assert unused.grad is None
    assert np.allclose(used.grad, 4.0)


def test_matmul_with_vector_operands():
    rng = np.random.default_rng(8)
    m = Parameter("m", rng.standard_normal((3, 4)))
    v = Parameter("v", rng.standard_normal(4))
    u = Parameter("u", rng.standard_normal(3))

    def build():
        return (u @ (m @ v)) ** 2.0

    assert grad_check(build, [m, v, u]) < 1e-4
