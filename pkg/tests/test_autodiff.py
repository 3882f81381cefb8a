import numpy as np
import pytest

from mfclust import autodiff as ad
from mfclust.autodiff import Tape, ShapeError, TapeError


def test_add_elementwise():
    t = Tape()
    out = ad.apply("add", [t.constant([1.0, 2.0]), t.constant([3.0, 4.0])])
    np.testing.assert_array_equal(out.data, [4.0, 6.0])


def test_logsumexp_two_zeros():
    t = Tape()
    out = ad.apply("logsumexp", [t.constant([0.0, 0.0])], axis=-1)
    assert out.data == pytest.approx(np.log(2.0), abs=1e-12)


def test_matmul_ones():
    t = Tape()
    out = ad.apply("matmul", [t.constant(np.ones((2, 3))), t.constant(np.ones((3, 2)))])
    np.testing.assert_array_equal(out.data, np.full((2, 2), 3.0))


def test_matmul_shape_error_names_op():
    t = Tape()
    with pytest.raises(ShapeError, match="matmul"):
        ad.matmul(t.constant(np.ones((2, 3))), t.constant(np.ones((2, 3))))


def test_backward_square():
    t = Tape()
    x = t.parameter(np.array(3.0))
    loss = x * x
    grads = ad.backward(loss)
    assert grads[x.node_id] == pytest.approx(6.0)
    assert t.frozen


def test_backward_relu_negative():
    t = Tape()
    x = t.parameter(np.array(-1.0))
    grads = ad.backward(ad.relu(x))
    assert grads[x.node_id] == pytest.approx(0.0)


def test_backward_rejects_nonscalar():
    t = Tape()
    x = t.parameter(np.array([1.0, 2.0]))
    with pytest.raises(TapeError, match="scalar"):
        ad.backward(x + x)


def test_frozen_tape_rejects_new_ops():
    t = Tape()
    x = t.parameter(np.array(2.0))
    ad.backward(x * x)
    with pytest.raises(TapeError, match="frozen"):
        t.constant(1.0)
    t.reset()
    t.constant(1.0)


def test_check_gradients_sum_of_squares():
    rng = np.random.default_rng(0)
    x = rng.normal(size=5)
    err = ad.check_gradients(lambda t: ad.sum_(t * t), x, eps=1e-5)
    assert err < 1e-7


def test_check_gradients_sigmoid_composition():
    rng = np.random.default_rng(1)
    x = rng.normal(size=4)
    err = ad.check_gradients(lambda t: ad.sum_(ad.sigmoid(ad.sigmoid(t) * 2.0)), x, eps=1e-5)
    assert err < 1e-6


def test_check_gradients_constant_function():
    x = np.array([1.0, 2.0])

    def f(t):
        return ad.sum_(t * 0.0)

    assert ad.check_gradients(f, x) == 0.0


def test_check_gradients_rejects_nonfinite():
    with pytest.raises(FloatingPointError):
        ad.check_gradients(lambda t: ad.log(t), np.array([-1.0]))


@pytest.mark.parametrize("kind,builder,shape", [
    ("add", lambda t, a, b: a + b, (3, 4)),
    ("sub", lambda t, a, b: a - b, (3, 4)),
    ("mul", lambda t, a, b: a * b, (3, 4)),
    ("div", lambda t, a, b: a / (b * b + 1.0), (3, 4)),
    ("matmul", lambda t, a, b: ad.matmul(a, b), None),
])
def test_binary_ops_match_finite_differences(kind, builder, shape):
    rng = np.random.default_rng(7)
    if kind == "matmul":
        a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    else:
        a0, b0 = rng.normal(size=shape), rng.normal(size=shape)

    def f_a(at):
        b = at.tape.constant(b0)
        return ad.sum_(builder(at.tape, at, b) * at.tape.constant(w))

    def f_b(bt):
        a = bt.tape.constant(a0)
        return ad.sum_(builder(bt.tape, a, bt) * bt.tape.constant(w))

    w = rng.normal(size=(3, 2) if kind == "matmul" else shape)
    assert ad.check_gradients(f_a, a0) < 1e-5
    assert ad.check_gradients(f_b, b0) < 1e-5


@pytest.mark.parametrize("op", ["exp", "log", "relu", "elu", "sigmoid", "softplus"])
def test_unary_ops_match_finite_differences(op):
    rng = np.random.default_rng(11)
    x = rng.normal(size=8)
    if op == "log":
        x = np.abs(x) + 0.5
    else:
        # keep away from the relu/elu kink so central differences are valid
        x = x + np.sign(x) * 0.05
    fn = getattr(ad, op)
    w = rng.normal(size=8)
    err = ad.check_gradients(lambda t: ad.sum_(fn(t) * t.tape.constant(w)), x)
    assert err < 1e-5


@pytest.mark.parametrize("axis", [None, 0, -1])
def test_reductions_match_finite_differences(axis):
    rng = np.random.default_rng(13)
    x = rng.normal(size=(4, 5))
    for op in (ad.sum_, ad.mean):
        err = ad.check_gradients(lambda t: ad.sum_(op(t, axis=axis)), x)
        assert err < 1e-5


def test_logsumexp_matches_finite_differences():
    rng = np.random.default_rng(17)
    x = rng.normal(size=(4, 6))
    err = ad.check_gradients(lambda t: ad.sum_(ad.logsumexp(t, axis=-1)), x)
    assert err < 1e-5


def test_concat_slice_broadcast_reshape_gradients():
    rng = np.random.default_rng(19)
    x = rng.normal(size=(3, 4))

    def f(t):
        left = ad.slice_(t, 0, 2, axis=-1)
        right = ad.slice_(t, 2, 4, axis=-1)
        joined = ad.concat([right, left], axis=-1)
        wide = ad.broadcast(ad.reshape(ad.sum_(joined, axis=-1), (3, 1)), (3, 4))
        return ad.sum_(wide * joined)

    assert ad.check_gradients(f, x) < 1e-5


def test_leading_dim_broadcast_gradient():
    rng = np.random.default_rng(23)
    b = rng.normal(size=4)
    a0 = rng.normal(size=(5, 4))

    def f(t):
        return ad.sum_(t.tape.constant(a0) * t)

    assert ad.check_gradients(f, b) < 1e-6


def test_broadcast_rejects_mismatched_middle_dims():
    t = Tape()
    a = t.constant(np.ones((3, 4)))
    b = t.constant(np.ones((3, 1)))
    with pytest.raises(ShapeError):
        ad.add(a, b)


def test_trisolve_lower_forward_and_gradient():
    rng = np.random.default_rng(29)
    A = rng.normal(size=(4, 4))
    L0 = np.tril(A) + np.eye(4) * 4.0
    r0 = rng.normal(size=(3, 4))

    t = Tape()
    y = ad.trisolve_lower(t.constant(L0), t.constant(r0))
    np.testing.assert_allclose(y.data, np.linalg.solve(L0, r0.T).T, atol=1e-12)

    def f_L(Lt):
        y = ad.trisolve_lower(Lt, Lt.tape.constant(r0))
        return ad.sum_(y * y)

    def f_r(rt):
        y = ad.trisolve_lower(rt.tape.constant(L0), rt)
        return ad.sum_(y * y)

    assert ad.check_gradients(f_L, L0) < 1e-5
    assert ad.check_gradients(f_r, r0) < 1e-5


def test_chol_from_raw_structure_and_gradient():
    rng = np.random.default_rng(31)
    raw = rng.normal(size=(3, 3))
    t = Tape()
    L = ad.chol_from_raw(t.constant(raw))
    assert np.all(np.triu(L.data, k=1) == 0.0)
    assert np.all(np.diagonal(L.data) > 0.0)

    def f(rt):
        L = ad.chol_from_raw(rt)
        return ad.sum_(L * L * 0.5 + L)

    assert ad.check_gradients(f, raw) < 1e-5


def test_clamp_values_and_gradient():
    t = Tape()
    x = t.constant(np.array([-2.0, 0.5, 3.0]))
    out = ad.clamp(x, -1.0, 1.0)
    np.testing.assert_allclose(out.data, [-1.0, 0.5, 1.0])

    err = ad.check_gradients(lambda v: ad.sum_(ad.clamp(v, -1.0, 1.0) * 3.0),
                             np.array([-2.0, 0.5, 3.0]))
    assert err < 1e-6


def test_log_softmax_rows_normalize():
    rng = np.random.default_rng(37)
    t = Tape()
    out = ad.log_softmax(t.constant(rng.normal(size=(5, 7))), axis=-1)
    np.testing.assert_allclose(np.exp(out.data).sum(axis=-1), 1.0, atol=1e-12)


def test_forward_deterministic_and_replay_bit_identical():
    rng = np.random.default_rng(41)
    x0 = rng.normal(size=(4, 3))
    w0 = rng.normal(size=(3, 2))

    def run():
        t = Tape()
        x, w = t.constant(x0), t.constant(w0)
        return ad.sum_(ad.sigmoid(ad.matmul(x, w))).data.copy()

    a, b = run(), run()
    assert a.tobytes() == b.tobytes()


def test_apply_rejects_unknown_kind():
    t = Tape()
    with pytest.raises(ValueError, match="unknown op_kind"):
        ad.apply("conv2d", [t.constant(1.0)])


def test_gradient_accumulates_on_reuse():
    t = Tape()
    x = t.parameter(np.array(2.0))
    y = x * x + x * 3.0
    grads = ad.backward(y)
    assert grads[x.node_id] == pytest.approx(7.0)
