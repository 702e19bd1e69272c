import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hessalign.autodiff import (
    OP_KINDS, NonFiniteError, ShapeError, Tape, TapeOps, UnknownOpError, backward, flatten, grad, grad_of_grad,
)

rng = np.random.default_rng(1234)


def rel(a, b):
    return np.max(np.abs(np.asarray(a) - np.asarray(b))) / max(np.max(np.abs(b)), 1e-300)


# each case: (inputs, builder(F, *vars) -> Var); inputs drawn uniformly from [-2, 2]
def _u(*shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, shape)


def _away_from_zero(*shape):
    x = _u(*shape)
    return np.where(np.abs(x) < 0.1, 0.5, x)


PRIMITIVE_CASES = {
    "add": ([_u(3, 4), _u(3, 4)], lambda F, a, b: F.add(a, b)),
    "add_bias": ([_u(3, 4), _u(4)], lambda F, a, b: F.add(a, b)),
    "add_scalar": ([_u(3, 4), _u()], lambda F, a, b: F.add(a, b)),
    "sub": ([_u(3, 4), _u(4)], lambda F, a, b: F.sub(a, b)),
    "mul": ([_u(3, 4), _u(3, 4)], lambda F, a, b: F.mul(a, b)),
    "div": ([_u(3, 4), _u(3, 4, lo=0.5, hi=2.0)], lambda F, a, b: F.div(a, b)),
    "neg": ([_u(5)], lambda F, a: F.neg(a)),
    "matmul": ([_u(3, 4), _u(4, 2)], lambda F, a, b: F.matmul(a, b)),
    "matmul_batched": ([_u(2, 3, 4), _u(4, 5)], lambda F, a, b: F.matmul(a, b)),
    "dot": ([_u(6), _u(6)], lambda F, a, b: F.dot(a, b)),
    "relu": ([_away_from_zero(3, 4)], lambda F, a: F.relu(a)),
    "exp": ([_u(3, 4)], lambda F, a: F.exp(a)),
    "log": ([_u(3, 4, lo=0.2, hi=2.0)], lambda F, a: F.log(a)),
    "sqrt": ([_u(3, 4, lo=0.2, hi=2.0)], lambda F, a: F.sqrt(a)),
    "square": ([_u(3, 4)], lambda F, a: F.square(a)),
    "tanh": ([_u(3, 4)], lambda F, a: F.tanh(a)),
    "sigmoid": ([_u(3, 4)], lambda F, a: F.sigmoid(a)),
    "sum_all": ([_u(3, 4)], lambda F, a: F.sum(a)),
    "sum_axis0": ([_u(3, 4)], lambda F, a: F.sum(a, axis=0)),
    "sum_last_keep": ([_u(3, 4)], lambda F, a: F.sum(a, axis=-1, keepdims=True)),
    "mean": ([_u(3, 4)], lambda F, a: F.mean(a, axis=1)),
    "broadcast": ([_u(3, 1)], lambda F, a: F.broadcast(a, (3, 4))),
    "sum_to": ([_u(3, 4)], lambda F, a: F.sum_to(a, (1, 4))),
    "reshape": ([_u(3, 4)], lambda F, a: F.reshape(a, (2, 6))),
    "transpose": ([_u(2, 3, 4)], lambda F, a: F.transpose(a, (2, 0, 1))),
    "slice": ([_u(4, 5)], lambda F, a: F.slice(a, (slice(1, 3), slice(None, None, 2)))),
    "scatter": ([_u(2, 3)], lambda F, a: F.scatter(a, (slice(1, 3), slice(0, 3)), (4, 5))),
    "concat": ([_u(2, 3), _u(4, 3)], lambda F, a, b: F.concat([a, b], axis=0)),
}


def _scalarize(F, out, w):
    return F.sum(F.mul(out, F.const(w)))


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradient_matches_central_differences(name):
    inputs, build = PRIMITIVE_CASES[name]
    tape = Tape()
    F = TapeOps(tape)
    xs = [tape.leaf(x) for x in inputs]
    out = build(F, *xs)
    w = np.random.default_rng(7).uniform(-1, 1, out.shape)
    loss = _scalarize(F, out, w)
    auto = grad(loss, xs)

    def f(vals):
        t = Tape()
        G = TapeOps(t)
        return float(_scalarize(G, build(G, *[t.leaf(v) for v in vals]), w).value)

    h = 1e-6
    for k, x in enumerate(inputs):
        fd = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            plus = [v.copy() for v in inputs]
            minus = [v.copy() for v in inputs]
            plus[k][idx] += h
            minus[k][idx] -= h
            fd[idx] = (f(plus) - f(minus)) / (2 * h)
        assert rel(auto[k], fd) < 1e-6, name


def test_every_op_kind_has_a_gradient_case():
    covered = set()
    for inputs, build in PRIMITIVE_CASES.values():
        tape = Tape()
        build(TapeOps(tape), *[tape.leaf(x) for x in inputs])
        covered |= {node.op for node in tape.nodes}
    assert set(OP_KINDS) <= covered


def test_record_add_and_matmul_shapes():
    tape = Tape()
    x, y = tape.leaf(np.ones((2, 2))), tape.leaf(2 * np.ones((2, 2)))
    assert np.array_equal(tape.record("add", [x, y]).value, 3 * np.ones((2, 2)))
    a, b = tape.leaf(np.ones((2, 3))), tape.leaf(np.ones((3, 1)))
    assert tape.record("matmul", [a, b]).shape == (2, 1)
    with pytest.raises(ShapeError):
        tape.record("matmul", [a, tape.leaf(np.ones((2, 3)))])
    with pytest.raises(UnknownOpError):
        tape.record("conv2d", [a])


def test_inputs_must_be_on_tape():
    tape = Tape()
    with pytest.raises(ValueError):
        tape.record("neg", [3])
    other = Tape().leaf(1.0)
    with pytest.raises(ValueError):
        tape.record("neg", [other])


def test_backward_examples():
    tape = Tape()
    x = tape.leaf(3.0)
    assert grad(x * x, [x])[0] == pytest.approx(6.0)

    tape = Tape()
    F = TapeOps(tape)
    xv, yv = np.array([1.0, 2.0, 3.0]), np.array([-1.0, 0.5, 4.0])
    x, y = tape.leaf(xv), tape.leaf(yv)
    gx, gy = grad(F.dot(x, y), [x, y])
    assert np.array_equal(gx, yv) and np.array_equal(gy, xv)

    tape = Tape()
    F = TapeOps(tape)
    x = tape.leaf([-1.0, 2.0])
    assert np.array_equal(grad(F.sum(F.relu(x)), [x])[0], [0.0, 1.0])


def test_relu_subgradient_at_zero_is_zero():
    tape = Tape()
    F = TapeOps(tape)
    x = tape.leaf([0.0, 1.0])
    assert np.array_equal(grad(F.sum(F.relu(x)), [x])[0], [0.0, 1.0])


def test_backward_is_pure_and_repeatable():
    tape = Tape()
    F = TapeOps(tape)
    x = tape.leaf(rng.uniform(-2, 2, (3, 3)))
    loss = F.sum(F.tanh(F.matmul(x, x)))
    n = len(tape)
    g1 = backward(tape, loss)
    g2 = backward(tape, loss)
    assert len(tape) == n
    assert g1.keys() == g2.keys()
    for k in g1:
        assert np.array_equal(g1[k], g2[k])


def test_backward_rejects_foreign_root_and_bad_seed():
    tape = Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(ValueError):
        backward(tape, 10)
    with pytest.raises(ShapeError):
        backward(tape, x * 2.0, seed=np.ones(4))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_values_are_an_error():
    tape = Tape()
    F = TapeOps(tape)
    x = tape.leaf([1000.0])
    with pytest.raises(NonFiniteError):
        F.exp(x)


def test_replay_is_bitwise():
    tape = Tape()
    F = TapeOps(tape)
    x = tape.leaf(rng.uniform(-2, 2, (4, 3)))
    w = tape.leaf(rng.uniform(-1, 1, (3, 2)))
    F.mean(F.log(F.add(F.exp(F.matmul(x, w)), 1.0)))
    for node, v in zip(tape.nodes, tape.replay()):
        assert np.array_equal(node.value, v)


def test_grad_of_grad_identity_and_quadratic():
    v = rng.normal(size=4)
    tape = Tape()
    F = TapeOps(tape)
    th = tape.leaf(rng.normal(size=4))
    loss = F.mul(F.sum(F.square(th)), 0.5)
    assert np.allclose(grad_of_grad(tape, loss, [th], v).value, v, rtol=0, atol=1e-14)

    M = rng.normal(size=(4, 4))
    A = M + M.T
    tape = Tape()
    F = TapeOps(tape)
    th = tape.leaf(rng.normal(size=4))
    Ath = F.reshape(F.matmul(F.const(A), F.reshape(th, (4, 1))), (4,))
    loss = F.mul(F.dot(th, Ath), 0.5)
    assert rel(grad_of_grad(tape, loss, [th], v).value, A @ v) < 1e-12


def test_grad_of_grad_uses_two_passes_and_checks_probe():
    tape = Tape()
    F = TapeOps(tape)
    th = tape.leaf(rng.normal(size=3))
    loss = F.sum(F.tanh(th))
    before = tape.backward_passes
    grad_of_grad(tape, loss, [th], np.ones(3))
    assert tape.backward_passes - before == 2
    with pytest.raises(ShapeError):
        grad_of_grad(tape, loss, [th], np.ones(4))


def _mlp_loss(tape, theta):
    F = TapeOps(tape)
    x = F.const(np.linspace(-1, 1, 10).reshape(5, 2))
    W1 = F.reshape(F.slice(theta, (slice(0, 6),)), (2, 3))
    W2 = F.reshape(F.slice(theta, (slice(6, 12),)), (3, 2))
    h = F.tanh(F.matmul(x, W1))
    out = F.matmul(h, W2)
    return F.mean(F.log(F.sum(F.exp(out), axis=1)))


def test_second_order_symmetry():
    theta0 = np.random.default_rng(3).uniform(-1, 1, 12)
    cols = []
    for i in range(12):
        tape = Tape()
        th = tape.leaf(theta0)
        cols.append(grad_of_grad(tape, _mlp_loss(tape, th), [th], np.eye(12)[i]).value)
    H = np.stack(cols, axis=1)
    assert np.max(np.abs(H - H.T)) < 1e-10


def test_double_backprop_through_hvp_matches_fd():
    # d/dtheta of (v . H(theta) v), differentiating the recorded HVP again
    theta0 = np.random.default_rng(4).uniform(-1, 1, 12)
    v = np.random.default_rng(5).normal(size=12)

    def third(t0, keep=False):
        tape = Tape()
        th = tape.leaf(t0)
        hv = grad_of_grad(tape, _mlp_loss(tape, th), [th], v)
        q = TapeOps(tape).dot(hv, tape.constant(v))
        return (grad(q, [th])[0] if keep else float(q.value))

    auto = third(theta0, keep=True)
    h = 1e-5
    fd = np.array([(third(theta0 + h * e) - third(theta0 - h * e)) / (2 * h) for e in np.eye(12)])
    assert rel(auto, fd) < 1e-6


def test_flatten_order_is_row_major():
    tape = Tape()
    a = tape.leaf(np.arange(6.0).reshape(2, 3))
    b = tape.leaf([10.0, 11.0])
    assert np.array_equal(flatten([a, b]).value, [0, 1, 2, 3, 4, 5, 10, 11])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=6), st.floats(-2, 2))
def test_linearity_of_adjoints(xs, c):
    # grad of c*f equals c*grad f
    x0 = np.array(xs)
    tape = Tape()
    F = TapeOps(tape)
    x = tape.leaf(x0)
    f = F.sum(F.tanh(x))
    g1 = grad(f, [x])[0]
    g2 = grad(F.mul(f, c), [x])[0]
    assert np.allclose(g2, c * g1, rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_same_inputs_give_bitwise_identical_tapes(seed):
    def build():
        r = np.random.default_rng(seed)
        tape = Tape()
        F = TapeOps(tape)
        x = tape.leaf(r.uniform(-2, 2, (3, 2)))
        loss = F.sum(F.sigmoid(F.matmul(x, F.const(r.uniform(-1, 1, (2, 2))))))
        return tape, grad(loss, [x])[0]

    (t1, g1), (t2, g2) = build(), build()
    assert all(np.array_equal(a.value, b.value) for a, b in zip(t1.nodes, t2.nodes))
    assert np.array_equal(g1, g2)
