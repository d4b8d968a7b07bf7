import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from funql_parser import autograd as ag
from funql_parser.autograd import Tensor

from gradcheck import RTOL, check


def param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


CASES = {
    "add_broadcast": lambda a, b, M: (a + M).sum(),
    "sub_mul": lambda a, b, M: ((a - b) * (a * 2.0)).sum(),
    "matvec": lambda a, b, M: (M @ a).sum(),
    "vecmat": lambda a, b, M: (b[:3] @ M).sum(),
    "dot": lambda a, b, M: a @ b,
    "matmat": lambda a, b, M: (M @ ag.stack([a, b, a, b, a]) * 0.3).sum(),
    "getitem": lambda a, b, M: (M[[0, 2, 2]] * 1.5).sum() + a[1] * b[2],
    "tanh_sigmoid": lambda a, b, M: (ag.tanh(a) * ag.sigmoid(b)).sum(),
    "exp_log": lambda a, b, M: ag.log(ag.exp(a) + 2.0).sum(),
    "concat": lambda a, b, M: (ag.concat([a, b]) * ag.concat([b, a])).sum(),
    "mean": lambda a, b, M: (ag.mean([a, b, a]) * b).sum(),
    "log_softmax": lambda a, b, M: ag.log_softmax(M @ a)[1] + ag.log_softmax(b)[0],
    "softmax": lambda a, b, M: ag.softmax(a) @ b,
    "division_negation": lambda a, b, M: (-(a / 3.0) * b).sum(),
    "reuse": lambda a, b, M: (a * a * a).sum() + (a @ a),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_op_gradients(name):
    rng = np.random.default_rng(0)
    a, b, M = param(rng, 5), param(rng, 5), param(rng, 3, 5)
    fn = CASES[name]
    assert check(lambda: fn(a, b, M), [a, b, M]) < RTOL


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 8))
def test_lstm_like_composition_gradients(seed, n):
    rng = np.random.default_rng(seed)
    W, x, h = param(rng, 4 * n, 2 * n), param(rng, n), param(rng, n)

    def f():
        z = W @ ag.concat([x, h])
        gates = ag.sigmoid(z[: 3 * n])
        c = gates[:n] * ag.tanh(z[3 * n :])
        return (gates[2 * n :] * ag.tanh(c)).sum()

    assert check(f, [W, x, h]) < RTOL


def test_no_grad_records_nothing():
    a = Tensor(np.ones(3), requires_grad=True)
    with ag.no_grad():
        out = (a * 2.0).sum()
    assert not out.requires_grad
    with pytest.raises(RuntimeError):
        out.backward()
    assert (a * 2.0).sum().requires_grad


def test_gradients_accumulate_across_backward_calls():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (a * 3.0).sum().backward()
    (a * 3.0).sum().backward()
    np.testing.assert_allclose(a.grad, [6.0, 6.0])
    a.zero_grad()
    assert a.grad is None


def test_constants_receive_no_gradient():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    c = Tensor(np.array([3.0, 4.0]))
    (a * c).sum().backward()
    assert c.grad is None
    np.testing.assert_allclose(a.grad, [3.0, 4.0])


def test_softmax_is_stable_and_normalized():
    x = Tensor(np.array([1000.0, 1001.0, -1000.0]))
    p = ag.softmax(x).data
    assert np.isfinite(p).all() and abs(p.sum() - 1) < 1e-12
    np.testing.assert_allclose(np.exp(ag.log_softmax(x).data), p)


def test_deep_chain_does_not_recurse():
    a = Tensor(np.array(1.0), requires_grad=True)
    out = a
    for _ in range(5000):
        out = out * 1.0
    out.backward()
    assert a.grad == 1.0
