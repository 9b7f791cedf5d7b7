import numpy as np
import pytest

from logoskit import tensor as T
from logoskit.errors import ContractError, ShapeError
from oracles import central_difference, naive_matmul


def check_grad(f, *arrays, tol=1e-6, seed=0):
    """Compare tape gradients of scalar f(*tensors) against central differences."""
    params = [T.parameter(a) for a in arrays]
    with T.Tape() as tape:
        loss = f(*params)
    grads = T.backward(loss, tape, params)
    for k, a in enumerate(arrays):
        def scalar(x, k=k):
            args = [p.data if i != k else x for i, p in enumerate(params)]
            return f(*[T.Tensor(v) for v in args]).item()
        num = central_difference(scalar, a.copy())
        err = np.abs(grads[k] - num).max() / max(1.0, np.abs(num).max())
        assert err < tol, (k, err)


rng = np.random.default_rng(0)
R = lambda *s: rng.standard_normal(s)
W = R(3, 4)
W35 = R(3, 5)
W36 = R(3, 6)


@pytest.mark.parametrize("name,f,shapes", [
    ("add_broadcast", lambda a, b: ((a + b) * W).sum(), [(3, 4), (4,)]),
    ("sub", lambda a, b: ((a - b) * W).sum(), [(3, 4), (3, 1)]),
    ("mul", lambda a, b: (a * b * W).sum(), [(3, 4), (1, 4)]),
    ("div", lambda a, b: (a / (b * b + 1.0)).sum(), [(3, 4), (3, 4)]),
    ("exp_log", lambda a: T.log(T.exp(a * 0.5) + 1.0).sum(), [(3, 4)]),
    ("gelu", lambda a: (T.gelu(a) * W).sum(), [(3, 4)]),
    ("matmul_2d", lambda a, b: ((a @ b) * W35).sum(), [(3, 4), (4, 5)]),
    ("matmul_batched", lambda a, b: ((a @ b) * np.ones((2, 3, 5))).sum(), [(2, 3, 4), (4, 5)]),
    ("matmul_bmm", lambda a, b: ((a @ b) * np.arange(30.0).reshape(2, 3, 5)).sum(), [(2, 3, 4), (2, 4, 5)]),
    ("transpose", lambda a: (a.transpose(1, 0) * W.T).sum(), [(3, 4)]),
    ("reshape", lambda a: (a.reshape(4, 3) * W.reshape(4, 3)).sum(), [(3, 4)]),
    ("mean_axis", lambda a: (a.mean(axis=0) * np.arange(4.0)).sum(), [(3, 4)]),
    ("index_basic", lambda a: (a[1:, ::2] * 3.0).sum(), [(3, 4)]),
    ("index_advanced", lambda a: (a[np.array([0, 2, 0])] * W).sum(), [(3, 4)]),
    ("concat", lambda a, b: (T.concat([a, b], axis=-1) * W36).sum(), [(3, 4), (3, 2)]),
    ("softmax_masked", lambda a: (T.softmax(a, np.array([0, 0, -1e9, 0.0])) * W).sum(), [(3, 4)]),
    ("log_softmax", lambda a: (T.log_softmax(a) * W).sum(), [(3, 4)]),
    ("layer_norm", lambda a, g, b: (T.layer_norm(a, g, b) * W).sum(), [(3, 4), (4,), (4,)]),
])
def test_op_gradients(name, f, shapes):
    check_grad(f, *[R(*s) for s in shapes])


def test_embedding_lookup_accumulates():
    table = T.parameter(R(5, 3))
    with T.Tape() as tape:
        loss = T.embedding_lookup(table, [1, 1, 4]).sum()
    g = T.backward(loss, tape, [table])[0]
    np.testing.assert_array_equal(g[:, 0], [0, 2, 0, 0, 1])


def test_embedding_out_of_range():
    with pytest.raises(ShapeError):
        T.embedding_lookup(T.Tensor(np.zeros((3, 2))), [3])


def test_matmul_against_naive():
    a, b = R(5, 7), R(7, 3)
    np.testing.assert_allclose((T.Tensor(a) @ T.Tensor(b)).data, naive_matmul(a, b), atol=1e-12)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.Tensor(np.zeros((2, 3))) @ T.Tensor(np.zeros((4, 5)))


def test_softmax_stable_for_large_logits():
    p = T.softmax(T.Tensor(np.array([1000.0, 1000.0, -1000.0]))).data
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p, [0.5, 0.5, 0.0], atol=1e-12)
    lp = T.log_softmax(T.Tensor(np.array([1e4, 0.0]))).data
    assert np.all(np.isfinite(lp)) and lp[0] == 0.0


def test_softmax_rows_requires_2d():
    with pytest.raises(ShapeError):
        T.softmax_rows(T.Tensor(np.zeros(3)))


def test_no_recording_without_tape():
    w = T.parameter(R(2, 2))
    y = (w @ w).sum()
    assert y.backward_fn is None


def test_no_tape_suspends_recording():
    w = T.parameter(R(2, 2))
    with T.Tape() as tape:
        with T.no_tape():
            (w * 2.0).sum()
        assert len(tape) == 0


def test_unreached_parameter_gets_zero():
    w, v = T.parameter(R(2)), T.parameter(R(3))
    with T.Tape() as tape:
        loss = (w * w).sum()
    g = T.backward(loss, tape, {"w": w, "v": v})
    np.testing.assert_array_equal(g["v"], np.zeros(3))
    np.testing.assert_allclose(g["w"], 2 * w.data)


def test_non_scalar_loss_rejected():
    w = T.parameter(R(2))
    with T.Tape() as tape:
        y = w * 2.0
    with pytest.raises(ContractError):
        T.backward(y, tape, [w])


def test_loss_from_other_tape_rejected():
    w = T.parameter(R(2))
    with T.Tape():
        y = (w * w).sum()
    with T.Tape() as other:
        pass
    with pytest.raises(ContractError):
        T.backward(y, other, [w])


def test_reused_node_accumulates():
    w = T.parameter(np.array([3.0]))
    with T.Tape() as tape:
        y = w * w
        loss = (y + y * y).sum()
    g = T.backward(loss, tape, [w])[0]
    # d/dw (w^2 + w^4) = 2w + 4w^3
    np.testing.assert_allclose(g, [2 * 3 + 4 * 27])


def test_gelu_fault_changes_derivative():
    x = T.parameter(np.array([0.7, -1.2]))
    with T.Tape() as tape:
        loss = T.gelu(x).sum()
    good = T.backward(loss, tape, [x])[0]
    with T.inject_fault("gelu"):
        with T.Tape() as tape:
            loss = T.gelu(x).sum()
        bad = T.backward(loss, tape, [x])[0]
    assert np.abs(good - bad).max() > 0.1
