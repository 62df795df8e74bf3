import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import courtview.tensor as tc
from courtview.tensor import (
    AdamState,
    NumericsError,
    Tape,
    Tensor,
    assert_finite,
    optimizer_step,
)

from oracles import finite_diff_grad, rel_err

RNG = np.random.default_rng(7)


def rand_param(*shape):
    return Tensor(RNG.uniform(-2.0, 2.0, size=shape), requires_grad=True)


def check_grads(build_loss, params, tol=1e-4):
    """Compare autodiff grads of a scalar loss against central differences."""
    with Tape() as tape:
        loss = build_loss()
    tape.backward(loss)
    grads = [p.grad.copy() for p in params]
    for p, g in zip(params, grads):
        fd = finite_diff_grad(lambda: build_loss().item(), p.data)
        assert rel_err(g, fd) < tol
        p.zero_grad()


def test_matmul_identity():
    eye = Tensor(np.eye(2))
    out = tc.matmul(eye, eye)
    assert np.array_equal(out.data, np.eye(2))
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = tc.matmul(a, eye)
    assert np.array_equal(out.data, a.data)


def test_matmul_shape_error():
    with pytest.raises(ValueError):
        tc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_grad_matches_analytic_and_fd():
    a = rand_param(3, 4)
    b = rand_param(4, 2)
    with Tape() as tape:
        loss = tc.sum_all(tc.matmul(a, b))
    tape.backward(loss)
    # d sum(a@b) / da = ones(3,2) @ b^T
    assert np.allclose(a.grad, np.ones((3, 2)) @ b.data.T)
    ga = a.grad.copy()
    fd = finite_diff_grad(lambda: tc.sum_all(tc.matmul(a, b)).item(), a.data)
    assert rel_err(ga, fd) < 1e-4


def test_softmax_values():
    out = tc.softmax(Tensor([0.0, 0.0, 0.0]))
    assert np.allclose(out.data, [1 / 3] * 3, atol=1e-15)
    stable = tc.softmax(Tensor([1000.0, 0.0]))
    assert np.all(np.isfinite(stable.data))
    assert stable.data[0] > 1.0 - 1e-12
    out = tc.softmax(Tensor([1.0, 2.0, 3.0]))
    e = np.exp([1.0, 2.0, 3.0])
    assert np.allclose(out.data, e / e.sum(), atol=1e-12)
    assert np.allclose(out.data, [0.09003, 0.24473, 0.66524], atol=1e-5)


def test_softmax_empty_axis():
    with pytest.raises(ValueError):
        tc.softmax(Tensor(np.zeros((2, 0))))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=8))
def test_softmax_simplex(xs):
    out = tc.softmax(Tensor(np.array(xs)))
    assert np.all(out.data >= 0)
    assert abs(out.data.sum() - 1.0) <= 1e-12


def test_layer_norm_statistics():
    x = Tensor(RNG.normal(3.0, 2.5, size=(5, 16)))
    gain = Tensor(np.ones(16))
    bias = Tensor(np.zeros(16))
    out = tc.layer_norm(x, gain, bias)
    mu = out.data.mean(axis=-1)
    var = out.data.var(axis=-1)
    assert np.all(np.abs(mu) < 1e-10)
    assert np.all(np.abs(var - 1.0) < 1e-6)


def test_binary_cross_entropy_values():
    near = np.array([1.0 - 1e-7, 1e-7, 1e-7, 1e-7])
    loss = tc.binary_cross_entropy(Tensor(near), np.array([1.0, 0, 0, 0]))
    assert loss.item() < 1e-5
    loss = tc.binary_cross_entropy(Tensor([0.5] * 4), np.array([1.0, 0, 1, 0]))
    assert abs(loss.item() - 4 * np.log(2)) < 1e-12


def test_cross_entropy_uniform_logits():
    V = 11
    logits = Tensor(np.zeros((3, V)))
    loss = tc.cross_entropy_lm(logits, [1, 5, 9], [True, True, True])
    assert abs(loss.item() - np.log(V)) < 1e-12


def test_cross_entropy_errors():
    logits = Tensor(np.zeros((2, 4)))
    with pytest.raises(ValueError):
        tc.cross_entropy_lm(logits, [0, 4], [True, True])
    with pytest.raises(ValueError):
        tc.cross_entropy_lm(logits, [0, 1], [False, False])


def test_backward_sum_and_square():
    x = rand_param(3, 2)
    with Tape() as tape:
        loss = tc.sum_all(x)
    tape.backward(loss)
    assert np.array_equal(x.grad, np.ones((3, 2)))
    x.zero_grad()
    with Tape() as tape:
        loss = tc.sum_all(tc.mul(x, x))
    tape.backward(loss)
    assert np.allclose(x.grad, 2 * x.data)


def test_backward_errors():
    x = rand_param(3)
    with Tape() as tape:
        y = tc.mul(x, x)
        loss = tc.sum_all(y)
    with pytest.raises(ValueError):
        tape.backward(y)  # non-scalar
    tape.backward(loss)
    with pytest.raises(RuntimeError):
        tape.backward(loss)  # double backward


@pytest.mark.parametrize("op_name", [
    "add", "add_broadcast", "mul", "mul_broadcast", "scale", "matmul",
    "gelu", "sigmoid", "softmax", "layer_norm", "embedding_gather",
    "causal_attention", "concat", "narrow", "reshape", "transpose",
    "mean_pool", "cross_entropy_lm", "binary_cross_entropy",
])
def test_gradcheck_each_op(op_name):
    rng = np.random.default_rng(hash(op_name) % (2**32))

    def t(*shape):
        return Tensor(rng.uniform(-2, 2, size=shape), requires_grad=True)

    if op_name == "add":
        a, b = t(4, 3), t(4, 3)
        check_grads(lambda: tc.sum_all(tc.mul(tc.add(a, b), tc.add(a, b))), [a, b])
    elif op_name == "add_broadcast":
        a, b = t(4, 3), t(3)
        check_grads(lambda: tc.sum_all(tc.mul(tc.add(a, b), tc.add(a, b))), [a, b])
    elif op_name == "mul":
        a, b = t(4, 3), t(4, 3)
        check_grads(lambda: tc.sum_all(tc.mul(tc.mul(a, b), b)), [a, b])
    elif op_name == "mul_broadcast":
        a, b = t(4, 3), t(3)
        check_grads(lambda: tc.sum_all(tc.mul(tc.mul(a, b), a)), [a, b])
    elif op_name == "scale":
        a = t(5)
        check_grads(lambda: tc.sum_all(tc.mul(tc.scale(a, 1.7), a)), [a])
    elif op_name == "matmul":
        a, b = t(3, 4), t(4, 2)
        w = Tensor(rng.normal(size=(3, 2)))
        check_grads(lambda: tc.sum_all(tc.mul(tc.matmul(a, b), w)), [a, b])
    elif op_name == "gelu":
        a = t(4, 3)
        check_grads(lambda: tc.sum_all(tc.mul(tc.gelu(a), a)), [a])
    elif op_name == "sigmoid":
        a = t(4, 3)
        check_grads(lambda: tc.sum_all(tc.mul(tc.sigmoid(a), a)), [a])
    elif op_name == "softmax":
        a = t(4, 5)
        w = Tensor(rng.normal(size=(4, 5)))
        check_grads(lambda: tc.sum_all(tc.mul(tc.softmax(a, axis=-1), w)), [a])
    elif op_name == "layer_norm":
        a, g_, b_ = t(4, 8), t(8), t(8)
        w = Tensor(rng.normal(size=(4, 8)))
        check_grads(lambda: tc.sum_all(tc.mul(tc.layer_norm(a, g_, b_), w)), [a, g_, b_])
    elif op_name == "embedding_gather":
        table = t(6, 4)
        ids = rng.integers(0, 6, size=7)
        w = Tensor(rng.normal(size=(7, 4)))
        check_grads(lambda: tc.sum_all(tc.mul(tc.embedding_gather(table, ids), w)), [table])
    elif op_name == "causal_attention":
        q, k, v = t(3, 8), t(5, 8), t(5, 8)
        mask = np.zeros((3, 5))
        mask[0, 3:] = mask[1, 4:] = -1e30
        w = Tensor(rng.normal(size=(3, 8)))
        check_grads(lambda: tc.sum_all(tc.mul(tc.causal_attention(q, k, v, 2, mask), w)), [q, k, v])
    elif op_name == "concat":
        a, b = t(2, 3), t(4, 3)
        w = Tensor(rng.normal(size=(6, 3)))
        check_grads(lambda: tc.sum_all(tc.mul(tc.concat([a, b], axis=0), w)), [a, b])
    elif op_name == "narrow":
        a = t(6, 4)
        w = Tensor(rng.normal(size=(3, 4)))
        check_grads(lambda: tc.sum_all(tc.mul(tc.narrow(a, 0, 2, 3), w)), [a])
    elif op_name == "reshape":
        a = t(6, 4)
        w = Tensor(rng.normal(size=(3, 8)))
        check_grads(lambda: tc.sum_all(tc.mul(tc.reshape(a, (3, 8)), w)), [a])
    elif op_name == "transpose":
        a = t(3, 5)
        w = Tensor(rng.normal(size=(5, 3)))
        check_grads(lambda: tc.sum_all(tc.mul(tc.transpose(a), w)), [a])
    elif op_name == "mean_pool":
        a = t(6, 4)
        w = Tensor(rng.normal(size=4))
        check_grads(lambda: tc.sum_all(tc.mul(tc.mean_pool(a, axis=0), w)), [a])
    elif op_name == "cross_entropy_lm":
        a = t(5, 7)
        targets = rng.integers(0, 7, size=5)
        mask = np.array([True, False, True, True, False])
        check_grads(lambda: tc.cross_entropy_lm(a, targets, mask), [a])
    elif op_name == "binary_cross_entropy":
        raw = rng.uniform(0.05, 0.95, size=(4, 3))
        a = Tensor(raw, requires_grad=True)
        targets = rng.integers(0, 2, size=(4, 3)).astype(float)
        check_grads(lambda: tc.binary_cross_entropy(a, targets), [a])


def test_tape_determinism():
    def run():
        rng = np.random.default_rng(123)
        x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        w = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
        with Tape() as tape:
            h = tc.gelu(tc.matmul(x, w))
            loss = tc.sum_all(tc.mul(h, h))
        tape.backward(loss)
        return loss.item(), x.grad.copy(), w.grad.copy()

    l1, gx1, gw1 = run()
    l2, gx2, gw2 = run()
    assert l1 == l2
    assert np.array_equal(gx1, gx2)
    assert np.array_equal(gw1, gw2)


def test_assert_finite():
    assert_finite(Tensor([1.0, 2.0]), "ok")
    with pytest.raises(NumericsError):
        assert_finite(Tensor([1.0, np.nan]), "bad")
    t = Tensor([1.0], requires_grad=True)
    t.grad[0] = np.inf
    with pytest.raises(NumericsError):
        assert_finite(t, "bad-grad")


def test_optimizer_zero_grad_is_noop():
    p = Tensor([1.0, -2.0], requires_grad=True)
    state = AdamState([p], lr=0.05)
    before = p.data.copy()
    optimizer_step(state)
    assert np.array_equal(p.data, before)
    assert state.step_count == 1


def test_optimizer_constant_gradient_monotone():
    p = Tensor([1.0], requires_grad=True)
    state = AdamState([p], lr=0.01)
    values = [p.data[0]]
    for _ in range(20):
        p.grad[:] = 3.0
        optimizer_step(state)
        values.append(p.data[0])
    assert all(b < a for a, b in zip(values, values[1:]))


def test_optimizer_quadratic_bowl():
    w = Tensor([1.0, 1.0], requires_grad=True)
    state = AdamState([w], lr=0.05)
    loss_val = None
    for _ in range(500):
        with Tape() as tape:
            loss = tc.sum_all(tc.mul(w, w))
        loss_val = loss.item()
        tape.backward(loss)
        optimizer_step(state)
    assert loss_val < 1e-3


def test_optimizer_missing_gradient():
    p = Tensor([1.0])  # requires_grad False -> no grad buffer
    state = AdamState([p])
    with pytest.raises(ValueError):
        optimizer_step(state)


def test_checkpoint_roundtrip(tmp_path):
    path = tmp_path / "params.ckpt"
    named = {
        "w": np.arange(6, dtype=np.float64).reshape(2, 3),
        "b": np.array([1.5, -2.5]),
        "s": np.array(3.25),
    }
    tc.save_checkpoint(path, named, meta={"kind": "test", "n": "3"})
    loaded, meta = tc.load_checkpoint(path)
    assert set(loaded) == set(named)
    for k in named:
        assert np.array_equal(loaded[k], named[k])
    assert meta == {"kind": "test", "n": "3"}


def test_checkpoint_rejects_bad_version(tmp_path):
    path = tmp_path / "params.ckpt"
    tc.save_checkpoint(path, {"w": np.zeros(2)})
    blob = bytearray(path.read_bytes())
    blob[4] = 99
    path.write_bytes(bytes(blob))
    with pytest.raises(tc.CheckpointError):
        tc.load_checkpoint(path)
    path.write_bytes(b"XXXX" + bytes(blob[4:]))
    with pytest.raises(tc.CheckpointError):
        tc.load_checkpoint(path)


def test_params_fingerprint_detects_change():
    named = {"a": np.ones(3), "b": np.zeros((2, 2))}
    fp1 = tc.params_fingerprint(named)
    assert fp1 == tc.params_fingerprint({k: v.copy() for k, v in named.items()})
    named["a"][0] += 1e-12
    assert tc.params_fingerprint(named) != fp1
