import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stgscale import tensorcore as tc
from stgscale.tensorcore import Parameter, Tensor

from conftest import fd_grad, rel_err


def test_matmul_identity():
    out = tc.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor(np.eye(2)))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_softmax_uniform():
    np.testing.assert_allclose(tc.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)


def test_relu():
    np.testing.assert_array_equal(tc.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_shape_error_names_both_shapes():
    with pytest.raises(tc.ShapeError) as exc:
        tc.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    assert "(2, 3)" in str(exc.value) and "(3, 2)" in str(exc.value)


def test_non_finite_raises():
    with pytest.raises(tc.NumericalInstabilityError):
        tc.log(Tensor([0.0]))


def test_square_grad():
    w = Parameter([3.0])
    tc.backward(tc.sum(tc.mul(w, w)))
    np.testing.assert_allclose(w.grad, [6.0])


def test_backward_needs_scalar():
    w = Parameter([1.0, 2.0])
    with pytest.raises(ValueError):
        tc.backward(tc.mul(w, 2.0))


def test_unused_param_zero_grad():
    w, p = Parameter([1.0, 2.0]), Parameter([5.0])
    tc.backward(tc.sum(tc.mul(w, w)))
    np.testing.assert_array_equal(p.grad, [0.0])


def test_no_grad_records_nothing():
    w = Parameter([1.0])
    with tc.no_grad():
        out = tc.mul(w, 3.0)
    assert not out.requires_grad and out._parents == ()


def _composite(rng, kind):
    a = Parameter(rng.normal(size=(3, 4)))
    b = Parameter(rng.normal(size=(4, 2)))
    c = Parameter(rng.uniform(0.5, 2.0, size=(3, 2)))
    if kind == 0:
        f = lambda: tc.sum(tc.sigmoid(tc.matmul(a, b)) * c)
    elif kind == 1:
        f = lambda: tc.mean(tc.softmax(tc.einsum("ij,jk->ik", a, b), axis=1) * tc.log(c))
    elif kind == 2:
        f = lambda: tc.sum(tc.power(tc.add(tc.abs(tc.matmul(a, b)), 1.0), 1.5) / c)
    elif kind == 3:
        f = lambda: tc.var(tc.concat([tc.matmul(a, b), c], axis=0)) + tc.sum(tc.sqrt(c))
    else:
        f = lambda: tc.sum(tc.exp(tc.index(tc.transpose(a), 1)) * tc.index(tc.sum(tc.stack([c, c], axis=0), axis=(0, 2)), 0))
    return f, [a, b, c]


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10**6), kind=st.integers(0, 4))
def test_gradients_match_finite_differences(seed, kind):
    rng = np.random.default_rng(seed)
    f, params = _composite(rng, kind)
    tc.backward(f())
    for p in params:
        assert rel_err(p.grad, fd_grad(f, p)) < 1e-4


def test_indicator_straight_through():
    w = Parameter([0.0, 2.0, -1.0])
    tc.backward(tc.sum(tc.indicator(w, straight_through=True) * Tensor([1.0, 2.0, 3.0])))
    np.testing.assert_array_equal(w.grad, [1, 2, 3])
    w2 = Parameter([1.0])
    out = tc.indicator(w2)
    assert not out.requires_grad and out.data[0] == 1.0


def test_adam_zero_gradient_keeps_value():
    p = Parameter([1.5, -2.0])
    tc.adam_step([p], lr=0.1)
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def test_adam_first_step():
    p = Parameter([1.0])
    p.grad = np.array([1.0])
    tc.adam_step([p], lr=0.01)
    np.testing.assert_allclose(p.data, [1.0 - 0.01], atol=1e-8)
    np.testing.assert_array_equal(p.grad, [0.0])


def test_adam_constant_gradient_step_tends_to_lr():
    # closed form: m_hat = g and v_hat = g^2 for every t when g is constant
    p = Parameter([0.0])
    prev, steps = 0.0, []
    for _ in range(200):
        p.grad = np.array([0.3])
        tc.adam_step([p], lr=0.01)
        steps.append(prev - p.data[0])
        prev = p.data[0]
    expected = 0.01 * 0.3 / (0.3 + 1e-8)
    np.testing.assert_allclose(steps, expected, rtol=1e-6)


def test_checkpoint_roundtrip(tmp_path):
    params = {"w": Parameter(np.arange(6.0).reshape(2, 3), "w"), "b": Parameter([0.5], "b")}
    tc.save_checkpoint(tmp_path / "c.json", params, {"k": 1})
    state, extra = tc.read_checkpoint(tmp_path / "c.json")
    assert extra == {"k": 1}
    np.testing.assert_array_equal(state["w"], params["w"].data)
    other = {"w": Parameter(np.zeros((2, 3))), "b": Parameter([0.0])}
    tc.load_state_dict(other, state)
    np.testing.assert_array_equal(other["b"].data, [0.5])


def test_checkpoint_rejects_bad_magic(tmp_path):
    (tmp_path / "x.json").write_text('{"magic": "nope", "version": 1, "params": {}}')
    with pytest.raises(ValueError, match="magic"):
        tc.read_checkpoint(tmp_path / "x.json")


def test_load_state_missing_key():
    with pytest.raises(KeyError):
        tc.load_state_dict({"w": Parameter([1.0])}, {})
