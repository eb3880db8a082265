import numpy as np
import pytest

from stvad import autodiff as ad
from stvad.autodiff import Tensor

from oracles import fd_gradient


def _leaf(rng, shape, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def _check_grad(build, *leaves, tol=1e-7):
    out = build()
    out.backward()
    for leaf in leaves:
        numeric = fd_gradient(lambda: build().item(), leaf.data)
        assert np.allclose(leaf.grad, numeric, rtol=1e-5, atol=tol), (
            f"analytic {leaf.grad} vs numeric {numeric}"
        )
        leaf.zero_grad()


def test_elementwise_grads_with_broadcasting():
    rng = np.random.default_rng(0)
    a = _leaf(rng, (3, 4))
    b = _leaf(rng, (4,))
    _check_grad(lambda: ad.tsum((a + b) * (a - b) / (2.0 + ad.sigmoid(b))), a, b)


def test_matmul_and_transpose_grads():
    rng = np.random.default_rng(1)
    a = _leaf(rng, (3, 4))
    b = _leaf(rng, (4, 2))
    w = rng.standard_normal((3, 2))
    wt = rng.standard_normal((4, 3))
    _check_grad(lambda: ad.tsum(ad.matmul(a, b) * w), a, b)
    _check_grad(lambda: ad.tsum(ad.transpose(a) * wt), a)


def test_reduction_grads():
    rng = np.random.default_rng(2)
    a = _leaf(rng, (2, 3, 4))
    _check_grad(lambda: ad.tsum(ad.tmean(a, axis=1)), a)
    _check_grad(lambda: ad.tsum(ad.tsum(a, axis=2, keepdims=True) * 0.5), a)
    _check_grad(lambda: ad.tmean(a), a)


def test_unary_grads():
    rng = np.random.default_rng(3)
    a = Tensor(rng.uniform(0.2, 2.0, (5,)), requires_grad=True)
    _check_grad(lambda: ad.tsum(ad.log(a) + ad.sqrt(a) + ad.exp(a)), a)
    b = _leaf(rng, (6,))
    _check_grad(lambda: ad.tsum(ad.tanh(b) * ad.sigmoid(b) + ad.relu(b)), b)


def test_clip_grad_masks_outside():
    a = Tensor(np.array([-1.0, 0.5, 2.0]), requires_grad=True)
    out = ad.tsum(ad.clip(a, 0.0, 1.0))
    out.backward()
    assert np.array_equal(a.grad, [0.0, 1.0, 0.0])


def test_take_rows_scatter_adds_repeats():
    a = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    out = ad.tsum(ad.take_rows(a, np.array([0, 0, 2])))
    out.backward()
    assert np.array_equal(a.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])


def test_concat_grad_splits():
    rng = np.random.default_rng(4)
    a = _leaf(rng, (2, 3))
    b = _leaf(rng, (2, 2))
    _check_grad(lambda: ad.tsum(ad.concat([a, b], axis=1) * 1.5), a, b)


def test_softmax_matches_manual_and_sums_to_one():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((4, 6))
    s = ad.softmax(Tensor(x), axis=1).data
    e = np.exp(x - x.max(axis=1, keepdims=True))
    assert np.allclose(s, e / e.sum(axis=1, keepdims=True))
    assert np.allclose(s.sum(axis=1), 1.0)


def test_softmax_and_log_softmax_grads():
    rng = np.random.default_rng(6)
    a = _leaf(rng, (3, 5))
    w = rng.standard_normal((3, 5))
    _check_grad(lambda: ad.tsum(ad.softmax(a, axis=1) * w), a)
    _check_grad(lambda: ad.tsum(ad.log_softmax(a, axis=1) * w), a)


def test_backward_into_store_leaves_grad_attr_untouched():
    a = Tensor(np.ones(3), requires_grad=True)
    out = ad.tsum(a * a)
    store = {}
    out.backward(store=store)
    assert a.grad is None
    assert np.allclose(store[a], 2.0 * np.ones(3))


def test_backward_requires_scalar_without_seed():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ValueError):
        (a * a).backward()


def test_diamond_graph_accumulates_once_per_path():
    a = Tensor(np.array(2.0), requires_grad=True)
    b = a * a  # reused twice below
    out = b + b
    out.backward()
    assert np.allclose(a.grad, 8.0)  # d(2a^2)/da = 4a


def test_float32_graph_stays_float32():
    a = Tensor(np.ones((3,), dtype=np.float32), requires_grad=True)
    out = ad.tsum(2.0 * a + 1.0)
    assert out.dtype == np.float32
    out.backward()
    assert a.grad.dtype == np.float32


def test_relative_error_guard_floors_noise():
    assert ad.relative_error(np.array([1e-9]), np.array([0.0])) < 1e-4
    assert ad.relative_error(np.array([1.0]), np.array([1.1])) > 1e-2


def test_numeric_gradient_selected_entries():
    rng = np.random.default_rng(7)
    x = rng.standard_normal(5)

    def f():
        return float(np.sum(np.sin(x) * x))

    picks = np.array([0, 3, 4])
    got = ad.numeric_gradient(f, x, entries=picks)
    want = (np.cos(x) * x + np.sin(x))[picks]
    assert np.allclose(got, want, atol=1e-7)
    full = ad.numeric_gradient(f, x)
    assert np.allclose(full, np.cos(x) * x + np.sin(x), atol=1e-7)
