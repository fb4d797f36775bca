import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scripts.numerics import (
    ParamStore,
    adam_step,
    add,
    add_backward,
    clip_grad_norm,
    cross_entropy_masked,
    cross_entropy_masked_backward,
    dropout,
    dropout_backward,
    embedding,
    embedding_backward,
    gelu,
    gelu_backward,
    grad_check,
    layer_norm,
    layer_norm_backward,
    matmul,
    matmul_backward,
    mul,
    mul_backward,
    softmax,
    softmax_backward,
)
from scripts.utils import ConfigError, DataError, EmptyLossError, NumericError, StateError, TargetError


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        plus = f()
        x[idx] = orig - eps
        minus = f()
        x[idx] = orig
        g[idx] = (plus - minus) / (2 * eps)
    return g


def assert_close_grad(analytic, numeric, tol=1e-4):
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    assert err.max() < tol


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# # # #
def test_softmax_examples():
    assert np.allclose(softmax(np.zeros(3)), [1 / 3, 1 / 3, 1 / 3], atol=1e-12)
    assert np.allclose(softmax(np.array([0.0, math.log(2)])), [1 / 3, 2 / 3], atol=1e-12)


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericError):
        softmax(np.array([0.0, np.inf]))


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-50, 50), min_size=1, max_size=8),
    st.floats(-100, 100),
)
def test_softmax_shift_invariant(values, shift):
    x = np.array(values)
    y = softmax(x)
    assert abs(y.sum() - 1.0) < 1e-12
    assert np.allclose(softmax(x + shift), y, atol=1e-12)


def test_matmul_grad(rng):
    a, b, w = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
    da, db = matmul_backward(w, a, b)
    assert_close_grad(da, numeric_grad(lambda: float((matmul(a, b) * w).sum()), a))
    assert_close_grad(db, numeric_grad(lambda: float((matmul(a, b) * w).sum()), b))


def test_add_broadcast_grad(rng):
    a, b, w = rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=(3, 4))
    da, db = add_backward(w, a.shape, b.shape)
    assert db.shape == (4,)
    assert_close_grad(da, numeric_grad(lambda: float((add(a, b) * w).sum()), a))
    assert_close_grad(db, numeric_grad(lambda: float((add(a, b) * w).sum()), b))


def test_mul_grad(rng):
    a, b, w = rng.normal(size=(2, 3)), rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    da, db = mul_backward(w, a, b)
    assert_close_grad(da, numeric_grad(lambda: float((mul(a, b) * w).sum()), a))
    assert_close_grad(db, numeric_grad(lambda: float((mul(a, b) * w).sum()), b))


def test_softmax_grad(rng):
    x, w = rng.normal(size=(2, 5)), rng.normal(size=(2, 5))
    dx = softmax_backward(w, softmax(x))
    assert_close_grad(dx, numeric_grad(lambda: float((softmax(x) * w).sum()), x))


def test_layer_norm_grad(rng):
    x, w = rng.normal(size=(3, 6)), rng.normal(size=(3, 6))
    g, b = rng.normal(size=6), rng.normal(size=6)

    def f():
        return float((layer_norm(x, g, b)[0] * w).sum())

    _, cache = layer_norm(x, g, b)
    dx, dg, db = layer_norm_backward(w, cache)
    assert_close_grad(dx, numeric_grad(f, x))
    assert_close_grad(dg, numeric_grad(f, g))
    assert_close_grad(db, numeric_grad(f, b))


def test_gelu_grad(rng):
    x, w = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    assert_close_grad(gelu_backward(w, x), numeric_grad(lambda: float((gelu(x) * w).sum()), x))


def test_embedding_grad(rng):
    table, ids = rng.normal(size=(5, 3)), np.array([0, 3, 3, 1])
    w = rng.normal(size=(4, 3))
    dtable = embedding_backward(w, ids, 5)
    assert_close_grad(dtable, numeric_grad(lambda: float((embedding(table, ids) * w).sum()), table))
    assert np.all(dtable[[2, 4]] == 0.0)


def test_dropout_inactive_without_rng(rng):
    x = rng.normal(size=(3, 3))
    y, mask = dropout(x, 0.5)
    assert mask is None and y is x
    assert dropout_backward(x, None) is x


def test_dropout_seeded():
    x = np.ones((50, 50))
    y1, m1 = dropout(x, 0.25, np.random.default_rng(3))
    y2, m2 = dropout(x, 0.25, np.random.default_rng(3))
    assert np.array_equal(y1, y2)
    assert set(np.unique(y1)) <= {0.0, 1.0 / 0.75}
    assert np.array_equal(dropout_backward(x, m1), m1)


def test_dropout_grad(rng):
    x, w = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    _, mask = dropout(x, 0.3, np.random.default_rng(7))
    assert mask is not None and 0 < np.count_nonzero(mask) < mask.size
    dx = dropout_backward(w, mask)
    # reseeding keeps the mask fixed across perturbations
    assert_close_grad(dx, numeric_grad(lambda: float((dropout(x, 0.3, np.random.default_rng(7))[0] * w).sum()), x))
    assert np.array_equal(dropout_backward(w, None), w)


# # # #
def test_cross_entropy_uniform():
    loss = cross_entropy_masked(np.zeros((1, 4)), [2], [True])
    assert loss == pytest.approx(math.log(4), abs=1e-12)


def test_cross_entropy_margin_limit():
    losses = []
    for margin in (1.0, 10.0, 100.0):
        logits = np.zeros((1, 3))
        logits[0, 1] = margin
        losses.append(cross_entropy_masked(logits, [1], [True]))
    assert losses[0] > losses[1] > losses[2] >= 0.0
    assert losses[2] < 1e-40


def test_cross_entropy_matches_per_position(rng):
    logits, targets = rng.normal(size=(3, 5)), [4, 0, 2]
    expected = np.mean(
        [-math.log(math.exp(logits[t, targets[t]]) / np.exp(logits[t]).sum()) for t in range(3)]
    )
    assert cross_entropy_masked(logits, targets, [True] * 3) == pytest.approx(expected, abs=1e-12)


def test_cross_entropy_ignores_unmasked(rng):
    logits = rng.normal(size=(3, 4))
    mask = [True, False, True]
    before = cross_entropy_masked(logits, [1, 99, 2], mask)
    logits[1] = np.inf
    assert cross_entropy_masked(logits, [1, -5, 2], mask) == before


def test_cross_entropy_errors():
    with pytest.raises(EmptyLossError):
        cross_entropy_masked(np.zeros((2, 3)), [0, 0], [False, False])
    with pytest.raises(TargetError) as excinfo:
        cross_entropy_masked(np.zeros((2, 3)), [0, 3], [True, True])
    assert isinstance(excinfo.value, IndexError) and excinfo.value.exit_code == 2
    with pytest.raises(DataError):
        cross_entropy_masked_backward(np.zeros((2, 3)), [-1, 0], [True, True])
    # out-of-range targets at masked-out positions are never read
    assert cross_entropy_masked(np.zeros((2, 3)), [0, 7], [True, False]) == pytest.approx(math.log(3))


def test_cross_entropy_grad(rng):
    logits, targets, mask = rng.normal(size=(4, 5)), [1, 2, 3, 4], [True, False, True, True]
    grad = cross_entropy_masked_backward(logits, targets, mask)
    assert np.all(grad[1] == 0.0)
    assert_close_grad(grad, numeric_grad(lambda: cross_entropy_masked(logits, targets, mask), logits))


# # # #
def _single_param_store(value):
    store = ParamStore()
    store.add("x", np.array([value]))
    return store


def test_grad_check_identity():
    store = _single_param_store(0.3)

    def f(s):
        s.zero_grad()
        s.grads["x"][0] = 1.0
        return float(s["x"][0])

    assert grad_check(f, store) < 1e-8


def test_grad_check_constant():
    store = _single_param_store(0.3)

    def f(s):
        s.zero_grad()
        return 2.0

    assert grad_check(f, store) < 1e-8


def test_grad_check_epsilon_range():
    store = _single_param_store(0.0)
    with pytest.raises(ConfigError):
        grad_check(lambda s: 0.0, store, epsilon=1e-2)


def test_grad_check_non_finite():
    store = _single_param_store(0.0)
    with pytest.raises(NumericError):
        grad_check(lambda s: float("nan"), store)


def test_param_store_accumulate_shape():
    store = ParamStore()
    store.add("w", np.zeros((2, 2)))
    store.zero_grad()
    store.accumulate("w", np.ones((2, 2)))
    store.accumulate("w", np.ones((2, 2)))
    assert np.all(store.grads["w"] == 2.0)
    with pytest.raises(StateError):
        store.accumulate("w", np.ones(3))
    with pytest.raises(ConfigError):
        store.add("w", np.zeros(1))


def test_adam_zero_gradient_is_noop():
    store = ParamStore()
    store.add("w", np.array([1.0, -2.0, 3.0]))
    store.zero_grad()
    adam_step(store, lr=0.1)
    assert np.array_equal(store["w"], [1.0, -2.0, 3.0])
    assert store.step == 1


def test_adam_first_step_is_sign():
    store = ParamStore()
    store.add("w", np.zeros(3))
    store.zero_grad()
    store.grads["w"][:] = [0.5, -3.0, 2e-3]
    adam_step(store, lr=0.01)
    assert np.allclose(store["w"], [-0.01, 0.01, -0.01], atol=1e-7)


def test_adam_missing_gradient():
    store = ParamStore()
    store.add("w", np.zeros(2))
    with pytest.raises(StateError):
        adam_step(store)


def test_adam_deterministic():
    def run():
        store = ParamStore()
        store.add("w", np.random.default_rng(1).normal(size=4))
        for _ in range(3):
            store.zero_grad()
            store.grads["w"] += 2 * store["w"]
            adam_step(store)
        return store["w"]

    assert np.array_equal(run(), run())


def test_clip_grad_norm():
    store = ParamStore()
    store.add("a", np.zeros(2))
    store.zero_grad()
    store.grads["a"][:] = [3.0, 4.0]
    assert clip_grad_norm(store, 1.0) == pytest.approx(5.0)
    assert store.grad_norm() == pytest.approx(1.0, abs=1e-9)
    clip_grad_norm(store, 10.0)
    assert store.grad_norm() == pytest.approx(1.0, abs=1e-9)
