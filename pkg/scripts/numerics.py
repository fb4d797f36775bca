"""
Dense float64 kernels with hand-written backward passes, a parameter store with
Adam state, and a central-difference gradient checker.

Every kernel comes as a ``<name>`` / ``<name>_backward`` pair. Forward functions
are pure; backward functions take the upstream gradient plus whatever the
forward pass needs and return gradients for each differentiable input.
"""

import logging
import math

import numpy as np

from scripts.utils import ConfigError, EmptyLossError, NumericError, StateError, TargetError

logger = logging.getLogger(__name__)

DTYPE = np.float64
INIT_STD = 0.02
LN_EPS = 1e-5
# large enough that exp() underflows to exactly zero, finite so inputs stay checkable
MASK_VALUE = -1e30

_GELU_C = math.sqrt(2.0 / math.pi)


def check_finite(x, what="input"):
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite values in {}".format(what))
    return x


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def matmul(a, b):
    return a @ b


def matmul_backward(grad, a, b):
    return grad @ b.T, a.T @ grad


def add(a, b):
    """Elementwise add; ``b`` may broadcast over the leading axes of ``a``."""
    return a + b


def add_backward(grad, a_shape, b_shape):
    return _unbroadcast(grad, a_shape), _unbroadcast(grad, b_shape)


def mul(a, b):
    return a * b


def mul_backward(grad, a, b):
    return grad * b, grad * a


def softmax(logits):
    """Softmax over the last axis, computed with max-subtraction."""
    check_finite(logits, "softmax logits")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(grad, y):
    return y * (grad - (grad * y).sum(axis=-1, keepdims=True))


def layer_norm(x, gamma, beta, eps=LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    return xhat * gamma + beta, (xhat, inv_std, gamma)


def layer_norm_backward(grad, cache):
    xhat, inv_std, gamma = cache
    n = xhat.shape[-1]
    dgamma = _unbroadcast(grad * xhat, gamma.shape)
    dbeta = _unbroadcast(grad, gamma.shape)
    dxhat = grad * gamma
    dx = (inv_std / n) * (
        n * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def gelu(x):
    # tanh approximation, as in GPT-2
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def gelu_backward(grad, x):
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return grad * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def embedding(table, ids):
    return table[np.asarray(ids, dtype=np.int64)]


def embedding_backward(grad, ids, n_rows):
    dtable = np.zeros((n_rows, grad.shape[-1]), dtype=DTYPE)
    np.add.at(dtable, np.asarray(ids, dtype=np.int64), grad)
    return dtable


def dropout(x, rate, rng=None):
    """Inverted dropout. Returns ``(y, mask)``; ``mask`` is None when inactive.

    Dropout is only active when a generator is supplied (training) and
    ``rate > 0``.
    """
    if rng is None or rate <= 0.0:
        return x, None
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(DTYPE) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(grad, mask):
    return grad if mask is None else grad * mask


def _log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _check_targets(logits, targets, mask):
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyLossError("cross-entropy over zero masked positions")
    vocab = logits.shape[-1]
    picked = targets[mask]
    if np.any(picked < 0) or np.any(picked >= vocab):
        raise TargetError("target id out of range [0, {})".format(vocab))
    return targets, mask


def cross_entropy_masked(logits, targets, mask):
    """Mean negative log-likelihood over the positions where ``mask`` is true.

    Unmasked positions are never read, so their logits and targets are free.
    """
    targets, mask = _check_targets(logits, targets, mask)
    rows = np.flatnonzero(mask)
    check_finite(logits[rows], "cross-entropy logits")
    logp = _log_softmax(logits[rows])
    return float(-logp[np.arange(rows.size), targets[rows]].mean())


def cross_entropy_masked_backward(logits, targets, mask):
    targets, mask = _check_targets(logits, targets, mask)
    rows = np.flatnonzero(mask)
    grad = np.zeros_like(logits)
    probs = softmax(logits[rows])
    probs[np.arange(rows.size), targets[rows]] -= 1.0
    grad[rows] = probs / rows.size
    return grad


class ParamStore:
    """Named parameters, their gradients and the Adam moments."""

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.m = {}
        self.v = {}
        self.step = 0

    def add(self, name, value):
        if name in self.params:
            raise ConfigError("duplicate parameter `{}`".format(name))
        self.params[name] = np.array(value, dtype=DTYPE)
        return self.params[name]

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def n_params(self):
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        self.grads = {name: np.zeros_like(p) for name, p in self.params.items()}

    def accumulate(self, name, grad):
        if grad.shape != self.params[name].shape:
            raise StateError(
                "gradient shape {} does not match parameter `{}` {}".format(
                    grad.shape, name, self.params[name].shape
                )
            )
        if name not in self.grads:
            self.grads[name] = np.zeros_like(self.params[name])
        self.grads[name] += grad

    def grad_norm(self):
        return math.sqrt(sum(float((g * g).sum()) for g in self.grads.values()))


def init_normal(rng, shape, std=INIT_STD):
    return rng.normal(0.0, std, size=shape).astype(DTYPE)


def clip_grad_norm(store, max_norm):
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    norm = store.grad_norm()
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in store.grads.values():
            g *= scale
    return norm


def adam_step(store, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update with bias correction, in place. Returns the store."""
    missing = [name for name in store.params if name not in store.grads]
    if missing:
        raise StateError("missing gradients for {}".format(", ".join(missing)))
    store.step += 1
    t = store.step
    for name, p in store.params.items():
        g = store.grads[name]
        m = store.m.get(name)
        v = store.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        store.m[name] = m
        store.v[name] = v
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return store


def grad_check(f, store, epsilon=1e-5):
    """Compare analytic gradients with central differences.

    ``f(store)`` must return the scalar loss and leave the analytic gradient
    of every parameter in ``store.grads``.

    Returns:
        max over all parameter entries of |analytic - numeric| / max(1, |analytic|)
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ConfigError("epsilon {} outside [1e-7, 1e-3]".format(epsilon))

    def evaluate():
        value = f(store)
        if not math.isfinite(value):
            raise NumericError("grad_check objective is not finite")
        return value

    evaluate()
    analytic = {name: store.grads[name].copy() for name in store.params}
    max_err = 0.0
    for name, p in store.params.items():
        for idx in np.ndindex(*p.shape):
            orig = p[idx]
            p[idx] = orig + epsilon
            f_plus = evaluate()
            p[idx] = orig - epsilon
            f_minus = evaluate()
            p[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            a = analytic[name][idx]
            err = abs(a - numeric) / max(1.0, abs(a))
            if err > max_err:
                logger.debug("grad_check {}{}: analytic={} numeric={}".format(name, idx, a, numeric))
                max_err = err
    store.grads = analytic
    return max_err
