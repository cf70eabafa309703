"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the handful of operations the neural fields and their losses need are
provided. Several are fused (affine layer, termination weights) to keep the
per-node Python overhead small.
"""

from __future__ import annotations

import functools

import numpy as np


class UnrecordedLossError(ValueError):
    """The tensor handed to backward() has no recorded computation behind it."""


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=False, name=None):
        data = np.asarray(data)
        self.data = data if data.dtype.kind == "f" else data.astype(np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self)))

    def __rsub__(self, other):
        return add(_wrap(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis)


def _wrap(x, like: "Tensor | None" = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None:
        return Tensor(np.asarray(x, dtype=like.data.dtype))
    return Tensor(x)


def parameter(data, name=None, dtype=np.float64) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True, name=name)


def _node(data, parents, backward_fn) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, parents, backward_fn, True)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a, b) -> Tensor:
    if isinstance(a, Tensor):
        b = _wrap(b, a)
    else:
        a = _wrap(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw)


def neg(a) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    if isinstance(a, Tensor):
        b = _wrap(b, a)
    else:
        a = _wrap(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), bw)


def abs_(a) -> Tensor:
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sum_(a, axis=None) -> Tensor:
    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _node(a.data.sum(axis=axis), (a,), bw)


def square_sum(a) -> Tensor:
    """Squared L2 norm of all entries."""
    return _node(np.sum(a.data * a.data), (a,), lambda g: (2.0 * g * a.data,))


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _neg_exp(a: np.ndarray) -> np.ndarray:
    """exp(-a) for a >= 0, computed in place in ``a``.

    In float32 the argument is capped so that products with the result stay
    clear of subnormals, which are very slow to compute with; the cap shifts
    values by < 3e-9, far below single-precision resolution.
    """
    np.minimum(a, 20.0 if a.dtype == np.float32 else 600.0, out=a)
    np.negative(a, out=a)
    return np.exp(a, out=a)


def _softplus_cached(z: np.ndarray, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """softplus(beta z) / beta and the cache e = exp(-beta |z|)."""
    e = np.abs(z)
    e *= beta
    _neg_exp(e)
    out = np.log1p(e)
    out *= 1.0 / beta
    out += np.maximum(z, 0.0)
    return out, e


def _sigmoid_from_cache(z: np.ndarray, e: np.ndarray) -> np.ndarray:
    """sigmoid(beta z) given e = exp(-beta |z|), without np.where (slow on mixed masks)."""
    q = 1.0 + e
    np.divide(e, q, out=q)  # sigmoid(-beta |z|)
    np.subtract(0.5, q, out=q)
    q *= np.sign(z)
    q += 0.5
    return q


def softplus_array(x: np.ndarray) -> np.ndarray:
    return _softplus_cached(np.asarray(x), 1.0)[0]


def sigmoid(a) -> Tensor:
    s = sigmoid_array(a.data)
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),))


def softplus(a, beta: float = 1.0) -> Tensor:
    z = a.data
    out, e = _softplus_cached(z, beta)
    return _node(out, (a,), lambda g: (g * _sigmoid_from_cache(z, e),))


def relu(a) -> Tensor:
    pos = a.data > 0
    return _node(np.maximum(a.data, 0.0), (a,), lambda g: (g * pos,))


def concat(tensors, axis=-1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def reshape(a, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def take_rows(table, idx: np.ndarray) -> Tensor:
    """table[idx] for a 2-D table; gradients scatter-add back to the rows."""

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, idx, g)
        return (out,)

    return _node(table.data[idx], (table,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x, W, b) -> Tensor:
    """x @ W + b for 2-D x."""
    x = _wrap(x)

    def bw(g):
        gx = g @ W.data.T if x.requires_grad else None
        return gx, x.data.T @ g, _colsum(g)

    return _node(x.data @ W.data + b.data, (x, W, b), bw)


def _colsum(g: np.ndarray) -> np.ndarray:
    # a BLAS product is several times faster than a float32 axis-0 reduction
    return np.ones(len(g), dtype=g.dtype) @ g


def softplus_linear(x, W, b, beta: float = 1.0) -> Tensor:
    """softplus(beta * (x @ W + b)) / beta as a single node."""
    x = _wrap(x)
    z = x.data @ W.data
    z += b.data
    out, e = _softplus_cached(z, beta)

    def bw(g):
        # derivative is sigmoid(beta * z), rebuilt from the cached exponential
        gz = _sigmoid_from_cache(z, e)
        gz *= g
        gx = gz @ W.data.T if x.requires_grad else None
        return gx, x.data.T @ gz, _colsum(gz)

    return _node(out, (x, W, b), bw)


@functools.lru_cache(maxsize=16)
def _encoding_matrix(n_freq: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    """Frequency matrix F (3, 6L) and phases so that sin(x @ F + phase) is the encoding.

    Block k holds sin(2^k pi x) for the three components followed by the
    matching cosines, written as sines shifted by pi/2.
    """
    F = np.zeros((3, 6 * n_freq))
    phase = np.zeros(6 * n_freq)
    for k in range(n_freq):
        for j in range(3):
            F[j, 6 * k + j] = F[j, 6 * k + 3 + j] = np.pi * 2.0**k
        phase[6 * k + 3 : 6 * k + 6] = np.pi / 2
    return F.astype(dtype), phase.astype(dtype)


def positional_encoding_array(x: np.ndarray, n_freq: int) -> np.ndarray:
    """[x, sin(2^k pi x), cos(2^k pi x) for k < n_freq] along the last axis."""
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(np.float64)
    F, phase = _encoding_matrix(n_freq, x.dtype)
    enc = x @ F
    enc += phase
    np.sin(enc, out=enc)
    return np.concatenate([x, enc], axis=-1)


def positional_encoding(x, n_freq: int) -> Tensor:
    x = _wrap(x)
    out = positional_encoding_array(x.data, n_freq)
    if not x.requires_grad:
        return Tensor(out)
    F, phase = _encoding_matrix(n_freq, x.data.dtype)
    slope = np.cos(x.data @ F + phase)

    def bw(g):
        return (g[..., :3] + (g[..., 3:] * slope) @ F.T,)

    return Tensor(out, (x,), bw, True)


# ---------------------------------------------------------------------------
# volume rendering


def termination_weights_array(occ: np.ndarray) -> np.ndarray:
    """w_i = o_i * prod_{j<i} (1 - o_j) along the last axis."""
    occ = np.asarray(occ, dtype=np.float64)
    trans = np.cumprod(1.0 - occ, axis=-1)
    trans = np.concatenate([np.ones_like(occ[..., :1]), trans[..., :-1]], axis=-1)
    return occ * trans


def termination_weights(logits) -> Tensor:
    """Termination weights from occupancy logits, differentiable.

    Transmittance is accumulated in log space (log(1 - o) = -softplus(l)) so
    saturated occupancies do not underflow.
    """
    l = logits.data
    occ = sigmoid_array(l)
    log_free = -softplus_array(l)
    log_trans = np.cumsum(log_free, axis=-1) - log_free
    trans = np.exp(log_trans)
    w = occ * trans

    def bw(g):
        gw = g * w
        # sum over later samples i > j of g_i w_i
        later = np.cumsum(gw[..., ::-1], axis=-1)[..., ::-1] - gw
        return (g * occ * (1.0 - occ) * trans - occ * later,)

    return _node(w, (logits,), bw)


def ray_render(logits, rgb, t: np.ndarray) -> Tensor:
    """Composite rays: (R, N) logits, (R, N, 3) colors, (R, N) depths -> (R, 5).

    Output columns are the rendered color, depth (sum of w_i t_i) and opacity
    (sum of w_i), with w the termination weights of the logits.
    """
    w_node = termination_weights(logits)
    w = w_node.data
    c = rgb.data
    t = np.asarray(t, dtype=w.dtype)
    out = np.empty((w.shape[0], 5), dtype=w.dtype)
    out[:, :3] = np.einsum("rn,rnc->rc", w, c)
    out[:, 3] = np.einsum("rn,rn->r", w, t)
    out[:, 4] = w.sum(axis=1)

    def bw(g):
        gw = np.einsum("rnc,rc->rn", c, g[:, :3])
        gw += t * g[:, 3:4]
        gw += g[:, 4:5]
        gc = w[:, :, None] * g[:, None, :3]
        return w_node.backward_fn(gw)[0], gc

    return _node(out, (logits, rgb), bw)


def weighted_l1(a, target: np.ndarray, weight: np.ndarray) -> Tensor:
    """sum(weight * |a - target|) as a scalar node."""
    diff = a.data - target
    sign = np.sign(diff)
    return _node(np.sum(weight * np.abs(diff)), (a,), lambda g: (g * weight * sign,))


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``loss`` for every leaf that requires grad, keyed by id()."""
    if not isinstance(loss, Tensor) or not loss.requires_grad:
        raise UnrecordedLossError("loss was not produced by a recorded computation")
    if loss.data.size != 1:
        raise ValueError("backward() needs a scalar loss")
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            leaves[id(node)] = g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return leaves
