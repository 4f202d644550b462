"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every operation records its inputs and a backward closure on the output
tensor; calling ``backward()`` on a scalar loss walks the recorded graph in
reverse topological order and accumulates gradients into ``.grad``. All
arithmetic is float64 and all reductions run in a fixed order, so results are
bit-reproducible for a given seed.
"""

from __future__ import annotations

import numpy as np
from scipy import sparse as _sp


class NumericsError(RuntimeError):
    """Shape mismatch, non-finite value, or misuse of the tape."""


_check_finite = False


def set_check_finite(enabled: bool) -> None:
    """Globally enable/disable NaN/Inf checks on every op output."""
    global _check_finite
    _check_finite = bool(enabled)


def _acc(t: "Tensor", g: np.ndarray) -> None:
    """Accumulate a gradient contribution, copying on the first write so the
    stored grad never aliases another tensor's buffer."""
    if t.grad is None:
        t.grad = np.array(g)
    else:
        t.grad += g


def _grad_buffer(t: "Tensor") -> np.ndarray:
    """Return t.grad as a writable buffer, allocating zeros if unset."""
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    return t.grad


def _index_add(idx: np.ndarray, g: np.ndarray, n: int) -> np.ndarray:
    """Sum rows of `g` into an (n, ...) array at positions `idx`.

    bincount per column; much faster than np.add.at for the edge counts seen
    here.
    """
    if g.ndim == 1:
        return np.bincount(idx, weights=g, minlength=n)
    out = np.empty((n,) + g.shape[1:])
    flat = np.ascontiguousarray(g).reshape(g.shape[0], -1)
    of = out.reshape(n, -1)
    for c in range(flat.shape[1]):
        of[:, c] = np.bincount(idx, weights=flat[:, c], minlength=n)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense float64 array plus the tape bookkeeping to differentiate it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad=False, parents=(), grad_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        if _check_finite and not np.all(np.isfinite(self.data)):
            raise NumericsError("non-finite value produced")
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._grad_fn = grad_fn if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph walk ---------------------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable tensor."""
        if self.data.ndim != 0 and self.data.size != 1:
            raise NumericsError(f"backward requires a scalar loss, got shape {self.data.shape}")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._grad_fn is not None:
                node._grad_fn(node.grad)

    # -- arithmetic ---------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other):
        other = self._coerce(other)
        out = Tensor(self.data + other.data, parents=(self, other))

        def grad_fn(g):
            if self.requires_grad:
                _acc(self, _unbroadcast(g, self.data.shape))
            if other.requires_grad:
                _acc(other, _unbroadcast(g, other.data.shape))

        out._grad_fn = grad_fn
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, parents=(self,))

        def grad_fn(g):
            if self.requires_grad:
                _acc(self, -g)

        out._grad_fn = grad_fn
        return out

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        other = self._coerce(other)
        out = Tensor(self.data * other.data, parents=(self, other))

        def grad_fn(g):
            if self.requires_grad:
                _acc(self, _unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                _acc(other, _unbroadcast(g * self.data, other.data.shape))

        out._grad_fn = grad_fn
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self * self._coerce(other) ** -1.0

    def __rtruediv__(self, other):
        return self._coerce(other) * self ** -1.0

    def __pow__(self, exponent: float):
        out = Tensor(self.data ** exponent, parents=(self,))

        def grad_fn(g):
            if self.requires_grad:
                _acc(self, g * exponent * self.data ** (exponent - 1.0))

        out._grad_fn = grad_fn
        return out

    def __matmul__(self, other):
        other = self._coerce(other)
        a, b = self.data, other.data
        a2 = a[None, :] if a.ndim == 1 else a
        b2 = b[:, None] if b.ndim == 1 else b
        if a2.shape[-1] != b2.shape[0]:
            raise NumericsError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        y = a2 @ b2
        if b.ndim == 1:
            y = y[..., 0]
        if a.ndim == 1:
            y = y[0]
        out = Tensor(y, parents=(self, other))

        def grad_fn(g):
            g2 = np.asarray(g)
            if a.ndim == 1:
                g2 = g2[None, ...]
            if b.ndim == 1:
                g2 = g2[..., None]
            if self.requires_grad:
                ga = g2 @ b2.T
                _acc(self, ga[0] if a.ndim == 1 else ga)
            if other.requires_grad:
                gb = a2.T @ g2
                _acc(other, gb[:, 0] if b.ndim == 1 else gb)

        out._grad_fn = grad_fn
        return out

    @property
    def T(self):
        out = Tensor(self.data.T, parents=(self,))

        def grad_fn(g):
            if self.requires_grad:
                _acc(self, g.T)

        out._grad_fn = grad_fn
        return out

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), parents=(self,))

        def grad_fn(g):
            if self.requires_grad:
                _acc(self, g.reshape(self.data.shape))

        out._grad_fn = grad_fn
        return out

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), parents=(self,))

        def grad_fn(g):
            if self.requires_grad:
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                _acc(self, np.broadcast_to(g, self.data.shape))

        out._grad_fn = grad_fn
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- elementwise nonlinearities ------------------------------------------

    def relu(self):
        out = Tensor(np.maximum(self.data, 0.0), parents=(self,))

        def grad_fn(g):
            if self.requires_grad:
                _acc(self, g * (self.data > 0.0))

        out._grad_fn = grad_fn
        return out

    def leaky_relu(self, slope: float = 0.2):
        out = Tensor(np.where(self.data > 0.0, self.data, slope * self.data),
                     parents=(self,))

        def grad_fn(g):
            if self.requires_grad:
                _acc(self, g * np.where(self.data > 0.0, 1.0, slope))

        out._grad_fn = grad_fn
        return out

    def sigmoid(self):
        y = np.where(self.data >= 0.0,
                     1.0 / (1.0 + np.exp(-np.clip(self.data, -700, None))),
                     np.exp(np.clip(self.data, None, 700))
                     / (1.0 + np.exp(np.clip(self.data, None, 700))))
        out = Tensor(y, parents=(self,))

        def grad_fn(g):
            if self.requires_grad:
                _acc(self, g * y * (1.0 - y))

        out._grad_fn = grad_fn
        return out

    def log(self):
        out = Tensor(np.log(self.data), parents=(self,))

        def grad_fn(g):
            if self.requires_grad:
                _acc(self, g / self.data)

        out._grad_fn = grad_fn
        return out

    def exp(self):
        y = np.exp(self.data)
        out = Tensor(y, parents=(self,))

        def grad_fn(g):
            if self.requires_grad:
                _acc(self, g * y)

        out._grad_fn = grad_fn
        return out

    # -- row-wise ops ---------------------------------------------------------

    def softmax_rows(self):
        z = self.data - self.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)
        out = Tensor(y, parents=(self,))

        def grad_fn(g):
            if self.requires_grad:
                _acc(self, y * (g - (g * y).sum(axis=-1, keepdims=True)))

        out._grad_fn = grad_fn
        return out

    def log_softmax_rows(self):
        z = self.data - self.data.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
        y = z - lse
        out = Tensor(y, parents=(self,))

        def grad_fn(g):
            if self.requires_grad:
                _acc(self, g - np.exp(y) * g.sum(axis=-1, keepdims=True))

        out._grad_fn = grad_fn
        return out

    def l2_normalize_rows(self, eps: float = 1e-12):
        """Scale each row to unit L2 norm; rows with norm < eps become zero."""
        norm = np.sqrt((self.data ** 2).sum(axis=-1, keepdims=True))
        safe = np.where(norm < eps, 1.0, norm)
        y = np.where(norm < eps, 0.0, self.data / safe)
        out = Tensor(y, parents=(self,))

        def grad_fn(g):
            if self.requires_grad:
                dot = (g * y).sum(axis=-1, keepdims=True)
                _acc(self, np.where(norm < eps, 0.0, (g - y * dot) / safe))

        out._grad_fn = grad_fn
        return out

    # -- indexing -------------------------------------------------------------

    def gather_rows(self, idx: np.ndarray):
        idx = np.asarray(idx, dtype=np.intp)
        out = Tensor(self.data[idx], parents=(self,))

        def grad_fn(g):
            if self.requires_grad:
                _acc(self, _index_add(idx, g, self.data.shape[0]))

        out._grad_fn = grad_fn
        return out

    def pick(self, col_idx: np.ndarray):
        """Return the 1-D tensor self[i, col_idx[i]] for each row i."""
        col_idx = np.asarray(col_idx, dtype=np.intp)
        rows = np.arange(self.data.shape[0])
        out = Tensor(self.data[rows, col_idx], parents=(self,))

        def grad_fn(g):
            if self.requires_grad:
                np.add.at(_grad_buffer(self), (rows, col_idx), g)

        out._grad_fn = grad_fn
        return out

    def slice_cols(self, lo: int, hi: int):
        out = Tensor(self.data[:, lo:hi], parents=(self,))

        def grad_fn(g):
            if self.requires_grad:
                _grad_buffer(self)[:, lo:hi] += g

        out._grad_fn = grad_fn
        return out

    # -- stochastic -----------------------------------------------------------

    def dropout(self, rate: float, rng: np.random.Generator, training: bool):
        """Inverted dropout: eval mode and rate 0 are the identity."""
        if not training or rate == 0.0:
            return self
        keep = 1.0 - rate
        mask = (rng.random(self.data.shape) < keep) / keep
        return self * Tensor(mask)


class Parameter(Tensor):
    """A named trainable leaf tensor."""

    __slots__ = ("name", "trainable")

    def __init__(self, name: str, value, trainable: bool = True):
        super().__init__(value, requires_grad=trainable)
        self.name = name
        self.trainable = trainable


def concat(tensors, axis: int = 1) -> Tensor:
    parts = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis),
                 parents=tuple(parts))
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _acc(p, g[tuple(sl)])

    out._grad_fn = grad_fn
    return out


def segment_sum(t: Tensor, seg_ids: np.ndarray, n_segments: int) -> Tensor:
    """Sum entries (rows) of `t` into `n_segments` buckets given by seg_ids."""
    seg_ids = np.asarray(seg_ids, dtype=np.intp)
    acc = _index_add(seg_ids, t.data, n_segments)
    out = Tensor(acc, parents=(t,))

    def grad_fn(g):
        if t.requires_grad:
            _acc(t, g[seg_ids])

    out._grad_fn = grad_fn
    return out


def segment_max(values: np.ndarray, seg_ids: np.ndarray, n_segments: int) -> np.ndarray:
    """Per-segment max of a plain array (no gradient; used as a softmax shift)."""
    acc = np.full((n_segments,) + values.shape[1:], -np.inf)
    np.maximum.at(acc, np.asarray(seg_ids, dtype=np.intp), values)
    return acc


def weighted_gather_sum(weights: Tensor, values: Tensor,
                        rows: np.ndarray, cols: np.ndarray, n: int) -> Tensor:
    """Sparse aggregation out[i] = sum over edges e with rows[e]==i of
    weights[e] * values[cols[e]].

    Equivalent to S @ values for the sparse matrix S with S[rows[e], cols[e]]
    = weights[e]; differentiable in both weights and values.
    """
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    mat = _sp.csr_matrix((weights.data, (rows, cols)),
                         shape=(n, values.data.shape[0]))
    out = Tensor(mat @ values.data, parents=(weights, values))

    def grad_fn(g):
        if values.requires_grad:
            _acc(values, mat.T @ g)
        if weights.requires_grad:
            _acc(weights, (g[rows] * values.data[cols]).sum(axis=1))

    out._grad_fn = grad_fn
    return out


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: dict,
               training: bool, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-column batch normalization with running statistics.

    `state` holds plain arrays 'mean' and 'var'; they are updated in place in
    training mode and used for normalization in eval mode.
    """
    if training:
        mu = x.mean(axis=0)
        centered = x - mu
        var = (centered * centered).mean(axis=0)
        # running stats track the batch statistics with momentum 0.9
        state["mean"] = momentum * state["mean"] + (1.0 - momentum) * mu.data
        state["var"] = momentum * state["var"] + (1.0 - momentum) * var.data
        inv = (var + eps) ** -0.5
        return centered * inv * gamma + beta
    normed = (x - Tensor(state["mean"])) * Tensor(1.0 / np.sqrt(state["var"] + eps))
    return normed * gamma + beta


def grad_check(build, params, eps: float = 1e-5) -> float:
    """Compare analytic gradients of a scalar-valued tape against central
    finite differences.

    `build()` must rebuild the computation and return the scalar loss; it must
    be deterministic (dropout off, batch norm in eval mode). Returns the max
    over all entries of |analytic - fd| / max(1, |analytic|).
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps {eps} outside [1e-7, 1e-4]")
    loss = build()
    if float(build().data) != float(loss.data):
        raise NumericsError("build() is not deterministic: two passes disagree")
    loss.backward()
    analytic = {id(p): (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for p in params}
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        a = analytic[id(p)].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(build().data)
            flat[i] = orig - eps
            lo = float(build().data)
            flat[i] = orig
            fd = (hi - lo) / (2.0 * eps)
            err = abs(a[i] - fd) / max(1.0, abs(a[i]))
            if err > worst:
                worst = err
    return worst
