"""Reverse-mode automatic differentiation on numpy float64 arrays.

A Tensor wraps an ndarray plus an optional record of how it was computed.
Operations build a DAG of closures; Tensor.backward() walks it once in
reverse topological order, accumulates gradients into requiring leaves,
and frees the tape. Everything is computed in 64-bit floats and every
arithmetic result is checked for NaN/Inf so failures surface at the op
that produced them rather than three modules later.
"""

import numpy as np

from .errors import NumericError, ShapeError

__all__ = [
    "Tensor",
    "concat",
    "conv2d",
    "channel_matmul",
    "matrix_inverse",
    "logabsdet",
    "squeeze_space",
    "unsqueeze_space",
    "l2_normalize",
    "pairwise_distances",
    "gradient_check",
]

_SINGULAR_DET = 1e-12


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows, so both branches are safe.
    e = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))


def _stable_softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_finite(data: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(data).all():
        bad = data[~np.isfinite(data)]
        raise NumericError(f"{op}: produced non-finite values (first offender {bad.flat[0]!r})")
    return data


class Tensor:
    """Node in the autodiff graph; leaves hold parameters or inputs."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_freed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._freed = False

    # -- bookkeeping ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has {self.data.size} elements, expected 1")
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def _record(self, out: "Tensor", parents, backward):
        """Attach tape state to `out` if any parent participates in grad."""
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accumulate(self, grad: np.ndarray):
        grad = _unbroadcast(grad, self.data.shape)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    # -- arithmetic ----------------------------------------------------

    @staticmethod
    def _lift(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=np.float64))

    def _broadcast_op(self, other, op, fn, backward_builder):
        other = self._lift(other)
        try:
            with np.errstate(all="ignore"):
                data = fn(self.data, other.data)
        except ValueError:
            raise ShapeError(f"{op}: shapes {self.data.shape} and {other.data.shape} do not broadcast")
        out = Tensor(_check_finite(data, op))
        return self._record(out, (self, other), backward_builder(self, other, out))

    def __add__(self, other):
        def bk(a, b, out):
            def run():
                if a.requires_grad:
                    a._accumulate(out.grad)
                if b.requires_grad:
                    b._accumulate(out.grad)
            return run
        return self._broadcast_op(other, "add", np.add, bk)

    def __sub__(self, other):
        def bk(a, b, out):
            def run():
                if a.requires_grad:
                    a._accumulate(out.grad)
                if b.requires_grad:
                    b._accumulate(-out.grad)
            return run
        return self._broadcast_op(other, "sub", np.subtract, bk)

    def __mul__(self, other):
        def bk(a, b, out):
            def run():
                if a.requires_grad:
                    a._accumulate(out.grad * b.data)
                if b.requires_grad:
                    b._accumulate(out.grad * a.data)
            return run
        return self._broadcast_op(other, "mul", np.multiply, bk)

    def __truediv__(self, other):
        other = self._lift(other)
        if np.any(other.data == 0.0):
            raise NumericError(f"div: divisor contains zero (shape {other.data.shape})")

        def bk(a, b, out):
            def run():
                if a.requires_grad:
                    a._accumulate(out.grad / b.data)
                if b.requires_grad:
                    b._accumulate(-out.grad * a.data / (b.data * b.data))
            return run
        return self._broadcast_op(other, "div", np.divide, bk)

    def __radd__(self, other):
        return self._lift(other).__add__(self)

    def __rsub__(self, other):
        return self._lift(other).__sub__(self)

    def __rmul__(self, other):
        return self._lift(other).__mul__(self)

    def __rtruediv__(self, other):
        return self._lift(other).__truediv__(self)

    def __neg__(self):
        out = Tensor(-self.data)

        def run():
            if self.requires_grad:
                self._accumulate(-out.grad)
        return self._record(out, (self,), run)

    def __pow__(self, p):
        p = float(p)
        with np.errstate(all="ignore"):
            out = Tensor(_check_finite(np.power(self.data, p), "pow"))

        def run():
            if self.requires_grad:
                self._accumulate(out.grad * p * np.power(self.data, p - 1.0))
        return self._record(out, (self,), run)

    def __matmul__(self, other):
        other = self._lift(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ShapeError(f"matmul: expects 2-D operands, got {self.data.shape} @ {other.data.shape}")
        if self.data.shape[1] != other.data.shape[0]:
            raise ShapeError(f"matmul: inner dims differ, {self.data.shape} @ {other.data.shape}")
        out = Tensor(_check_finite(self.data @ other.data, "matmul"))
        a, b = self, other

        def run():
            if a.requires_grad:
                a._accumulate(out.grad @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ out.grad)
        return self._record(out, (a, b), run)

    # -- elementwise transcendentals ------------------------------------

    def exp(self):
        with np.errstate(all="ignore"):
            out = Tensor(_check_finite(np.exp(self.data), "exp"))

        def run():
            if self.requires_grad:
                self._accumulate(out.grad * out.data)
        return self._record(out, (self,), run)

    def log(self):
        if np.any(self.data <= 0.0):
            raise NumericError(f"log: non-positive input (min {self.data.min()!r})")
        out = Tensor(np.log(self.data))

        def run():
            if self.requires_grad:
                self._accumulate(out.grad / self.data)
        return self._record(out, (self,), run)

    def sqrt(self):
        if np.any(self.data < 0.0):
            raise NumericError(f"sqrt: negative input (min {self.data.min()!r})")
        out = Tensor(np.sqrt(self.data))

        def run():
            if self.requires_grad:
                self._accumulate(_check_finite(out.grad * 0.5 / out.data, "sqrt backward"))
        return self._record(out, (self,), run)

    def tanh(self):
        out = Tensor(np.tanh(self.data))

        def run():
            if self.requires_grad:
                self._accumulate(out.grad * (1.0 - out.data * out.data))
        return self._record(out, (self,), run)

    def sigmoid(self):
        out = Tensor(_stable_sigmoid(self.data))

        def run():
            if self.requires_grad:
                self._accumulate(out.grad * out.data * (1.0 - out.data))
        return self._record(out, (self,), run)

    def softplus(self):
        out = Tensor(_stable_softplus(self.data))

        def run():
            if self.requires_grad:
                self._accumulate(out.grad * _stable_sigmoid(self.data))
        return self._record(out, (self,), run)

    def artanh(self):
        if np.any(np.abs(self.data) >= 1.0):
            raise NumericError(f"artanh: |input| >= 1 (max {np.abs(self.data).max()!r})")
        out = Tensor(_check_finite(np.arctanh(self.data), "artanh"))

        def run():
            if self.requires_grad:
                self._accumulate(out.grad / (1.0 - self.data * self.data))
        return self._record(out, (self,), run)

    def clip(self, lo: float, hi: float):
        out = Tensor(np.clip(self.data, lo, hi))
        mask = (self.data > lo) & (self.data < hi)

        def run():
            if self.requires_grad:
                self._accumulate(out.grad * mask)
        return self._record(out, (self,), run)

    # -- reductions and shape ops ----------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims))
        shape = self.data.shape

        def run():
            if not self.requires_grad:
                return
            g = out.grad
            if axis is not None and not keepdims:
                ax = axis if isinstance(axis, tuple) else (axis,)
                ax = tuple(a % len(shape) for a in ax)
                expand = tuple(1 if i in ax else n for i, n in enumerate(shape))
                g = g.reshape(expand)
            self._accumulate(np.broadcast_to(g, shape).copy())
        return self._record(out, (self,), run)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a % self.data.ndim] for a in (axis if isinstance(axis, tuple) else (axis,))]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        try:
            out = Tensor(self.data.reshape(shape))
        except ValueError:
            raise ShapeError(f"reshape: cannot view {self.data.shape} as {shape}")
        old = self.data.shape

        def run():
            if self.requires_grad:
                self._accumulate(out.grad.reshape(old))
        return self._record(out, (self,), run)

    def __getitem__(self, key):
        if not isinstance(key, tuple):
            key = (key,)
        if not all(isinstance(k, slice) for k in key):
            raise ShapeError("getitem: only slice indexing is supported")
        out = Tensor(self.data[key].copy())
        shape = self.data.shape

        def run():
            if self.requires_grad:
                g = np.zeros(shape)
                g[key] = out.grad
                self._accumulate(g)
        return self._record(out, (self,), run)

    # -- backward --------------------------------------------------------

    def backward(self):
        """Reverse sweep from a scalar root; frees the tape afterwards."""
        if self.data.size != 1:
            raise ShapeError(f"backward: root must be scalar, got shape {self.data.shape}")
        if self._freed:
            raise NumericError("backward: graph already freed by a previous backward")
        if not self.requires_grad:
            return

        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        leaves = [n for n in topo if not n._parents]
        self.grad = np.ones_like(self.data) if self.grad is None else self.grad + 1.0
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
            if node._parents:
                node.grad = None
                node._parents = ()
                node._backward = None
                node._freed = True
        for leaf in leaves:
            if leaf.grad is not None and not np.isfinite(leaf.grad).all():
                raise NumericError("backward: non-finite gradient reached a leaf tensor")


# -- free functions ------------------------------------------------------


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate along `axis`; gradient splits back to the inputs."""
    tensors = [Tensor._lift(t) for t in tensors]
    try:
        out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.data.shape for t in tensors]}")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def run():
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * out.grad.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(out.grad[tuple(idx)])
    return tensors[0]._record(out, tuple(tensors), run)


def conv2d(x: Tensor, w: Tensor, b=None, stride: int = 1, padding: int = 1) -> Tensor:
    """2-D convolution, direct evaluation looping over kernel taps.

    x: (N, C, H, W), w: (O, C, kh, kw), b: (O,) or None. Zero padding.
    """
    x = Tensor._lift(x)
    w = Tensor._lift(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expects 4-D x and w, got {x.data.shape}, {w.data.shape}")
    n, c, h, wd = x.data.shape
    o, cw, kh, kw = w.data.shape
    if c != cw:
        raise ShapeError(f"conv2d: channel mismatch, x has {c}, w expects {cw}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} too large for input {h}x{wd} with padding {padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    acc = np.zeros((o, n, oh, ow))
    for ki in range(kh):
        for kj in range(kw):
            xs = xp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride]
            acc += np.tensordot(w.data[:, :, ki, kj], xs, axes=(1, 1))
    data = acc.transpose(1, 0, 2, 3)
    parents = [x, w]
    if b is not None:
        b = Tensor._lift(b)
        data = data + b.data.reshape(1, o, 1, 1)
        parents.append(b)
    out = Tensor(_check_finite(data, "conv2d"))

    def run():
        g = out.grad
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        need_x = x.requires_grad
        need_w = w.requires_grad
        if not (need_x or need_w):
            return
        gxp = np.zeros_like(xp) if need_x else None
        dw = np.zeros_like(w.data) if need_w else None
        for ki in range(kh):
            for kj in range(kw):
                xs = xp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride]
                if need_w:
                    dw[:, :, ki, kj] = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))
                if need_x:
                    gxp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += (
                        np.tensordot(w.data[:, :, ki, kj], g, axes=(0, 1)).transpose(1, 0, 2, 3)
                    )
        if need_w:
            w._accumulate(dw)
        if need_x:
            if padding:
                x._accumulate(gxp[:, :, padding:padding + h, padding:padding + wd])
            else:
                x._accumulate(gxp)
    return x._record(out, tuple(parents), run)


def channel_matmul(w: Tensor, x: Tensor) -> Tensor:
    """Apply a (O, C) matrix to the channel axis of x: (N, C, H, W) -> (N, O, H, W)."""
    w = Tensor._lift(w)
    x = Tensor._lift(x)
    if w.data.ndim != 2 or x.data.ndim != 4 or w.data.shape[1] != x.data.shape[1]:
        raise ShapeError(f"channel_matmul: shapes {w.data.shape} and {x.data.shape} incompatible")
    out = Tensor(_check_finite(np.tensordot(w.data, x.data, axes=(1, 1)).transpose(1, 0, 2, 3), "channel_matmul"))

    def run():
        g = out.grad
        if w.requires_grad:
            w._accumulate(np.tensordot(g, x.data, axes=([0, 2, 3], [0, 2, 3])))
        if x.requires_grad:
            x._accumulate(np.tensordot(w.data, g, axes=(0, 1)).transpose(1, 0, 2, 3))
    return w._record(out, (w, x), run)


def matrix_inverse(w: Tensor) -> Tensor:
    """Inverse of a square matrix; errors when |det| falls below 1e-12."""
    w = Tensor._lift(w)
    _require_invertible(w.data, "matrix_inverse")
    inv = np.linalg.inv(w.data)
    out = Tensor(_check_finite(inv, "matrix_inverse"))

    def run():
        if w.requires_grad:
            w._accumulate(-inv.T @ out.grad @ inv.T)
    return w._record(out, (w,), run)


def logabsdet(w: Tensor) -> Tensor:
    """log|det W| as a scalar tensor; gradient is inv(W)^T."""
    w = Tensor._lift(w)
    _require_invertible(w.data, "logabsdet")
    _, ld = np.linalg.slogdet(w.data)
    out = Tensor(np.asarray(ld))

    def run():
        if w.requires_grad:
            w._accumulate(out.grad * np.linalg.inv(w.data).T)
    return w._record(out, (w,), run)


def _require_invertible(m: np.ndarray, op: str):
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"{op}: expects a square matrix, got {m.shape}")
    sign, ld = np.linalg.slogdet(m)
    if sign == 0.0 or ld < np.log(_SINGULAR_DET):
        raise NumericError(f"{op}: matrix is numerically singular (|det| < {_SINGULAR_DET})")


def squeeze_space(x: Tensor) -> Tensor:
    """Space-to-channel by factor 2: (N, C, H, W) -> (N, 4C, H/2, W/2). Volume preserving."""
    x = Tensor._lift(x)
    if x.data.ndim != 4:
        raise ShapeError(f"squeeze_space: expects 4-D input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"squeeze_space: spatial extents must be even, got {h}x{w}")
    data = (
        x.data.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, 4 * c, h // 2, w // 2)
    )
    out = Tensor(data)

    def run():
        if x.requires_grad:
            x._accumulate(_unsqueeze_array(out.grad))
    return x._record(out, (x,), run)


def unsqueeze_space(x: Tensor) -> Tensor:
    """Channel-to-space by factor 2: exact inverse of squeeze_space."""
    x = Tensor._lift(x)
    if x.data.ndim != 4:
        raise ShapeError(f"unsqueeze_space: expects 4-D input, got {x.data.shape}")
    if x.data.shape[1] % 4:
        raise ShapeError(f"unsqueeze_space: channels must be divisible by 4, got {x.data.shape[1]}")
    out = Tensor(_unsqueeze_array(x.data))

    def run():
        if x.requires_grad:
            n, c, h, w = out.grad.shape
            g = (
                out.grad.reshape(n, c, h // 2, 2, w // 2, 2)
                .transpose(0, 1, 3, 5, 2, 4)
                .reshape(n, 4 * c, h // 2, w // 2)
            )
            x._accumulate(g)
    return x._record(out, (x,), run)


def _unsqueeze_array(a: np.ndarray) -> np.ndarray:
    n, c4, h2, w2 = a.shape
    c = c4 // 4
    return (
        a.reshape(n, c, 2, 2, h2, w2)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(n, c, 2 * h2, 2 * w2)
    )


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Scale rows to unit Euclidean norm; errors on an exactly zero row."""
    sq = (x * x).sum(axis=axis, keepdims=True)
    if np.any(sq.data == 0.0):
        raise NumericError("l2_normalize: zero vector cannot be normalized")
    return x / sq.sqrt()


def pairwise_distances(a: Tensor, b: Tensor, safe_mask=None) -> Tensor:
    """Euclidean distances between rows of a (N, D) and b (M, D) -> (N, M).

    `safe_mask` (ndarray, 1 = keep) marks the entries that will be consumed;
    excluded entries get a +1 shift under the sqrt so exact-zero distances on
    the discarded diagonal cannot poison the backward pass with 0 * inf.

    Consumed entries carry a 1e-14 shift for the same reason: two rows can
    coincide exactly (e.g. features of byte-identical images), where the
    true distance gradient is undefined; the shift selects the zero
    subgradient while moving d=1 by under 1e-14.
    """
    n, d = a.shape
    m = b.shape[0]
    diff = a.reshape(n, 1, d) - b.reshape(1, m, d)
    d2 = (diff * diff).sum(axis=-1)
    if safe_mask is not None:
        d2 = d2 + (1.0 - np.asarray(safe_mask, dtype=np.float64))
    return (d2 + 1e-14).sqrt()


def gradient_check(f, params, eps: float = 1e-5) -> float:
    """Max relative error between backward() gradients of f() and central differences.

    f is a zero-argument callable returning a scalar Tensor and must be a pure
    function of `params`. Relative error uses max(1, |analytic|) in the
    denominator so tiny gradients are compared absolutely.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise NumericError(f"gradient_check: eps {eps} outside [1e-6, 1e-4]")
    for p in params:
        p.zero_grad()
    y = f()
    if y.data.size != 1:
        raise ShapeError("gradient_check: f must return a scalar")
    y.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = f().item()
            flat[i] = keep - eps
            lo = f().item()
            flat[i] = keep
            numeric = (hi - lo) / (2.0 * eps)
            if not np.isfinite(numeric):
                raise NumericError("gradient_check: non-finite finite-difference value")
            err = abs(g.reshape(-1)[i] - numeric) / max(1.0, abs(g.reshape(-1)[i]))
            worst = max(worst, err)
        p.zero_grad()
    return worst
