"""Dense tensors with reverse-mode automatic differentiation.

A `Tensor` wraps a contiguous float32/float64 numpy array.  Operations
record their inputs and a local backward rule on the output; `backward`
walks the recorded graph once in reverse topological order and
accumulates gradients additively into every reachable `requires_grad`
leaf.  Backward rules for the ops that can appear inside a gradient
penalty (conv, transposed conv, leaky_relu, matmul, add/mul, reductions)
are themselves written in terms of tensor ops, so `backward(...,
create_graph=True)` yields a differentiable gradient for double
backprop.

There is no broadcasting beyond numpy's, no dtype zoo (float32 for
training, float64 for finite-difference tests), and no in-place autograd
mutation: tensors are immutable after construction except for the `grad`
accumulator.
"""

from __future__ import annotations

import contextlib

import numpy as np

from . import rng
from .errors import ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def enable_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = True
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None        # numpy accumulator, lazily allocated
        self._parents = ()
        self._backward_fn = None
        self.name = name

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag}, requires_grad={self.requires_grad})"

    def is_leaf(self):
        return self._backward_fn is None

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        backward(self)

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other, self.dtype)
        return mul(self, pow_const(other, -1.0))

    def __rtruediv__(self, other):
        return mul(_as_tensor(other, self.dtype), pow_const(self, -1.0))

    def __pow__(self, p):
        return pow_const(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _as_tensor(x, dtype=np.float32):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def apply_op(data, parents, backward_fn):
    """Create an op output tensor; `backward_fn(grad) -> per-parent grads`.

    The rule receives the upstream gradient as a Tensor and returns one
    Tensor (or None) per parent.  Recording is skipped when grad mode is
    off or no parent requires grad, so the same code serves inference.
    """
    rg = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = rg
    out.grad = None
    out._parents = tuple(parents) if rg else ()
    out._backward_fn = backward_fn if rg else None
    out.name = None
    return out


# -- backward engine -----------------------------------------------------------


def _topo_order(root):
    """Nodes reachable from root through grad-requiring edges, parents first."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def _run_backward(loss, seed_grad, create_graph, wanted=None):
    """Core reverse sweep.  Returns {id(tensor): grad Tensor} for leaves
    (and for `wanted` ids when given).  Each node is expanded exactly once."""
    order = _topo_order(loss)
    grads = {id(loss): seed_grad}
    out = {}
    ctx = enable_grad() if create_graph else no_grad()
    with ctx:
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if wanted is not None and id(node) in wanted:
                prev = out.get(id(node))
                out[id(node)] = g if prev is None else add(prev, g)
            if node._backward_fn is None:
                if wanted is None:
                    out[id(node)] = g
                continue
            parent_grads = node._backward_fn(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.shape:
                    raise ShapeError("backward", pg.shape, p.shape,
                                     detail="gradient/parent mismatch")
                cur = grads.get(id(p))
                grads[id(p)] = pg if cur is None else add(cur, pg)
    return out


def backward(loss):
    """Accumulate gradients of a scalar loss into every reachable
    requires_grad leaf's `.grad` (additively across calls)."""
    if loss.size != 1:
        raise ShapeError("backward", loss.shape, (), detail="loss must be scalar")
    if not loss.requires_grad:
        return
    seed_grad = Tensor(np.ones_like(loss.data))
    leaf_grads = _run_backward(loss, seed_grad, create_graph=False)
    for node in _topo_order(loss):
        g = leaf_grads.get(id(node))
        if g is None or not node.is_leaf():
            continue
        node.grad = g.data.copy() if node.grad is None else node.grad + g.data


def grad_wrt(loss, inputs, create_graph=False):
    """Functional gradient of a scalar loss w.r.t. `inputs`.

    Does not touch `.grad`.  With create_graph=True the returned tensors
    are themselves differentiable (for gradient penalties)."""
    if loss.size != 1:
        raise ShapeError("grad_wrt", loss.shape, (), detail="loss must be scalar")
    wanted = {id(t) for t in inputs}
    seed_grad = Tensor(np.ones_like(loss.data))
    found = _run_backward(loss, seed_grad, create_graph, wanted=wanted)
    result = []
    for t in inputs:
        g = found.get(id(t))
        if g is None:
            g = Tensor(np.zeros_like(t.data))
        result.append(g)
    return result


# -- elementwise / structural ops ----------------------------------------------


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient Tensor back to `shape`."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = sum_(g, axis=tuple(range(extra)), keepdims=False)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = sum_(g, axis=axes, keepdims=True)
    return g


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None
    return apply_op(data, (a, b), lambda g: (_unbroadcast(g, a.shape),
                                             _unbroadcast(g, b.shape)))


def neg(a):
    return apply_op(-a.data, (a,), lambda g: (neg(g),))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None
    return apply_op(data, (a, b), lambda g: (_unbroadcast(mul(g, b), a.shape),
                                             _unbroadcast(mul(g, a), b.shape)))


def pow_const(a, p):
    p = float(p)
    data = a.data ** p
    def bw(g):
        return (mul(g, mul(pow_const(a, p - 1.0), Tensor(np.asarray(p, dtype=a.dtype)))),)
    return apply_op(data, (a,), bw)


def exp(a):
    out = apply_op(np.exp(a.data), (a,), None)
    out._backward_fn = (lambda g: (mul(g, out),)) if out.requires_grad else None
    return out


def log(a):
    return apply_op(np.log(a.data), (a,), lambda g: (mul(g, pow_const(a, -1.0)),))


def sqrt(a):
    return pow_const(a, 0.5)


def abs_(a):
    sign = np.sign(a.data)
    return apply_op(np.abs(a.data), (a,), lambda g: (mul(g, Tensor(sign)),))


def sigmoid(a):
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-a.data))
    out = apply_op(s, (a,), None)
    if out.requires_grad:
        out._backward_fn = lambda g: (mul(g, mul(out, add(1.0, neg(out)))),)
    return out


def softplus(a):
    # log(1 + e^x), computed stably as max(x,0) + log1p(e^{-|x|})
    x = a.data
    data = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return apply_op(data, (a,), lambda g: (mul(g, sigmoid(a)),))


def leaky_relu(a, slope=0.2):
    mask = np.where(a.data > 0, np.asarray(1.0, a.dtype), np.asarray(slope, a.dtype))
    return apply_op(a.data * mask, (a,), lambda g: (mul(g, Tensor(mask)),))


def relu(a):
    return leaky_relu(a, 0.0)


def dropout(a, p, training):
    """Inverted dropout; identity when not training.  Mask drawn from the
    global rng so fixed seeds reproduce runs."""
    if not training or p <= 0.0:
        return a
    keep = (rng.uniform(a.shape) >= p).astype(a.dtype) / np.asarray(1.0 - p, a.dtype)
    return mul(a, Tensor(keep))


def sum_(a, axis=None, keepdims=False):
    if axis is None:
        ax = tuple(range(a.ndim))
    elif isinstance(axis, int):
        ax = (axis,)
    else:
        ax = tuple(axis)
    data = a.data.sum(axis=ax, keepdims=keepdims)

    def bw(g):
        gd = g
        if not keepdims and a.ndim:
            shape = list(a.shape)
            for i in ax:
                shape[i] = 1
            gd = reshape(g, tuple(shape))
        return (broadcast_to(gd, a.shape),)

    return apply_op(data, (a,), bw)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.size
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in ax]))
    return mul(sum_(a, axis, keepdims), Tensor(np.asarray(1.0 / n, a.dtype)))


def broadcast_to(a, shape):
    if a.shape == tuple(shape):
        return a
    data = np.broadcast_to(a.data, shape).copy()
    return apply_op(data, (a,), lambda g: (_unbroadcast(g, a.shape),))


def reshape(a, shape):
    data = a.data.reshape(shape)
    return apply_op(data, (a,), lambda g: (reshape(g, a.shape),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    data = np.ascontiguousarray(a.data.transpose(axes))
    return apply_op(data, (a,), lambda g: (transpose(g, inv),))


def slice_(a, key):
    data = a.data[key]
    if np.isscalar(data) or data.ndim == 0:
        data = np.asarray(data, dtype=a.dtype)

    def bw(g):
        full = np.zeros_like(a.data)
        full[key] = g.data
        return (Tensor(full),)

    return apply_op(data, (a,), bw)


def concat(tensors, axis=0):
    tensors = list(tensors)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        outs = []
        for t, o, s in zip(tensors, offsets, sizes):
            key = [slice(None)] * g.ndim
            key[axis] = slice(int(o), int(o + s))
            outs.append(slice_(g, tuple(key)))
        return tuple(outs)

    return apply_op(data, tuple(tensors), bw)


def gather_rows(table, idx):
    """Select rows of a 2-D table; backward scatter-adds into the table."""
    idx = np.asarray(idx, dtype=np.int64)
    data = table.data[idx]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g.data)
        return (Tensor(full),)

    return apply_op(data, (table,), bw)


def softmax(a, axis=-1):
    """Max-subtracted softmax along one axis (stable for large inputs)."""
    m = a.data.max(axis=axis, keepdims=True)
    e = exp(add(a, Tensor(-m)))
    return mul(e, pow_const(sum_(e, axis=axis, keepdims=True), -1.0))


def group_norm(a, groups, eps=1e-5):
    """Per-(sample, group) normalization of an (N, C, H, W) tensor, no affine."""
    n, c, h, w = a.shape
    if c % groups:
        raise ShapeError("group_norm", a.shape, (groups,), detail="channels % groups != 0")
    xg = reshape(a, (n, groups, (c // groups) * h * w))
    mu = mean(xg, axis=2, keepdims=True)
    xc = add(xg, neg(mu))
    var = mean(mul(xc, xc), axis=2, keepdims=True)
    y = mul(xc, pow_const(add(var, Tensor(np.asarray(eps, a.dtype))), -0.5))
    return reshape(y, (n, c, h, w))


def mse(a, b):
    d = add(a, neg(_as_tensor(b, a.dtype)))
    return mean(mul(d, d))


def l1(a, b):
    return mean(abs_(add(a, neg(_as_tensor(b, a.dtype)))))


def matmul(a, b):
    """2-D or same-batch 3-D matrix product."""
    if a.ndim != b.ndim or a.ndim not in (2, 3) or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if a.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch mismatch")
    data = a.data @ b.data
    tr = (0, 2, 1) if a.ndim == 3 else (1, 0)

    def bw(g):
        return (matmul(g, transpose(b, tr)), matmul(transpose(a, tr), g))

    return apply_op(data, (a, b), bw)


# -- image ops -------------------------------------------------------------------


def _pad_hw(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _conv_cols(x, kh, kw, stride, padding):
    """im2col: (N,C,H,W) -> (N*Ho*Wo, C*kh*kw) plus output spatial size."""
    xp = _pad_hw(x, padding)
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]                    # (N,C,Ho,Wo,kh,kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def _conv_weight_grad(x, g, kh, kw, stride, padding):
    """d(conv2d(x, w))/dw given upstream grad g of shape (N,Co,Ho,Wo)."""
    cols, ho, wo = _conv_cols(x, kh, kw, stride, padding)
    n, co = g.shape[0], g.shape[1]
    g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
    return (g2.T @ cols).reshape(co, x.shape[1], kh, kw)


def _scatter_cols(gcols, in_shape, kh, kw, stride, padding):
    """col2im accumulate: inverse of _conv_cols' gather."""
    n, c, h, w = in_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    gk = gcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, c, hp, wp), dtype=gcols.dtype)
    for ki in range(kh):
        for kj in range(kw):
            out[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += gk[:, :, ki, kj]
    if padding:
        out = out[:, :, padding:hp - padding, padding:wp - padding]
    return np.ascontiguousarray(out)


def conv2d(x, w, stride=1, padding=0):
    """Cross-correlation of (N,Cin,H,W) with (Cout,Cin,kh,kw)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    co, ci, kh, kw = w.shape
    cols, ho, wo = _conv_cols(x.data, kh, kw, stride, padding)
    n = x.shape[0]
    out = (cols @ w.data.reshape(co, ci * kh * kw).T)
    out = out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gx = conv_transpose2d(g, w, stride=stride, padding=padding,
                                  output_size=(x.shape[2], x.shape[3]))
        if w.requires_grad:
            gw = Tensor(_conv_weight_grad(x.data, g.data, kh, kw, stride, padding))
        return (gx, gw)

    return apply_op(out, (x, w), bw)


def conv_transpose2d(x, w, stride=1, padding=0, output_size=None):
    """Transposed conv of (N,Cin,H,W) with (Cin,Cout,kh,kw); exact adjoint of
    conv2d with the same stride/padding (used as its input-backward)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError("conv_transpose2d", x.shape, w.shape)
    ci, co, kh, kw = w.shape
    n, _, h, w_in = x.shape
    ho = (h - 1) * stride + kh - 2 * padding
    wo = (w_in - 1) * stride + kw - 2 * padding
    if output_size is not None:
        ho, wo = output_size
    x2 = x.data.transpose(0, 2, 3, 1).reshape(n * h * w_in, ci)
    gcols = x2 @ w.data.reshape(ci, co * kh * kw)
    out = _scatter_cols(gcols, (n, co, ho, wo), kh, kw, stride, padding)

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gx = conv2d(g, transpose(w, (1, 0, 2, 3)), stride=stride, padding=padding)
            if gx.shape != x.shape:
                raise ShapeError("conv_transpose2d.backward", gx.shape, x.shape)
        if w.requires_grad:
            # role swap makes the conv weight-grad routine emit (Cin,Cout,kh,kw)
            gwd = _conv_weight_grad(g.data, x.data, kh, kw, stride, padding)
            gw = Tensor(gwd)
        return (gx, gw)

    return apply_op(out, (x, w), bw)


def nearest_upsample(x, scale=2):
    data = x.data.repeat(scale, axis=2).repeat(scale, axis=3)

    def bw(g):
        n, c, h, w = x.shape
        gr = reshape(g, (n, c, h, scale, w, scale))
        return (sum_(gr, axis=(3, 5)),)

    return apply_op(data, (x,), bw)


def avg_pool2d(x, k=2):
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError("avg_pool2d", x.shape, (k, k), detail="size not divisible")
    xr = reshape(x, (n, c, h // k, k, w // k, k))
    return mul(sum_(xr, axis=(3, 5)), Tensor(np.asarray(1.0 / (k * k), x.dtype)))


def _resize_axis_matrix(n_in, n_out, dtype):
    """Row-stochastic 1-D bilinear resize matrix, half-pixel centers."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    t = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    t = np.clip(t, 0.0, n_in - 1.0)
    i0 = np.floor(t).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = t - i0
    m[np.arange(n_out), i0] += (1.0 - f)
    m[np.arange(n_out), i1] += f
    return m


def bilinear_resize(x, target_h, target_w):
    """Separable bilinear resize of (..., H, W), half-pixel center convention."""
    h, w = x.shape[-2], x.shape[-1]
    ry = _resize_axis_matrix(h, target_h, x.dtype)
    rx = _resize_axis_matrix(w, target_w, x.dtype)
    lead = x.shape[:-2]
    x2 = reshape(x, (-1, h, w)) if lead else reshape(x, (1, h, w))
    b = x2.shape[0]
    ryb = Tensor(np.broadcast_to(ry, (b,) + ry.shape).copy())
    rxb = Tensor(np.broadcast_to(rx.T, (b,) + rx.T.shape).copy())
    out = matmul(matmul(ryb, x2), rxb)
    return reshape(out, lead + (target_h, target_w))
