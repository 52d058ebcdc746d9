"""Dense float64 tensors with reverse-mode differentiation and the image kernels the network needs.

Image tensors are laid out batch x channels x height x width. Scalars (losses) are
0-d tensors. Every op checks its shape contract and raises ``ContractViolation``.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ContractViolation, NumericError

# When not None, relu and max_pool2 append their branch decisions here.
# Used by the gradient checker to detect a finite-difference step that crosses a kink.
_branch_log: list | None = None


@contextlib.contextmanager
def record_branches():
    """Collect the piecewise branch choices (relu signs, pooling argmaxes) made inside the block."""
    global _branch_log
    saved, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = saved


class Tensor:
    """A float64 array plus an optional gradient buffer and the op that produced it."""

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self.softmax_logits = None  # set when produced by softmax_channels

    @classmethod
    def _from_op(cls, data, parents, backward):
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def item(self):
        if self.data.size != 1:
            raise ContractViolation(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def sum(self):
        shape = self.data.shape

        def backward(g):
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._from_op(np.sum(self.data), (self,), backward)

    def __add__(self, other):
        if isinstance(other, Tensor):
            return elementwise_add(self, other)
        return Tensor._from_op(self.data + float(other), (self,), lambda g: (g,))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return elementwise_mul(self, other)
        k = float(other)
        return Tensor._from_op(self.data * k, (self,), lambda g: (g * k,))

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-other)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def backward(loss):
    """Populate ``.grad`` on every tensor that ``loss`` depends on.

    Intermediate tensors get a fresh gradient on each call. Leaf tensors
    accumulate, so a training step resets parameter gradients first
    (``ParamSet.zero_grad``) and then calls this once.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractViolation("loss does not depend on any tensor that requires grad")
    order = _topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in order:
        if node.grad is not None and not np.all(np.isfinite(node.grad)):
            raise NumericError(f"non-finite gradient in {node!r}")


# --- elementwise -------------------------------------------------------------


def elementwise_add(a, b):
    if a.shape != b.shape:
        raise ContractViolation(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g))


def elementwise_mul(a, b):
    if a.shape != b.shape:
        raise ContractViolation(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    return Tensor._from_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def square_sum(x):
    """Sum of squared entries."""
    return Tensor._from_op(np.sum(x.data * x.data), (x,), lambda g: (2.0 * g * x.data,))


def relu(x):
    mask = x.data > 0
    if _branch_log is not None:
        _branch_log.append(np.packbits(mask))
    # np.maximum keeps NaN visible to the finiteness checks downstream
    return Tensor._from_op(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


def _require_4d(x, op):
    if x.data.ndim != 4:
        raise ContractViolation(f"{op} expects a b x c x h x w tensor, got shape {x.shape}")


def channel_concat(a, b):
    _require_4d(a, "channel_concat")
    _require_4d(b, "channel_concat")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ContractViolation(f"concat needs equal batch/spatial extents, got {a.shape} and {b.shape}")
    ca = a.shape[1]

    def backward(g):
        return g[:, :ca], g[:, ca:]

    return Tensor._from_op(np.concatenate([a.data, b.data], axis=1), (a, b), backward)


def softmax_channels(x):
    """Softmax over axis 1."""
    _require_4d(x, "softmax_channels")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=1, keepdims=True)),)

    out = Tensor._from_op(y, (x,), backward)
    out.softmax_logits = x
    return out


def max_pool2(x):
    """2x2 max pooling, stride 2. Ties route the gradient to the first element in row-major order."""
    _require_4d(x, "max_pool2")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ContractViolation(f"max_pool2 needs even spatial extents, got {h}x{w}")
    windows = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    idx = np.argmax(windows, axis=-1)
    if _branch_log is not None:
        _branch_log.append(idx.astype(np.uint8))
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        return (gw.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w),)

    return Tensor._from_op(out, (x,), backward)


# --- convolutions ------------------------------------------------------------


def _im2col(xp, k, stride, ho, wo):
    """(b, c, H, W) padded input -> (c*k*k, b*ho*wo) patch matrix."""
    b, c = xp.shape[:2]
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, k, k, b, ho, wo))
    for di in range(k):
        for dj in range(k):
            cols[:, di, dj] = xt[:, :, di : di + stride * (ho - 1) + 1 : stride, dj : dj + stride * (wo - 1) + 1 : stride]
    return cols.reshape(c * k * k, b * ho * wo)


def _col2im(cols, padded_shape, k, stride, ho, wo):
    """Adjoint of ``_im2col``: scatter-add patch columns back onto the padded (b, c, H, W) grid."""
    b, c, hp, wp = padded_shape
    cols = cols.reshape(c, k, k, b, ho, wo)
    out = np.zeros((c, b, hp, wp))
    for di in range(k):
        for dj in range(k):
            out[:, :, di : di + stride * (ho - 1) + 1 : stride, dj : dj + stride * (wo - 1) + 1 : stride] += cols[:, di, dj]
    return out.transpose(1, 0, 2, 3)


def _conv_out(n, k, stride, lo, hi):
    return (n + lo + hi - k) // stride + 1


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """Cross-correlation of ``x`` (b, ci, h, w) with ``kernel`` (co, ci, k, k) plus per-channel bias."""
    _require_4d(x, "conv2d")
    _require_4d(kernel, "conv2d kernel")
    if stride < 1 or padding < 0:
        raise ContractViolation(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    co, ci, k, k2 = kernel.shape
    if k != k2:
        raise ContractViolation(f"square kernels only, got {k}x{k2}")
    b, c, h, w = x.shape
    if c != ci:
        raise ContractViolation(f"kernel expects {ci} input channels, input has {c}")
    if bias is not None and bias.shape != (co,):
        raise ContractViolation(f"bias shape {bias.shape} does not match {co} output channels")
    ho, wo = _conv_out(h, k, stride, padding, padding), _conv_out(w, k, stride, padding, padding)
    if ho < 1 or wo < 1:
        raise ContractViolation(f"conv2d output would be empty for input {h}x{w}, kernel {k}, stride {stride}")

    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    kmat = kernel.data.reshape(co, ci * k * k)
    out = kmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(co, b, ho, wo).transpose(1, 0, 2, 3))

    def backward(g):
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(co, b * ho * wo)
        gk = (gm @ cols.T).reshape(kernel.shape)
        gx = None
        if x.requires_grad:
            gxp = _col2im(kmat.T @ gm, xp.shape, k, stride, ho, wo)
            gx = gxp[:, :, p : p + h, p : p + w] if p else gxp
            gx = np.ascontiguousarray(gx)
        gb = gm.sum(axis=1) if bias is not None else None
        return (gx, gk, gb)

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return Tensor._from_op(out, parents, backward)


def transposed_conv2d(x, kernel, stride=2, bias=None):
    """Upsample ``x`` (b, ci, h, w) by ``stride`` with ``kernel`` (ci, co, 2*stride, 2*stride).

    This is the adjoint of a stride-``stride`` convolution with the same kernel and
    padding ``stride // 2`` before / ``stride - stride // 2`` after, so the output is
    exactly ``stride * h`` by ``stride * w``.
    """
    _require_4d(x, "transposed_conv2d")
    _require_4d(kernel, "transposed_conv2d kernel")
    if stride < 1:
        raise ContractViolation(f"stride must be >= 1, got {stride}")
    ci, co, k, k2 = kernel.shape
    if k != k2 or k != 2 * stride:
        raise ContractViolation(f"kernel must be {2 * stride}x{2 * stride} for stride {stride}, got {k}x{k2}")
    b, c, h, w = x.shape
    if c != ci:
        raise ContractViolation(f"kernel expects {ci} input channels, input has {c}")
    if bias is not None and bias.shape != (co,):
        raise ContractViolation(f"bias shape {bias.shape} does not match {co} output channels")
    lo = stride // 2
    H, W = stride * h, stride * w
    full = (b, co, H + stride, W + stride)  # (h-1)*s + k rows before cropping

    kmat = kernel.data.reshape(ci, co * k * k)
    xm = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3)).reshape(ci, b * h * w)
    out = _col2im(kmat.T @ xm, full, k, stride, h, w)[:, :, lo : lo + H, lo : lo + W]
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        gp = np.zeros(full)
        gp[:, :, lo : lo + H, lo : lo + W] = g
        cols = _im2col(gp, k, stride, h, w)
        gx = None
        if x.requires_grad:
            gx = np.ascontiguousarray((kmat @ cols).reshape(ci, b, h, w).transpose(1, 0, 2, 3))
        gk = (xm @ cols.T).reshape(kernel.shape)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gk, gb)

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return Tensor._from_op(np.ascontiguousarray(out), parents, backward)
