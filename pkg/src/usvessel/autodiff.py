"""Small reverse-mode differentiation core for volumetric networks.

Only the operations a 3D U-Net needs are provided, each with its own
hand-written backward rule. Tensors are laid out as
``(batch, channels, x, y, z)``.

The graph is implicit: every op output keeps references to its parents and a
closure mapping the output gradient to parent gradients. :func:`backward`
walks the graph in reverse topological order.

    >>> w = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    >>> backward(total(w))
    >>> w.grad
    array([1., 1., 1.])
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "GraphError",
    "NonFiniteError",
    "backward",
    "topological_order",
    "conv3d",
    "pointwise_conv3d",
    "maxpool3d",
    "upconv3d",
    "concat_channels",
    "relu",
    "sigmoid",
    "instance_norm",
    "total",
    "add",
    "scale",
    "l1_norm",
    "make_op",
]

INSTANCE_NORM_EPS = 1e-5


class GraphError(RuntimeError):
    """Raised for malformed graphs (cycles, non-scalar losses)."""


class NonFiniteError(FloatingPointError):
    """Raised when a forward value or gradient contains NaN or Inf."""


def _check_finite(arr, what):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """N-d array with an optional gradient slot.

    Leaf tensors created with ``requires_grad=True`` accumulate gradients
    across :func:`backward` calls until :meth:`zero_grad` is called.
    """

    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, value, requires_grad=False, name=None):
        value = np.asarray(value)
        if not np.issubdtype(value.dtype, np.floating):
            value = value.astype(np.float64)
        _check_finite(value, name or "tensor")
        self.value = value
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def is_leaf(self):
        return self._backward is None

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.value)

    def numpy(self):
        return self.value

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        op = f" op={self._op}" if self._op else ""
        return f"<Tensor{label} shape={self.shape} dtype={self.dtype}{op}>"


def make_op(value, parents, backward_fn, op_name):
    """Wrap an op result; ``backward_fn(g)`` returns one gradient per parent.

    Parents that do not require gradients may receive ``None``.
    """
    _check_finite(value, op_name)
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._op = op_name
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def topological_order(root):
    """Nodes reachable from ``root`` that require grad, parents first."""
    order = []
    state = {}  # id -> 1 visiting, 2 done
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        mark = state.get(key)
        if mark == 2:
            continue
        if mark == 1:
            raise GraphError("cycle detected in computation graph")
        state[key] = 1
        stack.append((node, True))
        for parent in node._parents:
            if not parent.requires_grad:
                continue
            pmark = state.get(id(parent))
            if pmark == 1:
                raise GraphError("cycle detected in computation graph")
            if pmark is None:
                stack.append((parent, False))
    return order


def backward(loss):
    """Populate ``.grad`` of every leaf tensor that ``loss`` depends on."""
    if not isinstance(loss, Tensor) or loss.value.size != 1:
        raise GraphError("backward requires a scalar loss tensor")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            _check_finite(g, f"gradient of {node.name or 'leaf'}")
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# 3x3x3 convolution on a flattened, zero-padded layout.
#
# A (b, c, X, Y, Z) array is padded by one voxel per face and flattened per
# channel to (c, b * (X+2)(Y+2)(Z+2)). In that layout every kernel tap is a
# constant offset, so each tap is one dense matrix product over a contiguous
# window. Outputs computed at padding positions are discarded on unpacking.


class _FlatGeom:
    __slots__ = ("b", "spatial", "sx", "sy", "n", "m", "length")

    def __init__(self, b, spatial):
        X, Y, Z = spatial
        self.b = b
        self.spatial = spatial
        self.sy = Z + 2
        self.sx = (Y + 2) * (Z + 2)
        self.n = b * (X + 2) * (Y + 2) * (Z + 2)
        self.m = self.sx + self.sy + 1
        self.length = self.n - 2 * self.m

    def offsets(self):
        return [i * self.sx + j * self.sy + k for i in range(3) for j in range(3) for k in range(3)]


def _to_flat(x, geom):
    b, c = x.shape[:2]
    X, Y, Z = geom.spatial
    padded = np.zeros((c, b, X + 2, Y + 2, Z + 2), dtype=x.dtype)
    padded[:, :, 1:-1, 1:-1, 1:-1] = x.transpose(1, 0, 2, 3, 4)
    return padded.reshape(c, geom.n)


def _from_flat(flat, geom):
    c = flat.shape[0]
    X, Y, Z = geom.spatial
    vol = flat.reshape(c, geom.b, X + 2, Y + 2, Z + 2)[:, :, 1:-1, 1:-1, 1:-1]
    return np.ascontiguousarray(vol.transpose(1, 0, 2, 3, 4))


_BLOCK = 1024
_PARTIAL_BYTES = 128 << 20


def _gather_block(flat, offsets, start, width, buf):
    cols = buf[:, :, :width]
    for t, off in enumerate(offsets):
        cols[t] = flat[:, start + off:start + off + width]
    return cols.reshape(-1, width)


def _correlate27(flat, weight, geom):
    """Apply a (cout, cin, 3, 3, 3) kernel to a flat padded input."""
    cout, cin = weight.shape[:2]
    m, length = geom.m, geom.length
    offsets = geom.offsets()
    out = np.zeros((cout, geom.n), dtype=flat.dtype)
    taps = weight.reshape(cout, cin, 27)
    if cin <= cout:
        # im2col over column blocks small enough to stay in cache
        w2 = np.ascontiguousarray(taps.transpose(0, 2, 1)).reshape(cout, 27 * cin)
        buf = np.empty((27, cin, _BLOCK), dtype=flat.dtype)
        for start in range(0, length, _BLOCK):
            width = min(_BLOCK, length - start)
            cols = _gather_block(flat, offsets, start, width, buf)
            np.matmul(w2, cols, out=out[:, m + start:m + start + width])
    else:
        # per-tap products over wide column chunks, then 27 shifted accumulations
        stacked = np.ascontiguousarray(taps.transpose(2, 0, 1)).reshape(27 * cout, cin)
        chunk = max(8 * m, _PARTIAL_BYTES // (27 * cout * flat.itemsize) - 2 * m)
        for start in range(0, length, chunk):
            width = min(chunk, length - start)
            partial = (stacked @ flat[:, start:start + width + 2 * m]).reshape(27, cout, -1)
            inner = out[:, m + start:m + start + width]
            for t, off in enumerate(offsets):
                inner += partial[t, :, off:off + width]
    return out


def _kernel_grad(flat_g, flat_in, geom):
    """Gradient of a 3x3x3 kernel given flat output gradient and flat input."""
    cout, cin = flat_g.shape[0], flat_in.shape[0]
    m, length = geom.m, geom.length
    offsets = geom.offsets()
    acc = np.zeros((cout, 27 * cin), dtype=flat_in.dtype)
    buf = np.empty((27, cin, _BLOCK), dtype=flat_in.dtype)
    for start in range(0, length, _BLOCK):
        width = min(_BLOCK, length - start)
        cols = _gather_block(flat_in, offsets, start, width, buf)
        acc += flat_g[:, m + start:m + start + width] @ cols.T
    return acc.reshape(cout, 27, cin).transpose(0, 2, 1).reshape(cout, cin, 3, 3, 3)


def conv3d(x, weight, bias):
    """Same-padded 3x3x3 cross-correlation, stride 1.

    ``x`` is ``(b, cin, X, Y, Z)``, ``weight`` is ``(cout, cin, 3, 3, 3)`` and
    ``bias`` is ``(cout,)``.
    """
    if x.ndim != 5 or weight.ndim != 5 or weight.shape[2:] != (3, 3, 3):
        raise ValueError(f"conv3d expects 5-d input and a 3x3x3 kernel, got {x.shape} and {weight.shape}")
    if weight.shape[1] != x.shape[1]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, kernel expects {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"bias shape {bias.shape} does not match {weight.shape[0]} output channels")
    dtype = np.result_type(x.dtype, weight.dtype)
    xv = x.value.astype(dtype, copy=False)
    wv = weight.value.astype(dtype, copy=False)
    geom = _FlatGeom(x.shape[0], x.shape[2:])
    flat_in = _to_flat(xv, geom)
    out = _from_flat(_correlate27(flat_in, wv, geom), geom)
    out += bias.value.astype(dtype, copy=False).reshape(1, -1, 1, 1, 1)

    def _backward(g):
        flat_g = _to_flat(g, geom)
        gx = gw = gb = None
        if x.requires_grad:
            flipped = np.ascontiguousarray(wv[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
            gx = _from_flat(_correlate27(flat_g, flipped, geom), geom).astype(x.dtype, copy=False)
        if weight.requires_grad:
            gw = _kernel_grad(flat_g, flat_in, geom).astype(weight.dtype, copy=False)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(bias.dtype)
        return gx, gw, gb

    return make_op(out, (x, weight, bias), _backward, "conv3d")


def pointwise_conv3d(x, weight, bias):
    """1x1x1 convolution: ``weight`` is ``(cout, cin)``."""
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ValueError(f"pointwise kernel {weight.shape} does not match input {x.shape}")
    xv, wv = x.value, weight.value
    out = np.einsum("oc,bcxyz->boxyz", wv, xv, optimize=True)
    out += bias.value.reshape(1, -1, 1, 1, 1)

    def _backward(g):
        gx = np.einsum("oc,boxyz->bcxyz", wv, g, optimize=True) if x.requires_grad else None
        gw = np.einsum("boxyz,bcxyz->oc", g, xv, optimize=True) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(bias.dtype) if bias.requires_grad else None
        return gx, gw, gb

    return make_op(out, (x, weight, bias), _backward, "pointwise_conv3d")


def _windows(v):
    b, c, X, Y, Z = v.shape
    return v.reshape(b, c, X // 2, 2, Y // 2, 2, Z // 2, 2).transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(
        b, c, X // 2, Y // 2, Z // 2, 8
    )


def maxpool3d(x):
    """2x2x2 max pooling with stride 2.

    Returns ``(output, indices)`` where ``indices`` holds the winning
    position (0..7, row-major within the window) of every output voxel.
    Ties go to the lowest index.
    """
    b, c, X, Y, Z = x.shape
    if X % 2 or Y % 2 or Z % 2:
        raise ValueError(f"maxpool3d needs even spatial dims, got {(X, Y, Z)}")
    win = _windows(x.value)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def _backward(g):
        gwin = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(b, c, X // 2, Y // 2, Z // 2, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        return (gx.reshape(x.shape),)

    return make_op(np.ascontiguousarray(out), (x,), _backward, "maxpool3d"), idx


def upconv3d(x, weight):
    """2x2x2 transposed convolution with stride 2; ``weight`` is ``(cin, cout, 2, 2, 2)``."""
    b, cin, X, Y, Z = x.shape
    if weight.ndim != 5 or weight.shape[0] != cin or weight.shape[2:] != (2, 2, 2):
        raise ValueError(f"upconv3d kernel {weight.shape} does not match input {x.shape}")
    cout = weight.shape[1]
    xv = x.value
    wmat = weight.value.reshape(cin, cout * 8)
    xmat = xv.transpose(0, 2, 3, 4, 1).reshape(-1, cin)
    out = (xmat @ wmat).reshape(b, X, Y, Z, cout, 2, 2, 2)
    out = np.ascontiguousarray(out.transpose(0, 4, 1, 5, 2, 6, 3, 7)).reshape(b, cout, 2 * X, 2 * Y, 2 * Z)

    def _backward(g):
        gmat = g.reshape(b, cout, X, 2, Y, 2, Z, 2).transpose(0, 2, 4, 6, 1, 3, 5, 7).reshape(-1, cout * 8)
        gx = gw = None
        if x.requires_grad:
            gx = np.ascontiguousarray((gmat @ wmat.T).reshape(b, X, Y, Z, cin).transpose(0, 4, 1, 2, 3))
        if weight.requires_grad:
            gw = (xmat.T @ gmat).reshape(weight.shape)
        return gx, gw

    return make_op(out, (x, weight), _backward, "upconv3d")


def concat_channels(a, b):
    """Stack the channels of ``a`` followed by those of ``b``."""
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"cannot concatenate {a.shape} and {b.shape}: batch/spatial dims differ")
    ca = a.shape[1]
    out = np.concatenate([a.value, b.value], axis=1)

    def _backward(g):
        return g[:, :ca], g[:, ca:]

    return make_op(out, (a, b), _backward, "concat_channels")


def relu(x):
    mask = x.value > 0
    out = np.where(mask, x.value, 0).astype(x.dtype, copy=False)
    return make_op(out, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x):
    s = expit(x.value)
    return make_op(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def instance_norm(x, gain, bias, eps=INSTANCE_NORM_EPS):
    """Normalize each (batch, channel) slice, then apply per-channel affine."""
    axes = (2, 3, 4)
    n = int(np.prod(x.shape[2:]))
    mean = x.value.mean(axis=axes, keepdims=True, dtype=np.float64)
    centered = x.value - mean.astype(x.dtype)
    var = np.mean(np.square(centered, dtype=np.float64), axis=axes, keepdims=True)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = centered * inv_std
    gv = gain.value.reshape(1, -1, 1, 1, 1)
    out = xhat * gv + bias.value.reshape(1, -1, 1, 1, 1)

    def _backward(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            dxhat = g * gv
            mean_d = dxhat.mean(axis=axes, keepdims=True, dtype=np.float64)
            mean_dx = np.einsum("bcxyz,bcxyz->bc", dxhat, xhat, dtype=np.float64).reshape(mean_d.shape) / n
            gx = (dxhat - mean_d.astype(x.dtype) - xhat * mean_dx.astype(x.dtype)) * inv_std
        if gain.requires_grad:
            ggain = np.einsum("bcxyz,bcxyz->c", g, xhat, dtype=np.float64).astype(gain.dtype)
        if bias.requires_grad:
            gbias = g.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(bias.dtype)
        return gx, ggain, gbias

    return make_op(out.astype(x.dtype, copy=False), (x, gain, bias), _backward, "instance_norm")


def total(x):
    """Sum of all entries as a scalar tensor (float64 accumulation)."""
    out = np.asarray(x.value.sum(dtype=np.float64))
    return make_op(out, (x,), lambda g: (np.full(x.shape, g, dtype=x.dtype),), "total")


def add(a, b):
    if a.shape != b.shape:
        raise ValueError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return make_op(a.value + b.value, (a, b), lambda g: (g, g), "add")


def scale(x, factor):
    factor = float(factor)
    return make_op(x.value * factor, (x,), lambda g: ((g * factor).astype(x.dtype, copy=False),), "scale")


def l1_norm(x):
    """Sum of absolute values; subgradient 0 at 0."""
    out = np.asarray(np.abs(x.value).sum(dtype=np.float64))
    return make_op(out, (x,), lambda g: ((g * np.sign(x.value)).astype(x.dtype),), "l1_norm")
