"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every value in the lifting pipeline is a `Tensor` wrapping an ndarray.
Operations record a closure that accumulates analytic gradients into their
parents; `Tensor.backward()` replays those closures in reverse topological
order. All arithmetic is 64-bit: the gradient-check tolerances used by the
test suite (central differences at eps=1e-6) are not reachable in float32.
"""

from __future__ import annotations

import numpy as np

_GRAD_ENABLED = True

# log/sigmoid are clamped this far from their domain boundaries so that no
# primitive emits NaN/Inf for finite inputs.
DOMAIN_EPS = 1e-12


class no_grad:
    """Context manager that disables graph construction (evaluation mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


def _scatter_rows(rows: int, index: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Accumulate `values` rows into a fresh (rows, ...) buffer at `index`.

    The buffer comes from calloc, so untouched rows cost nothing; duplicate
    indices accumulate.
    """
    out = np.zeros((rows,) + values.shape[1:], dtype=np.float64)
    if index.size:
        np.add.at(out, index, values)
    return out


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


class Tensor:
    """A node in the computation graph.

    data/grad are same-shaped float64 arrays; `_parents` and `_backward`
    encode one reverse step. Leaves created with requires_grad=False are
    treated as constants and never receive gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_grad_owned")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = parents
        self._backward = backward
        self._grad_owned = False

    # -- graph bookkeeping ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, grad: np.ndarray) -> None:
        # copy-on-write: a single contribution is only borrowed (closures may
        # hand the same buffer to several parents); a second contribution
        # forces a fresh owned array before in-place accumulation
        if self.grad is None:
            self.grad = grad
            self._grad_owned = False
        elif not self._grad_owned:
            self.grad = self.grad + grad
            self._grad_owned = True
        else:
            self.grad += grad

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Backpropagate from this (scalar or any-shape) node.

        Seeds with ones and visits each node exactly once in reverse
        topological order (iterative postorder; the graphs built by the
        decoder stack are too deep for recursion limits to be trusted).
        """
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self._accumulate(np.ones(self.data.shape, dtype=np.float64))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_lift(other), -1.0))

    def __rsub__(self, other):
        return add(_lift(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)

    # convenience methods mirroring the free functions
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _lift(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _needs_graph(*tensors: Tensor) -> bool:
    return _GRAD_ENABLED and any(t.requires_grad for t in tensors)


def _make(data, parents, backward, requires):
    if requires:
        return Tensor(data, requires_grad=True, parents=parents, backward=backward)
    return Tensor(data)


# ---------------------------------------------------------------------------
# elementwise / arithmetic primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data + b.data
    if not _needs_graph(a, b):
        return Tensor(out_data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return Tensor(out_data, True, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data * b.data
    if not _needs_graph(a, b):
        return Tensor(out_data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return Tensor(out_data, True, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data / b.data
    if not _needs_graph(a, b):
        return Tensor(out_data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor(out_data, True, (a, b), backward)


def pow_const(a, exponent: float) -> Tensor:
    a = _lift(a)
    exponent = float(exponent)
    out_data = a.data**exponent
    if not _needs_graph(a):
        return Tensor(out_data)

    def backward(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1.0))

    return Tensor(out_data, True, (a,), backward)


def exp(a) -> Tensor:
    a = _lift(a)
    out_data = np.exp(a.data)
    if not _needs_graph(a):
        return Tensor(out_data)

    def backward(g):
        a._accumulate(g * out_data)

    return Tensor(out_data, True, (a,), backward)


def log(a) -> Tensor:
    a = _lift(a)
    clamped = np.maximum(a.data, DOMAIN_EPS)
    out_data = np.log(clamped)
    if not _needs_graph(a):
        return Tensor(out_data)

    def backward(g):
        a._accumulate(g / clamped)

    return Tensor(out_data, True, (a,), backward)


def sqrt(a) -> Tensor:
    a = _lift(a)
    out_data = np.sqrt(np.maximum(a.data, 0.0))
    if not _needs_graph(a):
        return Tensor(out_data)

    def backward(g):
        a._accumulate(g * 0.5 / np.maximum(out_data, DOMAIN_EPS))

    return Tensor(out_data, True, (a,), backward)


def sigmoid(a) -> Tensor:
    a = _lift(a)
    # numerically stable two-branch form; output clamped away from {0,1}
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    np.clip(out_data, DOMAIN_EPS, 1.0 - DOMAIN_EPS, out=out_data)
    if not _needs_graph(a):
        return Tensor(out_data)

    def backward(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return Tensor(out_data, True, (a,), backward)


def softplus(a) -> Tensor:
    """log(1 + exp(x)) in its overflow-free form; gradient is sigmoid(x)."""
    a = _lift(a)
    x = a.data
    out_data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    if not _needs_graph(a):
        return Tensor(out_data)

    def backward(g):
        sig = np.empty_like(x)
        pos = x >= 0
        sig[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        sig[~pos] = ex / (1.0 + ex)
        a._accumulate(g * sig)

    return Tensor(out_data, True, (a,), backward)


def relu(a) -> Tensor:
    a = _lift(a)
    out_data = np.maximum(a.data, 0.0)
    if not _needs_graph(a):
        return Tensor(out_data)
    mask = a.data > 0

    def backward(g):
        a._accumulate(g * mask)

    return Tensor(out_data, True, (a,), backward)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)
    if not _needs_graph(a):
        return Tensor(out_data)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    return Tensor(out_data, True, (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        count = a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def l2norm(a, axis=-1) -> Tensor:
    """Euclidean norm along `axis`; subgradient 0 where the norm is 0."""
    a = _lift(a)
    out_data = np.sqrt((a.data * a.data).sum(axis=axis))
    if not _needs_graph(a):
        return Tensor(out_data)

    def backward(g):
        safe = np.where(out_data > 0.0, out_data, 1.0)
        scale = np.expand_dims(g * (out_data > 0.0) / safe, axis)
        a._accumulate(scale * a.data)

    return Tensor(out_data, True, (a,), backward)


# ---------------------------------------------------------------------------
# shape primitives
# ---------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    out_data = a.data.reshape(shape)
    if not _needs_graph(a):
        return Tensor(out_data)

    def backward(g):
        a._accumulate(g.reshape(a.data.shape))

    return Tensor(out_data, True, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = _lift(a)
    axes = tuple(axes)
    out_data = a.data.transpose(axes)
    if not _needs_graph(a):
        return Tensor(out_data)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        a._accumulate(g.transpose(inverse))

    return Tensor(out_data, True, (a,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    if not _needs_graph(*tensors):
        return Tensor(out_data)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                t._accumulate(g[tuple(index)])

    return Tensor(out_data, True, tuple(tensors), backward)


def getitem(a, key) -> Tensor:
    """Basic (non-repeating) indexing; use `gather` for integer-array rows."""
    a = _lift(a)
    out_data = a.data[key]
    if not _needs_graph(a):
        return Tensor(out_data)

    def backward(g):
        buf = np.zeros(a.data.shape, dtype=np.float64)
        buf[key] = g
        a._accumulate(buf)

    return Tensor(out_data, True, (a,), backward)


def gather(a, index) -> Tensor:
    """Select rows along axis 0 with a 1-d integer array (duplicates allowed)."""
    a = _lift(a)
    index = np.asarray(index, dtype=np.intp)
    out_data = a.data[index]
    if not _needs_graph(a):
        return Tensor(out_data)

    def backward(g):
        a._accumulate(_scatter_rows(a.data.shape[0], index, g))

    return Tensor(out_data, True, (a,), backward)


class ScatterPlan:
    """Precomputed accumulation map for a scatter whose indices never change.

    Token pixels are fixed once a sample is prepared, so the lifting scatter
    runs thousands of times with the same index set; a csr matmul beats
    np.add.at by an order of magnitude there.
    """

    def __init__(self, index: np.ndarray, rows: int):
        import scipy.sparse as sp

        self.index = np.asarray(index, dtype=np.intp)
        self.rows = int(rows)
        n = self.index.shape[0]
        self.matrix = sp.csr_matrix(
            (np.ones(n), (self.index, np.arange(n))), shape=(self.rows, n)
        )

    def apply(self, values: np.ndarray) -> np.ndarray:
        flat = values.reshape(values.shape[0], -1)
        out = self.matrix @ flat
        return out.reshape((self.rows,) + values.shape[1:])


def scatter_add(values, index=None, rows: int | None = None, plan: ScatterPlan | None = None) -> Tensor:
    """out[index[i]] += values[i] over axis 0; out has `rows` rows.

    Duplicate indices accumulate; the backward pass is a plain gather. Pass a
    `ScatterPlan` instead of (index, rows) when the index set is reused.
    """
    values = _lift(values)
    if plan is not None:
        index, rows = plan.index, plan.rows
    else:
        index = np.asarray(index, dtype=np.intp)
    if index.shape[0] != values.data.shape[0]:
        raise ValueError(
            f"scatter_add index/value mismatch: {index.shape[0]} vs {values.data.shape[0]}"
        )
    if plan is not None:
        out_data = plan.apply(values.data)
    else:
        out_data = _scatter_rows(rows, index, values.data)
    if not _needs_graph(values):
        return Tensor(out_data)

    def backward(g):
        values._accumulate(g[index])

    return Tensor(out_data, True, (values,), backward)


# ---------------------------------------------------------------------------
# linear algebra / neural-net primitives
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim == 0 or b.data.ndim == 0:
        raise ValueError("matmul requires at least 1-d operands")
    out_data = np.matmul(a.data, b.data)
    if not _needs_graph(a, b):
        return Tensor(out_data)

    def backward(g):
        a_d, b_d = a.data, b.data
        # promote vectors so the stacked transpose rules below hold
        g_m = g
        a_m, b_m = a_d, b_d
        squeeze_a = a_d.ndim == 1
        squeeze_b = b_d.ndim == 1
        if squeeze_a:
            a_m = a_d[None, :]
            g_m = np.expand_dims(g_m, -2)
        if squeeze_b:
            b_m = b_d[:, None]
            g_m = np.expand_dims(g_m, -1)
        if a.requires_grad:
            ga = np.matmul(g_m, np.swapaxes(b_m, -1, -2))
            if squeeze_a:
                ga = np.squeeze(ga, -2)
            a._accumulate(_unbroadcast(ga, a_d.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a_m, -1, -2), g_m)
            if squeeze_b:
                gb = np.squeeze(gb, -1)
            b._accumulate(_unbroadcast(gb, b_d.shape))

    return Tensor(out_data, True, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """x @ weight + bias, the affine map used by every projection head."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def softmax(a, axis=-1) -> Tensor:
    a = _lift(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)
    if not _needs_graph(a):
        return Tensor(out_data)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        a._accumulate(out_data * (g - dot))

    return Tensor(out_data, True, (a,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    x, gain, bias = _lift(x), _lift(gain), _lift(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out_data = y * gain.data + bias.data
    if not _needs_graph(x, gain, bias):
        return Tensor(out_data)

    def backward(g):
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * y, gain.data.shape))
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.data.shape))
        if x.requires_grad:
            gy = g * gain.data
            mean_gy = gy.mean(axis=-1, keepdims=True)
            mean_gyy = (gy * y).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (gy - mean_gy - y * mean_gyy))

    return Tensor(out_data, True, (x, gain, bias), backward)


_CONV_INDEX_CACHE: dict = {}


def _conv_indices(h: int, w: int, dilation: int):
    """Tap index tables for a same-padded 3x3 convolution.

    `flat` maps output pixel -> 9 source cells in the padded grid; `inv`
    maps each padded cell -> the (pixel*9 + tap) slots that read it (-1
    where fewer than 9 readers exist, pointing at a zero pad row). The
    inverse table turns the input-gradient scatter into a plain gather.
    """
    key = (h, w, dilation)
    cached = _CONV_INDEX_CACHE.get(key)
    if cached is not None:
        return cached
    p = dilation
    hp, wp = h + 2 * p, w + 2 * p
    rows = np.arange(h)[:, None, None, None] + p
    cols = np.arange(w)[None, :, None, None] + p
    offs = np.array([-dilation, 0, dilation])
    tap_r = rows + offs[None, None, :, None]
    tap_c = cols + offs[None, None, None, :]
    flat = (tap_r * wp + tap_c).reshape(h * w, 9)
    inv = np.full((hp * wp, 9), -1, dtype=np.intp)
    pixel_slots = np.arange(h * w, dtype=np.intp) * 9
    for t in range(9):
        inv[flat[:, t], t] = pixel_slots + t
    _CONV_INDEX_CACHE[key] = (flat, inv, hp, wp)
    return flat, inv, hp, wp


def conv2d(x, weight, bias=None, dilation: int = 1) -> Tensor:
    """3x3 convolution, stride 1, same padding, optional dilation.

    x: (B, H, W, Cin); weight: (3, 3, Cin, Cout); bias: (Cout,).
    Implemented as im2col + matmul; tap indices are cached per (H, W, d).
    """
    x, weight = _lift(x), _lift(weight)
    if weight.data.shape[:2] != (3, 3):
        raise ValueError(f"conv2d supports 3x3 kernels, got {weight.data.shape[:2]}")
    b_sz, h, w, cin = x.data.shape
    cout = weight.data.shape[3]
    if weight.data.shape[2] != cin:
        raise ValueError(f"conv2d channel mismatch: {weight.data.shape} vs input {x.data.shape}")
    flat_idx, inv_idx, hp, wp = _conv_indices(h, w, dilation)
    xpad = np.zeros((b_sz, hp * wp, cin), dtype=np.float64)
    pad_view = xpad.reshape(b_sz, hp, wp, cin)
    pad_view[:, dilation : dilation + h, dilation : dilation + w, :] = x.data
    cols = xpad[:, flat_idx, :].reshape(b_sz, h * w, 9 * cin)
    w_mat = weight.data.reshape(9 * cin, cout)
    out_data = (cols @ w_mat).reshape(b_sz, h, w, cout)
    if bias is not None:
        bias = _lift(bias)
        out_data = out_data + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)
    if not _needs_graph(*parents):
        return Tensor(out_data)

    def backward(g):
        g2 = g.reshape(b_sz, h * w, cout)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=(0, 1)))
        if weight.requires_grad:
            gw = np.einsum("bpk,bpo->ko", cols, g2)
            weight._accumulate(gw.reshape(3, 3, cin, cout))
        if x.requires_grad:
            gcols = (g2 @ w_mat.T).reshape(b_sz, h * w * 9, cin)
            # append a zero slot so -1 entries of the inverse table read zeros
            gext = np.concatenate(
                [gcols, np.zeros((b_sz, 1, cin), dtype=np.float64)], axis=1
            )
            gpad = gext[:, inv_idx, :].sum(axis=2)
            gx = gpad.reshape(b_sz, hp, wp, cin)[
                :, dilation : dilation + h, dilation : dilation + w, :
            ]
            x._accumulate(gx)

    return Tensor(out_data, True, parents, backward)


# ---------------------------------------------------------------------------
# interpolation primitives
# ---------------------------------------------------------------------------


def _axis_index(coord: np.ndarray, n: int):
    """Map [-1,1] coordinates to node space (node i sits at 2(i+.5)/n - 1).

    Returns (i0, frac, in_range_mask); coordinates beyond the outermost node
    centers clamp, which zeroes their positional gradient.
    """
    u = (coord + 1.0) * 0.5 * n - 0.5
    inside = (u > 0.0) & (u < n - 1)
    u = np.clip(u, 0.0, n - 1.0)
    if n == 1:
        i0 = np.zeros_like(u, dtype=np.intp)
        return i0, np.zeros_like(u), np.zeros_like(u, dtype=bool)
    i0 = np.minimum(u.astype(np.intp), n - 2)
    frac = u - i0
    return i0, frac, inside


def trilinear_gather(volume, points) -> Tensor:
    """Sample a (B, X, Y, Z, C) volume at (B, Q, 3) points in [-1,1]^3.

    Standard 8-corner trilinear weights; differentiable in the volume and in
    the point coordinates (piecewise multilinear; clamped points get zero
    positional gradient). Also accepts unbatched (X,Y,Z,C) + (Q,3).
    """
    volume, points = _lift(volume), _lift(points)
    unbatched = volume.data.ndim == 4
    vol = volume.data[None] if unbatched else volume.data
    pts = points.data[None] if unbatched else points.data
    b_sz, nx, ny, nz, c = vol.shape
    q = pts.shape[1]
    ix, fx, mx = _axis_index(pts[..., 0], nx)
    iy, fy, my = _axis_index(pts[..., 1], ny)
    iz, fz, mz = _axis_index(pts[..., 2], nz)
    flat = vol.reshape(b_sz * nx * ny * nz, c)
    base = np.arange(b_sz, dtype=np.intp)[:, None] * (nx * ny * nz)

    corners = []
    weights = []
    for dx_ in (0, 1):
        wx = fx if dx_ else 1.0 - fx
        cx = np.minimum(ix + dx_, nx - 1)
        for dy_ in (0, 1):
            wy = fy if dy_ else 1.0 - fy
            cy = np.minimum(iy + dy_, ny - 1)
            for dz_ in (0, 1):
                wz = fz if dz_ else 1.0 - fz
                cz = np.minimum(iz + dz_, nz - 1)
                idx = base + (cx * ny + cy) * nz + cz
                corners.append(idx)
                weights.append((wx * wy * wz, wx, wy, wz, dx_, dy_, dz_))
    gathered = [flat[idx] for idx in corners]  # each (B, Q, C)
    out_data = np.zeros((b_sz, q, c), dtype=np.float64)
    for (wgt, *_), val in zip(weights, gathered):
        out_data += wgt[..., None] * val
    if unbatched:
        out_data = out_data[0]
    if not _needs_graph(volume, points):
        return Tensor(out_data)

    def backward(g):
        gb = g[None] if unbatched else g
        if volume.requires_grad:
            all_idx = np.concatenate([idx.ravel() for idx in corners])
            all_val = np.concatenate(
                [(wgt[..., None] * gb).reshape(-1, c) for (wgt, *_) in weights]
            )
            gvol = _scatter_rows(flat.shape[0], all_idx, all_val)
            volume._accumulate(
                gvol.reshape(vol.shape)[0] if unbatched else gvol.reshape(vol.shape)
            )
        if points.requires_grad:
            gp = np.zeros((b_sz, q, 3), dtype=np.float64)
            for (wgt, wx, wy, wz, dx_, dy_, dz_), val in zip(weights, gathered):
                dot = (gb * val).sum(axis=-1)
                sx = 1.0 if dx_ else -1.0
                sy = 1.0 if dy_ else -1.0
                sz = 1.0 if dz_ else -1.0
                gp[..., 0] += dot * sx * wy * wz
                gp[..., 1] += dot * wx * sy * wz
                gp[..., 2] += dot * wx * wy * sz
            # chain through u = (p+1)/2 * n - 1/2, masked where clamped
            gp[..., 0] *= mx * (0.5 * nx)
            gp[..., 1] *= my * (0.5 * ny)
            gp[..., 2] *= mz * (0.5 * nz)
            points._accumulate(gp[0] if unbatched else gp)

    return Tensor(out_data, True, (volume, points), backward)


def trilinear_gather_grouped(volume, points, point_group: np.ndarray, groups: int) -> Tensor:
    """Trilinear sampling where each point reads one channel group.

    volume: (B, X, Y, Z, C) with C divisible by `groups`; points: (B, Q, 3);
    point_group: (Q,) group id per point (same for every batch row). Returns
    (B, Q, C/groups). Multi-head deformable attention reads disjoint channel
    slices per head; restricting the gather to the point's own group moves
    `groups`-fold less data than sampling full channels and slicing after.
    """
    volume, points = _lift(volume), _lift(points)
    b_sz, nx, ny, nz, c = volume.data.shape
    if c % groups:
        raise ValueError(f"channels {c} not divisible by groups {groups}")
    cg = c // groups
    pts = points.data
    q = pts.shape[1]
    pg = np.asarray(point_group, dtype=np.intp)
    if pg.shape != (q,):
        raise ValueError("point_group must be (Q,)")
    ix, fx, mx = _axis_index(pts[..., 0], nx)
    iy, fy, my = _axis_index(pts[..., 1], ny)
    iz, fz, mz = _axis_index(pts[..., 2], nz)
    # rows of (B*X*Y*Z*groups, C/groups): cell * groups + group
    flat = volume.data.reshape(b_sz * nx * ny * nz * groups, cg)
    base = np.arange(b_sz, dtype=np.intp)[:, None] * (nx * ny * nz)
    corners, weights = [], []
    for dx_ in (0, 1):
        wx = fx if dx_ else 1.0 - fx
        cx = np.minimum(ix + dx_, nx - 1)
        for dy_ in (0, 1):
            wy = fy if dy_ else 1.0 - fy
            cy = np.minimum(iy + dy_, ny - 1)
            for dz_ in (0, 1):
                wz = fz if dz_ else 1.0 - fz
                cz = np.minimum(iz + dz_, nz - 1)
                cell = base + (cx * ny + cy) * nz + cz
                corners.append(cell * groups + pg[None, :])
                weights.append((wx * wy * wz, wx, wy, wz, dx_, dy_, dz_))
    gathered = [flat[idx] for idx in corners]
    out_data = np.zeros((b_sz, q, cg), dtype=np.float64)
    for (wgt, *_), val in zip(weights, gathered):
        out_data += wgt[..., None] * val
    if not _needs_graph(volume, points):
        return Tensor(out_data)

    def backward(g):
        if volume.requires_grad:
            all_idx = np.concatenate([idx.ravel() for idx in corners])
            all_val = np.concatenate(
                [(wgt[..., None] * g).reshape(-1, cg) for (wgt, *_) in weights]
            )
            gvol = _scatter_rows(flat.shape[0], all_idx, all_val)
            volume._accumulate(gvol.reshape(volume.data.shape))
        if points.requires_grad:
            gp = np.zeros((b_sz, q, 3), dtype=np.float64)
            for (wgt, wx, wy, wz, dx_, dy_, dz_), val in zip(weights, gathered):
                dot = (g * val).sum(axis=-1)
                sx = 1.0 if dx_ else -1.0
                sy = 1.0 if dy_ else -1.0
                sz = 1.0 if dz_ else -1.0
                gp[..., 0] += dot * sx * wy * wz
                gp[..., 1] += dot * wx * sy * wz
                gp[..., 2] += dot * wx * wy * sz
            gp[..., 0] *= mx * (0.5 * nx)
            gp[..., 1] *= my * (0.5 * ny)
            gp[..., 2] *= mz * (0.5 * nz)
            points._accumulate(gp)

    return Tensor(out_data, True, (volume, points), backward)


def bilinear_gather(grid, points) -> Tensor:
    """Sample a (B, H, W, C) grid at (B, Q, 2) points in [-1,1]^2.

    Same node convention and clamping as `trilinear_gather`; points carry
    (x, y) where x indexes the H axis and y the W axis.
    """
    grid, points = _lift(grid), _lift(points)
    unbatched = grid.data.ndim == 3
    gr = grid.data[None] if unbatched else grid.data
    pts = points.data[None] if unbatched else points.data
    b_sz, nh, nw, c = gr.shape
    q = pts.shape[1]
    ih, fh, mh = _axis_index(pts[..., 0], nh)
    iw, fw, mw = _axis_index(pts[..., 1], nw)
    flat = gr.reshape(b_sz * nh * nw, c)
    base = np.arange(b_sz, dtype=np.intp)[:, None] * (nh * nw)
    corners, weights = [], []
    for dh in (0, 1):
        wh = fh if dh else 1.0 - fh
        ch = np.minimum(ih + dh, nh - 1)
        for dw in (0, 1):
            ww = fw if dw else 1.0 - fw
            cw = np.minimum(iw + dw, nw - 1)
            corners.append(base + ch * nw + cw)
            weights.append((wh * ww, wh, ww, dh, dw))
    gathered = [flat[idx] for idx in corners]
    out_data = np.zeros((b_sz, q, c), dtype=np.float64)
    for (wgt, *_), val in zip(weights, gathered):
        out_data += wgt[..., None] * val
    if unbatched:
        out_data = out_data[0]
    if not _needs_graph(grid, points):
        return Tensor(out_data)

    def backward(g):
        gb = g[None] if unbatched else g
        if grid.requires_grad:
            all_idx = np.concatenate([idx.ravel() for idx in corners])
            all_val = np.concatenate(
                [(wgt[..., None] * gb).reshape(-1, c) for (wgt, *_) in weights]
            )
            ggrid = _scatter_rows(flat.shape[0], all_idx, all_val)
            grid._accumulate(
                ggrid.reshape(gr.shape)[0] if unbatched else ggrid.reshape(gr.shape)
            )
        if points.requires_grad:
            gp = np.zeros((b_sz, q, 2), dtype=np.float64)
            for (wgt, wh, ww, dh, dw), val in zip(weights, gathered):
                dot = (gb * val).sum(axis=-1)
                sh = 1.0 if dh else -1.0
                sw = 1.0 if dw else -1.0
                gp[..., 0] += dot * sh * ww
                gp[..., 1] += dot * wh * sw
            gp[..., 0] *= mh * (0.5 * nh)
            gp[..., 1] *= mw * (0.5 * nw)
            points._accumulate(gp[0] if unbatched else gp)

    return Tensor(out_data, True, (grid, points), backward)


def bilinear_gather_rows(grid, points, grid_rows) -> Tensor:
    """Sample grid[grid_rows[i]] at points[i]; grids (G, H, W, C), points (Q, 2).

    Like `bilinear_gather` but each point picks its own grid row, which is
    how per-joint distribution maps are read at token pixels. Points are
    (row-axis, col-axis) coordinates in [-1, 1]; positional gradients are
    not propagated (token centers are fixed integers).
    """
    grid, points = _lift(grid), _lift(points)
    pts = points.data
    grid_rows = np.asarray(grid_rows, dtype=np.intp)
    g_sz, nh, nw, c = grid.data.shape
    ih, fh, _ = _axis_index(pts[:, 0], nh)
    iw, fw, _ = _axis_index(pts[:, 1], nw)
    flat = grid.data.reshape(g_sz * nh * nw, c)
    base = grid_rows * (nh * nw)
    corners, weights = [], []
    for dh in (0, 1):
        wh = fh if dh else 1.0 - fh
        ch = np.minimum(ih + dh, nh - 1)
        for dw in (0, 1):
            ww = fw if dw else 1.0 - fw
            cw = np.minimum(iw + dw, nw - 1)
            corners.append(base + ch * nw + cw)
            weights.append(wh * ww)
    out_data = np.zeros((pts.shape[0], c), dtype=np.float64)
    for wgt, idx in zip(weights, corners):
        out_data += wgt[:, None] * flat[idx]
    if not _needs_graph(grid):
        return Tensor(out_data)

    def backward(g):
        all_idx = np.concatenate(corners)
        all_val = np.concatenate([wgt[:, None] * g for wgt in weights])
        grid._accumulate(_scatter_rows(flat.shape[0], all_idx, all_val).reshape(grid.data.shape))

    return Tensor(out_data, True, (grid,), backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(fn, inputs, epsilon: float = 1e-6) -> float:
    """Compare analytic gradients of a scalar-valued `fn` to central differences.

    `fn` receives the list of Tensors and must return a scalar Tensor. Every
    coordinate of every input is perturbed by +-epsilon. Returns the worst
    relative error, with denominator max(|analytic|, |numeric|, 1e-8).
    """
    tensors = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    out = fn(tensors)
    if out.data.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    if not np.isfinite(out.data):
        raise FloatingPointError("non-finite function value in grad_check")
    out.backward()
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors
    ]

    worst = 0.0
    for i, t in enumerate(tensors):
        flat = t.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            with no_grad():
                f_plus = float(fn(tensors).data)
            flat[j] = orig - epsilon
            with no_grad():
                f_minus = float(fn(tensors).data)
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            ana = analytic[i].reshape(-1)[j]
            denom = max(abs(ana), abs(numeric), 1e-8)
            worst = max(worst, abs(ana - numeric) / denom)
    return worst
