"""Minimal reverse-mode autodiff over dense numpy arrays.

Only the operations the occupancy head needs are provided.  Each op
computes its forward value eagerly and records a closure that maps the
output gradient to parent gradients.  ``backward`` walks the graph in a
fixed topological order so repeated runs accumulate identically.

Numpy arrays play the role of dense grids: a shape plus a row-major
buffer, float64 for verification and float32 for training.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

LN_EPS = 1e-5
EPS_DIV = 1e-8

Array = np.ndarray


class Node:
    __slots__ = ("value", "parents", "op", "_backward", "requires_grad", "detached", "grad", "name")

    def __init__(self, value, parents=(), op="leaf", backward=None, requires_grad=False, name=None):
        self.value = value
        self.parents = tuple(parents)
        self.op = op
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.detached = False
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def param(value, name=None, dtype=None) -> Node:
    arr = np.array(value, dtype=dtype if dtype is not None else np.asarray(value).dtype)
    return Node(arr, requires_grad=True, name=name)


def const(value, dtype=None) -> Node:
    if isinstance(value, Node):
        return value
    return Node(np.asarray(value, dtype=dtype))


def _as_node(x, like: Node | None = None) -> Node:
    if isinstance(x, Node):
        return x
    dtype = like.value.dtype if like is not None else None
    return Node(np.asarray(x, dtype=dtype))


def _unbroadcast(g: Array, shape) -> Array:
    if g.shape == tuple(shape):
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Node:
    a = _as_node(a, b if isinstance(b, Node) else None)
    b = _as_node(b, a)
    out = a.value + b.value

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Node(out, (a, b), "add", bw)


def sub(a, b) -> Node:
    a = _as_node(a, b if isinstance(b, Node) else None)
    b = _as_node(b, a)

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return Node(a.value - b.value, (a, b), "sub", bw)


def mul(a, b) -> Node:
    a = _as_node(a, b if isinstance(b, Node) else None)
    b = _as_node(b, a)

    def bw(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return Node(a.value * b.value, (a, b), "mul", bw)


def div(a, b, guard: float | None = None) -> Node:
    """a / b.  With ``guard`` the denominator is clamped to >= guard
    (intended for nonnegative denominators); clamped entries pass no
    gradient to b."""
    a = _as_node(a, b if isinstance(b, Node) else None)
    b = _as_node(b, a)
    if guard is not None:
        clamped = b.value < guard
        den = np.where(clamped, guard, b.value).astype(b.value.dtype)
    else:
        clamped = None
        den = b.value
    out = a.value / den

    def bw(g):
        ga = _unbroadcast(g / den, a.shape)
        gb = -g * out / den
        if clamped is not None:
            gb = np.where(clamped, 0, gb)
        return ga, _unbroadcast(gb, b.shape)

    return Node(out, (a, b), "div", bw)


def scale(x: Node, c: float) -> Node:
    c = float(c)
    return Node(x.value * c, (x,), "scale", lambda g: (g * c,))


def log(x: Node) -> Node:
    return Node(np.log(x.value), (x,), "log", lambda g: (g / x.value,))


def exp(x: Node) -> Node:
    out = np.exp(x.value)
    return Node(out, (x,), "exp", lambda g: (g * out,))


def sqrt(x: Node) -> Node:
    out = np.sqrt(x.value)
    return Node(out, (x,), "sqrt", lambda g: (g * 0.5 / out,))


def tanh(x: Node) -> Node:
    out = np.tanh(x.value)
    return Node(out, (x,), "tanh", lambda g: (g * (1 - out * out),))


def _sigmoid(z):
    return np.where(z >= 0, 1 / (1 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1 + np.exp(-np.abs(z))))


def activation(x: Node, kind: str) -> Node:
    v = x.value
    if kind == "relu":
        mask = v > 0
        return Node(v * mask, (x,), "relu", lambda g: (g * mask,))
    if kind == "sigmoid":
        s = _sigmoid(v).astype(v.dtype)
        return Node(s, (x,), "sigmoid", lambda g: (g * s * (1 - s),))
    if kind == "silu":
        s = _sigmoid(v).astype(v.dtype)
        return Node(v * s, (x,), "silu", lambda g: (g * (s + v * s * (1 - s)),))
    if kind == "tanh":
        return tanh(x)
    raise ValueError(f"unknown activation {kind!r}")


def detach(x: Node) -> Node:
    """Forward identity; backward contributes nothing to ``x``."""
    n = Node(x.value, (x,), "detach", lambda g: (None,))
    n.requires_grad = False
    n.detached = True
    return n


# ----------------------------------------------------------------- reductions

def sum(x: Node, axis=None, keepdims=False) -> Node:  # noqa: A001
    out = np.sum(x.value, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Node(np.asarray(out), (x,), "sum", bw)


def mean(x: Node, axis=None, keepdims=False) -> Node:
    n = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis, keepdims), 1.0 / n)


def softmax(x: Node, axis: int = -1) -> Node:
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return Node(s, (x,), "softmax", bw)


def log_softmax(x: Node, axis: int = -1) -> Node:
    z = x.value - x.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def bw(g):
        return (g - s * np.sum(g, axis=axis, keepdims=True),)

    return Node(out, (x,), "log_softmax", bw)


def logsumexp(x: Node, axis: int = -1) -> Node:
    m = x.value.max(axis=axis, keepdims=True)
    e = np.exp(x.value - m)
    tot = e.sum(axis=axis, keepdims=True)
    out = (np.log(tot) + m).squeeze(axis)
    w = e / tot

    def bw(g):
        return (np.expand_dims(g, axis) * w,)

    return Node(out, (x,), "logsumexp", bw)


# ------------------------------------------------------------------- shaping

def reshape(x: Node, shape) -> Node:
    return Node(x.value.reshape(shape), (x,), "reshape", lambda g: (g.reshape(x.shape),))


def transpose(x: Node, axes: Sequence[int]) -> Node:
    inv = np.argsort(axes)
    return Node(np.transpose(x.value, axes), (x,), "transpose", lambda g: (np.transpose(g, inv),))


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    """Concatenate along ``axis`` (channels by default)."""
    sizes = [n.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Node(np.concatenate([n.value for n in nodes], axis=axis), nodes, "concat", bw)


concat_channels = concat


def getitem(x: Node, key) -> Node:
    """Basic (slice / integer) indexing."""

    def bw(g):
        gx = np.zeros_like(x.value)
        gx[key] += g
        return (gx,)

    return Node(x.value[key], (x,), "getitem", bw)


def broadcast_to(x: Node, shape) -> Node:
    return Node(np.broadcast_to(x.value, shape).copy(), (x,), "broadcast_to",
                lambda g: (_unbroadcast(g, x.shape),))


def take(x: Node, index: Array, axis: int) -> Node:
    """Gather ``x`` along ``axis`` with an integer index array
    (``np.take_along_axis`` semantics)."""
    out = np.take_along_axis(x.value, index, axis=axis)

    def bw(g):
        gx = np.zeros_like(x.value)
        idx = list(np.indices(index.shape, sparse=True))
        idx[axis % x.value.ndim] = index
        np.add.at(gx, tuple(idx), g)
        return (gx,)

    return Node(out, (x,), "take", bw)


# --------------------------------------------------------------------- layers

def linear(x: Node, weight: Node, bias: Node | None = None) -> Node:
    """x[..., in] @ weight[in, out] + bias[out]."""
    out = x.value @ weight.value
    if bias is not None:
        out = out + bias.value
    parents = (x, weight) if bias is None else (x, weight, bias)
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: input has {x.shape[-1]} channels, weight expects {weight.shape[0]}")

    def bw(g):
        gx = g @ weight.value.T
        gw = x.value.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        if bias is None:
            return gx, gw
        return gx, gw, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return Node(out, parents, "linear", bw)


def layernorm(x: Node, gamma: Node | None = None, beta: Node | None = None, eps: float = LN_EPS) -> Node:
    """Normalize over the last (channel) axis, then optional affine."""
    v = x.value
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    n = Node(xhat, (x,), "layernorm", bw)
    if gamma is not None:
        n = mul(n, gamma)
    if beta is not None:
        n = add(n, beta)
    return n


def _bilinear_taps(coord: Array, size: int):
    """Clamped pixel-center interpolation along one axis.

    Returns (i0, i1, w1, inside); the normalized coordinate maps to the
    continuous pixel index ``coord * size - 0.5``.
    """
    x = coord * size - 0.5
    xc = np.clip(x, 0.0, size - 1.0)
    inside = (x > 0.0) & (x < size - 1.0)
    i0 = np.floor(xc).astype(np.int64)
    i0 = np.minimum(i0, max(size - 2, 0))
    w1 = xc - i0
    i1 = np.minimum(i0 + 1, size - 1)
    return i0, i1, w1, inside


def bilinear_sample(fmap: Node, uv: Node) -> Node:
    """Sample feature maps at normalized coordinates.

    fmap: (B, H, W, C); uv: (B, M, 2) with uv[..., 0] horizontal in [0, 1].
    Unbatched (H, W, C) / (M, 2) inputs are accepted too.  Coordinates
    outside the pixel-center hull are clamped (border replication).
    Returns (B, M, C).
    """
    if fmap.value.ndim == 3:
        out = bilinear_sample(reshape(fmap, (1,) + fmap.shape), reshape(uv, (1,) + uv.shape))
        return reshape(out, out.shape[1:])
    F = fmap.value
    B, H, W, C = F.shape
    u = uv.value[..., 0]
    v = uv.value[..., 1]
    x0, x1, wx, inx = _bilinear_taps(u, W)
    y0, y1, wy, iny = _bilinear_taps(v, H)
    b = np.arange(B)[:, None]
    f00 = F[b, y0, x0]
    f01 = F[b, y0, x1]
    f10 = F[b, y1, x0]
    f11 = F[b, y1, x1]
    wx_ = wx[..., None].astype(F.dtype)
    wy_ = wy[..., None].astype(F.dtype)
    top = f00 + (f01 - f00) * wx_
    bot = f10 + (f11 - f10) * wx_
    out = top + (bot - top) * wy_

    def bw(g):
        gF = np.zeros_like(F)
        bb = np.broadcast_to(b, y0.shape)
        for yi, xi, w in (
            (y0, x0, (1 - wy_) * (1 - wx_)),
            (y0, x1, (1 - wy_) * wx_),
            (y1, x0, wy_ * (1 - wx_)),
            (y1, x1, wy_ * wx_),
        ):
            np.add.at(gF, (bb, yi, xi), g * w)
        du = np.sum(g * ((1 - wy_) * (f01 - f00) + wy_ * (f11 - f10)), axis=-1) * W * inx
        dv = np.sum(g * (bot - top), axis=-1) * H * iny
        guv = np.stack([du, dv], axis=-1).astype(uv.value.dtype)
        return gF, guv

    return Node(out, (fmap, uv), "bilinear_sample", bw)


def _upsample_matrix(n: int, dtype) -> Array:
    """(2n, n) linear interpolation matrix, align_corners=False, edge clamp."""
    M = np.zeros((2 * n, n), dtype=dtype)
    for i in range(2 * n):
        src = min(max((i + 0.5) / 2.0 - 0.5, 0.0), n - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n - 1)
        w = src - lo
        M[i, lo] += 1 - w
        M[i, hi] += w
    return M


def trilinear_upsample(grid: Node, factor: int = 2) -> Node:
    """Upsample an (X, Y, Z, C) grid by 2 in each spatial axis."""
    if factor != 2:
        raise ValueError("only factor 2 is supported")
    X, Y, Z, C = grid.shape
    dt = grid.value.dtype
    Mx, My, Mz = _upsample_matrix(X, dt), _upsample_matrix(Y, dt), _upsample_matrix(Z, dt)
    out = np.einsum("ai,bj,ck,ijkl->abcl", Mx, My, Mz, grid.value, optimize=True)

    def bw(g):
        return (np.einsum("ai,bj,ck,abcl->ijkl", Mx, My, Mz, g, optimize=True),)

    return Node(out, (grid,), "trilinear_upsample", bw)


_OFFSETS = [(i, j, k) for i in range(3) for j in range(3) for k in range(3)]


def dwconv3d(grid: Node, kernel: Node, bias: Node | None = None) -> Node:
    """Depthwise 3x3x3 convolution with zero padding 1.

    grid: (X, Y, Z, C); kernel: (3, 3, 3, C) (cross-correlation form).
    """
    G = grid.value
    K = kernel.value
    X, Y, Z, C = G.shape
    if K.shape != (3, 3, 3, C):
        raise ValueError(f"dwconv3d kernel must be (3,3,3,{C}), got {K.shape}")
    P = np.pad(G, ((1, 1), (1, 1), (1, 1), (0, 0)))
    out = np.zeros_like(G)
    for i, j, k in _OFFSETS:
        out += P[i:i + X, j:j + Y, k:k + Z] * K[i, j, k]
    if bias is not None:
        out = out + bias.value
    parents = (grid, kernel) if bias is None else (grid, kernel, bias)

    def bw(g):
        gP = np.zeros_like(P)
        gK = np.zeros_like(K)
        for i, j, k in _OFFSETS:
            gP[i:i + X, j:j + Y, k:k + Z] += g * K[i, j, k]
            gK[i, j, k] = np.sum(g * P[i:i + X, j:j + Y, k:k + Z], axis=(0, 1, 2))
        gG = gP[1:-1, 1:-1, 1:-1]
        if bias is None:
            return gG, gK
        return gG, gK, g.sum(axis=(0, 1, 2))

    return Node(out, parents, "dwconv3d", bw)


def conv3d(grid: Node, kernel: Node, bias: Node | None = None) -> Node:
    """Dense 3x3x3 convolution, zero padding 1.  kernel: (3, 3, 3, C_in, C_out)."""
    G = grid.value
    K = kernel.value
    X, Y, Z, C = G.shape
    if K.shape[:4] != (3, 3, 3, C):
        raise ValueError(f"conv3d kernel must be (3,3,3,{C},Cout), got {K.shape}")
    P = np.pad(G, ((1, 1), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((X, Y, Z, K.shape[4]), dtype=G.dtype)
    for i, j, k in _OFFSETS:
        out += P[i:i + X, j:j + Y, k:k + Z] @ K[i, j, k]
    if bias is not None:
        out = out + bias.value
    parents = (grid, kernel) if bias is None else (grid, kernel, bias)

    def bw(g):
        gP = np.zeros_like(P)
        gK = np.zeros_like(K)
        g2 = g.reshape(-1, g.shape[-1])
        for i, j, k in _OFFSETS:
            gP[i:i + X, j:j + Y, k:k + Z] += g @ K[i, j, k].T
            gK[i, j, k] = P[i:i + X, j:j + Y, k:k + Z].reshape(-1, C).T @ g2
        gG = gP[1:-1, 1:-1, 1:-1]
        if bias is None:
            return gG, gK
        return gG, gK, g2.sum(axis=0)

    return Node(out, parents, "conv3d", bw)


# ------------------------------------------------------------ initialization

def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int, zero: bool = False,
                dtype=np.float64) -> dict[str, Node]:
    if zero:
        w = np.zeros((fan_in, fan_out))
    else:
        w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
    return {"w": param(w, dtype=dtype), "b": param(np.zeros(fan_out), dtype=dtype)}


def init_norm(channels: int, dtype=np.float64) -> dict[str, Node]:
    return {"g": param(np.ones(channels), dtype=dtype), "b": param(np.zeros(channels), dtype=dtype)}


def apply_linear(x: Node, p: dict[str, Node]) -> Node:
    return linear(x, p["w"], p["b"])


def apply_norm(x: Node, p: dict[str, Node]) -> Node:
    return layernorm(x, p["g"], p["b"])


def flatten_params(tree: dict, prefix: str = "") -> dict[str, Node]:
    """Nested dict of Nodes -> {"a.b.c": Node} in insertion order."""
    flat = {}
    for k, v in tree.items():
        name = f"{prefix}{k}"
        if isinstance(v, dict):
            flat.update(flatten_params(v, name + "."))
        else:
            flat[name] = v
    return flat


def custom(value: Array, parents: Sequence[Node], backward: Callable, op: str = "custom") -> Node:
    """Escape hatch for ops whose backward is supplied by the caller."""
    return Node(value, parents, op, backward)


# ------------------------------------------------------------------- backward

def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node.detached:
            continue
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node, grad: Array | None = None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf param.

    Intermediate gradients are released once propagated.
    """
    if not root.requires_grad:
        return
    grads: dict[int, Array] = {id(root): np.ones_like(root.value) if grad is None else grad}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        if node.detached:
            continue
        pgs = node._backward(g)
        for p, pg in zip(node.parents, pgs):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = pg if k not in grads else grads[k] + pg


def zero_grad(params: Iterable[Node]) -> None:
    for p in params:
        p.grad = None


# --------------------------------------------------------------- grad check

def grad_check_detail(scalar_fn: Callable[[], Node], params: dict[str, Node] | Sequence[Node],
                      h: float = 1e-6, max_entries: int | None = None,
                      rng: np.random.Generator | None = None, rel_floor: float = 0.0) -> dict[str, float]:
    """Per-parameter relative error between reverse-mode and central
    finite-difference gradients.

    The error for one parameter tensor is ||g_ad - g_fd||_inf divided by
    max(||g_ad||_inf, ||g_fd||_inf); both-zero gradients give 0.  When
    ``max_entries`` is set, at most that many entries per tensor are probed
    (chosen with ``rng``).  ``rel_floor`` raises every denominator to at
    least that fraction of the largest gradient entry over all parameters,
    so tensors whose gradients sit at finite-difference roundoff level do
    not dominate the result.
    """
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    for p in params.values():
        if p.value.dtype != np.float64:
            raise TypeError("grad_check requires float64 parameters")
    zero_grad(params.values())
    loss = scalar_fn()
    backward(loss)
    rng = rng if rng is not None else np.random.default_rng(0)
    floor = rel_floor * max((float(np.abs(p.grad).max()) for p in params.values()
                             if p.grad is not None and p.grad.size), default=0.0)
    result = {}
    for name, p in params.items():
        ad = np.zeros_like(p.value) if p.grad is None else p.grad
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        fd = np.empty(idx.size)
        for n, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            fp = float(scalar_fn().value)
            flat[i] = old - h
            fm = float(scalar_fn().value)
            flat[i] = old
            fd[n] = (fp - fm) / (2 * h)
        a = ad.reshape(-1)[idx]
        scale_ = max(np.abs(a).max(initial=0.0), np.abs(fd).max(initial=0.0), floor)
        result[name] = 0.0 if scale_ == 0 else float(np.abs(a - fd).max() / scale_)
    zero_grad(params.values())
    return result


def grad_check(scalar_fn: Callable[[], Node], params, h: float = 1e-6,
               max_entries: int | None = None, rng: np.random.Generator | None = None,
               rel_floor: float = 0.0) -> float:
    """Max relative error over all parameters (see ``grad_check_detail``)."""
    detail = grad_check_detail(scalar_fn, params, h, max_entries, rng, rel_floor)
    return max(detail.values(), default=0.0)
