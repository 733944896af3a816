"""Reverse-mode autograd over float64 numpy arrays.

Every differentiable value is a Tensor holding a float64 ndarray. Ops build a
dynamic tape through parent links; Tensor.backward() walks it once in reverse
topological order. Gradients accumulate only on leaves (requires_grad tensors
with no parents), which is where parameters live.

Shape convention used throughout the package: batch dims lead, feature dims
trail. Images are (B, C, H, W). All arithmetic is 64-bit.
"""

from __future__ import annotations

import numpy as np


class ShapeMismatch(ValueError):
    """Operand shapes incompatible for the requested op."""


class GraphError(ValueError):
    """Invalid autograd usage (non-scalar backward, bad eps, ...)."""


_DEBUG = False


def set_debug_checks(on: bool) -> None:
    """Toggle NaN/Inf assertions after every forward op and backward grad."""
    global _DEBUG
    _DEBUG = bool(on)


def debug_checks_enabled() -> bool:
    return _DEBUG


def _finite_or_raise(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {where}")


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    def item(self) -> float:
        if self.values.size != 1:
            raise GraphError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.values, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into .grad of every reachable leaf.

        self must be scalar (shape () or size 1)."""
        if self.values.size != 1:
            raise GraphError(f"backward() requires a scalar, got shape {self.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:  # iterative DFS, graphs can be thousands of nodes deep
            node, emitted = stack.pop()
            if emitted:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        flowing = {id(self): np.ones_like(self.values)}
        for node in reversed(topo):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in node._backward(g):
                if not parent.requires_grad:
                    continue
                if _DEBUG:
                    _finite_or_raise(pg, "backward gradient")
                key = id(parent)
                if key in flowing:
                    flowing[key] = flowing[key] + pg
                else:
                    flowing[key] = pg

    # Small operator sugar; every overload routes through the op functions.
    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def constant(values) -> Tensor:
    """Non-differentiable tensor wrapping values."""
    return Tensor(values, requires_grad=False)


def _make(values: np.ndarray, parents, backward_fn, op: str) -> Tensor:
    out = Tensor(values)
    if _DEBUG:
        _finite_or_raise(values, f"op '{op}' output")
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------------------
# elementwise and linear-algebra primitives

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)

    def bwd(g):
        out = []
        if a.requires_grad:
            out.append((a, _unbroadcast(g, a.shape)))
        if b.requires_grad:
            out.append((b, _unbroadcast(g, b.shape)))
        return out

    return _make(a.values + b.values, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)

    def bwd(g):
        out = []
        if a.requires_grad:
            out.append((a, _unbroadcast(g, a.shape)))
        if b.requires_grad:
            out.append((b, _unbroadcast(-g, b.shape)))
        return out

    return _make(a.values - b.values, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)

    def bwd(g):
        out = []
        if a.requires_grad:
            out.append((a, _unbroadcast(g * b.values, a.shape)))
        if b.requires_grad:
            out.append((b, _unbroadcast(g * a.values, b.shape)))
        return out

    return _make(a.values * b.values, (a, b), bwd, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    def bwd(g):
        return [(a, g * c)]

    return _make(a.values * c, (a,), bwd, "scale")


def add_scalar(a: Tensor, c: float) -> Tensor:
    def bwd(g):
        return [(a, g)]

    return _make(a.values + c, (a,), bwd, "add_scalar")


def pow_scalar(a: Tensor, p: float) -> Tensor:
    """a ** p elementwise. Non-integer p requires a strictly positive base."""
    v = a.values ** p

    def bwd(g):
        return [(a, g * p * a.values ** (p - 1.0))]

    return _make(v, (a,), bwd, "pow_scalar")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product, (..., m, k) @ (..., k, n). Both operands 2d+."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul: operands must be 2d+, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: shapes {a.shape} and {b.shape} (inner dims differ)")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatch(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast")

    def bwd(g):
        out = []
        if a.requires_grad:
            ga = g @ np.swapaxes(b.values, -1, -2)
            out.append((a, _unbroadcast(ga, a.shape)))
        if b.requires_grad:
            gb = np.swapaxes(a.values, -1, -2) @ g
            out.append((b, _unbroadcast(gb, b.shape)))
        return out

    return _make(a.values @ b.values, (a, b), bwd, "matmul")


def exp(a: Tensor) -> Tensor:
    v = np.exp(a.values)

    def bwd(g):
        return [(a, g * v)]

    return _make(v, (a,), bwd, "exp")


def log(a: Tensor) -> Tensor:
    def bwd(g):
        return [(a, g / a.values)]

    return _make(np.log(a.values), (a,), bwd, "log")


def tanh(a: Tensor) -> Tensor:
    v = np.tanh(a.values)

    def bwd(g):
        return [(a, g * (1.0 - v * v))]

    return _make(v, (a,), bwd, "tanh")


def sigmoid(a: Tensor) -> Tensor:
    v = np.empty_like(a.values)
    pos = a.values >= 0
    v[pos] = 1.0 / (1.0 + np.exp(-a.values[pos]))
    ev = np.exp(a.values[~pos])
    v[~pos] = ev / (1.0 + ev)

    def bwd(g):
        return [(a, g * v * (1.0 - v))]

    return _make(v, (a,), bwd, "sigmoid")


def relu(a: Tensor) -> Tensor:
    v = np.maximum(a.values, 0.0)

    def bwd(g):
        return [(a, g * (a.values > 0.0))]

    return _make(v, (a,), bwd, "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    v = np.where(a.values > 0.0, a.values, slope * a.values)

    def bwd(g):
        return [(a, g * np.where(a.values > 0.0, 1.0, slope))]

    return _make(v, (a,), bwd, "leaky_relu")


def clip_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient passes only where a > floor."""
    v = np.maximum(a.values, floor)

    def bwd(g):
        return [(a, g * (a.values > floor))]

    return _make(v, (a,), bwd, "clip_min")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    v = a.values.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return [(a, np.broadcast_to(g, a.shape).copy())]
        if not keepdims:
            g = np.expand_dims(g, axis if isinstance(axis, int) else tuple(sorted(
                ax % a.ndim for ax in axis)))
        return [(a, np.broadcast_to(g, a.shape).copy())]

    return _make(v, (a,), bwd, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.values.size
    elif isinstance(axis, int):
        n = a.shape[axis]
    else:
        n = 1
        for ax in axis:
            n *= a.shape[ax]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    def bwd(g):
        return [(a, g.reshape(a.shape))]

    return _make(a.values.reshape(shape), (a,), bwd, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return [(a, g.transpose(inv))]

    return _make(a.values.transpose(axes), (a,), bwd, "transpose")


def swap_last2(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeMismatch("concat: empty input list")
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
                i != (axis % len(base)) and other[i] != base[i] for i in range(len(base))):
            raise ShapeMismatch(
                f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        pieces = np.split(g, splits, axis=axis)
        return [(t, p) for t, p in zip(tensors, pieces)]

    return _make(np.concatenate([t.values for t in tensors], axis=axis),
                 tuple(tensors), bwd, "concat")


def slice_tensor(a: Tensor, idx) -> Tensor:
    """Basic (non-fancy) indexing with grad scatter-back."""
    v = a.values[idx]

    def bwd(g):
        gz = np.zeros_like(a.values)
        gz[idx] += g
        return [(a, gz)]

    return _make(v, (a,), bwd, "slice")


# ---------------------------------------------------------------------------
# softmax family

def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Softmax along `axis`. mask (optional bool array broadcastable to x)
    excludes False positions; a slice with every position excluded is rejected."""
    v = x.values
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), v.shape)
        if not m.any(axis=axis).all():
            raise ShapeMismatch("softmax: a slice along the softmax axis is fully masked")
        shifted = np.where(m, v, -np.inf)
        mx = shifted.max(axis=axis, keepdims=True)
        e = np.where(m, np.exp(v - mx), 0.0)
    else:
        mx = v.max(axis=axis, keepdims=True)
        e = np.exp(v - mx)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return [(x, y * (g - dot))]

    return _make(y, (x,), bwd, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    v = x.values
    mx = v.max(axis=axis, keepdims=True)
    shifted = v - mx
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def bwd(g):
        return [(x, g - np.exp(y) * g.sum(axis=axis, keepdims=True))]

    return _make(y, (x,), bwd, "log_softmax")


def take_along_last(x: Tensor, ids: np.ndarray) -> Tensor:
    """out[...] = x[..., ids[...]] for integer ids of shape x.shape[:-1]."""
    ids = np.asarray(ids)
    if ids.shape != x.shape[:-1]:
        raise ShapeMismatch(f"take_along_last: ids {ids.shape} vs values {x.shape}")
    v = np.take_along_axis(x.values, ids[..., None], axis=-1)[..., 0]

    def bwd(g):
        gz = np.zeros_like(x.values)
        np.put_along_axis(gz, ids[..., None], g[..., None], axis=-1)
        return [(x, gz)]

    return _make(v, (x,), bwd, "take_along_last")


def cross_entropy_with_logits(logits: Tensor, targets, smoothing: float = 0.0) -> Tensor:
    """Per-position NLL, -log softmax(logits)[target]; shape = logits.shape[:-1].

    With label smoothing a, the target distribution is (1-a)*onehot + a/V
    (uniform mass over the whole vocabulary, target class included)."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ShapeMismatch(
            f"cross_entropy_with_logits: targets {targets.shape} vs logits {logits.shape}")
    ls = log_softmax(logits, axis=-1)
    picked = take_along_last(ls, targets)
    if smoothing == 0.0:
        return scale(picked, -1.0)
    vocab = logits.shape[-1]
    uniform = tsum(ls, axis=-1)
    return scale(add(scale(picked, 1.0 - smoothing), scale(uniform, smoothing / vocab)), -1.0)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Row gather: (V, d) table, integer ids of any shape -> (*ids.shape, d)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeMismatch(
            f"embedding_lookup: id out of range for table with {table.shape[0]} rows")
    v = table.values[ids]

    def bwd(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return [(table, gt)]

    return _make(v, (table,), bwd, "embedding_lookup")


# ---------------------------------------------------------------------------
# normalization, sampling, dropout

def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then optional affine.

    Variance is floored by eps inside the sqrt, so a constant vector maps to
    zeros rather than dividing by zero."""
    mu = tmean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    y = mul(centered, pow_scalar(add_scalar(var, eps), -0.5))
    if gain is not None:
        y = mul(y, gain)
    if bias is not None:
        y = add(y, bias)
    return y


def instance_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample per-channel normalization over the spatial dims of (B,C,H,W)."""
    if x.ndim != 4:
        raise ShapeMismatch(f"instance_norm: expected (B,C,H,W), got {x.shape}")
    mu = tmean(x, axis=(-2, -1), keepdims=True)
    centered = sub(x, mu)
    var = tmean(mul(centered, centered), axis=(-2, -1), keepdims=True)
    y = mul(centered, pow_scalar(add_scalar(var, eps), -0.5))
    c = x.shape[1]
    y = mul(y, reshape(gain, (1, c, 1, 1)))
    return add(y, reshape(bias, (1, c, 1, 1)))


def reparameterize(mu: Tensor, logvar: Tensor, eps) -> Tensor:
    """mu + exp(logvar/2) * eps, with eps a fixed noise array (no gradient)."""
    if mu.shape != logvar.shape:
        raise ShapeMismatch(f"reparameterize: mu {mu.shape} vs logvar {logvar.shape}")
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != mu.shape:
        raise ShapeMismatch(f"reparameterize: eps {eps.shape} vs mu {mu.shape}")
    return add(mu, mul(exp(scale(logvar, 0.5)), constant(eps)))


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, constant(keep))


# ---------------------------------------------------------------------------
# convolution family

def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(x_pad: np.ndarray, kh: int, kw: int, s: int, ho: int, wo: int) -> np.ndarray:
    b, c = x_pad.shape[:2]
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x_pad[:, :, i:i + s * ho:s, j:j + s * wo:s]
    return cols.reshape(b, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, b: int, c: int, kh: int, kw: int, s: int,
            ho: int, wo: int, hp: int, wp: int) -> np.ndarray:
    out = np.zeros((b, c, hp, wp), dtype=np.float64)
    cols = cols.reshape(b, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + s * ho:s, j:j + s * wo:s] += cols[:, :, i, j]
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """x (B,Cin,H,W) * w (Cout,Cin,kh,kw) -> (B,Cout,Ho,Wo)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv2d: x {x.shape} and w {w.shape} must be 4d")
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv2d: channel mismatch x {x.shape} vs w {w.shape}")
    bsz, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeMismatch(f"conv2d: kernel {w.shape} too large for input {x.shape}")
    x_pad = _pad_hw(x.values, padding)
    cols = _im2col(x_pad, kh, kw, stride, ho, wo)  # (B, Cin*kh*kw, Ho*Wo)
    w_mat = w.values.reshape(cout, cin * kh * kw)
    out = (w_mat @ cols).reshape(bsz, cout, ho, wo)
    if b is not None:
        if b.shape != (cout,):
            raise ShapeMismatch(f"conv2d: bias {b.shape} vs {cout} output channels")
        out = out + b.values[:, None, None]

    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        g_mat = g.reshape(bsz, cout, ho * wo)
        grads = []
        if x.requires_grad:
            g_cols = w_mat.T @ g_mat
            gx = _col2im(g_cols, bsz, cin, kh, kw, stride, ho, wo,
                         h + 2 * padding, wd + 2 * padding)
            if padding:
                gx = gx[:, :, padding:-padding, padding:-padding]
            grads.append((x, gx))
        if w.requires_grad:
            gw = np.einsum("bon,bkn->ok", g_mat, cols)
            grads.append((w, gw.reshape(w.shape)))
        if b is not None and b.requires_grad:
            grads.append((b, g.sum(axis=(0, 2, 3))))
        return grads

    return _make(out, parents, bwd, "conv2d")


def transpose_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
                     stride: int = 2, padding: int = 1) -> Tensor:
    """x (B,Cin,H,W) * w (Cin,Cout,kh,kw) -> (B,Cout,(H-1)s-2p+kh, ...).

    Defaults (stride 2, kernel 4, padding 1) double the spatial size; the
    shape-preserving variant used by stride-1 blocks is kernel 3, padding 1."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"transpose_conv2d: x {x.shape} and w {w.shape} must be 4d")
    if x.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"transpose_conv2d: channel mismatch x {x.shape} vs w {w.shape}")
    bsz, cin, h, wd = x.shape
    _, cout, kh, kw = w.shape
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (wd - 1) * stride - 2 * padding + kw
    if ho <= 0 or wo <= 0:
        raise ShapeMismatch(f"transpose_conv2d: empty output for x {x.shape}, w {w.shape}")
    x_mat = x.values.reshape(bsz, cin, h * wd)
    w_mat = w.values.reshape(cin, cout * kh * kw)
    cols = np.swapaxes(x_mat, 1, 2) @ w_mat  # (B, H*W, Cout*kh*kw)
    cols = np.swapaxes(cols, 1, 2)           # (B, Cout*kh*kw, H*W)
    full = _col2im(cols, bsz, cout, kh, kw, stride, h, wd,
                   ho + 2 * padding, wo + 2 * padding)
    out = full[:, :, padding:-padding, padding:-padding] if padding else full
    if b is not None:
        if b.shape != (cout,):
            raise ShapeMismatch(f"transpose_conv2d: bias {b.shape} vs {cout} channels")
        out = out + b.values[:, None, None]

    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        g_pad = _pad_hw(g, padding)
        g_cols = _im2col(g_pad, kh, kw, stride, h, wd)  # (B, Cout*kh*kw, H*W)
        grads = []
        if x.requires_grad:
            gx = w_mat @ g_cols  # (Cin,K)@(B,K,N) -> (B,Cin,H*W)
            grads.append((x, gx.reshape(x.shape)))
        if w.requires_grad:
            gw = np.einsum("bcn,bkn->ck", x_mat, g_cols)
            grads.append((w, gw.reshape(w.shape)))
        if b is not None and b.requires_grad:
            grads.append((b, g.sum(axis=(0, 2, 3))))
        return grads

    return _make(out, parents, bwd, "transpose_conv2d")


def nearest_upsample(x: Tensor, factor: int) -> Tensor:
    """Repeat each spatial cell factor x factor times on the last two axes."""
    if factor < 1:
        raise ShapeMismatch(f"nearest_upsample: factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    v = x.values.repeat(factor, axis=-2).repeat(factor, axis=-1)

    def bwd(g):
        lead = g.shape[:-2]
        h, wd = x.shape[-2], x.shape[-1]
        gr = g.reshape(*lead, h, factor, wd, factor)
        return [(x, gr.sum(axis=(-3, -1)))]

    return _make(v, (x,), bwd, "nearest_upsample")


def mean_pool(x: Tensor, axis=-1) -> Tensor:
    """Mean over an axis (or tuple of axes); used to pool grid columns."""
    return tmean(x, axis=axis, keepdims=False)


# ---------------------------------------------------------------------------
# op registry and gradient checking

OP_REGISTRY = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "concat": lambda *ts, axis=0: concat(list(ts), axis=axis),
    "softmax": softmax,
    "layer_norm": layer_norm,
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "embedding_lookup": embedding_lookup,
    "conv2d": conv2d,
    "transpose_conv2d": transpose_conv2d,
    "nearest_upsample": nearest_upsample,
    "mean_pool": mean_pool,
    "cross_entropy_with_logits": cross_entropy_with_logits,
    "reparameterize": reparameterize,
}


def op_forward(name: str, inputs, **kwargs) -> Tensor:
    """Dispatch a registered op by name over a list of Tensor inputs."""
    if name not in OP_REGISTRY:
        raise KeyError(f"unknown op '{name}'")
    return OP_REGISTRY[name](*inputs, **kwargs)


def grad_check(fn, inputs, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    fn maps a list of Tensors to a scalar Tensor and must be deterministic
    (freeze any sampling first). Error per coordinate is
    |analytic - numeric| / max(1, |analytic|, |numeric|)."""
    if not (1e-7 <= eps <= 1e-3):
        raise GraphError(f"grad_check: eps {eps} outside [1e-7, 1e-3]")
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = fn(inputs)
    if not isinstance(out, Tensor) or out.values.size != 1:
        raise GraphError("grad_check: fn must return a scalar Tensor")
    out.backward()
    analytic = [np.zeros_like(t.values) if t.grad is None else t.grad.copy()
                for t in inputs]
    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.values.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = fn(inputs).item()
            flat[i] = keep - eps
            lo = fn(inputs).item()
            flat[i] = keep
            num = (hi - lo) / (2.0 * eps)
            ana = gflat[i]
            err = abs(ana - num) / max(1.0, abs(ana), abs(num))
            if err > worst:
                worst = err
    return worst
