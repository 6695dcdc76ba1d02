"""Reverse-mode tensor engine on numpy arrays.

Every operation records a backward closure on its output, so a scalar
loss can push gradients to any tensor created with requires_grad=True.
Only the operations the flow pipeline needs are provided; there is no
attempt at a general-purpose framework.

Dtype policy: float32 for normal runs, float64 when a caller wants
finite-difference-grade precision.  Ops inherit the dtype of their
inputs and never silently promote.
"""

from __future__ import annotations

import numpy as np

_GRAD_ENABLED = True

# Additive logit mask value: large enough that exp() underflows to exactly
# zero after max-subtraction, so masked attention weights are exactly 0.0.
NEG_INF = -1e30


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """N-d float array plus an optional gradient slot and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self._parents = ()
        self._backward = None

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

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal")
        return mul(self, _coerce(1.0 / other, self))

    def __neg__(self):
        return mul(self, _coerce(-1.0, self))

    def __matmul__(self, other):
        return matmul(self, _coerce(other, self))

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def backward(self):
        """Propagate d(self)/d(leaf) to every reachable requires_grad tensor."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.data.shape}")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _topo_order(root: Tensor):
    """Iterative post-order over the recorded graph."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) and dtype is None else Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcasted gradient back down to the original operand shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g.reshape(shape)


# -- arithmetic ------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    data = np.matmul(a.data, b.data)

    def backward(g):
        _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape))
        _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape))

    return _make(data, (a, b), backward)


# -- shape ops -------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    data = np.reshape(a.data, shape)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(data, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = np.transpose(a.data, axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accum(a, np.transpose(g, inv))

    return _make(data, (a,), backward)


def getitem(a: Tensor, key) -> Tensor:
    data = a.data[key]
    if not isinstance(data, np.ndarray):
        data = np.asarray(data, dtype=a.dtype)

    def backward(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[key] += g

    return _make(data, (a,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make(data, tuple(tensors), backward)


def pad_hw(a: Tensor, pads) -> Tensor:
    """Zero-pad the last two axes; pads = ((top, bottom), (left, right))."""
    (pt, pb), (pl, pr) = pads
    spec = [(0, 0)] * (a.ndim - 2) + [(pt, pb), (pl, pr)]
    data = np.pad(a.data, spec)
    H, W = a.data.shape[-2], a.data.shape[-1]

    def backward(g):
        _accum(a, g[..., pt:pt + H, pl:pl + W])

    return _make(data, (a,), backward)


# -- reductions ------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)
    if not isinstance(data, np.ndarray):
        data = np.asarray(data, dtype=a.dtype)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
            return
        gg = g
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(ax % a.data.ndim for ax in axes)
            for ax in sorted(axes):
                gg = np.expand_dims(gg, ax)
        _accum(a, np.broadcast_to(gg, a.data.shape).copy())

    return _make(data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


# -- elementwise nonlinearities -------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    data = np.where(mask, a.data, 0)

    def backward(g):
        _accum(a, g * mask)

    return _make(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    # Split by sign to avoid overflow in exp.
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    data = data.astype(x.dtype)

    def backward(g):
        _accum(a, g * data * (1.0 - data))

    return _make(data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - data * data))

    return _make(data, (a,), backward)


def absolute(a: Tensor) -> Tensor:
    data = np.abs(a.data)

    def backward(g):
        _accum(a, g * np.sign(a.data))

    return _make(data, (a,), backward)


def log_clamped(a: Tensor, floor: float = 1e-12) -> Tensor:
    """log(max(a, floor)); zero gradient where the clamp is active."""
    clamped = np.maximum(a.data, floor)
    data = np.log(clamped)
    live = a.data > floor

    def backward(g):
        _accum(a, g * live / clamped)

    return _make(data, (a,), backward)


# -- core neural ops -------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis (max subtraction)."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        gy = g * data
        _accum(a, gy - data * gy.sum(axis=axis, keepdims=True))

    return _make(data, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ValueError(
            f"layer_norm gain/bias must have shape ({d},), got {gain.data.shape} and {bias.data.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=lead))
        _accum(bias, g.sum(axis=lead))
        dxhat = g * gain.data
        mean1 = dxhat.mean(axis=-1, keepdims=True)
        mean2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv * (dxhat - mean1 - xhat * mean2))

    return _make(data, (x, gain, bias), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = x @ weight.T (+ bias); weight is (out, in), x is (..., in)."""
    m, d = weight.data.shape
    if x.data.shape[-1] != d:
        raise ValueError(
            f"linear: input last dim {x.data.shape[-1]} does not match weight in-dim {d}")
    data = np.matmul(x.data, weight.data.T)
    if bias is not None:
        data = data + bias.data

    def backward(g):
        g2 = g.reshape(-1, m)
        x2 = x.data.reshape(-1, d)
        _accum(weight, g2.T @ x2)
        if bias is not None:
            _accum(bias, g2.sum(axis=0))
        _accum(x, np.matmul(g, weight.data).reshape(x.data.shape))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(data, parents, backward)


def _zero_pad_chw(a: np.ndarray, p: int) -> np.ndarray:
    """Zero-pad the two trailing axes of (C, H, W) by p on each side."""
    C, H, W = a.shape
    out = np.zeros((C, H + 2 * p, W + 2 * p), dtype=a.dtype)
    out[:, p:p + H, p:p + W] = a
    return out


def _window_view(padded: np.ndarray, k: int, stride: int):
    """Strided (nH, nW, C, k, k) view of sliding windows over (C, Hp, Wp)."""
    C, Hp, Wp = padded.shape
    nH = (Hp - k) // stride + 1
    nW = (Wp - k) // stride + 1
    sC, sH, sW = padded.strides
    return np.lib.stride_tricks.as_strided(
        padded,
        shape=(nH, nW, C, k, k),
        strides=(sH * stride, sW * stride, sC, sH, sW),
        writeable=False,
    )


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation: x (C_in, H, W) with kernel (C_out, C_in, k, k)."""
    if x.ndim != 3 or kernel.ndim != 4:
        raise ValueError(
            f"conv2d expects x (C,H,W) and kernel (Cout,Cin,k,k), got {x.data.shape} and {kernel.data.shape}")
    c_out, c_in, kh, kw = kernel.data.shape
    if kh != kw:
        raise ValueError(f"conv2d kernel must be square, got {kernel.data.shape}")
    if x.data.shape[0] != c_in:
        raise ValueError(
            f"conv2d channel mismatch: input has {x.data.shape[0]} channels, kernel expects {c_in}")
    k = kh
    padded = _zero_pad_chw(x.data, padding) if padding else x.data
    Hp, Wp = padded.shape[1], padded.shape[2]
    if Hp < k or Wp < k:
        raise ValueError(
            f"conv2d: padded input {padded.shape} smaller than kernel size {k}")
    win = _window_view(padded, k, stride)  # (nH, nW, C_in, k, k)
    out = np.tensordot(win, kernel.data, axes=([2, 3, 4], [1, 2, 3]))  # (nH, nW, C_out)
    data = np.ascontiguousarray(out.transpose(2, 0, 1))
    nH, nW = data.shape[1], data.shape[2]

    def backward(g):
        # g: (C_out, nH, nW)
        _accum(kernel, np.tensordot(g, win, axes=([1, 2], [0, 1])))
        if x.requires_grad:
            gp = np.zeros_like(padded)
            for ki in range(k):
                for kj in range(k):
                    contrib = np.tensordot(kernel.data[:, :, ki, kj], g, axes=([0], [0]))
                    gp[:, ki:ki + stride * nH:stride, kj:kj + stride * nW:stride] += contrib
            if padding:
                gp = gp[:, padding:padding + x.data.shape[1], padding:padding + x.data.shape[2]]
            _accum(x, gp)

    return _make(data, (x, kernel), backward)


def extract_windows(x: Tensor, k: int, stride: int, padding: int) -> Tensor:
    """Sliding k-by-k windows of x (C, H, W) as a (nH, nW, k, k, C) tensor."""
    padded = _zero_pad_chw(x.data, padding) if padding else x.data
    win = _window_view(padded, k, stride)  # (nH, nW, C, k, k)
    data = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2))
    nH, nW = data.shape[0], data.shape[1]

    def backward(g):
        if not x.requires_grad:
            return
        gp = np.zeros_like(padded)
        for ki in range(k):
            for kj in range(k):
                gp[:, ki:ki + stride * nH:stride, kj:kj + stride * nW:stride] += \
                    g[:, :, ki, kj, :].transpose(2, 0, 1)
        if padding:
            gp = gp[:, padding:padding + x.data.shape[1], padding:padding + x.data.shape[2]]
        _accum(x, gp)

    return _make(data, (x,), backward)


def gather_flat(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick flat-index entries from a; output has idx's shape."""
    idx = np.asarray(idx, dtype=np.int64)
    flat = a.data.reshape(-1)
    data = flat[idx]

    def backward(g):
        if a.requires_grad:
            scat = np.bincount(idx.reshape(-1), weights=g.reshape(-1).astype(np.float64),
                               minlength=flat.size)
            _accum(a, scat.reshape(a.data.shape).astype(a.dtype))

    return _make(data, (a,), backward)


def bilinear_sample(grid, coords) -> Tensor:
    """Bilinear interpolation of a (C, H, W) or (H, W) grid at (row, col) coords.

    coords is (K, 2).  Points strictly outside [0, H-1] x [0, W-1] yield 0.
    Returns (K, C) for a 3-d grid, (K,) for a 2-d grid.
    """
    g = as_tensor(grid)
    squeeze = g.ndim == 2
    vol = reshape(g, (1,) + g.shape) if squeeze else g
    pts = coords if isinstance(coords, Tensor) else Tensor(np.asarray(coords, dtype=vol.dtype))
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"bilinear_sample coords must be (K, 2), got {pts.shape}")
    out = sample_volumes(vol, pts)  # (C, K)
    if squeeze:
        return reshape(out, (out.shape[1],))
    return transpose(out, (1, 0))


def sample_volumes(vol: Tensor, coords) -> Tensor:
    """Bilinear sample each (H, W) slice of vol (P, H, W) at (row, col) coords.

    coords is (P, K, 2) (per-slice points) or (K, 2) (shared across slices);
    it may be a Tensor, in which case gradients flow into the coordinates.
    Points strictly outside [0, H-1] x [0, W-1] produce exactly 0 with zero
    coordinate gradient.  Returns (P, K).
    """
    P, H, W = vol.data.shape
    coords_t = coords if isinstance(coords, Tensor) else None
    pts = coords.data if coords_t is not None else np.asarray(coords, dtype=vol.dtype)
    shared = pts.ndim == 2
    if shared:
        pts = np.broadcast_to(pts, (P,) + pts.shape)
    if pts.shape[0] != P or pts.shape[-1] != 2:
        raise ValueError(f"sample_volumes coords must be (P, K, 2) or (K, 2), got {pts.shape}")
    K = pts.shape[1]

    r, c = pts[..., 0], pts[..., 1]
    valid = (r >= 0) & (r <= H - 1) & (c >= 0) & (c <= W - 1)
    r0 = np.floor(r)
    c0 = np.floor(c)
    wr = r - r0
    wc = c - c0
    r0i = np.clip(r0.astype(np.int64), 0, H - 1)
    c0i = np.clip(c0.astype(np.int64), 0, W - 1)
    r1i = np.clip(r0i + 1, 0, H - 1)
    c1i = np.clip(c0i + 1, 0, W - 1)
    pi = np.broadcast_to(np.arange(P)[:, None], (P, K))

    v00 = vol.data[pi, r0i, c0i]
    v01 = vol.data[pi, r0i, c1i]
    v10 = vol.data[pi, r1i, c0i]
    v11 = vol.data[pi, r1i, c1i]
    w00 = (1 - wr) * (1 - wc)
    w01 = (1 - wr) * wc
    w10 = wr * (1 - wc)
    w11 = wr * wc
    data = ((w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11) * valid).astype(vol.dtype)

    parents = (vol,) if coords_t is None else (vol, coords_t)

    def backward(g):
        gv = g * valid
        if vol.requires_grad:
            scat = np.zeros(P * H * W, dtype=np.float64)
            base = pi.astype(np.int64) * (H * W)
            for w, ri, ci in ((w00, r0i, c0i), (w01, r0i, c1i),
                              (w10, r1i, c0i), (w11, r1i, c1i)):
                np.add.at(scat, (base + ri * W + ci).reshape(-1),
                          (gv * w).reshape(-1).astype(np.float64))
            _accum(vol, scat.reshape(vol.data.shape).astype(vol.dtype))
        if coords_t is not None and coords_t.requires_grad:
            dr = (-(1 - wc) * v00 - wc * v01 + (1 - wc) * v10 + wc * v11) * gv
            dc = (-(1 - wr) * v00 + (1 - wr) * v01 - wr * v10 + wr * v11) * gv
            gc = np.stack([dr, dc], axis=-1)
            if shared:
                gc = gc.sum(axis=0)
            _accum(coords_t, gc.astype(coords_t.dtype))

    return _make(data, parents, backward)


def _interp_matrix(n_out: int, n_in: int, factor: int, dtype) -> np.ndarray:
    """Dense 1-d bilinear interpolation matrix with edge clamping."""
    mat = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        mat[:, 0] = 1.0
        return mat
    src = (np.arange(n_out, dtype=np.float64) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 2)
    w = src - i0
    rows = np.arange(n_out)
    mat[rows, i0] = 1.0 - w
    mat[rows, i0 + 1] += w
    return mat


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling of x (C, H, W) by an integer factor (values kept)."""
    C, H, W = x.data.shape
    R = _interp_matrix(H * factor, H, factor, x.dtype)
    S = _interp_matrix(W * factor, W, factor, x.dtype)
    data = np.matmul(np.matmul(R, x.data), S.T)

    def backward(g):
        _accum(x, np.matmul(np.matmul(R.T, g), S))

    return _make(data, (x,), backward)


def attention(q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None = None,
              mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention: softmax(q k^T / sqrt(d) + bias) v.

    q: (..., Nq, d), k and v: (..., Nk, d).  bias broadcasts against the
    (..., Nq, Nk) logits.  mask is a boolean array (True = key usable); a
    masked key receives an attention weight of exactly zero.  Raises if a
    query has every key masked.
    """
    if q.data.shape[-1] != k.data.shape[-1]:
        raise ValueError(
            f"attention: query dim {q.data.shape[-1]} does not match key dim {k.data.shape[-1]}")
    if k.data.shape[-2] != v.data.shape[-2]:
        raise ValueError(
            f"attention: key count {k.data.shape[-2]} does not match value count {v.data.shape[-2]}")
    d = q.data.shape[-1]
    logits = matmul(q, transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))
    logits = logits * (1.0 / np.sqrt(d))
    if bias is not None:
        logits = logits + bias
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim < logits.ndim:
            mask = np.broadcast_to(mask, np.broadcast_shapes(mask.shape, logits.data.shape))
        usable = mask.any(axis=-1)
        if not usable.all():
            raise ValueError("attention: some query has all keys masked")
        logits = logits + np.where(mask, 0.0, NEG_INF).astype(logits.dtype)
    weights = softmax(logits, axis=-1)
    return matmul(weights, v)
