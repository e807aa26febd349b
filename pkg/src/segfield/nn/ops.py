"""Differentiable ops over Tensors.

Forward math runs on numpy float64; each op hand-writes its backward
closure. Conventions:

* conv3d operates on (N, C, D, H, W); linear on (N, F).
* Forward matmuls run as fixed-shape GEMM calls (64-row blocks, zero
  padded): BLAS picks different accumulation orders per problem shape,
  so a row's result would otherwise depend on how many rows share the
  call.  With the shape pinned, evaluating a point alone, in a chunk,
  or in a full batch gives bitwise-identical output.
* Losses return scalars and fold their normalization into backward.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..volume import GridDims, interp_parts
from .tensor import Tensor, as_tensor

_EPS_DICE = 1e-5
_TINY_NORM = 1e-12


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


_ROW_BLOCK = 64


def _stable_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a @ b with bitwise row results independent of a's row count."""
    m = a.shape[0]
    out = np.empty((m, b.shape[1]))
    for i in range(0, m, _ROW_BLOCK):
        chunk = a[i : i + _ROW_BLOCK]
        if chunk.shape[0] == _ROW_BLOCK:
            out[i : i + _ROW_BLOCK] = chunk @ b
        else:
            padded = np.zeros((_ROW_BLOCK, a.shape[1]))
            padded[: chunk.shape[0]] = chunk
            out[i : i + _ROW_BLOCK] = (padded @ b)[: chunk.shape[0]]
    return out


# ------------------------------------------------------------ elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.data.shape))

    return Tensor.result(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    return Tensor.result(out_data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        x.accumulate(g * mask)

    return Tensor.result(np.where(mask, x.data, 0.0), (x,), backward)


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    mask = x.data > 0

    def backward(g):
        x.accumulate(g * np.where(mask, 1.0, slope))

    return Tensor.result(np.where(mask, x.data, slope * x.data), (x,), backward)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backward(g):
        x.accumulate(g * (1.0 - y * y))

    return Tensor.result(y, (x,), backward)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    y = np.clip(x.data, lo, hi)
    passes = (x.data >= lo) & (x.data <= hi)  # boundary passes gradient

    def backward(g):
        x.accumulate(g * passes)

    return Tensor.result(y, (x,), backward)


# ------------------------------------------------------------ shape plumbing


def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape

    def backward(g):
        x.accumulate(g.reshape(old))

    return Tensor.result(x.data.reshape(shape), (x,), backward)


def moveaxis(x: Tensor, src: int, dst: int) -> Tensor:
    def backward(g):
        x.accumulate(np.moveaxis(g, dst, src))

    return Tensor.result(np.ascontiguousarray(np.moveaxis(x.data, src, dst)), (x,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t.accumulate(np.ascontiguousarray(piece))

    return Tensor.result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def mean(x: Tensor) -> Tensor:
    n = x.data.size

    def backward(g):
        x.accumulate(np.full_like(x.data, float(g) / n))

    return Tensor.result(np.asarray(x.data.mean()), (x,), backward)


def total(x: Tensor) -> Tensor:
    def backward(g):
        x.accumulate(np.full_like(x.data, float(g)))

    return Tensor.result(np.asarray(x.data.sum()), (x,), backward)


# ------------------------------------------------------------ dense layers


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w (+ b); x is (n, f), w is (f, o)."""
    y = _stable_matmul(x.data, w.data)
    if b is not None:
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        if x.requires_grad:
            x.accumulate(_stable_matmul(g, w.data.T))
        if w.requires_grad:
            w.accumulate(x.data.T @ g)
        if b is not None and b.requires_grad:
            b.accumulate(g.sum(axis=0))

    return Tensor.result(y, parents, backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        x.accumulate(p * (g - dot))

    return Tensor.result(p, (x,), backward)


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """3-d convolution (cross-correlation), x (n,c,d,h,w), w (o,c,k,k,k)."""
    n, c, d, h, ww = x.data.shape
    o, c2, k, k2, k3 = w.data.shape
    if c != c2 or k != k2 or k != k3:
        raise ValueError(f"kernel {w.data.shape} incompatible with input {x.data.shape}")
    s, p = int(stride), int(padding)
    if s < 1 or p < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    do = (d + 2 * p - k) // s + 1
    ho = (h + 2 * p - k) // s + 1
    wo = (ww + 2 * p - k) // s + 1
    if do < 1 or ho < 1 or wo < 1:
        raise ValueError(f"kernel {k} does not fit padded input {xp.shape[2:]}")
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))[:, :, ::s, ::s, ::s]
    m = do * ho * wo
    cols = np.ascontiguousarray(win.transpose(0, 1, 5, 6, 7, 2, 3, 4)).reshape(n, c * k**3, m)
    wmat = w.data.reshape(o, c * k**3)
    out = np.empty((n, o, m))
    for i in range(n):
        out[i] = wmat @ cols[i]
    out = out.reshape(n, o, do, ho, wo)
    if b is not None:
        out = out + b.data.reshape(1, o, 1, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(n, o, m)
        if w.requires_grad:
            dw = np.zeros((o, c * k**3))
            for i in range(n):
                dw += g2[i] @ cols[i].T
            w.accumulate(dw.reshape(w.data.shape))
        if b is not None and b.requires_grad:
            b.accumulate(g.sum(axis=(0, 2, 3, 4)))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(n):
                dcol = (wmat.T @ g2[i]).reshape(c, k, k, k, do, ho, wo)
                for ka in range(k):
                    for kb in range(k):
                        for kc in range(k):
                            dxp[
                                i,
                                :,
                                ka : ka + s * (do - 1) + 1 : s,
                                kb : kb + s * (ho - 1) + 1 : s,
                                kc : kc + s * (wo - 1) + 1 : s,
                            ] += dcol[:, ka, kb, kc]
            x.accumulate(dxp[:, :, p : p + d, p : p + h, p : p + ww])

    return Tensor.result(out, parents, backward)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbor x2 on the three trailing axes of (n,c,d,h,w)."""
    if x.data.ndim != 5:
        raise ValueError("upsample2 expects a (n,c,d,h,w) tensor")
    y = x.data.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)
    n, c, d, h, w = x.data.shape

    def backward(g):
        x.accumulate(g.reshape(n, c, d, 2, h, 2, w, 2).sum(axis=(3, 5, 7)))

    return Tensor.result(y, (x,), backward)


# ------------------------------------------------------------ field sampling


def trilinear(field: Tensor, coords: Tensor) -> Tensor:
    """Sample a (c, d, h, w) field at (n, 3) normalized (x, y, z) points.

    Differentiable in both arguments. Matches volume.sample_grid bitwise
    (same kernel underneath). Components outside [-1, 1] are clamped and
    get zero coordinate-gradient; exactly-on-boundary components pass the
    one-sided slope.
    """
    fld = field.data
    if fld.ndim != 4:
        raise ValueError("field must be (c, d, h, w)")
    c, d, h, w = fld.shape
    dims = GridDims(d, h, w)
    i0, frac = interp_parts(coords.data, dims)
    inside = (np.abs(coords.data) <= 1.0).astype(np.float64)  # (n, 3)
    x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    flat = fld.reshape(c, -1)
    npts = i0.shape[0]
    out = np.zeros((npts, c))
    corners = []  # (flat index, wx, wy, wz) per corner, reused in backward
    for cz in (0, 1):
        wz = fz if cz else 1.0 - fz
        for cy in (0, 1):
            wy = fy if cy else 1.0 - fy
            for cx in (0, 1):
                wx = fx if cx else 1.0 - fx
                idx = ((z0 + cz) * h + (y0 + cy)) * w + (x0 + cx)
                corners.append((idx, cx, cy, cz, wx, wy, wz))
                out += (wx * wy * wz)[:, None] * flat[:, idx].T

    def backward(g):
        if field.requires_grad:
            dflat = np.zeros((d * h * w, c))
            for idx, _, _, _, wx, wy, wz in corners:
                np.add.at(dflat, idx, (wx * wy * wz)[:, None] * g)
            field.accumulate(np.ascontiguousarray(dflat.T).reshape(fld.shape))
        if coords.requires_grad:
            gx = np.zeros(npts)
            gy = np.zeros(npts)
            gz = np.zeros(npts)
            for idx, cx, cy, cz, wx, wy, wz in corners:
                contrib = (g * flat[:, idx].T).sum(axis=1)
                gx += (1.0 if cx else -1.0) * wy * wz * contrib
                gy += (1.0 if cy else -1.0) * wx * wz * contrib
                gz += (1.0 if cz else -1.0) * wx * wy * contrib
            scale = np.array([(w - 1) / 2.0, (h - 1) / 2.0, (d - 1) / 2.0])
            coords.accumulate(np.stack([gx, gy, gz], axis=1) * scale * inside)

    return Tensor.result(out, (field, coords), backward)


# ------------------------------------------------------------ fused losses


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy; logits (n, c), targets (n,) int."""
    t = np.asarray(targets)
    n = logits.data.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + logits.data.max(axis=1)
    picked = logits.data[np.arange(n), t]
    loss = (lse - picked).mean()
    p = np.exp(shifted)
    p /= p.sum(axis=1, keepdims=True)

    def backward(g):
        d = p.copy()
        d[np.arange(n), t] -= 1.0
        logits.accumulate(d * (float(g) / n))

    return Tensor.result(np.asarray(loss), (logits,), backward)


def soft_dice_loss(probs: Tensor, onehot: np.ndarray) -> Tensor:
    """1 - mean over classes of (2*sum(p*y)+eps) / (sum(p)+sum(y)+eps).

    probs (n, c) channel-normalized, onehot (n, c) in {0, 1}. All classes
    participate, background included.
    """
    y = np.asarray(onehot, dtype=np.float64)
    p = probs.data
    if p.shape != y.shape:
        raise ValueError(f"probs {p.shape} vs onehot {y.shape}")
    c = p.shape[1]
    num = 2.0 * (p * y).sum(axis=0) + _EPS_DICE
    den = p.sum(axis=0) + y.sum(axis=0) + _EPS_DICE
    loss = 1.0 - (num / den).mean()

    def backward(g):
        d = (num / (den * den) - 2.0 * y / den) / c
        probs.accumulate(d * float(g))

    return Tensor.result(np.asarray(loss), (probs,), backward)


def deformation_penalty(d: Tensor) -> Tensor:
    """Mean Euclidean norm of (n, 3) displacement rows."""
    norms = np.sqrt((d.data * d.data).sum(axis=1))
    n = d.data.shape[0]

    def backward(g):
        safe = np.maximum(norms, _TINY_NORM)
        d.accumulate((float(g) / n) * d.data / safe[:, None])

    return Tensor.result(np.asarray(norms.mean()), (d,), backward)
