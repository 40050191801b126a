"""Differentiable operations on :class:`Tensor`.

Layout conventions: images are NHWC, conv kernels are ``(kh, kw, c_in, c_out)``
and transpose-conv kernels are ``(kh, kw, c_out, c_in)``. Convolution is
cross-correlation (no kernel flip).
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_output

PROB_CLAMP = 1e-7


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _lift(a, like: Tensor | None = None) -> Tensor:
    if isinstance(a, Tensor):
        return a
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(a), dtype=dtype)


# ----------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data + b.data

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return make_output(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data - b.data

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return make_output(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data * b.data

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return make_output(out, (a, b), bw)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return make_output(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    return make_output(out, (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return make_output(out, (x,), lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return make_output(out, tensors, bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return make_output(out, (a, b), bw)


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape (n, d_in)."""
    x = as_tensor(x)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        grads = [g @ weight.data.T if x.requires_grad else None,
                 x.data.T @ g if weight.requires_grad else None]
        if bias is not None:
            grads.append(g.sum(axis=0) if bias.requires_grad else None)
        return grads

    return make_output(out, inputs, bw)


# ------------------------------------------------------------------ convolution

def _same_pads(size: int, k: int, s: int) -> tuple[int, int, int]:
    out = -(-size // s)
    total = max((out - 1) * s + k - size, 0)
    return out, total // 2, total - total // 2


def conv_geometry(h: int, w: int, kh: int, kw: int, stride: int, padding: str):
    """Output size and (top, bottom, left, right) zero padding."""
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if padding == "same":
        ho, pt, pb = _same_pads(h, kh, stride)
        wo, pl, pr = _same_pads(w, kw, stride)
    elif padding == "valid":
        if kh > h or kw > w:
            raise ShapeError(f"kernel {(kh, kw)} larger than input {(h, w)} under valid padding")
        ho = (h - kh) // stride + 1
        wo = (w - kw) // stride + 1
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    return ho, wo, (pt, pb, pl, pr)


def _correlate(xp: np.ndarray, k: np.ndarray, s: int, ho: int, wo: int) -> np.ndarray:
    """Strided cross-correlation of padded input with kernel (kh, kw, ci, co)."""
    n = xp.shape[0]
    kh, kw, ci, co = k.shape
    out = np.zeros((n * ho * wo, co), dtype=np.result_type(xp, k))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :]
            out += patch.reshape(-1, ci) @ k[i, j]
    return out.reshape(n, ho, wo, co)


def _correlate_adjoint(g: np.ndarray, k: np.ndarray, s: int, padded_shape) -> np.ndarray:
    """Adjoint of :func:`_correlate` with respect to the padded input."""
    n, ho, wo, co = g.shape
    kh, kw, ci, _ = k.shape
    dxp = np.zeros(padded_shape, dtype=np.result_type(g, k))
    g2 = g.reshape(-1, co)
    for i in range(kh):
        for j in range(kw):
            contrib = (g2 @ k[i, j].T).reshape(n, ho, wo, ci)
            dxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += contrib
    return dxp


def _correlate_kernel_grad(xp: np.ndarray, g: np.ndarray, kshape, s: int) -> np.ndarray:
    n, ho, wo, co = g.shape
    kh, kw, ci, _ = kshape
    dk = np.zeros(kshape, dtype=np.result_type(xp, g))
    g2 = g.reshape(-1, co)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :]
            dk[i, j] = patch.reshape(-1, ci).T @ g2
    return dk


def _check_conv_args(x: Tensor, kernel: Tensor, stride: int, in_axis: int):
    if x.ndim != 4:
        raise ShapeError(f"expected NHWC input, got shape {x.shape}")
    if kernel.ndim != 4:
        raise ShapeError(f"expected 4-d kernel, got shape {kernel.shape}")
    if kernel.shape[in_axis] != x.shape[3]:
        raise ShapeError(f"channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if int(stride) < 1:
        raise ValueError(f"stride must be positive, got {stride}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: str = "same") -> Tensor:
    x = as_tensor(x)
    _check_conv_args(x, kernel, stride, 2)
    n, h, w, ci = x.shape
    kh, kw, _, co = kernel.shape
    ho, wo, (pt, pb, pl, pr) = conv_geometry(h, w, kh, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else x.data
    out = _correlate(xp, kernel.data, stride, ho, wo)
    if bias is not None:
        out += bias.data
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        dx = dk = None
        if x.requires_grad:
            dxp = _correlate_adjoint(g, kernel.data, stride, xp.shape)
            dx = dxp[:, pt:pt + h, pl:pl + w, :]
        if kernel.requires_grad:
            dk = _correlate_kernel_grad(xp, g, kernel.shape, stride)
        grads = [dx, dk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1, 2)) if bias.requires_grad else None)
        return grads

    return make_output(out, inputs, bw)


def conv_transpose2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
                     stride: int = 2, padding: str = "same") -> Tensor:
    """Transposed convolution, defined as the exact adjoint of :func:`conv2d`.

    With ``padding="same"`` the spatial extent multiplies by ``stride``.
    """
    x = as_tensor(x)
    _check_conv_args(x, kernel, stride, 3)
    if padding != "same":
        raise ValueError("conv_transpose2d supports padding='same' only")
    n, h, w, _ = x.shape
    kh, kw, co, _ = kernel.shape
    H, W = h * stride, w * stride
    ho, wo, (pt, pb, pl, pr) = conv_geometry(H, W, kh, kw, stride, "same")
    assert (ho, wo) == (h, w)
    padded = (n, H + pt + pb, W + pl + pr, co)
    # forward-conv kernel view is (kh, kw, co, ci): exactly our layout
    outp = _correlate_adjoint(x.data, kernel.data, stride, padded)
    out = np.ascontiguousarray(outp[:, pt:pt + H, pl:pl + W, :])
    if bias is not None:
        out += bias.data
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        dx = dk = None
        gp = np.pad(g, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else g
        if x.requires_grad:
            dx = _correlate(gp, kernel.data, stride, h, w)
        if kernel.requires_grad:
            dk = _correlate_kernel_grad(gp, x.data, kernel.shape, stride)
        grads = [dx, dk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1, 2)) if bias.requires_grad else None)
        return grads

    return make_output(out, inputs, bw)


# ---------------------------------------------------------------------- pooling

def max_pool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    x = as_tensor(x)
    n, h, w, c = x.shape
    if window > h or window > w:
        raise ShapeError(f"pool window {window} larger than input {(h, w)}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    views = [x.data[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]
             for i in range(window) for j in range(window)]
    stack = np.stack(views, axis=-1)
    arg = stack.argmax(axis=-1)
    out = np.take_along_axis(stack, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        dx = np.zeros_like(x.data)
        idx = 0
        for i in range(window):
            for j in range(window):
                dx[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += g * (arg == idx)
                idx += 1
        return (dx,)

    return make_output(out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n, h, w, c = x.shape
    out = x.data.mean(axis=(1, 2))

    def bw(g):
        return (np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).astype(x.dtype),)

    return make_output(out, (x,), bw)


def pool(x: Tensor, kind: str = "max", window: int = 2, stride: int = 2) -> Tensor:
    if kind == "max":
        return max_pool2d(x, window, stride)
    if kind == "global_avg":
        return global_avg_pool(x)
    raise ValueError(f"unknown pool kind {kind!r}")


# ------------------------------------------------------------------ batch norm

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.99,
               epsilon: float = 1e-5, update_stats: bool = True) -> Tensor:
    """Normalize over every axis but the last.

    In training mode the batch statistics are used and, when ``update_stats``,
    the running buffers are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    x = as_tensor(x)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,) or running_mean.shape != (c,) or running_var.shape != (c,):
        raise ShapeError(f"batch_norm parameters must have shape ({c},)")
    axes = tuple(range(x.ndim - 1))
    m = x.data.size // c
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_stats:
            running_mean *= momentum
            running_mean += (1 - momentum) * mu
            running_var *= momentum
            running_var += (1 - momentum) * var
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + epsilon)).astype(x.dtype)
    x_hat = (x.data - mu) * inv_std
    out = gamma.data * x_hat + beta.data

    def bw(g):
        dx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            if training:
                s1 = dxhat.sum(axis=axes)
                s2 = (dxhat * x_hat).sum(axis=axes)
                dx = inv_std / m * (m * dxhat - s1 - x_hat * s2)
            else:
                dx = dxhat * inv_std
        dgamma = (g * x_hat).sum(axis=axes) if gamma.requires_grad else None
        dbeta = g.sum(axis=axes) if beta.requires_grad else None
        return dx, dgamma, dbeta

    return make_output(out.astype(x.dtype, copy=False), (x, gamma, beta), bw)


# ------------------------------------------------------------------ activations

def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_output(x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return make_output(x.data * scale, (x,), lambda g: (g * scale,))


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return make_output(y, (x,), lambda g: (g * (1 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1 / (1 + z), z / (1 + z)).astype(x.dtype)
    return make_output(y, (x,), lambda g: (g * y * (1 - y),))


def softmax(x: Tensor) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_output(y, (x,), bw)


def linear(x: Tensor) -> Tensor:
    return as_tensor(x)


def apply_activation(x: Tensor, kind: str, slope: float = 0.2) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "tanh":
        return tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax":
        return softmax(x)
    if kind == "linear":
        return linear(x)
    raise ValueError(f"unknown activation {kind!r}")


# -------------------------------------------------------- dropout / embedding

def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) at train time."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = rng.random(x.shape) >= p
    scale = (keep / (1 - p)).astype(x.dtype)
    return make_output(x.data * scale, (x,), lambda g: (g * scale,))


def embed(labels, table: Tensor) -> Tensor:
    """Row lookup; a scalar label yields a (dim,) vector, an array (n, dim)."""
    idx = np.asarray(labels)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ValueError(f"labels must be integers, got dtype {idx.dtype}")
    num = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= num):
        raise IndexError(f"label out of range [0, {num}): {idx.tolist()}")
    out = table.data[idx]

    def bw(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, idx, g)
        return (dt,)

    return make_output(out, (table,), bw)


# ----------------------------------------------------------------------- losses

def _clamp(p: np.ndarray):
    pc = np.clip(p, PROB_CLAMP, 1 - PROB_CLAMP)
    inside = (p >= PROB_CLAMP) & (p <= 1 - PROB_CLAMP)
    return pc, inside


def binary_crossentropy(pred: Tensor, target) -> Tensor:
    pred = as_tensor(pred)
    t = np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ShapeError(f"bce target shape {t.shape} != prediction shape {pred.shape}")
    pc, inside = _clamp(pred.data)
    n = pred.data.size
    loss = -(t * np.log(pc) + (1 - t) * np.log(1 - pc)).mean()

    def bw(g):
        d = -(t / pc - (1 - t) / (1 - pc)) / n
        return ((g * d * inside).astype(pred.dtype),)

    return make_output(np.asarray(loss, dtype=pred.dtype), (pred,), bw)


def categorical_crossentropy(pred: Tensor, target) -> Tensor:
    pred = as_tensor(pred)
    t = np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape or pred.ndim != 2:
        raise ShapeError(f"categorical target shape {t.shape} != prediction shape {pred.shape}")
    pc, inside = _clamp(pred.data)
    n = pred.shape[0]
    loss = -(t * np.log(pc)).sum() / n

    def bw(g):
        return ((g * (-t / pc) / n * inside).astype(pred.dtype),)

    return make_output(np.asarray(loss, dtype=pred.dtype), (pred,), bw)


def sparse_categorical_crossentropy(pred: Tensor, target) -> Tensor:
    pred = as_tensor(pred)
    idx = np.asarray(target)
    if pred.ndim != 2 or idx.shape != (pred.shape[0],):
        raise ShapeError(f"sparse target shape {idx.shape} incompatible with prediction {pred.shape}")
    k = pred.shape[1]
    if idx.size and (idx.min() < 0 or idx.max() >= k):
        raise IndexError(f"sparse target index out of range [0, {k})")
    onehot = np.eye(k, dtype=pred.dtype)[idx]
    return categorical_crossentropy(pred, onehot)


def compute_loss(kind: str, pred: Tensor, target) -> Tensor:
    if kind == "bce":
        return binary_crossentropy(pred, target)
    if kind == "categorical_ce":
        return categorical_crossentropy(pred, target)
    if kind == "sparse_categorical_ce":
        return sparse_categorical_crossentropy(pred, target)
    raise ValueError(f"unknown loss {kind!r}")


def output_size_same(size: int, stride: int) -> int:
    return math.ceil(size / stride)
