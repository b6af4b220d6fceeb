"""Dense tensors with reverse-mode differentiation.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure computing the parents' adjoints. ``Tensor.backward`` replays those
closures in exact reverse execution order (each tensor carries a global
sequence number), then releases the graph.

Training runs in float32. Ops preserve the dtype of their inputs, which lets
the finite-difference tests run the same code in float64.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
# Clamp used inside logarithms of probabilities.
LOG_EPS = 1e-30

_sequence = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (outputs are constants)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_seq", "_released")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._seq = next(_sequence)
        self._released = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Stop-gradient: same values, no upstream adjoint."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph ------------------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1 or self.data.ndim > 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._released:
            raise RuntimeError("backward() already ran on this graph; rebuild the forward pass first")
        if not np.isfinite(self.data).all():
            raise FloatingPointError(f"non-finite loss value {self.data!r}")

        nodes = _reachable(self)
        adjoints: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in sorted(nodes, key=lambda t: t._seq, reverse=True):
            g = adjoints.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    if not np.isfinite(g).all():
                        raise FloatingPointError(f"non-finite gradient for {node!r}")
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + pg
                else:
                    adjoints[key] = pg
        for node in nodes:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node._released = True
        self._released = True

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _reachable(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    out: list[Tensor] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        out.append(node)
        stack.extend(node._parents)
    return out


def _wrap(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _make(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if _grad_enabled and any(_needs_grad(p) for p in parents):
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b, a.dtype if isinstance(a, Tensor) else None)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b, a.dtype if isinstance(a, Tensor) else None)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = _wrap(a)
    if not isinstance(b, Tensor):
        scale = np.asarray(b, dtype=a.dtype)
        return _make(a.data * scale, (a,), lambda g: (g * scale,))
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = range(a.ndim) if axis is None else np.atleast_1d(axis)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def take_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` along the leading axis."""

    def backward(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _make(a.data[start:stop], (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _make(out, (x,), lambda g: (g * (out > 0),))


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` with weight of shape (in, out)."""
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"dense: input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data + bias.data
    return _make(out, (x, weight, bias),
                 lambda g: (g @ weight.data.T, x.data.T @ g, g.sum(axis=0)))


# ---------------------------------------------------------------------------
# convolution and pooling
#
# Spatial ops accept layout="NCHW" (the default) or "NHWC". The model runs in
# NHWC because the patch matrix then maps straight onto the matmul output.
# Kernels are always stored as (K, C, kh, kw).
# ---------------------------------------------------------------------------
def _split_layout(shape, layout):
    if layout == "NCHW":
        n, c, h, w = shape
    elif layout == "NHWC":
        n, h, w, c = shape
    else:
        raise ValueError(f"unknown layout {layout!r}")
    return n, c, h, w


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: str = "same", layout: str = "NCHW") -> Tensor:
    """Stride-1 cross-correlation with a (K, C, kh, kw) kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    if layout == "NCHW":
        xt = transpose(x, (0, 2, 3, 1))
        out = conv2d(xt, kernel, bias, padding=padding, layout="NHWC")
        return transpose(out, (0, 3, 1, 2))
    n, c, h, w = _split_layout(x.shape, layout)
    k, kc, kh, kw = kernel.shape
    if kc != c:
        raise ValueError(f"conv2d: input has {c} channels but kernel expects {kc}")
    if bias.shape != (k,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {k} output channels")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"conv2d: same padding needs odd kernel extents, got {kh}x{kw}")
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
        if kh > h or kw > w:
            raise ValueError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{w}")
    else:
        raise ValueError(f"unknown padding {padding!r}")

    ho, wo = h + 2 * ph - kh + 1, w + 2 * pw - kw + 1
    cols = _patches(_pad_hw(x.data, ph, pw), kh, kw, ho, wo)
    # (kh*kw*C, K) with rows ordered like the patch columns
    wmat = kernel.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, k)
    out = cols @ wmat
    out += bias.data

    def backward(g):
        g2 = g.reshape(n * ho * wo, k)
        dkernel = (cols.T @ g2).reshape(kh, kw, c, k).transpose(3, 2, 0, 1)
        dbias = g2.sum(axis=0)
        dx = None
        if _needs_grad(x):
            # input adjoint = correlation of the padded output adjoint with the flipped kernel
            flipped = kernel.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(kh * kw * k, c)
            gcols = _patches(_pad_hw(g, kh - 1 - ph, kw - 1 - pw), kh, kw, h, w)
            dx = (gcols @ flipped).reshape(n, h, w, c)
        return dx, np.ascontiguousarray(dkernel), dbias

    return _make(out.reshape(n, ho, wo, k), (x, kernel, bias), backward)


def _pad_hw(a: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if not (ph or pw):
        return np.ascontiguousarray(a)
    n, h, w, c = a.shape
    out = np.zeros((n, h + 2 * ph, w + 2 * pw, c), dtype=a.dtype)
    out[:, ph:ph + h, pw:pw + w, :] = a
    return out


def _patches(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int) -> np.ndarray:
    """(N*Ho*Wo, kh*kw*C) patch matrix of a contiguous NHWC array.

    A kernel row of ``kw`` neighbouring pixels is one contiguous span of
    ``kw*C`` values, so a strided view with kh such spans per output pixel
    needs a single copy.
    """
    xp = np.ascontiguousarray(xp)
    n, hp, wp, c = xp.shape
    # derived from the shape: numpy may report arbitrary strides for extent-1 axes
    s_c = xp.itemsize
    s_w, s_h = c * s_c, wp * c * s_c
    s_n = hp * s_h
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(n, ho, wo, kh, kw * c), strides=(s_n, s_h, s_w, s_h, s_c), writeable=False
    )
    return view.reshape(n * ho * wo, kh * kw * c)


def transpose(x: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def maxpool2(x: Tensor, layout: str = "NCHW") -> Tensor:
    """2x2 max pooling with stride 2; ties go to the first element in row-major order."""
    if x.ndim != 4:
        raise ValueError(f"maxpool2 expects a 4-d input, got {x.shape}")
    n, c, h, w = _split_layout(x.shape, layout)
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial extents, got {h}x{w}")
    if layout == "NCHW":
        # window elements along the last axis in row-major order
        win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    else:
        win = x.data.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = (idx[..., None] == np.arange(4)) * g[..., None]
        if layout == "NCHW":
            gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        else:
            gx = gw.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
        return (gx.astype(x.dtype, copy=False),)

    return _make(out, (x,), backward)


def global_avg_pool(x: Tensor, layout: str = "NCHW") -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects a 4-d input, got {x.shape}")
    n, c, h, w = _split_layout(x.shape, layout)
    axes = (2, 3) if layout == "NCHW" else (1, 2)
    scale = np.asarray(1.0 / (h * w), dtype=x.dtype)

    def backward(g):
        g = g * scale
        g = g[:, :, None, None] if layout == "NCHW" else g[:, None, None, :]
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(x.data.mean(axis=axes, dtype=x.dtype), (x,), backward)


def batchnorm2d(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
    layout: str = "NCHW",
    update_stats: bool = True,
) -> Tensor:
    """Per-channel normalisation.

    In training mode the batch statistics are used and, unless
    ``update_stats`` is false, the running buffers are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    n, c, h, w = _split_layout(x.shape, layout)
    if c != scale.shape[0]:
        raise ValueError(f"batchnorm2d: input {x.shape} does not match {scale.shape[0]} channels")
    if layout == "NCHW":
        xt = transpose(x, (0, 2, 3, 1))
        out = batchnorm2d(xt, scale, shift, running_mean, running_var, training, momentum, eps, "NHWC", update_stats)
        return transpose(out, (0, 3, 1, 2))
    m = n * h * w
    x2 = x.data.reshape(m, c)
    # channel sums as ones-vector products: much faster than axis reductions on NHWC
    ones = np.ones(m, dtype=x.dtype)
    if training:
        mu = (ones @ x2) / m
        centered = x2 - mu
        var = (ones @ (centered * centered)) / m
    if training and update_stats:
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var * (m / max(m - 1, 1))
    if not training:
        mu, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
        centered = x2 - mu
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = centered * inv_std
    out = xhat * scale.data + shift.data

    def backward(g):
        g2 = g.reshape(m, c)
        dshift = ones @ g2
        dscale = ones @ (g2 * xhat)
        if training:
            # d/dx of batch-normalised output, with both batch statistics differentiated
            dx = (g2 - dshift / m - xhat * (dscale / m)) * (scale.data * inv_std)
        else:
            dx = g2 * (scale.data * inv_std)
        return dx.reshape(x.shape), dscale, dshift

    return _make(out.reshape(x.shape).astype(x.dtype, copy=False), (x, scale, shift), backward)


# ---------------------------------------------------------------------------
# probabilities and losses
# ---------------------------------------------------------------------------
def softmax(logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Row softmax of ``logits / temperature`` with max subtraction."""
    if not temperature > 0:
        raise ValueError(f"softmax temperature must be positive, got {temperature}")
    z = logits.data / np.asarray(temperature, dtype=logits.dtype)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - inner) / np.asarray(temperature, dtype=logits.dtype),)

    return _make(p, (logits,), backward)


def _row_mask(mask, n: int) -> np.ndarray:
    if mask is None:
        return np.ones(n, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n,):
        raise ValueError(f"row mask must have shape ({n},), got {mask.shape}")
    return mask


def _check_probs(p: np.ndarray, what: str) -> None:
    if p.ndim != 2:
        raise ValueError(f"{what} expects a 2-d probability matrix, got shape {p.shape}")
    if (p < 0).any():
        raise ValueError(f"{what}: probabilities must be non-negative")


def cross_entropy(probs: Tensor, labels, mask=None) -> Tensor:
    """Mean of ``-log p(y)`` over kept rows; an empty selection gives 0."""
    _check_probs(probs.data, "cross_entropy")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = probs.shape
    if labels.shape != (n,):
        raise ValueError(f"cross_entropy: expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"cross_entropy: labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    keep = _row_mask(mask, n)
    count = int(keep.sum())
    rows = np.arange(n)
    picked = np.maximum(probs.data[rows, labels], LOG_EPS)
    if count == 0:
        return _make(np.zeros((), dtype=probs.dtype), (probs,), lambda g: (np.zeros_like(probs.data),))
    value = -(np.log(picked) * keep).sum() / count

    def backward(g):
        grad = np.zeros_like(probs.data)
        grad[rows, labels] = -keep.astype(probs.dtype) / picked / count
        return (grad * g,)

    return _make(np.asarray(value, dtype=probs.dtype), (probs,), backward)


def kl_divergence(p: Tensor, q: Tensor, mask=None) -> Tensor:
    """Mean over kept rows of ``sum_i p_i (log p_i - log q_i)`` with ``0 log 0 = 0``.

    ``p`` is treated as a constant target; only ``q`` receives an adjoint.
    """
    _check_probs(p.data, "kl_divergence")
    _check_probs(q.data, "kl_divergence")
    if p.shape != q.shape:
        raise ValueError(f"kl_divergence: shapes differ {p.shape} vs {q.shape}")
    n = p.shape[0]
    keep = _row_mask(mask, n)
    count = int(keep.sum())
    if count == 0:
        return _make(np.zeros((), dtype=q.dtype), (q,), lambda g: (np.zeros_like(q.data),))
    pd = p.data
    qd = np.maximum(q.data, LOG_EPS)
    positive = pd > 0
    log_p = np.log(np.where(positive, pd, 1))
    terms = np.where(positive, pd * (log_p - np.log(qd)), 0)
    value = (terms.sum(axis=1) * keep).sum() / count

    def backward(g):
        return (-(pd / qd) * keep[:, None] / count * g,)

    return _make(np.asarray(value, dtype=q.dtype), (q,), backward)


def entropy(p: Tensor, mask=None) -> Tensor:
    """Mean row entropy ``-sum_i p_i log p_i`` over kept rows."""
    _check_probs(p.data, "entropy")
    n = p.shape[0]
    keep = _row_mask(mask, n)
    count = int(keep.sum())
    if count == 0:
        return _make(np.zeros((), dtype=p.dtype), (p,), lambda g: (np.zeros_like(p.data),))
    pd = p.data
    safe = np.maximum(pd, LOG_EPS)
    log_p = np.log(safe)
    value = -((pd * log_p).sum(axis=1) * keep).sum() / count

    def backward(g):
        return (-(log_p + 1) * keep[:, None] / count * g,)

    return _make(np.asarray(value, dtype=p.dtype), (p,), backward)
