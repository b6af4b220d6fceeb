"""Independent reference implementations used as test oracles."""
import numpy as np

from ssl_lab.tensor import Tensor

EPS = 1e-4


def numeric_grad(f, x: np.ndarray, eps: float = EPS, coords=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (mutated in place and restored)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size) if coords is None else coords:
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Largest elementwise error scaled by the larger gradient magnitude."""
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return float(np.abs(a - b).max() / scale)


def gradcheck(fn, arrays, rng, eps=EPS):
    """Max relative error over all inputs of ``sum(fn(*tensors) * w)`` for a random ``w``."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    weight = rng.standard_normal(out.shape) if out.shape else np.array(1.0)

    def scalar():
        return float((fn(*[Tensor(t.data) for t in tensors]).data * weight).sum())

    from ssl_lab import tensor as T

    loss = T.tsum(T.mul(out, Tensor(weight)))
    loss.backward()
    errs = []
    for t in tensors:
        num = numeric_grad(scalar, t.data, eps)
        errs.append(rel_err(t.grad, num))
    return max(errs)


def conv2d_reference(x, k, b, padding):
    """Direct nested-loop cross-correlation in NCHW."""
    n, c, h, w = x.shape
    kk, _, kh, kw = k.shape
    if padding == "same":
        ph, pw = kh // 2, kw // 2
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    ho, wo = x.shape[2] - kh + 1, x.shape[3] - kw + 1
    out = np.zeros((n, kk, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = x[:, :, i:i + kh, j:j + kw]
            out[:, :, i, j] = np.tensordot(patch, k, axes=([1, 2, 3], [1, 2, 3]))
    return out + b[None, :, None, None]


def softmax_reference(z, t=1.0):
    e = np.exp((z - z.max(axis=1, keepdims=True)) / t)
    return e / e.sum(axis=1, keepdims=True)
