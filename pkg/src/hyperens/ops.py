"""Neural-network primitives on :class:`~hyperens.tensor.Tensor`.

Convolutions are cross-correlations computed by patch-matrix expansion
(im2col) followed by a single matrix product; the transposed convolution is
the exact adjoint of the strided convolution.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .tensor import Tensor, as_tensor, make_node

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """[N,C,Hp,Wp] -> [C*k*k, N*ho*wo]."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # win: [N, C, ho, wo, k, k]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * ho * wo)


def _col2im(cols: np.ndarray, shape: tuple[int, ...], k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add columns back into a [N,C,Hp,Wp] grid."""
    n, c = shape[:2]
    out = np.zeros(shape)
    cols = cols.reshape(c, k, k, n, ho, wo).transpose(3, 0, 1, 2, 4, 5)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    return out


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _unpad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return x[:, :, p:-p, p:-p]


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if wcin != cin:
        raise ValueError(f"conv2d channel mismatch: input has {cin} channels, weight expects {wcin} ({weight.shape})")
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d needs a square odd kernel, got {k}x{k2}")
    if padding < 0 or stride < 1:
        raise ValueError("conv2d needs padding >= 0 and stride >= 1")
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output would be empty for input {x.shape}, kernel {k}, stride {stride}")

    xp = _pad(x.data, padding)
    cols = _im2col(xp, k, stride, ho, wo)
    w2 = weight.data.reshape(cout, -1)
    out = (w2 @ cols).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, cout, 1, 1)

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gx = _unpad(_col2im(w2.T @ g2, xp.shape, k, stride, ho, wo), padding) if x.requires_grad else None
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(np.ascontiguousarray(out), parents, bw)


def conv2d_transposed(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution with weight layout [Cin, Cout, k, k].

    Output extent is ``(H - 1) * stride - 2 * padding + k``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d_transposed expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    wcin, cout, k, k2 = weight.shape
    if wcin != cin:
        raise ValueError(f"conv2d_transposed channel mismatch: input has {cin} channels, weight expects {wcin} ({weight.shape})")
    if k != k2:
        raise ValueError(f"conv2d_transposed needs a square kernel, got {k}x{k2}")
    if padding < 0 or stride < 1:
        raise ValueError("conv2d_transposed needs padding >= 0 and stride >= 1")
    hf, wf = (h - 1) * stride + k, (w - 1) * stride + k
    if hf - 2 * padding < 1 or wf - 2 * padding < 1:
        raise ValueError("conv2d_transposed output would be empty")

    x2 = x.data.transpose(1, 0, 2, 3).reshape(cin, -1)
    w2 = weight.data.reshape(cin, -1)
    full = _col2im(w2.T @ x2, (n, cout, hf, wf), k, stride, h, w)
    out = _unpad(full, padding)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, cout, 1, 1)

    def bw(g):
        cols = _im2col(_pad(g, padding), k, stride, h, w)
        gx = (w2 @ cols).reshape(cin, n, h, w).transpose(1, 0, 2, 3) if x.requires_grad else None
        gw = (x2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(np.ascontiguousarray(out), parents, bw)


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with weight laid out [dout, din]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"dense dimension mismatch: input {x.shape}, weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"dense bias shape {bias.shape} does not match {weight.shape[0]} outputs")
        out = out + bias.data

    def bw(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        return (gx, gw) if bias is None else (gx, gw, g.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, bw)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = expit(x.data)
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_node(x.data * mask, (x,), lambda g: (g * mask,))


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Parametric ReLU with one slope per channel (axis 1)."""
    x, slope = as_tensor(x), as_tensor(slope)
    shape = (1, -1) + (1,) * (x.ndim - 2)
    a = slope.data.reshape(shape)
    pos = x.data > 0
    out = np.where(pos, x.data, a * x.data)

    def bw(g):
        axes = (0,) + tuple(range(2, x.ndim))
        return np.where(pos, g, a * g), np.where(pos, 0.0, g * x.data).sum(axis=axes)

    return make_node(out, (x, slope), bw)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalization over (N, H, W).

    In training mode batch statistics are used and the running buffers are
    updated in place (outside the tape). Eval mode, or a batch holding a
    single value per channel, uses the running statistics.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[1]
    axes = (0, 2, 3)
    shape = (1, c, 1, 1)
    use_batch = training and x.data.size // c >= 2
    if use_batch:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = x.data.size // c
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * m / max(m - 1, 1)
    else:
        mu, var = running_mean.copy(), running_var.copy()

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(shape)) * inv.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def bw(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(shape)
        if use_batch:
            m = x.data.size // c
            gx = (inv.reshape(shape) / m) * (
                m * gxhat - gxhat.sum(axis=axes, keepdims=True) - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * inv.reshape(shape)
        return gx, gg, gb

    return make_node(out, (x, gamma, beta), bw)


def channel_dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Zero whole feature maps with probability ``rate`` (inverted scaling)."""
    if not training or rate <= 0.0 or rng is None:
        return x
    n, c = x.shape[:2]
    keep = (rng.random((n, c)) >= rate).astype(np.float64) / (1.0 - rate)
    mask = keep.reshape(n, c, *([1] * (x.ndim - 2)))
    return make_node(x.data * mask, (x,), lambda g: (g * mask,))
