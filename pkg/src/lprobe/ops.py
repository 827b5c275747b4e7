"""Differentiable layer operations: conv, batchnorm, pooling, linear, loss.

All operands are NCHW float64. Kernels are square, stride/padding symmetric.
Convolution runs as one im2col + dgemm per call; the backward rule rebuilds
the column matrix only when the weight actually needs gradient, so attack
loops (input-gradient only) skip that cost entirely.
"""

from __future__ import annotations

import numpy as np

from .tensor import DimensionError, Tensor, record_op


def _conv_out_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


def _pad2d(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    out[:, :, padding : padding + h, padding : padding + w] = x
    return out


def _to_cmajor(x: np.ndarray) -> np.ndarray:
    """(N,C,H,W) -> contiguous (C,N,H,W); swaps whole HxW blocks, so cheap."""
    return np.ascontiguousarray(x.transpose(1, 0, 2, 3))


def _pad_cmajor(xc: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return xc
    c, n, h, w = xc.shape
    out = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=xc.dtype)
    out[:, :, padding : padding + h, padding : padding + w] = xc
    return out


def _window(offset: int, stride: int, count: int) -> slice:
    return slice(offset, offset + stride * (count - 1) + 1, stride)


def _im2col_cmajor(xcp: np.ndarray, kernel: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Padded channel-major input -> (C*K*K, N*OH*OW) column matrix.

    Each kernel offset writes one contiguous (C, N*OH*OW) plane, so the copy
    runs at strided-read / sequential-write speed and the final reshape is
    free.
    """
    c, n = xcp.shape[0], xcp.shape[1]
    cols = np.empty((c, kernel, kernel, n, oh, ow), dtype=np.float64)
    for ki in range(kernel):
        for kj in range(kernel):
            cols[:, ki, kj] = xcp[:, :, _window(ki, stride, oh), _window(kj, stride, ow)]
    return cols.reshape(c * kernel * kernel, n * oh * ow)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation), NCHW input, OIKK weight."""
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d input must be NCHW, got shape {x.data.shape}")
    if weight.data.ndim != 4 or weight.data.shape[2] != weight.data.shape[3]:
        raise DimensionError(f"conv2d weight must be OIKK with square kernel, got {weight.data.shape}")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be non-negative, got {padding}")
    n, c, h, w = x.data.shape
    o, ci, k, _ = weight.data.shape
    if c != ci:
        raise DimensionError(f"conv2d input has {c} channels but weight expects {ci}")
    oh = _conv_out_extent(h, k, stride, padding)
    ow = _conv_out_extent(w, k, stride, padding)
    if oh < 1 or ow < 1:
        raise DimensionError(
            f"conv2d spatial extents {h}x{w} admit no output for kernel {k}, "
            f"stride {stride}, padding {padding}"
        )
    if bias is not None and bias.data.shape != (o,):
        raise DimensionError(f"conv2d bias must have shape ({o},), got {bias.data.shape}")

    # Channel-major im2col + one dgemm per direction. Transposes between NCHW
    # and channel-major move whole HxW blocks, and the column matrix is built
    # and consumed along contiguous planes, so no pathological gathers occur.
    xcp = _pad_cmajor(_to_cmajor(x.data), padding)
    w2 = weight.data.reshape(o, c * k * k)
    cols = _im2col_cmajor(xcp, k, stride, oh, ow)
    outc = (w2 @ cols).reshape(o, n, oh, ow)
    out = np.ascontiguousarray(outc.transpose(1, 0, 2, 3))
    if bias is not None:
        out += bias.data[None, :, None, None]

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def rule(out_grad):
        dout2 = _to_cmajor(out_grad).reshape(o, n * oh * ow)
        if x.needs_grad:
            dcols = (w2.T @ dout2).reshape(c, k, k, n, oh, ow)
            hp, wp = xcp.shape[2], xcp.shape[3]
            dxp = np.zeros((c, n, hp, wp), dtype=np.float64)
            for ki in range(k):
                for kj in range(k):
                    dxp[:, :, _window(ki, stride, oh), _window(kj, stride, ow)] += dcols[:, ki, kj]
            if padding:
                dxp = dxp[:, :, padding : padding + h, padding : padding + w]
            x._accumulate_owned(np.ascontiguousarray(dxp.transpose(1, 0, 2, 3)))
        if weight.needs_grad:
            # Rebuilt only on training steps; attack backwards (input gradient
            # only) never pay for it, and the tape stays memory-flat.
            dw2 = dout2 @ _im2col_cmajor(xcp, k, stride, oh, ow).T
            weight._accumulate_owned(dw2.reshape(o, c, k, k))
        if bias is not None and bias.needs_grad:
            bias._accumulate_owned(out_grad.sum(axis=(0, 2, 3)))

    return record_op(out, inputs, rule)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, train: bool, momentum: float = 0.1,
                eps: float = 1e-5, update_stats: bool = True) -> Tensor:
    """Per-channel batch normalization over (N,H,W).

    Train mode normalizes with batch statistics and, when ``update_stats``,
    folds them into the running estimates (unbiased variance, conventional
    momentum form). Eval mode normalizes with the running estimates only.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"batchnorm2d input must be NCHW, got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    for name, t in (("gamma", gamma), ("beta", beta)):
        if t.data.shape != (c,):
            raise DimensionError(f"batchnorm2d {name} must have shape ({c},), got {t.data.shape}")

    if train:
        if n < 2:
            raise ValueError("batchnorm2d train mode requires batch size >= 2 (undefined variance)")
        m = n * h * w
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
        if update_stats:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * var * (m / (m - 1.0))
    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean[None, :, None, None]) * inv_std[None, :, None, None]

    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def rule(out_grad):
        if gamma.needs_grad:
            gamma._accumulate_owned((out_grad * xhat).sum(axis=(0, 2, 3)))
        if beta.needs_grad:
            beta._accumulate_owned(out_grad.sum(axis=(0, 2, 3)))
        if x.needs_grad:
            g = out_grad * gamma.data[None, :, None, None]
            if train:
                m = n * h * w
                sum_g = g.sum(axis=(0, 2, 3))
                sum_gx = (g * xhat).sum(axis=(0, 2, 3))
                dx = (
                    g
                    - (sum_g / m)[None, :, None, None]
                    - xhat * (sum_gx / m)[None, :, None, None]
                ) * inv_std[None, :, None, None]
            else:
                dx = g * inv_std[None, :, None, None]
            x._accumulate_owned(dx)

    return record_op(out, (x, gamma, beta), rule)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def rule(out_grad):
        if x.needs_grad:
            x._accumulate_owned(out_grad * (x.data > 0.0))

    return record_op(out, (x,), rule)


def maxpool2d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping max pooling; spatial extents must divide the window."""
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2d input must be NCHW, got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    if window < 1:
        raise ValueError(f"window must be positive, got {window}")
    if h % window or w % window:
        raise DimensionError(
            f"maxpool2d requires spatial extents divisible by window, got {h}x{w} window {window}"
        )
    oh, ow = h // window, w // window
    tiles = x.data.reshape(n, c, oh, window, ow, window).transpose(0, 1, 2, 4, 3, 5)
    flat = tiles.reshape(n, c, oh, ow, window * window)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def rule(out_grad):
        if x.needs_grad:
            dflat = np.zeros_like(flat)
            np.put_along_axis(dflat, idx[..., None], out_grad[..., None], axis=-1)
            dx = dflat.reshape(n, c, oh, ow, window, window).transpose(0, 1, 2, 4, 3, 5)
            x._accumulate_owned(np.ascontiguousarray(dx).reshape(n, c, h, w))

    return record_op(out, (x,), rule)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C): each channel's spatial mean."""
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool input must be NCHW, got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))

    def rule(out_grad):
        if x.needs_grad:
            x.accumulate_grad(
                np.broadcast_to(out_grad[:, :, None, None] / (h * w), x.data.shape).copy()
            )

    return record_op(out, (x,), rule)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map: (N,D) @ (K,D)^T + (K,)."""
    if x.data.ndim != 2:
        raise DimensionError(f"linear input must be 2-D, got shape {x.data.shape}")
    if weight.data.ndim != 2 or weight.data.shape[1] != x.data.shape[1]:
        raise DimensionError(
            f"linear weight must be (out, {x.data.shape[1]}), got {weight.data.shape}"
        )
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.data.shape != (weight.data.shape[0],):
            raise DimensionError(
                f"linear bias must have shape ({weight.data.shape[0]},), got {bias.data.shape}"
            )
        out = out + bias.data[None, :]

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def rule(out_grad):
        if x.needs_grad:
            x._accumulate_owned(out_grad @ weight.data)
        if weight.needs_grad:
            weight._accumulate_owned(out_grad.T @ x.data)
        if bias is not None and bias.needs_grad:
            bias._accumulate_owned(out_grad.sum(axis=0))

    return record_op(out, inputs, rule)


def residual_add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(
            f"residual_add requires identical operand shapes, got {a.data.shape} and {b.data.shape}"
        )
    out = a.data + b.data

    def rule(out_grad):
        if a.needs_grad:
            a.accumulate_grad(out_grad)
        if b.needs_grad:
            b.accumulate_grad(out_grad)

    return record_op(out, (a, b), rule)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-stabilized."""
    if logits.data.ndim != 2:
        raise DimensionError(f"logits must be (N, classes), got shape {logits.data.shape}")
    labels = np.asarray(labels)
    n, k = logits.data.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    log_p = z[np.arange(n), labels] - log_norm
    out = np.asarray(-log_p.mean())

    def rule(out_grad):
        if logits.needs_grad:
            p = np.exp(z - log_norm[:, None])
            p[np.arange(n), labels] -= 1.0
            logits._accumulate_owned(p * (float(out_grad) / n))

    return record_op(out, (logits,), rule)


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Plain-array softmax (no tape), for reporting and analysis."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)
