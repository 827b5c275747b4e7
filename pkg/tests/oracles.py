"""Independent reference implementations used to check the fast paths.

These stay deliberately naive (explicit loops, direct formulas) so they share
no code with the implementations they verify.
"""

import numpy as np


def conv2d_direct(x, w, bias=None, stride=1, padding=0):
    """Six-loop direct convolution, the conv2d ground truth."""
    n, c, h, width = x.shape
    o, _, k, _ = w.shape
    oh = (h + 2 * padding - k) // stride + 1
    ow = (width + 2 * padding - k) // stride + 1
    xp = np.zeros((n, c, h + 2 * padding, width + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + width] = x
    out = np.zeros((n, o, oh, ow))
    for nn in range(n):
        for oo in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for cc in range(c):
                        for ki in range(k):
                            for kj in range(k):
                                acc += xp[nn, cc, i * stride + ki, j * stride + kj] \
                                    * w[oo, cc, ki, kj]
                    out[nn, oo, i, j] = acc + (bias[oo] if bias is not None else 0.0)
    return out


def finite_diff_grad(f, x, h=1e-5):
    """Central finite differences of a scalar function at every entry of x."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
        it.iternext()
    return grad


def finite_diff_probe(f, arr, idx, h=1e-5):
    """Central finite difference of a scalar function wrt one entry."""
    old = arr[idx]
    arr[idx] = old + h
    fp = f()
    arr[idx] = old - h
    fm = f()
    arr[idx] = old
    return (fp - fm) / (2 * h)


def softmax_xent_longdouble(logits, labels):
    """Cross-entropy evaluated in extended precision, direct formula."""
    z = np.asarray(logits, dtype=np.longdouble)
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    picked = p[np.arange(len(labels)), labels]
    return float(-np.log(picked).mean())


def kde_point_oracle(coords, cell_xy, bandwidth):
    """Unnormalized Gaussian kernel sum at one grid cell, direct summation."""
    hx, hy = bandwidth
    cx, cy = cell_xy
    total = 0.0
    for px, py in coords:
        total += np.exp(-0.5 * ((cx - px) / hx) ** 2 - 0.5 * ((cy - py) / hy) ** 2)
    return total / (len(coords) * 2.0 * np.pi * hx * hy)


def js_divergence_direct(p, q, smoothing=1e-12):
    """JS divergence of two discrete distributions, written out longhand."""
    p = np.asarray(p, dtype=np.float64) + smoothing
    q = np.asarray(q, dtype=np.float64) + smoothing
    p = p / p.sum()
    q = q / q.sum()
    m = (p + q) / 2.0
    kl_pm = sum(pi * np.log(pi / mi) for pi, mi in zip(p.ravel(), m.ravel()))
    kl_qm = sum(qi * np.log(qi / mi) for qi, mi in zip(q.ravel(), m.ravel()))
    return 0.5 * kl_pm + 0.5 * kl_qm


def relative_error(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)
