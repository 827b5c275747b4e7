"""Dimensionality reduction: PCA preprocessing and exact O(n^2) t-SNE.

The t-SNE here is the canonical exact algorithm: per-point bandwidths found
by binary search to match the target perplexity (entropy tolerance 1e-5
nats), symmetrized joint affinities, an early-exaggeration phase, and
momentum gradient descent with adaptive per-coordinate gains.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import derive_rng

_P_FLOOR = 1e-12


@dataclass
class PcaResult:
    reduced: np.ndarray  # (n, k)
    components: np.ndarray  # (k, d) orthonormal rows
    mean: np.ndarray  # (d,)
    explained_variance_ratio: np.ndarray  # (k,), non-increasing


def pca_reduce(samples: np.ndarray, out_dims: int) -> PcaResult:
    """Mean-centered projection onto the top principal directions.

    Degenerate covariance truncates to the numerical rank instead of failing,
    so the returned dimensionality can be lower than requested.
    """
    x = np.asarray(samples, dtype=np.float64)
    n, d = x.shape
    if n <= out_dims:
        raise ValueError(f"need more than out_dims={out_dims} samples, got {n}")
    mean = x.mean(axis=0)
    xc = x - mean
    u, s, vt = np.linalg.svd(xc, full_matrices=False)
    total_var = float((s ** 2).sum())
    if total_var == 0.0:
        rank = 0
    else:
        rank = int((s > s[0] * 1e-12).sum())
    k = min(out_dims, rank)
    components = vt[:k]
    reduced = xc @ components.T
    ratios = (s[:k] ** 2) / total_var if total_var > 0 else np.zeros(0)
    return PcaResult(reduced=reduced, components=components, mean=mean,
                     explained_variance_ratio=ratios)


@dataclass
class TsneResult:
    coords: np.ndarray  # (n, 2)
    kl_final: float
    kl_post_exaggeration: float
    point_entropies: np.ndarray  # (n,) achieved conditional entropies, nats


def _conditional_affinities(sq_dists: np.ndarray, perplexity: float,
                            tol: float = 1e-5, max_iter: int = 100):
    """Binary-search per-point precisions so H(P_i) = log(perplexity) nats."""
    n = sq_dists.shape[0]
    target = np.log(perplexity)
    beta = np.ones(n)
    beta_min = np.full(n, -np.inf)
    beta_max = np.full(n, np.inf)
    eye = np.eye(n, dtype=bool)
    p = np.zeros_like(sq_dists)
    entropy = np.zeros(n)
    active = np.ones(n, dtype=bool)
    for _ in range(max_iter):
        w = np.exp(-sq_dists * beta[:, None])
        w[eye] = 0.0
        sum_w = np.maximum(w.sum(axis=1), _P_FLOOR)
        # H_i = log(sum_j w_ij) + beta_i * E_p[d^2]
        weighted_d = (w * sq_dists).sum(axis=1) / sum_w
        entropy = np.log(sum_w) + beta * weighted_d
        p = w / sum_w[:, None]
        diff = entropy - target
        active = np.abs(diff) > tol
        if not active.any():
            break
        too_high = active & (diff > 0)  # entropy too high -> increase beta
        too_low = active & ~too_high
        beta_min[too_high] = beta[too_high]
        beta[too_high] = np.where(np.isinf(beta_max[too_high]),
                                  beta[too_high] * 2.0,
                                  (beta[too_high] + beta_max[too_high]) / 2.0)
        beta_max[too_low] = beta[too_low]
        beta[too_low] = np.where(np.isinf(beta_min[too_low]),
                                 beta[too_low] / 2.0,
                                 (beta[too_low] + beta_min[too_low]) / 2.0)
    return p, entropy


def _kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    return float((p * np.log(p / q)).sum())


def tsne_embed(vectors: np.ndarray, perplexity: float = 30.0, iterations: int = 1000,
               seed: int = 0, learning_rate: float = 200.0,
               early_exaggeration: float = 12.0, exaggeration_iters: int = 250,
               initial_momentum: float = 0.5, final_momentum: float = 0.8,
               momentum_switch: int = 250) -> TsneResult:
    """Exact t-SNE to 2-D; deterministic for a fixed seed."""
    x = np.asarray(vectors, dtype=np.float64)
    n = x.shape[0]
    if not 5 <= n <= 10000:
        raise ValueError(f"exact t-SNE needs 5 <= n <= 10000 samples, got {n}")
    if perplexity >= (n - 1) / 3:
        raise ValueError(f"perplexity {perplexity} too large for {n} samples "
                         f"(must be < (n-1)/3 = {(n - 1) / 3:.1f})")

    sq = (x ** 2).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (x @ x.T), 0.0)
    cond_p, entropies = _conditional_affinities(d2, perplexity)
    p = (cond_p + cond_p.T) / (2.0 * n)
    p = np.maximum(p, _P_FLOOR)

    rng = derive_rng(seed, "tsne-init")
    y = rng.normal(0.0, 1e-4, (n, 2))
    velocity = np.zeros_like(y)
    gains = np.ones_like(y)
    kl_post_exaggeration = np.nan

    for it in range(iterations):
        p_eff = p * early_exaggeration if it < exaggeration_iters else p
        ysq = (y ** 2).sum(axis=1)
        num = 1.0 / (1.0 + np.maximum(ysq[:, None] + ysq[None, :] - 2.0 * (y @ y.T), 0.0))
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), _P_FLOOR)

        if it == exaggeration_iters:
            kl_post_exaggeration = _kl_divergence(p, q)

        w = (p_eff - q) * num
        grad = 4.0 * (w.sum(axis=1)[:, None] * y - w @ y)

        momentum = initial_momentum if it < momentum_switch else final_momentum
        same_sign = np.sign(grad) == np.sign(velocity)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        np.clip(gains, 0.01, None, out=gains)
        velocity = momentum * velocity - learning_rate * (gains * grad)
        y = y + velocity
        y = y - y.mean(axis=0)

    ysq = (y ** 2).sum(axis=1)
    num = 1.0 / (1.0 + np.maximum(ysq[:, None] + ysq[None, :] - 2.0 * (y @ y.T), 0.0))
    np.fill_diagonal(num, 0.0)
    q = np.maximum(num / num.sum(), _P_FLOOR)
    kl_final = _kl_divergence(p, q)

    return TsneResult(coords=y, kl_final=kl_final,
                      kl_post_exaggeration=float(kl_post_exaggeration),
                      point_entropies=entropies)
