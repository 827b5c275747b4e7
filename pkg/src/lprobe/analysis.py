"""Feature-distribution analysis: harvest channel vectors, embed, compare.

At each requested segment output, a forward pass emits the channel vector at
a handful of uniformly drawn spatial positions per image; positions are drawn
once per (image, segment) and shared between the clean and attacked version
of that image, so pairs stay comparable. Embedded clouds get per-group KDE
grids on a shared bounding box and a Jensen-Shannon divergence score.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackConfig, pgd
from .density import js_divergence, kde_grid, shared_bounds
from .embedding import pca_reduce, tsne_embed
from .rng import derive_rng
from .tensor import Tensor


@dataclass
class ActivationSample:
    segment_name: str
    channel_vector: np.ndarray
    image_id: int
    spatial_position: tuple  # (h, w)
    is_adversarial: bool
    true_label: int


@dataclass
class AnalysisConfig:
    segments: tuple = ("m_1", "m_2", "m_3", "m_4")
    positions_per_image: int = 20
    n_images: int = 200
    pca_dims: int = 50
    perplexity: float = 30.0
    tsne_iterations: int = 1000
    kde_resolution: int = 200
    # Exact t-SNE is O(n^2); harvested samples above this per-group cap are
    # subsampled (seeded) before embedding.
    embed_cap_per_group: int = 700
    standardize: bool = True
    seed: int = 0


def _tap_spatial(arr: np.ndarray) -> np.ndarray:
    """Segment outputs as (N, C, H, W); vector outputs count as 1x1 spatial."""
    if arr.ndim == 4:
        return arr
    if arr.ndim == 2:
        return arr[:, :, None, None]
    raise ValueError(f"cannot harvest from activation of shape {arr.shape}")


def harvest(model, images: np.ndarray, labels: np.ndarray, segments,
            positions_per_image: int, attack_cfg: AttackConfig | None = None,
            seed: int = 0, batch_size: int = 64) -> list:
    """Collect per-position channel vectors at segment outputs.

    With an attack config, each image is harvested twice (clean and attacked)
    at identical spatial positions. Returns a flat list of ActivationSample.
    """
    segments = list(segments)
    model.segmentation.check_names(segments)
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    samples = []
    for start in range(0, images.shape[0], batch_size):
        x = images[start : start + batch_size]
        y = labels[start : start + batch_size]
        ids = np.arange(start, start + x.shape[0])
        versions = [(False, x)]
        if attack_cfg is not None:
            versions.append((True, pgd(model, x, y, attack_cfg, seed=seed + start)))
        tapped = {}
        for is_adv, batch in versions:
            _, taps = model.forward(Tensor(batch), train=False, taps=segments)
            tapped[is_adv] = {name: _tap_spatial(t.data) for name, t in taps.items()}
        for seg in segments:
            clean_act = tapped[False][seg]
            h, w = clean_act.shape[2], clean_act.shape[3]
            if positions_per_image > h * w:
                raise ValueError(
                    f"positions_per_image={positions_per_image} exceeds segment "
                    f"{seg} spatial extent {h}x{w}"
                )
            for bi, image_id in enumerate(ids):
                rng = derive_rng(seed, "positions", int(image_id), seg)
                flat = rng.choice(h * w, size=positions_per_image, replace=False)
                for pos in flat:
                    ph, pw = divmod(int(pos), w)
                    for is_adv, _ in versions:
                        act = tapped[is_adv][seg]
                        samples.append(ActivationSample(
                            segment_name=seg,
                            channel_vector=act[bi, :, ph, pw].copy(),
                            image_id=int(image_id),
                            spatial_position=(ph, pw),
                            is_adversarial=is_adv,
                            true_label=int(y[bi]),
                        ))
    return samples


@dataclass
class EmbeddingResult:
    segment: str
    coords: np.ndarray  # (m, 2), one per embedded sample
    is_adversarial: np.ndarray  # (m,) bool group tags
    labels: np.ndarray  # (m,) true labels
    clean_grid: object
    adv_grid: object
    divergence: float
    kl_final: float
    metadata: dict = field(default_factory=dict)


def _standardize(vectors: np.ndarray) -> np.ndarray:
    mean = vectors.mean(axis=0)
    std = vectors.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return (vectors - mean) / std


def embed_segment(samples, segment: str, cfg: AnalysisConfig) -> EmbeddingResult:
    """PCA + t-SNE + per-group KDE + JS divergence for one segment's samples."""
    seg_samples = [s for s in samples if s.segment_name == segment]
    if not seg_samples:
        raise ValueError(f"no samples for segment {segment!r}")
    clean = [s for s in seg_samples if not s.is_adversarial]
    adv = [s for s in seg_samples if s.is_adversarial]
    if not adv:
        raise ValueError(f"segment {segment!r} has no adversarial samples to compare")

    picked = []
    for group in (clean, adv):
        if len(group) > cfg.embed_cap_per_group:
            rng = derive_rng(cfg.seed, "embed-subsample", segment)
            idx = rng.choice(len(group), size=cfg.embed_cap_per_group, replace=False)
            picked.extend(group[i] for i in sorted(idx))
        else:
            picked.extend(group)

    vectors = np.stack([s.channel_vector for s in picked])
    is_adv = np.array([s.is_adversarial for s in picked])
    labels = np.array([s.true_label for s in picked])
    if cfg.standardize:
        vectors = _standardize(vectors)

    pca_dims = min(cfg.pca_dims, vectors.shape[1])
    if pca_dims < vectors.shape[1] and vectors.shape[0] > pca_dims:
        vectors = pca_reduce(vectors, pca_dims).reduced

    tsne = tsne_embed(vectors, perplexity=cfg.perplexity,
                      iterations=cfg.tsne_iterations,
                      seed=cfg.seed)
    coords = tsne.coords
    bounds = shared_bounds([coords[~is_adv], coords[is_adv]])
    clean_grid = kde_grid(coords[~is_adv], bounds, cfg.kde_resolution)
    adv_grid = kde_grid(coords[is_adv], bounds, cfg.kde_resolution)
    return EmbeddingResult(
        segment=segment,
        coords=coords,
        is_adversarial=is_adv,
        labels=labels,
        clean_grid=clean_grid,
        adv_grid=adv_grid,
        divergence=js_divergence(clean_grid, adv_grid),
        kl_final=tsne.kl_final,
        metadata={
            "perplexity": cfg.perplexity,
            "tsne_iterations": cfg.tsne_iterations,
            "pca_dims": pca_dims,
            "seed": cfg.seed,
            "n_clean": int((~is_adv).sum()),
            "n_adv": int(is_adv.sum()),
        },
    )


def feature_divergence(model, dataset, attack_cfg: AttackConfig,
                       cfg: AnalysisConfig) -> dict:
    """Full pipeline over the requested segments; returns segment -> result."""
    n = min(cfg.n_images, len(dataset))
    images, labels = dataset.images[:n], dataset.labels[:n]
    samples = harvest(model, images, labels, cfg.segments, cfg.positions_per_image,
                      attack_cfg=attack_cfg, seed=cfg.seed)
    return {seg: embed_segment(samples, seg, cfg) for seg in cfg.segments}
