"""Analysis pipeline: PCA, exact t-SNE, KDE grids, JS divergence, harvesting."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lprobe.analysis import AnalysisConfig, embed_segment, harvest
from lprobe.attacks import AttackConfig
from lprobe.density import (DensityGrid, js_divergence, kde_grid,
                            scott_bandwidth, shared_bounds)
from lprobe.embedding import pca_reduce, tsne_embed
from lprobe.models import (BatchNorm2d, Conv2d, GlobalAvgPool, Linear,
                           ModelGraph, ModuleSegmentation, ReLU, Segment)

from oracles import js_divergence_direct, kde_point_oracle

RNG = np.random.default_rng(808)


# --- PCA -----------------------------------------------------------------------

def test_pca_planar_data_two_components():
    basis = np.linalg.qr(RNG.normal(size=(10, 10)))[0][:, :2]
    coeffs = RNG.normal(size=(200, 2))
    data = coeffs @ basis.T + RNG.normal(size=10)  # exact plane, offset
    res = pca_reduce(data, 2)
    assert res.explained_variance_ratio.sum() >= 1 - 1e-9


def test_pca_full_rank_reconstruction():
    data = RNG.normal(size=(40, 6))
    res = pca_reduce(data, 6)
    recon = res.reduced @ res.components + res.mean
    assert np.abs(recon - data).max() < 1e-9


def test_pca_ratios_non_increasing():
    data = RNG.normal(size=(100, 8)) * np.array([5, 4, 3, 2, 1, 0.5, 0.2, 0.1])
    res = pca_reduce(data, 5)
    assert (np.diff(res.explained_variance_ratio) <= 1e-12).all()


def test_pca_rotation_equivariance():
    data = RNG.normal(size=(60, 5)) * np.array([3, 2, 1, 0.5, 0.1])
    rot = np.linalg.qr(RNG.normal(size=(5, 5)))[0]
    a = pca_reduce(data, 2)
    b = pca_reduce(data @ rot.T, 2)
    # projections agree up to per-component sign
    for k in range(2):
        d_same = np.abs(a.reduced[:, k] - b.reduced[:, k]).max()
        d_flip = np.abs(a.reduced[:, k] + b.reduced[:, k]).max()
        assert min(d_same, d_flip) < 1e-8


def test_pca_degenerate_rank_truncates():
    data = np.zeros((30, 4))
    data[:, 0] = RNG.normal(size=30)
    res = pca_reduce(data, 3)
    assert res.reduced.shape[1] == 1  # numerical rank 1, no failure


def test_pca_needs_more_samples_than_dims():
    with pytest.raises(ValueError):
        pca_reduce(np.zeros((3, 5)), 3)


# --- t-SNE -----------------------------------------------------------------------

def two_clusters(n_per=60, dim=50, sep=8.0, seed=1):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n_per, dim))
    b = rng.normal(size=(n_per, dim))
    b[:, 0] += sep
    return np.vstack([a, b]), np.repeat([0, 1], n_per)


def test_tsne_separates_two_clusters():
    data, labels = two_clusters()
    res = tsne_embed(data, perplexity=20, iterations=500, seed=0)
    c0 = res.coords[labels == 0].mean(axis=0)
    c1 = res.coords[labels == 1].mean(axis=0)
    spread = np.concatenate([
        np.linalg.norm(res.coords[labels == 0] - c0, axis=1),
        np.linalg.norm(res.coords[labels == 1] - c1, axis=1),
    ]).mean()
    assert np.linalg.norm(c0 - c1) > 3 * spread


def test_tsne_kl_decreases_after_exaggeration():
    data, _ = two_clusters(n_per=40, dim=20)
    res = tsne_embed(data, perplexity=15, iterations=500, seed=3)
    assert np.isfinite(res.kl_post_exaggeration)
    assert res.kl_final < res.kl_post_exaggeration


def test_tsne_deterministic():
    data, _ = two_clusters(n_per=30, dim=10)
    a = tsne_embed(data, perplexity=10, iterations=120, seed=5)
    b = tsne_embed(data, perplexity=10, iterations=120, seed=5)
    assert np.array_equal(a.coords, b.coords)


def test_tsne_perplexity_bound():
    data = RNG.normal(size=(30, 5))
    with pytest.raises(ValueError):
        tsne_embed(data, perplexity=10.0, iterations=50)  # >= (30-1)/3


def test_tsne_sample_count_bounds():
    with pytest.raises(ValueError):
        tsne_embed(np.zeros((4, 3)), perplexity=1.0)


def test_tsne_perplexity_calibration():
    data, _ = two_clusters(n_per=50, dim=12, seed=7)
    res = tsne_embed(data, perplexity=25, iterations=5, seed=1)
    assert np.abs(res.point_entropies - np.log(25)).max() < 1e-4


def test_tsne_coordinate_count_matches_input():
    data, _ = two_clusters(n_per=25, dim=6)
    res = tsne_embed(data, perplexity=12, iterations=60, seed=2)
    assert res.coords.shape == (50, 2)


# --- KDE ------------------------------------------------------------------------

def test_kde_tight_cluster_peaks_at_cluster():
    pts = RNG.normal(0, 0.05, size=(50, 2)) + np.array([2.0, -1.0])
    ref = RNG.normal(0, 0.05, size=(50, 2)) + np.array([-2.0, 1.0])
    bounds = shared_bounds([pts, ref])
    grid = kde_grid(pts, bounds, resolution=51)
    i, j = np.unravel_index(grid.values.argmax(), grid.values.shape)
    assert abs(grid.x_centers[i] - 2.0) < 0.3
    assert abs(grid.y_centers[j] + 1.0) < 0.3


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 1000), n=st.integers(5, 80))
def test_kde_integrates_to_one(seed, n):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n, 2)) * rng.uniform(0.5, 3.0)
    grid = kde_grid(pts, shared_bounds([pts]), resolution=64)
    assert abs(grid.values.sum() * grid.cell_area - 1.0) < 1e-6


def test_kde_matches_pointwise_oracle():
    pts = RNG.normal(size=(40, 2))
    bounds = shared_bounds([pts])
    bw = scott_bandwidth(pts)
    grid = kde_grid(pts, bounds, resolution=40, bandwidth=bw)
    # compare unnormalized shape: oracle / normalization constant
    raw = np.empty((10,))
    cells = [(RNG.integers(0, 40), RNG.integers(0, 40)) for _ in range(10)]
    oracle_vals = np.array([
        kde_point_oracle(pts, (grid.x_centers[i], grid.y_centers[j]), bw)
        for i, j in cells
    ])
    got = np.array([grid.values[i, j] for i, j in cells])
    total = sum(
        kde_point_oracle(pts, (cx, cy), bw)
        for cx in grid.x_centers for cy in grid.y_centers
    ) * grid.cell_area
    assert np.abs(got - oracle_vals / total).max() < 1e-10


def test_kde_coincident_points_rejected():
    pts = np.ones((10, 2))
    with pytest.raises(ValueError):
        kde_grid(pts, (0, 2, 0, 2))


def test_kde_scott_bandwidth_formula():
    pts = RNG.normal(size=(100, 2)) * np.array([2.0, 0.5])
    hx, hy = scott_bandwidth(pts)
    assert abs(hx - pts[:, 0].std() * 100 ** (-1 / 6)) < 1e-12
    assert abs(hy - pts[:, 1].std() * 100 ** (-1 / 6)) < 1e-12


# --- JS divergence -----------------------------------------------------------------

def make_grid(values, bounds=(0.0, 1.0, 0.0, 1.0)):
    values = np.asarray(values, dtype=np.float64)
    res = values.shape[0]
    cell = ((bounds[1] - bounds[0]) / res) * ((bounds[3] - bounds[2]) / res)
    values = values / (values.sum() * cell)
    centers = np.linspace(bounds[0], bounds[1], res)
    return DensityGrid(values=values, x_centers=centers, y_centers=centers,
                       cell_area=cell, bandwidth=(1, 1), bounds=bounds)


def test_js_identical_grids_zero():
    g = make_grid(RNG.uniform(0.1, 1.0, (16, 16)))
    assert js_divergence(g, g) == 0.0


def test_js_disjoint_support_is_ln2():
    a = np.zeros((16, 16)); a[:8] = 1.0
    b = np.zeros((16, 16)); b[8:] = 1.0
    val = js_divergence(make_grid(a), make_grid(b))
    assert abs(val - np.log(2)) < 1e-6


def test_js_two_cell_closed_form():
    a = np.array([[0.5, 0.5]])
    b = np.array([[0.9, 0.1]])
    got = js_divergence(make_grid(a, (0, 2, 0, 1)), make_grid(b, (0, 2, 0, 1)))
    ref = js_divergence_direct(np.array([0.5, 0.5]), np.array([0.9, 0.1]))
    assert abs(got - ref) < 1e-10


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 500))
def test_js_bounds_and_symmetry(seed):
    rng = np.random.default_rng(seed)
    a = make_grid(rng.uniform(0.0, 1.0, (12, 12)) ** 3 + 1e-9)
    b = make_grid(rng.uniform(0.0, 1.0, (12, 12)) ** 3 + 1e-9)
    d = js_divergence(a, b)
    assert 0.0 <= d <= np.log(2) + 1e-12
    assert abs(d - js_divergence(b, a)) < 1e-15


def test_js_shape_mismatch():
    with pytest.raises(ValueError):
        js_divergence(make_grid(np.ones((8, 8))), make_grid(np.ones((9, 9))))


def test_js_bounds_mismatch():
    a = make_grid(np.ones((8, 8)), (0, 1, 0, 1))
    b = make_grid(np.ones((8, 8)), (0, 2, 0, 2))
    with pytest.raises(ValueError):
        js_divergence(a, b)


# --- harvesting ----------------------------------------------------------------------

def harvest_model(seed=0):
    named = [
        ("conv0", Conv2d(1, 6, 3, 1, 1)),
        ("bn0", BatchNorm2d(6)),
        ("relu0", ReLU()),
        ("gap", GlobalAvgPool()),
        ("fc", Linear(6, 3)),
    ]
    seg = ModuleSegmentation([
        Segment("m_0", 0, 3), Segment("m_pool", 3, 4), Segment("m_fc", 4, 5),
    ])
    m = ModelGraph(named, seg, (1, 8, 8), 3, "custom")
    m.initialize(seed)
    return m


def test_harvest_pairs_share_positions():
    m = harvest_model()
    images = RNG.uniform(0, 1, (6, 1, 8, 8))
    labels = RNG.integers(0, 3, 6)
    cfg = AttackConfig(epsilon=0.05, step_size=0.02, iterations=2)
    samples = harvest(m, images, labels, ["m_0"], 4, attack_cfg=cfg, seed=7)
    clean = {(s.image_id, s.spatial_position) for s in samples if not s.is_adversarial}
    adv = {(s.image_id, s.spatial_position) for s in samples if s.is_adversarial}
    assert clean == adv
    assert len(clean) == 6 * 4


def test_harvest_post_gap_vector_equals_pooled_feature():
    m = harvest_model()
    images = RNG.uniform(0, 1, (2, 1, 8, 8))
    labels = np.array([0, 1])
    samples = harvest(m, images, labels, ["m_pool"], 1, attack_cfg=None, seed=0)
    from lprobe.tensor import Tensor
    _, taps = m.forward(Tensor(images), train=False, taps=["m_pool"])
    for s in samples:
        assert s.spatial_position == (0, 0)
        assert np.array_equal(s.channel_vector, taps["m_pool"].data[s.image_id])


def test_harvest_rejects_too_many_positions():
    m = harvest_model()
    images = RNG.uniform(0, 1, (2, 1, 8, 8))
    with pytest.raises(ValueError):
        harvest(m, images, np.array([0, 1]), ["m_pool"], 2, seed=0)


def test_harvest_channel_vector_length():
    m = harvest_model()
    images = RNG.uniform(0, 1, (3, 1, 8, 8))
    labels = np.array([0, 1, 2])
    samples = harvest(m, images, labels, ["m_0"], 2, seed=1)
    assert all(s.channel_vector.shape == (6,) for s in samples)
    positions = {s.spatial_position for s in samples}
    assert all(0 <= h < 8 and 0 <= w < 8 for h, w in positions)


def test_embed_segment_end_to_end():
    m = harvest_model(seed=3)
    images = RNG.uniform(0, 1, (30, 1, 8, 8))
    labels = RNG.integers(0, 3, 30)
    cfg = AttackConfig(epsilon=0.08, step_size=0.03, iterations=3)
    samples = harvest(m, images, labels, ["m_0"], 3, attack_cfg=cfg, seed=2)
    acfg = AnalysisConfig(segments=("m_0",), positions_per_image=3, n_images=30,
                          perplexity=8.0, tsne_iterations=150, kde_resolution=40,
                          embed_cap_per_group=60, seed=4)
    result = embed_segment(samples, "m_0", acfg)
    assert result.coords.shape == (120, 2)  # 60 per group after the cap
    assert 0.0 <= result.divergence <= np.log(2)
    assert abs(result.clean_grid.values.sum() * result.clean_grid.cell_area - 1) < 1e-6
    assert result.metadata["n_clean"] == 60 and result.metadata["n_adv"] == 60
