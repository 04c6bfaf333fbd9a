import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import fpfh_direct, knn_brute, knn_excluding_self, spfh_direct
from pcad.config import RunConfig
from pcad.errors import DataError
from pcad.features import (
    FeatureMatrix,
    aggregate_at_centers,
    compute_fpfh,
    compute_multiscale_fpfh,
    compute_spfh,
    extract_features,
    load_features,
    save_features,
    spfh_all,
)
from pcad.geom import LabeledCloud, estimate_normals, farthest_point_sample
from pcad.synth import ShapeSpec, gen_shape


def random_cloud(n, seed):
    rng = np.random.default_rng(seed)
    normals = rng.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return LabeledCloud(rng.random((n, 3)), normals)


def test_spfh_plane_all_zero_angles():
    g = np.stack(np.meshgrid(np.arange(5.0), np.arange(5.0)), -1).reshape(-1, 2)
    c = LabeledCloud(np.c_[g, np.zeros(25)], np.tile([0, 0, 1.0], (25, 1)))
    h, flag = compute_spfh(c, 12, 8)
    assert not flag
    zero_bin = 5  # [-1, 1] in 11 bins: 0 falls in bin 5; theta 0 also in bin 5 of [-pi, pi]
    expect = np.zeros(33)
    expect[[zero_bin, 11 + zero_bin, 22 + zero_bin]] = 100.0
    np.testing.assert_allclose(h, expect)


def test_spfh_degenerate_point():
    pts = np.zeros((5, 3))
    c = LabeledCloud(pts, np.tile([0, 0, 1.0], (5, 1)))
    h, flag = compute_spfh(c, 0, 3)
    assert flag and not h.any()


def test_spfh_requires_normals_and_valid_k():
    c = LabeledCloud(np.random.default_rng(0).random((10, 3)))
    with pytest.raises(DataError, match="normals"):
        compute_spfh(c, 0, 3)
    with pytest.raises(DataError):
        compute_fpfh(random_cloud(10, 0), 10)


def test_spfh_matches_direct():
    c = random_cloud(200, 1)
    for i in (0, 17, 199):
        nb, _ = knn_excluding_self(c.points, i, 10)
        h, _ = compute_spfh(c, i, 10)
        np.testing.assert_allclose(h, spfh_direct(c.points, c.normals, i, nb), atol=1e-6)


def test_spfh_blocks_sum_to_100():
    c = estimate_normals(gen_shape(ShapeSpec("torus", 1500, 0.1, seed=2)), 15)
    h, degen = spfh_all(c, 20)
    assert not degen.any()
    np.testing.assert_allclose(h.reshape(-1, 3, 11).sum(axis=2), 100.0, atol=1e-9)


def test_fpfh_matches_direct():
    c = random_cloud(200, 3)
    np.testing.assert_allclose(compute_fpfh(c, 10), fpfh_direct(c.points, c.normals, 10), atol=1e-6)


def test_fpfh_single_neighbor_formula():
    pts = np.array([[0, 0, 0], [2, 0, 0], [10, 0, 0], [10, 2, 0]], float)
    normals = np.array([[0, 0, 1], [0, 1, 0], [1, 0, 0], [0, 0, 1]], float)
    c = LabeledCloud(pts, normals)
    spfh, _ = spfh_all(c, 1)
    np.testing.assert_allclose(compute_fpfh(c, 1)[0], spfh[0] + spfh[1] / 2)


def test_multiscale_blocks():
    c = estimate_normals(gen_shape(ShapeSpec("sphere", 1000, 0.05, seed=4)), 20)
    ms = compute_multiscale_fpfh(c, [40, 80, 120])
    assert ms.shape == (1000, 99)
    for b, k in enumerate([40, 80, 120]):
        np.testing.assert_allclose(ms[:, 33 * b:33 * (b + 1)], compute_fpfh(c, k), rtol=0, atol=1e-9)
    np.testing.assert_array_equal(compute_multiscale_fpfh(c, [40]), compute_fpfh(c, 40))
    with pytest.raises(DataError):
        compute_multiscale_fpfh(c.replace(points=c.points[:500], normals=c.normals[:500]), [2000])


@pytest.mark.parametrize("scales", [[30, 5, 10], [10, 10], [3]])
def test_multiscale_any_scale_order(scales):
    rng = np.random.default_rng(11)
    pts = np.vstack([rng.integers(0, 6, (400, 3)).astype(float), np.repeat(rng.random((5, 3)), 4, axis=0)])
    c = estimate_normals(LabeledCloud(pts), 10)
    expected = np.hstack([compute_fpfh(c, k) for k in scales])
    np.testing.assert_array_equal(compute_multiscale_fpfh(c, scales), expected)


def test_extract_matches_stepwise_pipeline():
    rng = np.random.default_rng(12)
    pts = np.vstack([rng.integers(0, 6, (500, 3)).astype(float), np.repeat(rng.random((5, 3)), 4, axis=0)])
    for cloud, cfg in [(LabeledCloud(pts), RunConfig(scales=(5, 10, 30), centers_G=40, aggregation_m=16)),
                       (LabeledCloud(pts), RunConfig(scales=(8,), normal_k=40, centers_G=20, aggregation_m=8)),
                       (gen_shape(ShapeSpec("torus", 3000, 0.05, seed=3)), RunConfig(centers_G=128))]:
        with_normals = estimate_normals(cloud, cfg.normal_k)
        per_point = np.hstack([compute_fpfh(with_normals, k) for k in cfg.scales])
        centers = farthest_point_sample(cloud, cfg.centers_G, cfg.seed)
        expected = aggregate_at_centers(per_point, cloud, centers, cfg.aggregation_m)
        np.testing.assert_array_equal(extract_features(cloud, cfg).rows, expected.rows)


def test_aggregate_examples():
    c = random_cloud(300, 5)
    h = np.tile(np.arange(33.0), (300, 1))
    fm = aggregate_at_centers(h, c, [0, 5, 9], 16)
    np.testing.assert_allclose(fm.rows, h[:3])
    feats = np.random.default_rng(6).random((300, 33))
    fm1 = aggregate_at_centers(feats, c, [4, 7], 1)
    np.testing.assert_array_equal(fm1.rows, feats[[4, 7]])
    centers = [3, 100, 250]
    fm16 = aggregate_at_centers(feats, c, centers, 16)
    for r, ci in enumerate(centers):
        nb, _ = knn_brute(c.points, c.points[ci], 16)
        np.testing.assert_allclose(fm16.rows[r], feats[nb].mean(axis=0), atol=1e-12)
    with pytest.raises(DataError):
        aggregate_at_centers(feats, c, centers, 301)


def test_extract_features_deterministic_and_shapes():
    cloud = gen_shape(ShapeSpec("washer", 1500, 0.05, seed=7)).replace(normals=None)
    cfg = RunConfig(centers_G=64, aggregation_m=32, scales=(10, 20))
    a = extract_features(cloud, cfg)
    b = extract_features(cloud, cfg)
    assert a.rows.shape == (64, 66) and a.C1 == 66
    np.testing.assert_array_equal(a.rows, b.rows)
    np.testing.assert_array_equal(a.center_indices, b.center_indices)
    assert np.isfinite(a.rows).all() and (a.rows >= 0).all()
    assert extract_features(cloud, cfg.replace(centers_G=1)).G == 1
    # G larger than the cloud is clamped
    small = LabeledCloud(cloud.points[:100])
    assert extract_features(small, cfg.replace(centers_G=500, aggregation_m=16)).G == 100


def rotation(seed):
    q, r = np.linalg.qr(np.random.default_rng(seed).normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    return q if np.linalg.det(q) > 0 else -q


def test_rigid_motion_invariance_extract():
    cloud = gen_shape(ShapeSpec("torus", 2000, 0.05, seed=8)).replace(normals=None)
    R, t = rotation(9), np.array([3.0, -1.0, 0.5])
    moved = cloud.replace(points=cloud.points @ R.T + t)
    cfg = RunConfig(centers_G=32)
    a, b = extract_features(cloud, cfg), extract_features(moved, cfg)
    np.testing.assert_array_equal(a.center_indices, b.center_indices)
    np.testing.assert_allclose(a.rows, b.rows, atol=1e-4)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_fpfh_nonnegative_finite(seed):
    c = random_cloud(60, seed)
    f = compute_multiscale_fpfh(c, [5, 10])
    assert np.isfinite(f).all() and (f >= 0).all()


def test_feature_dump_roundtrip(tmp_path):
    rng = np.random.default_rng(10)
    fm = FeatureMatrix(rng.random((7, 99)).astype(np.float32), np.arange(7) * 3, (40, 80, 120), 128)
    save_features(fm, tmp_path / "f.bin")
    data = (tmp_path / "f.bin").read_bytes()
    assert data[:8] == b"PCADFEAT"
    back = load_features(tmp_path / "f.bin")
    np.testing.assert_array_equal(back.rows, fm.rows)
    np.testing.assert_array_equal(back.center_indices, fm.center_indices)
    (tmp_path / "g.bin").write_bytes(data[:-5])
    with pytest.raises(DataError):
        load_features(tmp_path / "g.bin")


def test_fps_centers_used_by_extract():
    cloud = gen_shape(ShapeSpec("sphere", 800, 0.0, seed=11)).replace(normals=None)
    cfg = RunConfig(centers_G=16, scales=(10,), aggregation_m=8)
    fm = extract_features(cloud, cfg)
    np.testing.assert_array_equal(fm.center_indices, farthest_point_sample(cloud, 16, cfg.seed))
