import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import fps_brute, knn_brute
from pcad.errors import CloudFormatError, DataError
from pcad.geom import (
    LabeledCloud,
    SpatialIndex,
    build_spatial_index,
    estimate_normals,
    farthest_point_sample,
    knn,
    load_cloud,
    load_scores,
    neighbors_excluding_self,
    save_cloud,
    save_scores,
)


def test_load_xyz_and_sidecar(tmp_path):
    p = tmp_path / "a.xyz"
    p.write_text("0 0 0\n1 0 0\n0 1 0\n")
    c = load_cloud(p)
    assert c.points.shape == (3, 3) and c.normals is None and c.labels is None
    (tmp_path / "a.labels").write_text("0\n1\n0\n")
    assert load_cloud(p).labels.tolist() == [0, 1, 0]


def test_sidecar_length_mismatch(tmp_path):
    p = tmp_path / "a.xyz"
    p.write_text("0 0 0\n1 0 0\n0 1 0\n")
    (tmp_path / "a.labels").write_text("0\n1\n")
    with pytest.raises(DataError, match="2 entries for 3 points"):
        load_cloud(p)


def test_malformed_row_reports_line(tmp_path):
    p = tmp_path / "bad.xyz"
    p.write_text("0 0 0\n1 0\n0 1 0\n")
    with pytest.raises(CloudFormatError, match=":2:"):
        load_cloud(p)
    p.write_text("0 0 0\n1 nan 0\n")
    with pytest.raises(CloudFormatError, match=":2:"):
        load_cloud(p)


def test_xyzn_and_ply(tmp_path):
    p = tmp_path / "a.xyzn"
    p.write_text("0 0 0 0 0 2\n1 0 0 0 1 0\n")
    c = load_cloud(p)
    np.testing.assert_allclose(c.normals[0], [0, 0, 1])
    ply = tmp_path / "b.ply"
    ply.write_text("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n"
                   "property float z\nend_header\n0 0 0\n1 2 3\n")
    np.testing.assert_array_equal(load_cloud(ply).points, [[0, 0, 0], [1, 2, 3]])


def test_cloud_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    c = LabeledCloud(rng.random((20, 3)), labels=rng.integers(0, 2, 20))
    save_cloud(c, tmp_path / "c.xyz")
    back = load_cloud(tmp_path / "c.xyz")
    np.testing.assert_allclose(back.points, c.points, rtol=1e-9)
    np.testing.assert_array_equal(back.labels, c.labels)


def test_cloud_invariants():
    with pytest.raises(DataError):
        LabeledCloud(np.zeros((0, 3)))
    with pytest.raises(DataError):
        LabeledCloud(np.zeros((2, 3)), normals=np.ones((2, 3)))
    with pytest.raises(DataError):
        LabeledCloud(np.zeros((2, 3)), labels=[0, 2])


def test_scores_roundtrip(tmp_path):
    c = LabeledCloud(np.zeros((3, 3)))
    save_scores(c, [0.1, 0.2, 0.3], tmp_path / "s.scores")
    assert len((tmp_path / "s.scores").read_text().splitlines()) == 3
    np.testing.assert_allclose(load_scores(tmp_path / "s.scores"), [0.1, 0.2, 0.3], atol=1e-9)
    with pytest.raises(DataError):
        save_scores(c, [0.1, 0.2], tmp_path / "t.scores")


def test_knn_examples():
    idx = build_spatial_index([[0, 0, 0], [1, 0, 0], [3, 0, 0]])
    res = knn(idx, [0.9, 0, 0], 2)
    assert [i for i, _ in res] == [1, 0]
    np.testing.assert_allclose([d for _, d in res], [0.1, 0.9])
    assert knn(idx, [3, 0, 0], 1) == [(2, 0.0)]
    with pytest.raises(DataError):
        knn(idx, [0, 0, 0], 4)


def test_knn_ties_lowest_index():
    pts = np.zeros((6, 3))
    pts[:, 0] = [9, 9, 1, 9, 9, -1]
    # indices 2 and 5 are equidistant from the origin
    assert [i for i, _ in knn(build_spatial_index(pts), [0, 0, 0], 2)] == [2, 5]
    dup = build_spatial_index([[1, 1, 1], [0, 0, 0], [1, 1, 1]])
    assert [i for i, _ in knn(dup, [1, 1, 1], 2)] == [0, 2]
    single = build_spatial_index([[5, 5, 5]])
    assert knn(single, [0, 0, 0], 1)[0][0] == 0


def test_index_does_not_mutate_source():
    pts = np.random.default_rng(1).random((50, 3))
    before = pts.copy()
    SpatialIndex(pts).query(pts[:5], 3)
    np.testing.assert_array_equal(pts, before)
    with pytest.raises(DataError):
        SpatialIndex(np.zeros((0, 3)))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 300), grid=st.booleans())
def test_knn_matches_brute_force(seed, n, grid):
    rng = np.random.default_rng(seed)
    # integer grids force many exact ties
    pts = rng.integers(0, 4, (n, 3)).astype(float) if grid else rng.random((n, 3))
    q = rng.integers(0, 4, (5, 3)).astype(float) if grid else rng.random((5, 3))
    k = int(rng.integers(1, min(n, 50) + 1))
    idx, dist = SpatialIndex(pts).query(q, k)
    for r in range(len(q)):
        bi, bd = knn_brute(pts, q[r], k)
        np.testing.assert_array_equal(idx[r], bi)
        np.testing.assert_allclose(dist[r], bd, rtol=0, atol=1e-12)


def test_radius_query():
    pts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0.5, 0, 0]], float)
    idx, d = SpatialIndex(pts).radius([0, 0, 0], 1.0)
    assert idx.tolist() == [0, 3, 1]


def test_neighbors_excluding_self_duplicates():
    pts = np.zeros((4, 3))
    nbr, _ = neighbors_excluding_self(SpatialIndex(pts), 2)
    for i in range(4):
        assert i not in nbr[i]


def test_query_self_matches_query():
    rng = np.random.default_rng(3)
    pts = np.vstack([rng.integers(0, 4, (300, 3)).astype(float), rng.random((200, 3))])
    index = SpatialIndex(pts)
    for k in (1, 7, 40):
        i1, d1 = index.query_self(k)
        i2, d2 = index.query(pts, k)
        np.testing.assert_array_equal(i1, i2)
        np.testing.assert_array_equal(d1, d2)


def test_normals_plane_and_degenerate():
    rng = np.random.default_rng(2)
    pts = np.c_[rng.random((100, 2)), np.zeros(100)]
    n = estimate_normals(LabeledCloud(pts), 10).normals
    np.testing.assert_allclose(np.abs(n[:, 2]), 1.0, atol=1e-12)
    same = estimate_normals(LabeledCloud(np.ones((5, 3))), 3).normals
    np.testing.assert_array_equal(same, np.tile([0, 0, 1.0], (5, 1)))
    with pytest.raises(DataError):
        estimate_normals(LabeledCloud(np.ones((2, 3))), 3)


def test_normals_sphere_radial():
    rng = np.random.default_rng(3)
    v = rng.normal(size=(2000, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    n = estimate_normals(LabeledCloud(v), 20).normals
    cos = np.abs((n * v).sum(axis=1))
    assert np.degrees(np.arccos(np.clip(cos, -1, 1))).max() < 10
    # centroid rule points normals outward
    assert ((n * v).sum(axis=1) > 0).all()


def test_normals_rotation_equivariant():
    rng = np.random.default_rng(4)
    pts = rng.random((300, 3)) * [1, 1, 0.1]
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    a = estimate_normals(LabeledCloud(pts), 12).normals
    b = estimate_normals(LabeledCloud(pts @ q.T), 12).normals
    ra = a @ q.T
    sign = np.sign((ra * b).sum(axis=1))
    np.testing.assert_allclose(ra * sign[:, None], b, atol=1e-5)


def test_fps_examples():
    pts = np.array([[0, 0, 0], [10, 0, 0], [5, 0, 0]], float)
    assert farthest_point_sample(pts, 2, 0, start=0).tolist() == [0, 1]
    perm = farthest_point_sample(pts, 3, 5)
    assert sorted(perm.tolist()) == [0, 1, 2]
    with pytest.raises(DataError):
        farthest_point_sample(pts, 4, 0)


def test_fps_seeded_first_pick():
    pts = np.random.default_rng(5).random((40, 3))
    first = int(np.random.default_rng(11).integers(40))
    assert farthest_point_sample(pts, 5, 11)[0] == first
    np.testing.assert_array_equal(farthest_point_sample(pts, 5, 11), farthest_point_sample(pts, 5, 11))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), grid=st.booleans())
def test_fps_matches_brute_force(seed, grid):
    rng = np.random.default_rng(seed)
    pts = rng.integers(0, 3, (50, 3)).astype(float) if grid else rng.random((50, 3))
    got = farthest_point_sample(pts, 10, seed)
    assert got.tolist() == fps_brute(pts, 10, int(got[0]))
