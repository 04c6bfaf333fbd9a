"""Multi-scale FPFH descriptors pooled at farthest-point centers.

Per point and scale, SPFH histograms the Darboux-frame angles (alpha, phi,
theta) against the k nearest neighbours into 3 x 11 bins, each block summing
to 100. FPFH adds the distance-weighted mean of the neighbours' SPFH. The
center rows of a :class:`FeatureMatrix` are means of the per-point
descriptors over the ``m`` nearest points of each center.
"""

from __future__ import annotations

import dataclasses
import struct
from pathlib import Path

import numba
import numpy as np

from pcad.config import RunConfig
from pcad.errors import DataError
from pcad.geom import (
    LabeledCloud,
    SpatialIndex,
    drop_self,
    farthest_point_sample,
    neighbors_excluding_self,
    normals_from_neighbors,
)

BINS = 11
SPFH_DIM = 3 * BINS
# |d x n| below this leaves the Darboux frame undefined and the pair is skipped
FRAME_EPS = 1e-12

FEAT_MAGIC = b"PCADFEAT"
FEAT_VERSION = 1


@dataclasses.dataclass(eq=False)
class FeatureMatrix:
    rows: np.ndarray
    center_indices: np.ndarray
    scales: tuple[int, ...]
    aggregation_m: int
    sample_id: str = ""

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        self.center_indices = np.asarray(self.center_indices, dtype=np.int64)
        if self.rows.ndim != 2 or len(self.rows) != len(self.center_indices):
            raise DataError("feature rows and center indices disagree in length")
        if self.rows.shape[1] != SPFH_DIM * len(self.scales):
            raise DataError(f"row dimension {self.rows.shape[1]} != 33 x {len(self.scales)} scales")

    @property
    def G(self) -> int:
        return len(self.rows)

    @property
    def C1(self) -> int:
        return self.rows.shape[1]


@numba.njit(cache=True, inline="always")
def _bin(x, lo, hi):
    b = int(np.floor((x - lo) / (hi - lo) * BINS))
    if b < 0:
        return 0
    if b >= BINS:
        return BINS - 1
    return b


@numba.njit(cache=True, inline="always")
def _pair_bins(points, normals, s, t):
    """Bins of (alpha, phi, theta) for source s and target t; -1 when the pair is skipped."""
    dx = points[t, 0] - points[s, 0]
    dy = points[t, 1] - points[s, 1]
    dz = points[t, 2] - points[s, 2]
    dist = np.sqrt(dx * dx + dy * dy + dz * dz)
    if dist == 0.0:
        return -1, -1, -1
    dx /= dist
    dy /= dist
    dz /= dist
    ux, uy, uz = normals[s, 0], normals[s, 1], normals[s, 2]
    # v = d x u
    vx = dy * uz - dz * uy
    vy = dz * ux - dx * uz
    vz = dx * uy - dy * ux
    vn = np.sqrt(vx * vx + vy * vy + vz * vz)
    if vn < FRAME_EPS:
        return -1, -1, -1
    vx /= vn
    vy /= vn
    vz /= vn
    # w = u x v
    wx = uy * vz - uz * vy
    wy = uz * vx - ux * vz
    wz = ux * vy - uy * vx
    nx, ny, nz = normals[t, 0], normals[t, 1], normals[t, 2]
    alpha = vx * nx + vy * ny + vz * nz
    phi = ux * dx + uy * dy + uz * dz
    theta = np.arctan2(wx * nx + wy * ny + wz * nz, ux * nx + uy * ny + uz * nz)
    return _bin(alpha, -1.0, 1.0), BINS + _bin(phi, -1.0, 1.0), 2 * BINS + _bin(theta, -np.pi, np.pi)


@numba.njit(cache=True, parallel=True)
def _spfh_kernel(points, normals, sources, nbr):
    n, k = nbr.shape
    out = np.zeros((n, SPFH_DIM))
    degenerate = np.zeros(n, dtype=np.bool_)
    for r in numba.prange(n):
        s = sources[r]
        valid = 0
        for j in range(k):
            b0, b1, b2 = _pair_bins(points, normals, s, nbr[r, j])
            if b0 < 0:
                continue
            out[r, b0] += 1.0
            out[r, b1] += 1.0
            out[r, b2] += 1.0
            valid += 1
        if valid == 0:
            degenerate[r] = True
        else:
            scale = 100.0 / valid
            for b in range(SPFH_DIM):
                out[r, b] *= scale
    return out, degenerate


@numba.njit(cache=True, parallel=True)
def _multiscale_spfh_kernel(points, normals, nbr, scales, order):
    """SPFH at each (ascending) neighbour count in ``scales`` from one pass over the longest list.

    Points are visited in ``order``; a spatially coherent order keeps neighbour rows in cache.
    """
    n = nbr.shape[0]
    n_scales = len(scales)
    out = np.zeros((n, SPFH_DIM * n_scales))
    for r in numba.prange(n):
        s = order[r]
        counts = np.zeros(SPFH_DIM)
        valid = 0
        c = 0
        for j in range(scales[-1]):
            b0, b1, b2 = _pair_bins(points, normals, s, nbr[s, j])
            if b0 >= 0:
                counts[b0] += 1.0
                counts[b1] += 1.0
                counts[b2] += 1.0
                valid += 1
            while c < n_scales and scales[c] == j + 1:
                if valid > 0:
                    scale = 100.0 / valid
                    for b in range(SPFH_DIM):
                        out[s, c * SPFH_DIM + b] = counts[b] * scale
                c += 1
    return out


@numba.njit(cache=True, parallel=True)
def _fpfh_kernel(spfh, nbr, dist):
    n, k = nbr.shape
    out = np.empty_like(spfh)
    for s in numba.prange(n):
        acc = np.zeros(SPFH_DIM)
        for j in range(k):
            w = dist[s, j]
            if w == 0.0:
                continue
            t = nbr[s, j]
            for b in range(SPFH_DIM):
                acc[b] += spfh[t, b] / w
        for b in range(SPFH_DIM):
            out[s, b] = spfh[s, b] + acc[b] / k
    return out


@numba.njit(cache=True, parallel=True)
def _multiscale_fpfh_kernel(spfh, nbr, dist, scales, order):
    """Per-scale FPFH from the block-stacked SPFH of ``_multiscale_spfh_kernel``."""
    n = nbr.shape[0]
    n_scales = len(scales)
    out = np.empty_like(spfh)
    for r in numba.prange(n):
        s = order[r]
        acc = np.zeros(spfh.shape[1])
        # scales ascend, so the blocks still accumulating at step j form a suffix
        first = 0
        for j in range(scales[-1]):
            while j >= scales[first]:
                first += 1
            w = dist[s, j]
            if w == 0.0:
                continue
            t = nbr[s, j]
            for b in range(first * SPFH_DIM, n_scales * SPFH_DIM):
                acc[b] += spfh[t, b] / w
        for c in range(n_scales):
            for b in range(c * SPFH_DIM, (c + 1) * SPFH_DIM):
                out[s, b] = spfh[s, b] + acc[b] / scales[c]
    return out


def _check_normals(cloud: LabeledCloud, k: int) -> None:
    if cloud.normals is None:
        raise DataError(f"cloud {cloud.sample_id!r} has no normals; run estimate_normals first")
    if k < 1 or k > len(cloud) - 1:
        raise DataError(f"k_neighbors={k} must lie in [1, {len(cloud) - 1}] for a {len(cloud)}-point cloud")


def _neighbors(cloud: LabeledCloud, k: int, index: SpatialIndex | None):
    return neighbors_excluding_self(index or SpatialIndex(cloud.points), k)


def spfh_all(cloud: LabeledCloud, k_neighbors: int, index: SpatialIndex | None = None):
    """SPFH for every point: ``(histograms (N, 33), degenerate flags (N,))``."""
    _check_normals(cloud, k_neighbors)
    nbr, _ = _neighbors(cloud, k_neighbors, index)
    return _spfh_kernel(cloud.points, cloud.normals, np.arange(len(cloud)), nbr)


def compute_spfh(cloud: LabeledCloud, point_index: int, k_neighbors: int, index: SpatialIndex | None = None):
    """SPFH of a single point: ``(33-vector, degenerate flag)``."""
    _check_normals(cloud, k_neighbors)
    index = index or SpatialIndex(cloud.points)
    idx, _ = index.query(cloud.points[point_index], k_neighbors + 1)
    row = idx[0]
    row = row[row != point_index][:k_neighbors]
    hist, degen = _spfh_kernel(cloud.points, cloud.normals, np.array([point_index]), row[None, :])
    return hist[0], bool(degen[0])


def _fpfh_from_neighbors(points, normals, nbr, dist):
    spfh, _ = _spfh_kernel(points, normals, np.arange(len(points)), np.ascontiguousarray(nbr))
    return _fpfh_kernel(spfh, np.ascontiguousarray(nbr), np.ascontiguousarray(dist))


def compute_fpfh(cloud: LabeledCloud, k_neighbors: int, index: SpatialIndex | None = None) -> np.ndarray:
    _check_normals(cloud, k_neighbors)
    nbr, dist = _neighbors(cloud, k_neighbors, index)
    return _fpfh_from_neighbors(cloud.points, cloud.normals, nbr, dist)


def _multiscale_from_neighbors(points, normals, nbr, dist, scales, order) -> np.ndarray:
    requested = np.asarray(scales, dtype=np.int64)
    perm = np.argsort(requested, kind="stable")
    sc = requested[perm]
    nbr = np.ascontiguousarray(nbr[:, : sc[-1]])
    dist = np.ascontiguousarray(dist[:, : sc[-1]])
    order = np.asarray(order, dtype=np.int64)
    spfh = _multiscale_spfh_kernel(points, normals, nbr, sc, order)
    fpfh = _multiscale_fpfh_kernel(spfh, nbr, dist, sc, order)
    if np.array_equal(perm, np.arange(len(perm))):
        return fpfh
    blocks = np.split(fpfh, len(sc), axis=1)
    out = [None] * len(sc)
    for pos, src in enumerate(perm):
        out[src] = blocks[pos]
    return np.hstack(out)


def compute_multiscale_fpfh(cloud: LabeledCloud, scales, index: SpatialIndex | None = None) -> np.ndarray:
    """Concatenated FPFH over ``scales`` (neighbour counts), shape (N, 33 * len(scales))."""
    scales = list(scales)
    if not scales:
        raise DataError("at least one scale is required")
    _check_normals(cloud, max(scales))
    if min(scales) < 1:
        raise DataError(f"scales must be positive, got {scales}")
    # kNN lists are prefix-consistent, so one query at the largest scale serves all
    index = index or SpatialIndex(cloud.points)
    nbr, dist = _neighbors(cloud, max(scales), index)
    return _multiscale_from_neighbors(cloud.points, cloud.normals, nbr, dist, scales, index.order)


def aggregate_at_centers(per_point, cloud: LabeledCloud, centers, m: int, index: SpatialIndex | None = None,
                         scales=None, sample_id: str | None = None) -> FeatureMatrix:
    """Mean of ``per_point`` rows over the ``m`` nearest points of each center (center included)."""
    per_point = np.asarray(per_point, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.int64)
    if m < 1 or m > len(cloud):
        raise DataError(f"aggregation m={m} must lie in [1, {len(cloud)}]")
    if len(centers) and (centers.min() < 0 or centers.max() >= len(cloud)):
        raise DataError("center index out of range")
    index = index or SpatialIndex(cloud.points)
    nbr, _ = index.query(cloud.points[centers], m)
    rows = per_point[nbr].mean(axis=1)
    # scale values are bookkeeping only; zeros mark "not recorded"
    scales = tuple(scales) if scales is not None else (0,) * (per_point.shape[1] // SPFH_DIM)
    return FeatureMatrix(rows, centers, scales, m, sample_id if sample_id is not None else cloud.sample_id)


def extract_features(cloud: LabeledCloud, cfg: RunConfig, seed: int | None = None) -> FeatureMatrix:
    """normals -> multi-scale FPFH -> FPS centers -> mean pooling. Pure in (cloud, cfg, seed)."""
    kmax = max(cfg.scales)
    if kmax > len(cloud) - 1:
        raise DataError(f"k_neighbors={kmax} must lie in [1, {len(cloud) - 1}] for a {len(cloud)}-point cloud")
    index = SpatialIndex(cloud.points)
    # one sorted self-query serves normals (prefix, self included) and every FPFH scale
    idx, dist = index.query_self(max(kmax + 1, cfg.normal_k))
    normals = normals_from_neighbors(cloud.points, np.ascontiguousarray(idx[:, : cfg.normal_k]))
    nbr, nd = drop_self(idx, dist, kmax)
    per_point = _multiscale_from_neighbors(cloud.points, normals, nbr, nd, cfg.scales, index.order)
    g = min(cfg.centers_G, len(cloud))
    centers = farthest_point_sample(cloud, g, cfg.seed if seed is None else seed)
    return aggregate_at_centers(per_point, cloud, centers, min(cfg.aggregation_m, len(cloud)), index,
                                scales=cfg.scales)


def center_assignment(cloud: LabeledCloud, centers) -> np.ndarray:
    """Index (into ``centers``) of the nearest center for every point."""
    cidx = SpatialIndex(cloud.points[np.asarray(centers)])
    nearest, _ = cidx.query(cloud.points, 1)
    return nearest[:, 0]


# ------------------------------------------------------------ binary dump


def save_features(fm: FeatureMatrix, path) -> None:
    rows = np.ascontiguousarray(fm.rows, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FEAT_MAGIC)
        fh.write(struct.pack("<IQI", FEAT_VERSION, fm.G, fm.C1))
        fh.write(rows.tobytes())
        fh.write(np.ascontiguousarray(fm.center_indices, dtype="<u8").tobytes())


def load_features(path) -> FeatureMatrix:
    data = Path(path).read_bytes()
    if data[:8] != FEAT_MAGIC:
        raise DataError(f"{path}: not a feature dump (bad magic)")
    if len(data) < 24:
        raise DataError(f"{path}: truncated header")
    version, g, c1 = struct.unpack_from("<IQI", data, 8)
    if version != FEAT_VERSION:
        raise DataError(f"{path}: unsupported feature dump version {version} (expected {FEAT_VERSION})")
    need = 24 + 4 * g * c1 + 8 * g
    if len(data) != need:
        raise DataError(f"{path}: expected {need} bytes, found {len(data)}")
    rows = np.frombuffer(data, dtype="<f4", count=g * c1, offset=24).reshape(g, c1)
    centers = np.frombuffer(data, dtype="<u8", count=g, offset=24 + 4 * g * c1)
    n_scales = c1 // SPFH_DIM
    return FeatureMatrix(rows.astype(np.float64), centers.astype(np.int64), (0,) * n_scales, 0)
