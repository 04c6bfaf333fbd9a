"""Point clouds, file I/O, exact nearest-neighbour search, normals and farthest point sampling.

All neighbour queries break distance ties by the lower point index, so every
result here can be compared index-for-index against a brute-force search.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numba
import numpy as np
from scipy.spatial import cKDTree

from pcad._threads import worker_count
from pcad.errors import CloudFormatError, DataError

FORMATS = ("xyz", "xyzn", "ply-ascii")
LABEL_SUFFIX = ".labels"
SCORE_SUFFIX = ".scores"


@dataclasses.dataclass(eq=False)
class LabeledCloud:
    points: np.ndarray
    normals: np.ndarray | None = None
    labels: np.ndarray | None = None
    sample_id: str = ""

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or len(self.points) == 0:
            raise DataError(f"cloud {self.sample_id!r}: points must be a non-empty (N, 3) array")
        if not np.isfinite(self.points).all():
            raise DataError(f"cloud {self.sample_id!r}: non-finite coordinate")
        n = len(self.points)
        if self.normals is not None:
            self.normals = np.ascontiguousarray(self.normals, dtype=np.float64)
            if self.normals.shape != (n, 3):
                raise DataError(f"cloud {self.sample_id!r}: {len(self.normals)} normals for {n} points")
            lengths = np.linalg.norm(self.normals, axis=1)
            if not np.all(np.abs(lengths - 1.0) <= 1e-6):
                raise DataError(f"cloud {self.sample_id!r}: normals must have unit length")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.int8)
            if self.labels.shape != (n,):
                raise DataError(f"cloud {self.sample_id!r}: {len(self.labels)} labels for {n} points")
            if not np.isin(self.labels, (0, 1)).all():
                raise DataError(f"cloud {self.sample_id!r}: labels must be 0 or 1")

    def __len__(self) -> int:
        return len(self.points)

    def replace(self, **changes) -> "LabeledCloud":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------- file I/O


def _parse_rows(path: Path, lines, ncols: int, first_line: int) -> np.ndarray:
    rows = np.empty((len(lines), ncols), dtype=np.float64)
    for i, line in enumerate(lines):
        parts = line.split()
        lineno = first_line + i
        if len(parts) < ncols:
            raise CloudFormatError(path, lineno, f"expected {ncols} columns, got {len(parts)}")
        try:
            vals = [float(p) for p in parts[:ncols]]
        except ValueError:
            raise CloudFormatError(path, lineno, "non-numeric value") from None
        if not all(np.isfinite(vals)):
            raise CloudFormatError(path, lineno, "non-finite value")
        rows[i] = vals
    return rows


def _read_xyz(path: Path, ncols: int) -> np.ndarray:
    try:
        rows = np.loadtxt(path, dtype=np.float64, ndmin=2, comments="#")
        if rows.shape[1] == ncols and len(rows) and np.isfinite(rows).all():
            return rows
    except ValueError:
        pass
    # slow path: locate the offending line
    numbered = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split()
        if len(parts) != ncols:
            raise CloudFormatError(path, lineno, f"expected {ncols} columns, got {len(parts)}")
        numbered.append((lineno, line))
    if not numbered:
        raise CloudFormatError(path, None, "no points")
    rows = np.empty((len(numbered), ncols))
    for i, (lineno, line) in enumerate(numbered):
        rows[i] = _parse_rows(path, [line], ncols, lineno)[0]
    return rows


def _read_ply_ascii(path: Path) -> tuple[np.ndarray, np.ndarray | None]:
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise CloudFormatError(path, 1, "missing 'ply' magic")
    elements: list[tuple[str, int, list[str], bool]] = []
    end = None
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            if parts[1:2] != ["ascii"]:
                raise CloudFormatError(path, lineno, "only ASCII PLY is supported")
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), [], False))
        elif parts[0] == "property":
            if not elements:
                raise CloudFormatError(path, lineno, "property before element")
            name, count, props, has_list = elements[-1]
            props.append(parts[-1])
            elements[-1] = (name, count, props, has_list or parts[1] == "list")
        elif parts[0] == "end_header":
            end = lineno
            break
    if end is None:
        raise CloudFormatError(path, None, "missing end_header")
    cursor = end  # 0-based index of the first body line
    for name, count, props, _ in elements:
        if name != "vertex":
            cursor += count
            continue
        for axis in ("x", "y", "z"):
            if axis not in props:
                raise CloudFormatError(path, None, f"vertex element lacks property {axis!r}")
        body = lines[cursor:cursor + count]
        if len(body) != count:
            raise CloudFormatError(path, None, f"expected {count} vertices, file ends after {len(body)}")
        table = _parse_rows(path, body, len(props), cursor + 1)
        pts = table[:, [props.index(a) for a in ("x", "y", "z")]]
        normals = None
        if all(a in props for a in ("nx", "ny", "nz")):
            normals = table[:, [props.index(a) for a in ("nx", "ny", "nz")]]
        return pts, normals
    raise CloudFormatError(path, None, "no vertex element")


def _infer_format(path: Path) -> str:
    ext = path.suffix.lower()
    if ext == ".ply":
        return "ply-ascii"
    if ext == ".xyzn":
        return "xyzn"
    return "xyz"


def read_labels(path, n_points: int) -> np.ndarray:
    path = Path(path)
    text = path.read_text()
    tokens = text.split()
    # fast path for the canonical layout: one 0/1 per line, nothing else
    if len(tokens) == n_points and set(tokens) <= {"0", "1"} and "\n".join(tokens) == text.rstrip("\n"):
        return np.asarray(tokens, dtype=np.int8)
    labels = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s:
            continue
        if s not in ("0", "1"):
            raise CloudFormatError(path, lineno, f"label must be 0 or 1, got {s!r}")
        labels.append(int(s))
    if len(labels) != n_points:
        raise CloudFormatError(path, None, f"label sidecar has {len(labels)} entries for {n_points} points")
    return np.asarray(labels, dtype=np.int8)


def load_cloud(path, format: str | None = None, label_path=None, sample_id: str | None = None) -> LabeledCloud:
    """Read a cloud; labels come from ``label_path`` or the ``.labels`` sidecar next to it."""
    path = Path(path)
    fmt = format or _infer_format(path)
    if fmt not in FORMATS:
        raise DataError(f"unknown cloud format {fmt!r}; expected one of {FORMATS}")
    if not path.exists():
        raise CloudFormatError(path, None, "file not found")
    normals = None
    if fmt == "xyz":
        pts = _read_xyz(path, 3)
    elif fmt == "xyzn":
        table = _read_xyz(path, 6)
        pts, normals = table[:, :3], table[:, 3:]
        lengths = np.linalg.norm(normals, axis=1)
        bad = np.nonzero(lengths == 0)[0]
        if len(bad):
            raise CloudFormatError(path, None, f"zero-length normal at point {int(bad[0])}")
        normals = normals / lengths[:, None]
    else:
        pts, normals = _read_ply_ascii(path)
        if normals is not None:
            normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    sidecar = Path(label_path) if label_path else path.with_suffix(LABEL_SUFFIX)
    labels = read_labels(sidecar, len(pts)) if sidecar.exists() else None
    if label_path and not sidecar.exists():
        raise CloudFormatError(sidecar, None, "label file not found")
    return LabeledCloud(pts, normals, labels, sample_id if sample_id is not None else path.stem)


def save_cloud(cloud: LabeledCloud, path, with_normals: bool = False) -> None:
    """Write ``x y z`` (or ``x y z nx ny nz``) rows, plus a ``.labels`` sidecar when labelled."""
    path = Path(path)
    table = cloud.points
    if with_normals:
        if cloud.normals is None:
            raise DataError(f"cloud {cloud.sample_id!r} has no normals to write")
        table = np.hstack([cloud.points, cloud.normals])
    with open(path, "w") as fh:
        np.savetxt(fh, table, fmt="%.10g")
    if cloud.labels is not None:
        save_labels(cloud.labels, path.with_suffix(LABEL_SUFFIX))


def save_labels(labels, path) -> None:
    Path(path).write_text("".join(f"{int(v)}\n" for v in labels))


def save_scores(cloud: LabeledCloud, point_scores, path) -> None:
    scores = np.asarray(point_scores, dtype=np.float64)
    if scores.shape != (len(cloud),):
        raise DataError(f"{len(scores)} scores for {len(cloud)} points in {cloud.sample_id!r}")
    if not np.isfinite(scores).all():
        raise DataError(f"non-finite score for {cloud.sample_id!r}")
    Path(path).write_text("".join(f"{s:.17g}\n" for s in scores))


def load_scores(path) -> np.ndarray:
    path = Path(path)
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append(float(line))
        except ValueError:
            raise CloudFormatError(path, lineno, "malformed score") from None
    return np.asarray(out)


# ---------------------------------------------------------- spatial index


class SpatialIndex:
    """Exact Euclidean kNN / radius search over a frozen point set.

    Backed by a k-d tree; results are post-processed so that equal distances
    are ordered by point index, which makes them identical to brute force.
    """

    def __init__(self, points):
        pts = np.array(points, dtype=np.float64, copy=True)
        if pts.ndim != 2 or len(pts) == 0:
            raise DataError("cannot index an empty point set")
        if not np.isfinite(pts).all():
            raise DataError("cannot index non-finite points")
        pts.setflags(write=False)
        self.points = pts
        self._tree = cKDTree(pts, leafsize=32)

    def __len__(self) -> int:
        return len(self.points)

    def _exact(self, q: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        kth = float(np.atleast_1d(self._tree.query(q, k=k)[0])[-1])
        cand = np.asarray(self._tree.query_ball_point(q, kth * (1 + 1e-9) + 1e-300), dtype=np.int64)
        d = np.sqrt(((self.points[cand] - q) ** 2).sum(axis=1))
        order = np.lexsort((cand, d))[:k]
        return cand[order], d[order]

    def query(self, queries, k: int) -> tuple[np.ndarray, np.ndarray]:
        """k nearest neighbours of each row of ``queries``: ``(indices, distances)``, both (M, k)."""
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        n = len(self.points)
        if k < 1 or k > n:
            raise DataError(f"k={k} must lie in [1, {n}] (number of indexed points)")
        kq = min(k + 1, n)
        dist, idx = self._tree.query(q, k=kq, workers=worker_count())
        dist = dist.reshape(len(q), kq)
        idx = idx.reshape(len(q), kq).astype(np.int64, copy=False)
        boundary = np.zeros(len(q), dtype=bool)
        if kq > k:
            boundary = dist[:, k] == dist[:, k - 1]
        dist = np.ascontiguousarray(dist[:, :k])
        idx = np.ascontiguousarray(idx[:, :k])
        for r in np.nonzero(boundary)[0]:
            idx[r], dist[r] = self._exact(q[r], k)
        if k > 1:
            tied = (dist[:, 1:] == dist[:, :-1]).any(axis=1) & ~boundary
            for r in np.nonzero(tied)[0]:
                order = np.lexsort((idx[r], dist[r]))
                idx[r], dist[r] = idx[r][order], dist[r][order]
        return idx, dist

    @property
    def order(self) -> np.ndarray:
        """Point indices in k-d tree leaf order (spatially coherent)."""
        return self._tree.indices

    def query_self(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """``query(self.points, k)``, issued in tree order for cache locality."""
        order = self.order
        idx, dist = self.query(self.points[order], k)
        out_i, out_d = np.empty_like(idx), np.empty_like(dist)
        out_i[order], out_d[order] = idx, dist
        return out_i, out_d

    def radius(self, query, r: float) -> tuple[np.ndarray, np.ndarray]:
        """All points with distance <= r, ordered by (distance, index)."""
        q = np.asarray(query, dtype=np.float64)
        cand = np.asarray(self._tree.query_ball_point(q, r * (1 + 1e-12)), dtype=np.int64)
        d = np.sqrt(((self.points[cand] - q) ** 2).sum(axis=1))
        keep = d <= r
        cand, d = cand[keep], d[keep]
        order = np.lexsort((cand, d))
        return cand[order], d[order]


def build_spatial_index(points) -> SpatialIndex:
    return SpatialIndex(points)


def knn(index: SpatialIndex, query, k: int) -> list[tuple[int, float]]:
    idx, dist = index.query(np.asarray(query, dtype=np.float64)[None, :], k)
    return [(int(i), float(d)) for i, d in zip(idx[0], dist[0])]


def neighbors_excluding_self(index: SpatialIndex, k: int) -> tuple[np.ndarray, np.ndarray]:
    """k nearest *other* points for every indexed point, shape (N, k)."""
    n = len(index)
    if k > n - 1:
        raise DataError(f"k={k} neighbours requested but cloud has only {n} points")
    return drop_self(*index.query_self(k + 1), k)


def drop_self(idx: np.ndarray, dist: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Turn the first k+1 columns of a self-query into the k nearest other points."""
    idx, dist = idx[:, : k + 1], dist[:, : k + 1]
    n = len(idx)
    if np.array_equal(idx[:, 0], np.arange(n)):
        return idx[:, 1:], dist[:, 1:]
    keep = idx != np.arange(n)[:, None]
    # with more than k duplicates of a point, self may fall outside the k+1 list
    no_self = keep.all(axis=1)
    keep[no_self, -1] = False
    return idx[keep].reshape(n, k), dist[keep].reshape(n, k)


# ------------------------------------------------------------------ normals


@numba.njit(cache=True)
def _neighborhood_cov(points, nbr):
    """Population covariance of each row's neighbour coordinates, shape (N, 3, 3)."""
    n, k = nbr.shape
    out = np.empty((n, 3, 3))
    for s in range(n):
        m = np.zeros(3)
        for j in range(k):
            for a in range(3):
                m[a] += points[nbr[s, j], a]
        for a in range(3):
            m[a] /= k
        c = np.zeros((3, 3))
        for j in range(k):
            t = nbr[s, j]
            for a in range(3):
                for b in range(3):
                    c[a, b] += (points[t, a] - m[a]) * (points[t, b] - m[b])
        for a in range(3):
            for b in range(3):
                out[s, a, b] = c[a, b] / k
    return out


def normals_from_neighbors(points: np.ndarray, nbr_idx: np.ndarray) -> np.ndarray:
    cov = _neighborhood_cov(np.ascontiguousarray(points), np.ascontiguousarray(nbr_idx, dtype=np.int64))
    _, vecs = np.linalg.eigh(cov)
    normals = np.ascontiguousarray(vecs[:, :, 0])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    to_centroid = points.mean(axis=0) - points
    flip = np.einsum("ij,ij->i", normals, to_centroid) > 0
    normals[flip] *= -1
    degenerate = ~np.any(cov != 0, axis=(1, 2))
    normals[degenerate] = (0.0, 0.0, 1.0)
    return normals


def estimate_normals(cloud: LabeledCloud, k_neighbors: int, index: SpatialIndex | None = None) -> LabeledCloud:
    """PCA normals from the k nearest points (self included), oriented away from the centroid."""
    if k_neighbors < 3:
        raise DataError(f"k_neighbors={k_neighbors} must be >= 3")
    if len(cloud) < k_neighbors:
        raise DataError(f"estimate_normals needs >= {k_neighbors} points, cloud has {len(cloud)}")
    index = index or SpatialIndex(cloud.points)
    nbr, _ = index.query(cloud.points, k_neighbors)
    return cloud.replace(normals=normals_from_neighbors(cloud.points, nbr))


# ------------------------------------------------------ farthest point sampling


@numba.njit(cache=True)
def _fps_kernel(xs, ys, zs, g, first):
    n = xs.shape[0]
    out = np.empty(g, dtype=np.int64)
    # squared distance to the nearest selected point; -1 marks selected points
    mind = np.full(n, np.inf)
    out[0] = first
    mind[first] = -1.0
    last = first
    for i in range(1, g):
        px, py, pz = xs[last], ys[last], zs[last]
        for j in range(n):
            dx = xs[j] - px
            dy = ys[j] - py
            dz = zs[j] - pz
            d = dx * dx + dy * dy + dz * dz
            if d < mind[j]:
                mind[j] = d
        last = np.argmax(mind)  # first maximum: lowest index wins ties
        out[i] = last
        mind[last] = -1.0
    return out


def farthest_point_sample(cloud, g: int, seed: int, start: int | None = None) -> np.ndarray:
    """Indices of ``g`` farthest-point samples in selection order.

    The first index is drawn from ``default_rng(seed)`` unless ``start`` pins it.
    """
    pts = cloud.points if isinstance(cloud, LabeledCloud) else np.asarray(cloud, dtype=np.float64)
    n = len(pts)
    if g < 1 or g > n:
        raise DataError(f"cannot draw g={g} samples from {n} points")
    first = int(np.random.default_rng(seed).integers(n)) if start is None else int(start)
    return _fps_kernel(*(np.ascontiguousarray(pts[:, i]) for i in range(3)), g, first)
