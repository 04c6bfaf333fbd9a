"""Dual-distribution anomaly scores.

``D(f, q, F) = (1 - e^{|f-q|} / sum_{m in kNN_K(q)} e^{|f-m|}) * |f-q|`` with
``q`` the nearest support vector of ``f`` and ``kNN_K(q)`` taken inside the
support (``q`` included). A center's local score is
``alpha = max(0, 1 - gamma * s_A) * s_N``; points inherit the score of their
nearest center and a cloud scores as its highest point.
"""

from __future__ import annotations

import dataclasses
import logging
import warnings
from pathlib import Path

import numpy as np

from pcad.config import RunConfig
from pcad.errors import DataError
from pcad.features import FeatureMatrix, extract_features
from pcad.geom import SCORE_SUFFIX, LabeledCloud, SpatialIndex, save_scores
from pcad.support import DualSupport, SupportSet, exact_knn

log = logging.getLogger(__name__)


@dataclasses.dataclass(eq=False)
class ScoredCloud:
    sample_id: str
    center_scores: np.ndarray
    point_scores: np.ndarray
    object_score: float
    s_n_components: np.ndarray
    s_a_components: np.ndarray
    center_indices: np.ndarray | None = None
    labels: np.ndarray | None = None

    @property
    def object_label(self) -> int:
        return int(self.labels is not None and bool(self.labels.any()))


def _clamp_k(K: int, n: int) -> int:
    if K > n:
        warnings.warn(f"K={K} exceeds support size {n}; clamping to {n}", RuntimeWarning, stacklevel=3)
        return n
    if K == 1:
        warnings.warn("K=1 makes the reweighting ratio 1 and every distance 0", RuntimeWarning, stacklevel=3)
    return K


def _reweight(d_neighbors: np.ndarray) -> np.ndarray:
    """Column 0 holds |f-q|; the rest |f-m| for the other members of kNN_K(q)."""
    top = d_neighbors.max(axis=1, keepdims=True)
    e = np.exp(d_neighbors - top)
    ratio = e[:, 0] / e.sum(axis=1)
    return (1.0 - ratio) * d_neighbors[:, 0]


def reweighted_distance(f, q, support, K: int) -> float:
    """D(f, q, support) for a single query; ``q`` must be a member of ``support``."""
    vecs = support.vectors if isinstance(support, SupportSet) else np.atleast_2d(np.asarray(support))
    vecs = np.asarray(vecs, dtype=np.float64)
    if len(vecs) == 0:
        raise DataError("empty support")
    q = np.asarray(q, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    hits = np.nonzero((vecs == q).all(axis=1))[0]
    if not len(hits):
        raise DataError("q is not a member of the support")
    K = _clamp_k(K, len(vecs))
    nbr, _ = exact_knn(vecs[hits[:1]], vecs, K)
    members = nbr[0]
    # q leads the list even when duplicates of it exist at lower indices
    members = np.concatenate([[hits[0]], members[members != hits[0]][: K - 1]])
    d = np.sqrt(((vecs[members] - f) ** 2).sum(axis=1))
    return float(_reweight(d[None, :])[0])


class BankScorer:
    """Precomputed within-support neighbourhoods for fast batched D evaluation."""

    def __init__(self, support: SupportSet | np.ndarray, K: int):
        vecs = support.vectors if isinstance(support, SupportSet) else support
        self.vectors = np.asarray(vecs, dtype=np.float64)
        if len(self.vectors) == 0:
            raise DataError("empty support")
        self.K = _clamp_k(K, len(self.vectors))
        self.index = SpatialIndex(self.vectors)
        # neighbourhoods are filled on first use; only support vectors that are someone's nearest need one
        self._nbr = np.full((len(self.vectors), self.K), -1, dtype=np.int64)

    def _fill(self, rows: np.ndarray) -> None:
        todo = np.unique(rows[self._nbr[rows, 0] < 0])
        if not len(todo):
            return
        nbr, _ = self.index.query(self.vectors[todo], self.K)
        # put each vector first in its own neighbourhood (exact duplicates may precede it)
        for i, r in enumerate(todo):
            if nbr[i, 0] != r:
                nbr[i] = np.concatenate([[r], nbr[i][nbr[i] != r][: self.K - 1]])
        self._nbr[todo] = nbr

    @property
    def neighborhoods(self) -> np.ndarray:
        self._fill(np.arange(len(self.vectors)))
        return self._nbr

    def distances(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """``(D values, nearest support index)`` for each query row."""
        q = np.asarray(queries, dtype=np.float64)
        nearest, _ = self.index.query(q, 1)
        nearest = nearest[:, 0]
        self._fill(nearest)
        members = self._nbr[nearest]
        diff = self.vectors[members] - q[:, None, :]
        d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        return _reweight(d), nearest


def alpha_from_components(s_n, s_a, gamma: float, clamp: bool = True):
    factor = 1.0 - gamma * np.asarray(s_a, dtype=np.float64)
    if clamp:
        factor = np.maximum(factor, 0.0)
    return factor * s_n


class DualScorer:
    def __init__(self, ds: DualSupport, gamma: float | None = None, K: int | None = None,
                 clamp: bool | None = None):
        if len(ds.normal) == 0:
            raise DataError("empty normal support")
        self.ds = ds
        self.gamma = ds.cfg.gamma if gamma is None else gamma
        self.K = ds.cfg.K if K is None else K
        self.clamp = ds.cfg.clamp_alpha if clamp is None else clamp
        self.normal = BankScorer(ds.normal, self.K)
        self.anomalous = BankScorer(ds.anomalous, self.K) if len(ds.anomalous) else None

    def embed(self, rows) -> np.ndarray:
        """Feature rows as stored in the bank: scaled, then rounded through float32."""
        return (np.asarray(rows, dtype=np.float64) * self.ds.feature_scale).astype(np.float32).astype(np.float64)

    def score_rows(self, rows, embedded: bool = False):
        """``(alpha, s_N, s_A)`` per feature row."""
        f = np.asarray(rows, dtype=np.float64) if embedded else self.embed(rows)
        s_n, _ = self.normal.distances(f)
        if self.anomalous is None or self.gamma == 0:
            return s_n.copy(), s_n, np.zeros_like(s_n)
        s_a, _ = self.anomalous.distances(f)
        return alpha_from_components(s_n, s_a, self.gamma, self.clamp), s_n, s_a


def local_score(f, ds: DualSupport, gamma: float, K: int) -> float:
    alpha, _, _ = DualScorer(ds, gamma, K).score_rows(np.atleast_2d(f), embedded=True)
    return float(alpha[0])


def propagate(cloud: LabeledCloud, centers, center_scores, mode: str = "nearest") -> np.ndarray:
    """Per-point scores from center scores: nearest center, or inverse-distance blend of three."""
    centers = np.asarray(centers)
    cidx = SpatialIndex(cloud.points[centers])
    if mode == "nearest" or len(centers) < 3:
        nearest, _ = cidx.query(cloud.points, 1)
        return np.asarray(center_scores, dtype=np.float64)[nearest[:, 0]]
    nbr, dist = cidx.query(cloud.points, 3)
    w = 1.0 / np.maximum(dist, 1e-12)
    return (np.asarray(center_scores)[nbr] * w).sum(axis=1) / w.sum(axis=1)


def score_features(cloud: LabeledCloud, fm: FeatureMatrix, scorer: DualScorer, cfg: RunConfig) -> ScoredCloud:
    alpha, s_n, s_a = scorer.score_rows(fm.rows)
    point = propagate(cloud, fm.center_indices, alpha, cfg.propagation)
    return ScoredCloud(cloud.sample_id, alpha, point, float(point.max()), s_n, s_a, fm.center_indices, cloud.labels)


def check_dims(ds: DualSupport, cfg: RunConfig) -> None:
    c1 = 33 * len(cfg.scales)
    if ds.dim != c1:
        raise DataError(f"bank feature dimension C1={ds.dim} does not match configuration C1={c1} "
                        f"(scales {','.join(map(str, cfg.scales))})")


def score_sample(cloud: LabeledCloud, ds: DualSupport, cfg: RunConfig, scorer: DualScorer | None = None) -> ScoredCloud:
    check_dims(ds, cfg)
    return score_features(cloud, extract_features(cloud, cfg), scorer or DualScorer(ds), cfg)


def score_dataset(manifest, ds: DualSupport, cfg: RunConfig, out_dir=None, store=None) -> list[ScoredCloud]:
    """Score every test row; optionally write ``<sample_id>.scores`` and ``object_scores.tsv``."""
    from pcad.support import FeatureStore

    check_dims(ds, cfg)
    store = store or FeatureStore(manifest)
    scorer = DualScorer(ds)
    results = []
    for row in manifest.select(split="test"):
        try:
            cloud = store.load(row)
            fm, _ = store.features(row, cfg)
            results.append(score_features(cloud, fm, scorer, cfg))
        except DataError as exc:
            raise DataError(f"scoring failed for {row.sample_id!r}: {exc}") from exc
    if out_dir is not None:
        write_scores(results, manifest, out_dir)
    return results


def write_scores(results, manifest, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    role = {r.sample_id: r.role for r in manifest}
    lines = []
    for sc in results:
        path = out_dir / f"{sc.sample_id}{SCORE_SUFFIX}"
        path.write_text("".join(f"{s:.17g}\n" for s in sc.point_scores))
        label = 1 if role.get(sc.sample_id) == "anomalous" else 0
        lines.append(f"{sc.sample_id}\t{sc.object_score:.9g}\t{label}\n")
    (out_dir / "object_scores.tsv").write_text("".join(lines))


__all__ = [
    "ScoredCloud", "BankScorer", "DualScorer", "reweighted_distance", "local_score", "score_sample",
    "score_dataset", "propagate", "save_scores", "alpha_from_components",
]
