"""Memory banks: subsampling strategies, correspondence subsampling, bank files."""

from __future__ import annotations

import dataclasses
import logging
import struct
from pathlib import Path

import numba
import numpy as np

from pcad.config import RunConfig
from pcad.errors import BankFormatError, DataError, InvariantError
from pcad.seeding import derive_seed

log = logging.getLogger(__name__)

BANK_MAGIC = b"PCADBANK"
BANK_VERSION = 1
STRATEGY_ALIASES = {"greedy-proj": "greedy_projected"}


@dataclasses.dataclass(eq=False)
class SupportSet:
    vectors: np.ndarray
    sample_ids: np.ndarray
    center_indices: np.ndarray
    strategy: str = "identity"
    seed: int = 0

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2:
            raise DataError("support vectors must be a 2-D array")
        self.sample_ids = np.asarray(self.sample_ids, dtype=object)
        self.center_indices = np.asarray(self.center_indices, dtype=np.int64)
        if not (len(self.vectors) == len(self.sample_ids) == len(self.center_indices)):
            raise DataError("support provenance does not match vector count")
        if not np.isfinite(self.vectors).all():
            raise DataError("support vectors must be finite")

    def __len__(self) -> int:
        return len(self.vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def provenance(self) -> list[tuple[str, int]]:
        return list(zip(self.sample_ids.tolist(), self.center_indices.tolist()))

    def take(self, idx, strategy: str | None = None, seed: int | None = None) -> "SupportSet":
        idx = np.asarray(idx, dtype=np.int64)
        return SupportSet(self.vectors[idx], self.sample_ids[idx], self.center_indices[idx],
                          strategy or self.strategy, self.seed if seed is None else seed)

    @classmethod
    def empty(cls, dim: int, strategy: str = "identity") -> "SupportSet":
        return cls(np.zeros((0, dim), np.float32), np.zeros(0, object), np.zeros(0, np.int64), strategy)


@dataclasses.dataclass(eq=False)
class DualSupport:
    normal: SupportSet
    anomalous: SupportSet
    cfg: RunConfig
    removed_cor: int = 0
    feature_scale: float = 1.0
    # correspondence diagnostics (in-memory only): the 2N candidate set and F_cor positions in it
    candidates: SupportSet | None = None
    cor_positions: np.ndarray | None = None

    def __post_init__(self):
        if len(self.anomalous) and self.anomalous.dim != self.normal.dim:
            raise DataError(f"normal ({self.normal.dim}) and anomalous ({self.anomalous.dim}) dims differ")

    @property
    def dim(self) -> int:
        return self.normal.dim


# ------------------------------------------------------------ selection


# reassociation lets the squared-distance sum vectorize; ties still resolve to the lowest index
@numba.njit(cache=True, fastmath={"reassoc", "contract"})
def _greedy_kernel(x, k, first):
    n, c = x.shape
    out = np.empty(k, dtype=np.int64)
    mind = np.full(n, np.inf)  # -1 marks selected rows
    row = np.empty(c)
    out[0] = first
    last = first
    for i in range(1, k):
        for b in range(c):
            row[b] = x[last, b]
        mind[last] = -1.0
        best = -2.0
        best_j = -1
        for j in range(n):
            m = mind[j]
            if m < 0:
                continue
            s = 0.0
            for b in range(c):
                d = x[j, b] - row[b]
                s += d * d
            if s < m:
                m = s
                mind[j] = s
            if m > best:
                best = m
                best_j = j
        out[i] = best_j
        last = best_j
    return out


def _first_pick(n: int, seed: int) -> int:
    return int(np.random.default_rng(seed).integers(n))


def greedy_coreset(features, k: int, seed: int, start: int | None = None) -> np.ndarray:
    """Greedy k-center: seeded first pick, then repeatedly the point farthest from the selection."""
    x = np.ascontiguousarray(features, dtype=np.float64)
    n = len(x)
    if k < 1 or k > n:
        raise DataError(f"cannot select k={k} of {n} features")
    first = _first_pick(n, seed) if start is None else int(start)
    x32 = x.astype(np.float32)
    if np.array_equal(x32, x):
        # same values, half the memory traffic; the kernel accumulates in float64 either way
        x = x32
    return _greedy_kernel(x, k, first)


def random_projection(dim: int, proj_dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(derive_seed(seed, "projection"))
    return rng.normal(size=(dim, proj_dim)) / np.sqrt(proj_dim)


def greedy_coreset_projected(features, k: int, proj_dim: int, seed: int,
                             projection: np.ndarray | None = None) -> np.ndarray:
    """Greedy k-center on a seeded Gaussian random projection; indices refer to the input rows.

    ``projection`` overrides the drawn matrix (tests pass the identity).
    """
    x = np.asarray(features, dtype=np.float64)
    if proj_dim < 1 or proj_dim > x.shape[1]:
        raise DataError(f"proj_dim={proj_dim} must lie in [1, {x.shape[1]}]")
    if projection is None:
        projection = random_projection(x.shape[1], proj_dim, seed)
    return greedy_coreset(x @ projection, k, seed)


def coverage_radius(features, selected) -> float:
    """max over inputs of the distance to the nearest selected vector."""
    x = np.asarray(features, dtype=np.float64)
    _, d = exact_knn(x, x[np.asarray(selected)], 1)
    return float(d[:, 0].max())


def subsample(features, k: int, strategy: str, seed: int, sample_ids=None, center_indices=None,
              proj_dim: int = 16) -> SupportSet:
    strategy = STRATEGY_ALIASES.get(strategy, strategy)
    x = np.asarray(features)
    n = len(x)
    sids = np.asarray(sample_ids if sample_ids is not None else [""] * n, dtype=object)
    cids = np.asarray(center_indices if center_indices is not None else np.arange(n), dtype=np.int64)
    full = SupportSet(x, sids, cids, strategy, seed)
    if strategy == "identity":
        return full
    if k < 1 or k > n:
        raise DataError(f"{strategy} subsampling needs k <= {n} features, got k={k}")
    if strategy == "random":
        idx = np.random.default_rng(seed).choice(n, size=k, replace=False)
    elif strategy == "greedy":
        idx = greedy_coreset(x, k, seed)
    elif strategy == "greedy_projected":
        idx = greedy_coreset_projected(x, k, min(proj_dim, x.shape[1]), seed)
    else:
        raise DataError(f"subsample does not implement strategy {strategy!r}")
    return full.take(idx)


# ----------------------------------------------------------- exact kNN


def exact_knn(queries, base, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact Euclidean kNN in feature space with lowest-index tie-breaking."""
    from pcad.geom import SpatialIndex

    base = np.asarray(base)
    if k < 1 or k > len(base):
        raise DataError(f"k={k} must lie in [1, {len(base)}]")
    return SpatialIndex(base).query(queries, k)


# ------------------------------------------------------ correspondence


def correspondence_subsample(F_n, F_a, N: int, seed: int, normal_meta=None, anomalous_meta=None) -> DualSupport:
    """Normal coreset of size N; anomalous coreset of 2N minus each normal vector's nearest candidate.

    ``*_meta`` are optional ``(sample_ids, center_indices)`` provenance pairs.
    """
    F_n = np.asarray(F_n, dtype=np.float32)
    F_a = np.asarray(F_a, dtype=np.float32)
    if len(F_n) < N:
        raise DataError(f"correspondence subsampling needs >= N={N} normal features, got {len(F_n)}")
    if len(F_a) < 2 * N:
        log.warning("only %d anomalous features for a %d-vector candidate set; using all", len(F_a), 2 * N)
    if len(F_a) == 0:
        raise DataError("correspondence subsampling needs anomalous features")
    if F_a.shape[1] != F_n.shape[1]:
        raise DataError(f"feature dims differ: normal {F_n.shape[1]}, anomalous {F_a.shape[1]}")
    n_meta = normal_meta or ([""] * len(F_n), np.arange(len(F_n)))
    a_meta = anomalous_meta or ([""] * len(F_a), np.arange(len(F_a)))

    normal = subsample(F_n, N, "greedy", derive_seed(seed, "normal"), *n_meta)
    candidates = subsample(F_a, min(2 * N, len(F_a)), "greedy", derive_seed(seed, "anomalous"), *a_meta)
    nearest, _ = exact_knn(normal.vectors, candidates.vectors, 1)
    cor = np.unique(nearest[:, 0])
    keep = np.setdiff1d(np.arange(len(candidates)), cor)
    if len(keep) > N:
        keep = keep[greedy_coreset(candidates.vectors[keep], N, derive_seed(seed, "trim"))]
    refined = candidates.take(keep, strategy="correspondence")
    if np.isin(keep, cor).any():
        raise InvariantError("a correspondence neighbour survived refinement")
    normal.strategy = "correspondence"
    return DualSupport(normal, refined, RunConfig(N=N, seed=seed), removed_cor=len(cor),
                       candidates=candidates, cor_positions=cor)


# ------------------------------------------------------------ bank building


class FeatureStore:
    """Memoises per-sample feature matrices so ablation sweeps extract each cloud once."""

    def __init__(self, manifest):
        self.manifest = manifest
        self._cache: dict = {}
        self._clouds: dict = {}

    @staticmethod
    def _key(cfg: RunConfig):
        return (cfg.scales, cfg.aggregation_m, cfg.centers_G, cfg.normal_k, cfg.seed)

    def load(self, row):
        from pcad.geom import load_cloud

        path = self.manifest.resolve(row.cloud_path)
        label = self.manifest.resolve(row.label_path) if row.label_path else None
        key = (str(path), str(label), row.sample_id)
        if key not in self._clouds:
            try:
                self._clouds[key] = load_cloud(path, label_path=label, sample_id=row.sample_id)
            except DataError as exc:
                raise DataError(f"manifest row {row.sample_id!r}: {exc}") from exc
        return self._clouds[key]

    def features(self, row, cfg: RunConfig):
        """``(FeatureMatrix, anomalous-center mask or None)`` for a manifest row."""
        key = ("real", row.sample_id, self._key(cfg))
        if key not in self._cache:
            cloud = self.load(row)
            self._cache[key] = _features_with_mask(cloud, cfg)
        return self._cache[key]

    def simulated(self, row, cfg: RunConfig, position: int):
        """Features of one synthesized anomaly derived from a normal training row."""
        from pcad.geom import estimate_normals
        from pcad.synth import DefectSpec, synthesize_anomaly

        kind = cfg.sim_kinds[position % len(cfg.sim_kinds)]
        key = ("sim", row.sample_id, kind, cfg.sim_ratio, cfg.sim_magnitude, self._key(cfg))
        if key not in self._cache:
            cloud = estimate_normals(self.load(row).replace(labels=None), cfg.normal_k)
            spec = DefectSpec(kind, cfg.sim_ratio, cfg.sim_magnitude, derive_seed(cfg.seed, "sim", row.sample_id))
            sim = synthesize_anomaly(cloud, spec, sample_id=f"{row.sample_id}~sim")
            self._cache[key] = _features_with_mask(sim, cfg)
        return self._cache[key]


def _features_with_mask(cloud, cfg: RunConfig):
    from pcad.features import extract_features
    from pcad.geom import SpatialIndex

    fm = extract_features(cloud, cfg)
    mask = None
    if cloud.labels is not None:
        nbr, _ = SpatialIndex(cloud.points).query(cloud.points[fm.center_indices], fm.aggregation_m)
        mask = cloud.labels[nbr].any(axis=1)
    return fm, mask


def _stack(items):
    """items: list of (sample_id, FeatureMatrix, row-mask or None)."""
    vecs, sids, cids = [], [], []
    for sid, fm, keep in items:
        rows, centers = fm.rows, fm.center_indices
        if keep is not None:
            rows, centers = rows[keep], centers[keep]
        vecs.append(rows)
        sids += [sid] * len(rows)
        cids.append(centers)
    dims = {v.shape[1] for v in vecs}
    if len(dims) > 1:
        raise DataError(f"feature dimension mismatch across samples: {sorted(dims)}")
    if not vecs:
        return np.zeros((0, 0)), np.zeros(0, object), np.zeros(0, np.int64)
    return np.vstack(vecs), np.asarray(sids, dtype=object), np.concatenate(cids)


def effective_strategy(cfg: RunConfig) -> str:
    strategy = STRATEGY_ALIASES.get(cfg.strategy, cfg.strategy)
    if cfg.stage != "M9" and strategy == "correspondence":
        return "greedy"
    return strategy


def build_supports(manifest, cfg: RunConfig, store: FeatureStore | None = None) -> DualSupport:
    """Dual bank from the training rows of ``manifest`` under the ablation stage in ``cfg``.

    M6 normal bank only; M7 adds a bank of seen anomalies; M8 adds one
    simulated anomaly per normal training cloud (when ``use_simulated``);
    M9 applies ``cfg.strategy`` (correspondence subsampling by default).
    """
    store = store or FeatureStore(manifest)
    normal_rows = manifest.select(split="train", role="normal")
    seen_rows = manifest.select(split="train", role="anomalous")
    if not normal_rows:
        raise DataError("manifest has no normal training samples")

    n_items = [(r.sample_id, store.features(r, cfg)[0], None) for r in normal_rows]
    F_n, n_sids, n_cids = _stack(n_items)

    a_items = []
    if cfg.stage in ("M7", "M8", "M9"):
        for r in seen_rows:
            fm, mask = store.features(r, cfg)
            a_items.append((r.sample_id, fm, mask if cfg.label_masked else None))
    if cfg.stage in ("M8", "M9") and cfg.use_simulated:
        for i, r in enumerate(normal_rows):
            fm, mask = store.simulated(r, cfg, i)
            a_items.append((f"{r.sample_id}~sim", fm, mask if cfg.label_masked else None))
    F_a, a_sids, a_cids = _stack(a_items)
    if len(F_a) and F_a.shape[1] != F_n.shape[1]:
        raise DataError(f"feature dimension mismatch: normal {F_n.shape[1]}, anomalous {F_a.shape[1]}")

    scale = cfg.feature_scale if cfg.feature_scale > 0 else 1.0 / float(np.median(np.linalg.norm(F_n, axis=1)))
    F_n = F_n * scale
    F_a = F_a * scale

    strategy = effective_strategy(cfg)
    if strategy == "correspondence" and len(F_a):
        ds = correspondence_subsample(F_n, F_a, cfg.N, cfg.seed, (n_sids, n_cids), (a_sids, a_cids))
        ds.cfg = cfg
        ds.feature_scale = scale
        return ds
    if strategy == "correspondence":
        log.warning("no anomalous features; correspondence subsampling falls back to a greedy normal bank")
        strategy = "greedy"
    normal = subsample(F_n, min(cfg.N, len(F_n)), strategy, derive_seed(cfg.seed, "normal"),
                       n_sids, n_cids, cfg.proj_dim)
    if len(F_a):
        anomalous = subsample(F_a, min(cfg.N, len(F_a)), strategy, derive_seed(cfg.seed, "anomalous"),
                              a_sids, a_cids, cfg.proj_dim)
    else:
        if cfg.stage != "M6":
            log.warning("stage %s has no anomalous training features; anomalous bank is empty", cfg.stage)
        anomalous = SupportSet.empty(F_n.shape[1], strategy)
    return DualSupport(normal, anomalous, cfg, 0, scale)


# ------------------------------------------------------------- bank files


def _prov_text(s: SupportSet) -> str:
    return ",".join(f"{sid}:{c}" for sid, c in s.provenance())


def _prov_parse(text: str, n: int):
    if n == 0:
        return np.zeros(0, object), np.zeros(0, np.int64)
    pairs = [p.rsplit(":", 1) for p in text.split(",")]
    if len(pairs) != n:
        raise BankFormatError(f"provenance lists {len(pairs)} entries for {n} vectors")
    return np.asarray([p[0] for p in pairs], dtype=object), np.asarray([int(p[1]) for p in pairs])


def bank_metadata(ds: DualSupport) -> str:
    extra = {
        "effective_feature_scale": repr(float(ds.feature_scale)),
        "removed_cor": str(ds.removed_cor),
        "normal_strategy": ds.normal.strategy,
        "anomalous_strategy": ds.anomalous.strategy,
        "normal_provenance": _prov_text(ds.normal),
        "anomalous_provenance": _prov_text(ds.anomalous),
    }
    return ds.cfg.snapshot() + "".join(f"{k}={v}\n" for k, v in extra.items())


def save_bank(ds: DualSupport, path) -> None:
    meta = bank_metadata(ds).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(BANK_MAGIC)
        fh.write(struct.pack("<IIQQ", BANK_VERSION, ds.dim, len(ds.normal), len(ds.anomalous)))
        fh.write(np.ascontiguousarray(ds.normal.vectors, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(ds.anomalous.vectors, dtype="<f4").tobytes())
        fh.write(struct.pack("<Q", len(meta)))
        fh.write(meta)


def load_bank(path) -> DualSupport:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:8] != BANK_MAGIC:
        raise BankFormatError(f"{path}: not a bank file (bad magic)")
    if len(data) < 32:
        raise BankFormatError(f"{path}: truncated header")
    version, c1, n_n, n_a = struct.unpack_from("<IIQQ", data, 8)
    if version != BANK_VERSION:
        raise BankFormatError(f"{path}: bank version {version} is not supported (expected {BANK_VERSION})")
    body = 32 + 4 * c1 * (n_n + n_a)
    if len(data) < body + 8:
        raise BankFormatError(f"{path}: truncated vector block")
    (meta_len,) = struct.unpack_from("<Q", data, body)
    if len(data) != body + 8 + meta_len:
        raise BankFormatError(f"{path}: metadata block is truncated or has trailing bytes")
    normal = np.frombuffer(data, "<f4", n_n * c1, 32).reshape(n_n, c1)
    anomalous = np.frombuffer(data, "<f4", n_a * c1, 32 + 4 * n_n * c1).reshape(n_a, c1)
    try:
        meta = dict(line.split("=", 1) for line in data[body + 8:].decode("utf-8").splitlines() if line)
    except (UnicodeDecodeError, ValueError):
        raise BankFormatError(f"{path}: corrupt metadata block") from None
    cfg_keys = {f.name for f in dataclasses.fields(RunConfig)}
    cfg = RunConfig().with_overrides({k: v for k, v in meta.items() if k in cfg_keys})
    n_sids, n_cids = _prov_parse(meta.get("normal_provenance", ""), n_n)
    a_sids, a_cids = _prov_parse(meta.get("anomalous_provenance", ""), n_a)
    return DualSupport(
        SupportSet(normal, n_sids, n_cids, meta.get("normal_strategy", ""), cfg.seed),
        SupportSet(anomalous, a_sids, a_cids, meta.get("anomalous_strategy", ""), cfg.seed),
        cfg,
        int(meta.get("removed_cor", 0)),
        float(meta.get("effective_feature_scale", 1.0)),
    )
