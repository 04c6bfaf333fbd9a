"""Defect synthesis on normal clouds and a labelled synthetic benchmark generator.

Defects are local perturbations of a kNN ball around a random seed point,
with a Gaussian falloff ``w(p) = exp(-d^2 / (2 sigma^2))``, ``sigma`` half the
ball radius and the peak displacement given in units of the cloud's median
nearest-neighbour spacing.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from pcad.config import DEFECT_KINDS
from pcad.errors import DataError
from pcad.geom import LabeledCloud, SpatialIndex, read_labels, save_cloud
from pcad.manifest import DatasetManifest, ManifestRow
from pcad.seeding import derive_seed

PRIMITIVES = ("plane", "sphere", "cylinder", "torus", "washer")
MIN_REGION = 8

# fixed primitive dimensions (arbitrary but consistent length unit)
PLANE_SIDE = 2.0
CYL_RADIUS, CYL_HEIGHT = 0.5, 2.0
TORUS_R, TORUS_r = 1.0, 0.35
WASHER_INNER, WASHER_OUTER, WASHER_THICK = 0.4, 1.0, 0.2


@dataclasses.dataclass(frozen=True)
class DefectSpec:
    kind: str
    target_ratio: float
    magnitude: float
    seed: int

    def __post_init__(self):
        if self.kind not in DEFECT_KINDS:
            raise DataError(f"unknown defect kind {self.kind!r}")
        if not 0 < self.target_ratio <= 0.05:
            raise DataError(f"target_ratio {self.target_ratio} outside (0, 0.05]")
        if not self.magnitude > 0:
            raise DataError("magnitude must be > 0")


@dataclasses.dataclass(frozen=True)
class ShapeSpec:
    primitive: str
    n_points: int
    noise_sigma: float = 0.0
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        if self.primitive not in PRIMITIVES:
            raise DataError(f"unknown primitive {self.primitive!r}; expected one of {PRIMITIVES}")
        if self.n_points < 1:
            raise DataError("n_points must be >= 1")
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be >= 0")

    @property
    def category(self) -> str:
        return self.name or self.primitive


# ------------------------------------------------------------------ shapes


def _r2_lattice(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Randomly shifted R2 low-discrepancy sequence in the unit square."""
    g = 1.32471795724474602596
    i = np.arange(1, n + 1, dtype=np.float64)
    u = (rng.random() + i / g) % 1.0
    v = (rng.random() + i / g**2) % 1.0
    return u, v


def _torus_phi(v: np.ndarray) -> np.ndarray:
    # inverse CDF of the tube angle under the area element (R + r cos phi)
    ratio = TORUS_r / TORUS_R
    target = 2 * np.pi * v
    phi = target.copy()
    for _ in range(50):
        f = phi + ratio * np.sin(phi) - target
        phi -= f / (1 + ratio * np.cos(phi))
    return phi


def _split_counts(n: int, areas) -> list[int]:
    areas = np.asarray(areas, dtype=np.float64)
    exact = n * areas / areas.sum()
    counts = np.floor(exact).astype(int)
    for j in np.argsort(-(exact - counts), kind="stable")[: n - counts.sum()]:
        counts[j] += 1
    return counts.tolist()


def _surface(primitive: str, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, float]:
    """Points, outward unit normals and total area of a primitive."""
    if primitive == "washer":
        ri, ro, t = WASHER_INNER, WASHER_OUTER, WASHER_THICK
        areas = [np.pi * (ro**2 - ri**2)] * 2 + [2 * np.pi * ro * t, 2 * np.pi * ri * t]
        pts, nrm = [], []
        for part, count in enumerate(_split_counts(n, areas)):
            u, v = _r2_lattice(count, rng)
            ang = 2 * np.pi * u
            c, s = np.cos(ang), np.sin(ang)
            if part < 2:
                r = np.sqrt(ri**2 + v * (ro**2 - ri**2))
                z = np.full(count, t / 2 if part == 0 else -t / 2)
                pts.append(np.column_stack([r * c, r * s, z]))
                nrm.append(np.tile([0.0, 0.0, 1.0 if part == 0 else -1.0], (count, 1)))
            else:
                r = ro if part == 2 else ri
                sign = 1.0 if part == 2 else -1.0
                pts.append(np.column_stack([r * c, r * s, t * (v - 0.5)]))
                nrm.append(np.column_stack([sign * c, sign * s, np.zeros(count)]))
        return np.vstack(pts), np.vstack(nrm), float(sum(areas))
    u, v = _r2_lattice(n, rng)
    if primitive == "plane":
        pts = np.column_stack([PLANE_SIDE * (u - 0.5), PLANE_SIDE * (v - 0.5), np.zeros(n)])
        nrm = np.tile([0.0, 0.0, 1.0], (n, 1))
        return pts, nrm, PLANE_SIDE**2
    if primitive == "sphere":
        z = 1 - 2 * u
        rho = np.sqrt(np.clip(1 - z * z, 0, None))
        ang = 2 * np.pi * v
        pts = np.column_stack([rho * np.cos(ang), rho * np.sin(ang), z])
        return pts, pts.copy(), 4 * np.pi
    if primitive == "cylinder":
        ang = 2 * np.pi * u
        nrm = np.column_stack([np.cos(ang), np.sin(ang), np.zeros(n)])
        pts = np.column_stack([CYL_RADIUS * nrm[:, 0], CYL_RADIUS * nrm[:, 1], CYL_HEIGHT * (v - 0.5)])
        return pts, nrm, 2 * np.pi * CYL_RADIUS * CYL_HEIGHT
    # torus
    theta = 2 * np.pi * u
    phi = _torus_phi(v)
    nrm = np.column_stack([np.cos(phi) * np.cos(theta), np.cos(phi) * np.sin(theta), np.sin(phi)])
    ring = np.column_stack([TORUS_R * np.cos(theta), TORUS_R * np.sin(theta), np.zeros(n)])
    return ring + TORUS_r * nrm, nrm, 4 * np.pi**2 * TORUS_R * TORUS_r


def nominal_spacing(primitive: str, n_points: int) -> float:
    """sqrt(area / n): the lattice spacing of a noise-free shape."""
    _, _, area = _surface(primitive, 1, np.random.default_rng(0))
    return float(np.sqrt(area / n_points))


def gen_shape(spec: ShapeSpec, sample_id: str = "") -> LabeledCloud:
    """Quasi-uniform sample of a primitive with Gaussian noise along the normals; all labels 0."""
    rng = np.random.default_rng(spec.seed)
    pts, nrm, area = _surface(spec.primitive, spec.n_points, rng)
    spacing = np.sqrt(area / spec.n_points)
    if spec.noise_sigma > 0:
        pts = pts + nrm * rng.normal(0.0, spec.noise_sigma * spacing, size=(len(pts), 1))
    return LabeledCloud(pts, nrm, np.zeros(len(pts), dtype=np.int8), sample_id or spec.category)


# ---------------------------------------------------------------- defects


def median_spacing(points: np.ndarray, index: SpatialIndex | None = None) -> float:
    index = index or SpatialIndex(points)
    _, dist = index.query(points, 2)
    return float(np.median(dist[:, 1]))


def _random_tangent(normal: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    while True:
        t = rng.normal(size=3)
        t -= normal * (t @ normal)
        nt = np.linalg.norm(t)
        if nt > 1e-6:
            return t / nt


def synthesize_anomaly(cloud: LabeledCloud, spec: DefectSpec, sample_id: str | None = None) -> LabeledCloud:
    """Perturb one kNN ball of ``cloud``; the ball's points are labelled 1, everything else 0.

    The returned cloud has the same points in the same order and no normals
    (the input normals no longer describe the displaced surface).
    """
    if cloud.normals is None:
        raise DataError(f"cloud {cloud.sample_id!r} needs normals for anomaly synthesis")
    n = len(cloud)
    r = int(round(spec.target_ratio * n))
    if r < MIN_REGION:
        raise DataError(
            f"defect region of {r} points is below the minimum of {MIN_REGION}; "
            f"raise target_ratio (now {spec.target_ratio}) or use a denser cloud (now {n} points)"
        )
    rng = np.random.default_rng(spec.seed)
    index = SpatialIndex(cloud.points)
    spacing = median_spacing(cloud.points, index)
    seed_idx = int(rng.integers(n))
    seed_pt = cloud.points[seed_idx]
    seed_n = cloud.normals[seed_idx]
    region, dist = index.query(seed_pt, r)
    region, dist = region[0], dist[0]
    radius = float(dist[-1])
    sigma = radius / 2 if radius > 0 else 1.0
    w = np.exp(-(dist**2) / (2 * sigma**2))
    amp = spec.magnitude * spacing * w
    normals = cloud.normals[region]

    if spec.kind == "convex":
        disp = amp[:, None] * normals
    elif spec.kind == "concave":
        disp = -amp[:, None] * normals
    elif spec.kind == "scratch":
        along = _random_tangent(seed_n, rng)
        across = np.cross(seed_n, along)
        offset = np.abs((cloud.points[region] - seed_pt) @ across)
        # band width is 20% of the region diameter
        in_band = offset <= 0.2 * radius
        disp = -(amp * in_band)[:, None] * normals
    elif spec.kind == "scar":
        signs = rng.choice(np.array([-1.0, 1.0]), size=r)
        disp = (signs * amp)[:, None] * normals
    else:  # deformation
        shear = _random_tangent(seed_n, rng)
        disp = amp[:, None] * shear[None, :]

    pts = cloud.points.copy()
    pts[region] += disp
    labels = np.zeros(n, dtype=np.int8)
    labels[region] = 1
    return LabeledCloud(pts, None, labels, sample_id if sample_id is not None else cloud.sample_id)


# -------------------------------------------------------------- benchmark


@dataclasses.dataclass(frozen=True)
class SplitCounts:
    train_normal: int = 10
    test_normal: int = 10
    anomalous: int = 25


@dataclasses.dataclass(frozen=True)
class DefectRanges:
    """Per-sample defect parameters are drawn uniformly from these ranges."""
    ratio: tuple[float, float] = (0.006, 0.025)
    magnitude: tuple[float, float] = (2.5, 3.5)


EASY = DefectRanges()
HARD = DefectRanges(ratio=(0.006, 0.02), magnitude=(0.8, 1.5))


def gen_benchmark(categories, counts: SplitCounts, kinds, out_dir, seed: int,
                  defects: DefectRanges = EASY) -> DatasetManifest:
    """Write clouds, label sidecars and ``manifest.tsv`` under ``out_dir``.

    Anomalous samples cycle through ``kinds`` so every kind gets an equal
    share (up to one). Anomalous clouds are written to the test split; the
    open-set fold builder moves seen-kind shots into training.
    """
    out_dir = Path(out_dir)
    kinds = list(kinds)
    for k in kinds:
        if k not in DEFECT_KINDS:
            raise DataError(f"unknown defect kind {k!r}")
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for shape in categories:
        cat = shape.category
        plan = [("train", "normal", "none", i) for i in range(counts.train_normal)]
        plan += [("test", "normal", "none", i) for i in range(counts.test_normal)]
        plan += [("test", "anomalous", kinds[i % len(kinds)], i) for i in range(counts.anomalous)]
        for split, role, kind, i in plan:
            folder = "normal" if role == "normal" else kind
            sid = f"{cat}_{split}_{folder}_{i:03d}"
            rng = np.random.default_rng(derive_seed(seed, sid))
            base = gen_shape(dataclasses.replace(shape, seed=int(rng.integers(2**62))), sid)
            if role == "anomalous":
                spec = DefectSpec(kind, float(rng.uniform(*defects.ratio)),
                                  float(rng.uniform(*defects.magnitude)), int(rng.integers(2**62)))
                cloud = synthesize_anomaly(base, spec, sid)
            else:
                cloud = base.replace(normals=None)
            rel = Path(cat) / split / folder / f"{sid}.xyz"
            (out_dir / rel).parent.mkdir(parents=True, exist_ok=True)
            if split == "train" and role == "normal":
                save_cloud(cloud.replace(labels=None), out_dir / rel)
                label_rel = ""
            else:
                save_cloud(cloud, out_dir / rel)
                label_rel = str(rel.with_suffix(".labels"))
            rows.append(ManifestRow(sid, cat, split, role, kind, str(rel), label_rel))
    manifest = DatasetManifest(rows, out_dir)
    manifest.write(out_dir / "manifest.tsv")
    return manifest


def anomaly_ratios(manifest: DatasetManifest) -> dict[str, float]:
    out = {}
    for row in manifest.select(role="anomalous"):
        labels_path = manifest.resolve(row.label_path)
        n = sum(1 for line in open(manifest.resolve(row.cloud_path)) if line.strip())
        out[row.sample_id] = float(read_labels(labels_path, n).mean())
    return out


__all__ = [
    "DefectSpec", "ShapeSpec", "SplitCounts", "DefectRanges", "EASY", "HARD",
    "gen_shape", "synthesize_anomaly", "gen_benchmark", "median_spacing", "nominal_spacing",
    "anomaly_ratios",
]
