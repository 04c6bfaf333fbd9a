"""Open-set folds, detection metrics, cross-validated runs and report files."""

from __future__ import annotations

import dataclasses
import logging
from pathlib import Path

import numpy as np

from pcad.config import RunConfig
from pcad.errors import DataError
from pcad.manifest import DatasetManifest
from pcad.seeding import derive_seed

log = logging.getLogger(__name__)

METRICS = ("o_auroc", "p_auroc", "o_auprc", "p_auprc")
AVERAGE = "average"


# ------------------------------------------------------------------ metrics


def _check(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if len(s) != len(y):
        raise DataError(f"{len(s)} scores but {len(y)} labels")
    if not np.isin(y, (0, 1)).all():
        raise DataError("labels must be 0/1")
    return s, y.astype(bool)


def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    xs = x[order]
    starts = np.r_[0, np.nonzero(np.diff(xs))[0] + 1]
    ends = np.r_[starts[1:], len(xs)]
    ranks = np.empty(len(x))
    ranks[order] = np.repeat((starts + ends + 1) / 2.0, ends - starts)
    return ranks


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with half credit for ties."""
    s, y = _check(scores, labels)
    n1 = int(y.sum())
    n0 = len(y) - n1
    if n1 == 0 or n0 == 0:
        raise DataError("AUROC is undefined with a single class")
    r = _midranks(s)
    return float((r[y].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def auprc(scores, labels) -> float:
    """Average precision over descending thresholds, tied scores taken as one block."""
    s, y = _check(scores, labels)
    total = int(y.sum())
    if total == 0:
        raise DataError("AUPRC is undefined without positive labels")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    ends = np.r_[np.nonzero(np.diff(s))[0] + 1, len(s)] - 1
    tp = np.cumsum(y)[ends]
    precision = tp / (ends + 1.0)
    recall_step = np.diff(np.r_[0, tp]) / total
    return float((recall_step * precision).sum())


def silhouette(features, groups) -> float:
    x = np.asarray(features, dtype=np.float64)
    g = np.asarray(groups)
    uniq = np.unique(g)
    if len(uniq) < 2:
        raise DataError("silhouette needs at least two groups")
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    member = g[None, :] == uniq[:, None]
    sizes = member.sum(axis=1)
    sums = dist @ member.T.astype(np.float64)
    own = np.searchsorted(uniq, g)
    n_own = sizes[own]
    a = np.where(n_own > 1, sums[np.arange(len(x)), own] / np.maximum(n_own - 1, 1), 0.0)
    means = sums / sizes[None, :]
    means[np.arange(len(x)), own] = np.inf
    b = means.min(axis=1)
    top = np.maximum(a, b)
    s = np.where((n_own > 1) & (top > 0), (b - a) / np.where(top > 0, top, 1.0), 0.0)
    return float(s.mean())


# ----------------------------------------------------------- open-set folds


def make_openset_splits(manifest: DatasetManifest, seen_kinds, shots: int, folds: int, seed: int) -> list[DatasetManifest]:
    """Per fold and category: ``shots`` seeded anomalies of each seen kind move to training.

    Every other seen-kind anomaly is dropped; unseen anomalies and held-out
    normals form the test split.
    """
    seen = set(seen_kinds)
    if shots < 1 or folds < 1:
        raise DataError("shots and folds must be positive")
    present = {r.defect_kind for r in manifest.select(role="anomalous")}
    if not seen <= present:
        raise DataError(f"seen kinds not present in manifest: {sorted(seen - present)}")
    train_anom = manifest.select(split="train", role="anomalous")
    leaked = {r.defect_kind for r in train_anom} - seen
    if leaked:
        raise DataError(f"manifest puts unseen kinds in training: {sorted(leaked)}")
    out = []
    for fold in range(folds):
        rows = list(manifest.select(split="train", role="normal"))
        rows += manifest.select(split="test", role="normal")
        for cat in manifest.categories():
            for kind in sorted(seen):
                pool = [r for r in manifest.select(category=cat, role="anomalous") if r.defect_kind == kind]
                if len(pool) < shots:
                    raise DataError(f"category {cat!r} has {len(pool)} {kind} anomalies, {shots} shots requested")
                rng = np.random.default_rng(derive_seed(seed, "fold", fold, cat, kind))
                pick = sorted(rng.choice(len(pool), size=shots, replace=False))
                rows += [dataclasses.replace(pool[i], split="train") for i in pick]
        rows += [r for r in manifest.select(role="anomalous") if r.defect_kind not in seen]
        order = {r.sample_id: i for i, r in enumerate(manifest.rows)}
        fm = manifest.subset(sorted(rows, key=lambda r: order[r.sample_id]))
        fm.validate(seen_kinds=seen, check_paths=False)
        out.append(fm)
    return out


# ------------------------------------------------------------------ runs


@dataclasses.dataclass
class EvalReport:
    """Per-category metric values, one entry per fold."""

    values: dict[str, dict[str, list[float]]]
    config: str = ""
    silhouette: dict[str, float] = dataclasses.field(default_factory=dict)

    def categories(self) -> list[str]:
        return sorted(c for c in self.values if c != AVERAGE)

    def mean(self, category: str, metric: str) -> float:
        return float(np.mean(self._series(category, metric)))

    def std(self, category: str, metric: str) -> float:
        return float(np.std(self._series(category, metric)))

    def _series(self, category, metric) -> np.ndarray:
        if category == AVERAGE and AVERAGE not in self.values:
            # average of category values, fold by fold
            return np.mean([self.values[c][metric] for c in self.categories()], axis=0)
        return np.asarray(self.values[category][metric], dtype=np.float64)

    def summary(self) -> dict[str, dict[str, tuple[float, float]]]:
        return {c: {m: (self.mean(c, m), self.std(c, m)) for m in METRICS} for c in [*self.categories(), AVERAGE]}


def fold_metrics(results) -> dict[str, float]:
    obj_s = [r.object_score for r in results]
    obj_y = [r.object_label for r in results]
    labelled = [r for r in results if r.labels is not None]
    pt_s = np.concatenate([r.point_scores for r in labelled])
    pt_y = np.concatenate([r.labels for r in labelled])
    return {
        "o_auroc": auroc(obj_s, obj_y),
        "p_auroc": auroc(pt_s, pt_y),
        "o_auprc": auprc(obj_s, obj_y),
        "p_auprc": auprc(pt_s, pt_y),
    }


def argmax_point(result) -> int:
    """Index of the top-scoring point; among tied points a feature center wins, then the lowest index."""
    top = np.flatnonzero(result.point_scores == result.point_scores.max())
    if result.center_indices is not None:
        centers = np.intersect1d(top, result.center_indices)
        if len(centers):
            return int(centers[0])
    return int(top[0])


def localization_rate(results) -> float:
    """Fraction of labelled anomalous samples whose argmax point lies inside the labelled region."""
    hits = [bool(r.labels[argmax_point(r)]) for r in results if r.labels is not None and r.object_label]
    if not hits:
        raise DataError("no labelled anomalous samples to localize")
    return float(np.mean(hits))


def evaluate_run(folds, cfg: RunConfig, store=None) -> EvalReport:
    """Build banks and score each category of each fold; collect metrics per fold."""
    from pcad.scoring import score_dataset
    from pcad.support import FeatureStore, build_supports

    if not folds:
        raise DataError("no folds to evaluate")
    store = store or FeatureStore(folds[0])
    values: dict[str, dict[str, list[float]]] = {}
    for i, fold in enumerate(folds):
        store.manifest = fold
        for cat in fold.categories():
            part = fold.subset(fold.select(category=cat))
            ds = build_supports(part, cfg, store)
            results = score_dataset(part, ds, cfg, store=store)
            metrics = fold_metrics(results)
            log.info("fold %d %s: %s", i, cat, " ".join(f"{k}={v:.4f}" for k, v in metrics.items()))
            slot = values.setdefault(cat, {m: [] for m in METRICS})
            for m in METRICS:
                slot[m].append(metrics[m])
    return EvalReport(values, cfg.snapshot())


# ---------------------------------------------------------------- ablation

# (row label, stage, strategy): strategies at the full stage, then the stage ladder
ABLATION_ROWS = (
    ("M1", "M9", "correspondence"),
    ("M2", "M9", "identity"),
    ("M3", "M9", "random"),
    ("M4", "M9", "greedy"),
    ("M5", "M9", "greedy_projected"),
    ("M6", "M6", "correspondence"),
    ("M7", "M7", "correspondence"),
    ("M8", "M8", "correspondence"),
    ("M9", "M9", "correspondence"),
)


@dataclasses.dataclass
class AblationReport:
    """Category-averaged metrics per ablation row, one entry per (seed, fold)."""

    values: dict[str, dict[str, list[float]]]
    config: str = ""

    def mean(self, row: str, metric: str = "o_auroc") -> float:
        return float(np.mean(self.values[row][metric]))

    def std(self, row: str, metric: str = "o_auroc") -> float:
        return float(np.std(self.values[row][metric]))


def run_ablation(manifest: DatasetManifest, cfg: RunConfig, folds: int, seeds, shots: int | None = None,
                 rows=ABLATION_ROWS) -> AblationReport:
    """Sweep the ablation rows over identical folds for every seed.

    Each seed replaces ``cfg.seed`` (feature centers, simulated anomalies,
    subsampling) and draws its own open-set folds.
    """
    from pcad.scoring import score_dataset
    from pcad.support import FeatureStore, build_supports

    shots = cfg.shots if shots is None else shots
    settings = sorted({(stage, strat) for _, stage, strat in rows})
    values = {label: {m: [] for m in METRICS} for label, _, _ in rows}
    for seed in seeds:
        run_cfg = cfg.replace(seed=int(seed))
        splits = make_openset_splits(manifest, run_cfg.seen_kinds, shots, folds, run_cfg.seed)
        store = FeatureStore(splits[0])
        for fold in splits:
            store.manifest = fold
            per_setting = {s: {m: [] for m in METRICS} for s in settings}
            for cat in fold.categories():
                part = fold.subset(fold.select(category=cat))
                for stage, strat in settings:
                    c = run_cfg.replace(stage=stage, strategy=strat)
                    metrics = fold_metrics(score_dataset(part, build_supports(part, c, store), c, store=store))
                    for m in METRICS:
                        per_setting[(stage, strat)][m].append(metrics[m])
            for label, stage, strat in rows:
                for m in METRICS:
                    values[label][m].append(float(np.mean(per_setting[(stage, strat)][m])))
            log.info("seed %d fold done: %s", seed,
                     " ".join(f"{label}={values[label]['o_auroc'][-1]:.4f}" for label, _, _ in rows))
    return AblationReport(values, cfg.snapshot())


def emit_ablation(report: AblationReport, path, rows=ABLATION_ROWS) -> None:
    lines = ["# " + ln for ln in report.config.splitlines()]
    head = ["row", "stage", "strategy"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")] + ["runs"]
    lines.append("\t".join(head))
    for label, stage, strat in rows:
        cells = [f"{report.mean(label, m)!r}\t{report.std(label, m)!r}" for m in METRICS]
        lines.append("\t".join([label, stage, strat, *cells, str(len(report.values[label]["o_auroc"]))]))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- reports


def emit_report(report: EvalReport, path, format: str = "tsv") -> None:
    """tsv: one row per (category, metric); text: one row per category plus a config header."""
    summary = report.summary()
    if format == "tsv":
        lines = ["# " + ln for ln in report.config.splitlines()]
        lines.append("category\tmetric\tmean\tstd\tmean_full\tstd_full\tfolds")
        for cat, metrics in summary.items():
            for m, (mu, sd) in metrics.items():
                n = len(report._series(cat, m))
                lines.append(f"{cat}\t{m}\t{mu:.4f}\t{sd:.4f}\t{mu!r}\t{sd!r}\t{n}")
        text = "\n".join(lines) + "\n"
    elif format == "text":
        head = ["# " + ln for ln in report.config.splitlines()]
        width = max(len(c) for c in summary)
        cols = "  ".join(f"{m:>17}" for m in METRICS)
        rows = [f"{'category':<{width}}  {cols}"]
        for cat, metrics in summary.items():
            cells = "  ".join(f"{mu:.4f} +/- {sd:.4f}" for mu, sd in metrics.values())
            rows.append(f"{cat:<{width}}  {cells}")
        text = "\n".join(head + rows) + "\n"
    else:
        raise DataError(f"unknown report format {format!r}")
    Path(path).write_text(text)


def read_report(path) -> dict[str, dict[str, tuple[float, float]]]:
    """Parse a tsv report back into ``{category: {metric: (mean, std)}}`` at full precision."""
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    if not lines or not lines[0].startswith("category\tmetric"):
        raise DataError(f"{path}: not a tsv report")
    out: dict = {}
    for line in lines[1:]:
        cat, metric, _, _, mu, sd, _n = line.split("\t")
        out.setdefault(cat, {})[metric] = (float(mu), float(sd))
    return out


__all__ = [
    "METRICS", "auroc", "auprc", "silhouette", "make_openset_splits", "EvalReport",
    "evaluate_run", "fold_metrics", "argmax_point", "localization_rate", "emit_report", "read_report",
    "ABLATION_ROWS", "AblationReport", "run_ablation", "emit_ablation",
]
