"""Bank building by stage and end-to-end scoring on small generated data."""

import logging

import numpy as np
import pytest

from pcad.config import RunConfig
from pcad.errors import DataError
from pcad.evaluate import make_openset_splits
from pcad.features import extract_features
from pcad.geom import LabeledCloud, load_scores
from pcad.manifest import DatasetManifest
from pcad.scoring import score_dataset, score_sample
from pcad.support import DualSupport, SupportSet, build_supports, correspondence_subsample
from pcad.synth import DefectSpec, ShapeSpec, SplitCounts, gen_benchmark, gen_shape, synthesize_anomaly

SMALL = dict(centers_G=64, aggregation_m=32, scales=(10, 20), N=100)


@pytest.fixture(scope="module")
def fold(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    m = gen_benchmark([ShapeSpec("sphere", 2000, 0.05)], SplitCounts(4, 3, 10), ("convex", "concave", "scratch"),
                      root, seed=5)
    return make_openset_splits(m, ("convex", "concave"), 2, 1, seed=5)[0]


@pytest.mark.parametrize("stage", ["M6", "M7", "M8", "M9"])
def test_stage_banks(fold, stage):
    ds = build_supports(fold, RunConfig(stage=stage, **SMALL))
    assert len(ds.normal) == 100 and ds.dim == 66
    if stage == "M6":
        assert len(ds.anomalous) == 0
    else:
        assert len(ds.anomalous) == 100
    sims = [s for s in ds.anomalous.sample_ids if s.endswith("~sim")]
    assert bool(sims) == (stage in ("M8", "M9"))
    assert (ds.removed_cor > 0) == (stage == "M9")


def test_build_deterministic(fold):
    cfg = RunConfig(**SMALL)
    a, b = build_supports(fold, cfg), build_supports(fold, cfg)
    assert np.array_equal(a.normal.vectors, b.normal.vectors)
    assert np.array_equal(a.anomalous.vectors, b.anomalous.vectors)
    assert a.anomalous.provenance() == b.anomalous.provenance()


def test_correspondence_small_candidate_pool(caplog):
    rng = np.random.default_rng(0)
    f_n, f_a = rng.normal(size=(50, 4)), rng.normal(size=(30, 4))
    with caplog.at_level(logging.WARNING, logger="pcad.support"):
        ds = correspondence_subsample(f_n, f_a, 20, 1)
    assert "using all" in caplog.text
    assert len(ds.candidates) == 30
    assert len(ds.anomalous) == min(20, 30 - ds.removed_cor)


def test_self_match_scores_zero():
    cfg = RunConfig(stage="M6", gamma=0.0, feature_scale=1.0, **SMALL)
    cloud = gen_shape(ShapeSpec("torus", 2000, 0.05, seed=2))
    fm = extract_features(cloud, cfg)
    normal = SupportSet(fm.rows, ["x"] * len(fm.rows), fm.center_indices)
    ds = DualSupport(normal, SupportSet.empty(normal.dim), cfg)
    sc = score_sample(cloud, ds, cfg)
    assert np.all(sc.s_n_components == 0)
    assert sc.object_score == 0


def test_plane_bump_argmax_in_defect():
    cfg = RunConfig(stage="M6", centers_G=256, aggregation_m=32, scales=(20, 40), N=1000)
    clean = [gen_shape(ShapeSpec("plane", 4000, 0.05, seed=s)) for s in range(3)]
    rows = np.vstack([extract_features(c, cfg).rows for c in clean])
    scale = 1.0 / np.median(np.linalg.norm(rows, axis=1))
    normal = SupportSet(rows * scale, ["c"] * len(rows), np.arange(len(rows)))
    ds = DualSupport(normal, SupportSet.empty(normal.dim), cfg, feature_scale=scale)
    base = gen_shape(ShapeSpec("plane", 4000, 0.05, seed=9))
    bumped = synthesize_anomaly(base, DefectSpec("convex", 0.03, 5.0, seed=4))
    sc = score_sample(bumped, ds, cfg)
    top = int(np.argmax(sc.point_scores))
    assert bumped.labels[top] == 1


def test_score_dataset_outputs(tmp_path):
    m = gen_benchmark([ShapeSpec("cylinder", 2000, 0.05)], SplitCounts(3, 5, 5), ("convex",), tmp_path / "b", 1)
    cfg = RunConfig(stage="M6", **SMALL)
    ds = build_supports(m, cfg)
    res = score_dataset(m, ds, cfg, tmp_path / "s1")
    assert len(res) == 10
    assert len(list((tmp_path / "s1").glob("*.scores"))) == 10
    table = (tmp_path / "s1" / "object_scores.tsv").read_text().splitlines()
    assert len(table) == 10
    sc = res[0]
    assert np.allclose(load_scores(tmp_path / "s1" / f"{sc.sample_id}.scores"), sc.point_scores, rtol=1e-9)
    score_dataset(m, ds, cfg, tmp_path / "s2")
    for p in (tmp_path / "s1").iterdir():
        assert p.read_bytes() == (tmp_path / "s2" / p.name).read_bytes()


def test_score_dataset_failure_names_sample(tmp_path):
    m = gen_benchmark([ShapeSpec("sphere", 2000, 0.05)], SplitCounts(3, 2, 0), ("convex",), tmp_path, 1)
    cfg = RunConfig(stage="M6", **SMALL)
    ds = build_supports(m, cfg)
    victim = m.select(split="test")[1]
    m.resolve(victim.cloud_path).write_text("1 2\n")
    with pytest.raises(DataError, match=victim.sample_id):
        score_dataset(DatasetManifest.read(tmp_path / "manifest.tsv"), ds, cfg)


def test_dimension_mismatch(fold):
    ds = build_supports(fold, RunConfig(stage="M6", **SMALL))
    cloud = LabeledCloud(np.random.default_rng(0).normal(size=(500, 3)))
    with pytest.raises(DataError, match="C1=66"):
        score_sample(cloud, ds, RunConfig(stage="M6", centers_G=64, aggregation_m=32, scales=(10,), N=100))
